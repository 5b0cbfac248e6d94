#pragma once

// Height-distribution statistics over first returns, used by the classical
// baselines.

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "canopy/core.hpp"

namespace canopy {

inline constexpr std::size_t kFeatureCount = 27;
inline constexpr std::size_t kStatsPerSet = 13;

// Column indices used by the power model.
inline constexpr std::size_t kFeatureMeanZAboveGround = kStatsPerSet + 0;
inline constexpr std::size_t kFeatureP95AboveGround = kStatsPerSet + 11;
inline constexpr std::size_t kFeatureInterceptionRatio = 2 * kStatsPerSet;

/// Canonical column names: `all_*` block, `ag_*` block, interception_ratio.
const std::array<std::string, kFeatureCount>& feature_names();

struct FeatureVector {
  std::array<double, kFeatureCount> values{};
  bool above_ground_empty = false;

  double operator[](std::size_t i) const { return values[i]; }
  double mean_z_above_ground() const { return values[kFeatureMeanZAboveGround]; }
  double p95_above_ground() const { return values[kFeatureP95AboveGround]; }
  double interception_ratio() const { return values[kFeatureInterceptionRatio]; }
};

/// Linear-interpolation percentile of an ascending sample, index (n-1)*q.
double percentile_sorted(const std::vector<double>& sorted, double q);

FeatureVector extract_features(const PointCloud& cloud);

struct FeatureTable {
  Eigen::MatrixXd X;  // n x 27, row order = record order
  Eigen::VectorXd agb;
  Eigen::VectorXd volume;
  std::vector<std::string> plot_ids;
};

FeatureTable feature_matrix(const std::vector<PlotRecord>& records,
                            const CloudLoader& loader, int threads = 1);

/// Header: plot_id, the 27 feature names, agb, volume.
void write_feature_csv(const std::filesystem::path& path, const FeatureTable& table);

}  // namespace canopy
