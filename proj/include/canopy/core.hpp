#pragma once

// Point clouds, plot records and the dataset preparation steps shared by the
// baselines and the deep models.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "canopy/common.hpp"

namespace canopy {

struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;  // height above ground, meters
  int return_index = 1;
  int return_count = 1;
};

struct PointCloud {
  std::vector<Point> points;
  std::string plot_id;
  double time_gap_years = 0.0;
};

struct RegressionTargets {
  double agb = 0.0;     // Mg/ha
  double volume = 0.0;  // m^3/ha
};

enum class Split { unassigned, train, validation, test };

const char* split_name(Split s);
Split parse_split(const std::string& name);

struct ErrorFlags {
  bool extra_trees = false;
  bool non_forest_objects = false;
  bool harvested = false;
  bool unreasonable = false;
};

struct PlotRecord {
  std::string plot_id;
  std::filesystem::path cloud_path;
  RegressionTargets targets;
  double conifer_fraction = 0.0;  // percent of basal area, [0, 100]
  ErrorFlags error_flags;
  Split split = Split::unassigned;
  double time_gap_years = 0.0;
};

// ---------------------------------------------------------------------------
// File formats

/// Reads the `x,y,z,return_number,num_returns` CSV. Heights in [-1e-6, 0) are
/// clamped to 0; anything lower is rejected.
PointCloud read_cloud_csv(const std::filesystem::path& path,
                          std::string plot_id = {}, double time_gap_years = 0.0);
void write_cloud_csv(const std::filesystem::path& path, const PointCloud& cloud);

/// JSON-lines manifest. Relative cloud paths resolve against the manifest's
/// directory.
std::vector<PlotRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<PlotRecord>& records);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

using CloudLoader = std::function<PointCloud(const PlotRecord&)>;

/// Loader that reads `record.cloud_path` as CSV.
CloudLoader csv_cloud_loader();

// ---------------------------------------------------------------------------
// Operations

/// Centers x and y on their mean and divides by `radius_m`; z stays in
/// meters. Values outside [-1, 1] are kept and counted in `n_outside`.
PointCloud normalize_cloud(const PointCloud& cloud, double radius_m = 15.0,
                           std::size_t* n_outside = nullptr);

struct AugmentConfig {
  bool rotate = true;
  std::optional<double> fixed_angle;  // overrides the random angle when set
  double sample_dropout_prob = 0.5;
  double point_dropout_rate = 0.2;
  bool jitter = true;
  double jitter_variance = 0.001;
  double jitter_clip = 0.05;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.rotate = false;
    c.sample_dropout_prob = 0.0;
    c.jitter = false;
    return c;
  }
};

/// Random stream for one (seed, plot, epoch) triple.
Rng sample_stream(std::uint64_t global_seed, const std::string& plot_id,
                  std::uint64_t epoch);

/// Rotation about the centroid, then sample-level point dropout, then
/// clipped Gaussian jitter on every coordinate.
PointCloud augment(const PointCloud& cloud, Rng& rng, const AugmentConfig& cfg);

struct DropEntry {
  std::string plot_id;
  std::string reason;
};

struct FilterResult {
  std::vector<PlotRecord> survivors;
  std::vector<DropEntry> dropped;
};

inline constexpr double kMinimumTreeHeight = 1.3;

/// Drops harvested/unreasonable records and records with no point above
/// 1.3 m. The other two flags are kept.
FilterResult filter_dataset(const std::vector<PlotRecord>& records,
                            const CloudLoader& loader);

struct SplitFractions {
  double validation = 0.15;
  double test = 0.15;
};

/// Groups records by plot id. Plots whose every measurement lies within one
/// year of the scan are eligible for validation/test; round(f * n_plots)
/// eligible plots are drawn for each. Everything else is training data.
std::vector<PlotRecord> assign_splits(std::vector<PlotRecord> records,
                                      std::uint64_t seed,
                                      const SplitFractions& fractions = {});

/// Above-ground carbon from biomass. The default factor of 0.5 is a common
/// convention, not a measured coefficient.
double carbon_from_biomass(double agb, double factor = 0.5);

/// Same linear map applied to a model output. Regressors are unconstrained,
/// so the prediction may be negative; it is scaled rather than rejected so
/// carbon metrics stay consistent with the biomass ones.
double carbon_from_prediction(double agb, double factor = 0.5);

}  // namespace canopy
