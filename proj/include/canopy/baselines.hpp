#pragma once

// Feature-based reference regressors: ordinary least squares, the
// multiplicative power model and a random forest tuned by out-of-bag error.

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "canopy/container.hpp"

namespace canopy {

// ---------------------------------------------------------------------------
// Linear

struct LinearModel {
  Eigen::VectorXd weights;
  double bias = 0.0;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  Eigen::VectorXd predict_rows(const Eigen::MatrixXd& X) const;
};

inline constexpr double kRidgeJitter = 1e-8;

/// Least squares through the normal equations of [X 1], with kRidgeJitter on
/// the Gram diagonal. Requires more rows than columns + 1.
LinearModel fit_linear(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

// ---------------------------------------------------------------------------
// Power model: y = w1 * zmean^w2 * z95^w3 * ir^w4

struct PowerInputs {
  double mean_z = 0.0;
  double p95_z = 0.0;
  double interception_ratio = 0.0;
};

struct PowerModel {
  std::array<double, 4> w{1.0, 0.0, 0.0, 0.0};

  double predict(const PowerInputs& in) const;
};

struct PowerFitOptions {
  // Exponents marked fixed keep their initial value (0 unless set in `init`).
  std::array<bool, 3> free_exponents{true, true, true};
  double initial_damping = 1e-3;
  double relative_tolerance = 1e-10;
  int max_iterations = 200;
};

struct PowerFitReport {
  int iterations = 0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::vector<double> accepted_objectives;  // one entry per accepted step
};

/// Pulls (ag mean, ag p95, IR) from a 27-column feature matrix.
std::vector<PowerInputs> power_inputs_from_features(const Eigen::MatrixXd& X);

/// Log-space OLS initialization over strictly positive rows, then
/// Levenberg-Marquardt on original-scale squared residuals over all rows.
PowerModel fit_power(const std::vector<PowerInputs>& inputs, const Eigen::VectorXd& y,
                     const PowerFitOptions& options = {},
                     PowerFitReport* report = nullptr);

double power_objective(const PowerModel& m, const std::vector<PowerInputs>& inputs,
                       const Eigen::VectorXd& y);

// ---------------------------------------------------------------------------
// Random forest

inline constexpr int kUnlimitedDepth = -1;

struct ForestParams {
  double feature_ratio = 0.9;
  double sample_ratio = 0.2;
  int max_depth = 11;  // kUnlimitedDepth for no limit
  int min_leaf = 6;

  std::string describe() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  int n_samples = 0;
  int depth = 0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;
  std::vector<std::uint32_t> in_sample;  // training rows used, ascending

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  int depth() const;
};

struct RandomForestModel {
  std::vector<RegressionTree> trees;
  ForestParams params;
  std::vector<std::uint64_t> tree_seeds;
  std::size_t n_training_rows = 0;
  double oob_error = std::numeric_limits<double>::quiet_NaN();

  /// Mean of tree outputs, summed in ascending order of value.
  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;
  Eigen::VectorXd predict_rows(const Eigen::MatrixXd& X) const;
};

RegressionTree fit_tree(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const ForestParams& params, std::uint64_t seed);

/// Each tree sees ceil(sample_ratio * n) rows drawn without replacement and
/// ceil(feature_ratio * d) candidate features per split. Row selection is
/// keyed on row content, so shuffling the input rows does not change the
/// forest.
RandomForestModel fit_random_forest(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                    const ForestParams& params, int n_trees,
                                    std::uint64_t seed, int threads = 1);

struct OobResult {
  double mse = 0.0;
  std::size_t rows_used = 0;
  std::size_t rows_skipped = 0;  // rows inside every tree's sample
};

OobResult oob_error(const RandomForestModel& model, const Eigen::MatrixXd& X,
                    const Eigen::VectorXd& y);

/// OOB error of one tree on the rows it did not see.
double tree_oob_error(const RegressionTree& tree, const Eigen::MatrixXd& X,
                      const Eigen::VectorXd& y);

struct ForestGrid {
  std::vector<double> feature_ratios;
  std::vector<double> sample_ratios;
  std::vector<int> max_depths;
  std::vector<int> min_leafs;

  std::size_t size() const {
    return feature_ratios.size() * sample_ratios.size() * max_depths.size() *
           min_leafs.size();
  }
  /// {0.1..1.0} x {0.1..1.0} x {5..20, unlimited} x {1,2,4,8,16}.
  static ForestGrid standard();
};

struct GridRow {
  ForestParams params;
  double oob_mse = 0.0;
};

struct GridSearchResult {
  ForestParams best;
  double best_oob = 0.0;
  std::vector<GridRow> table;  // lexicographic grid order
};

GridSearchResult grid_search_oob(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                 const ForestGrid& grid, int n_trees,
                                 std::uint64_t seed, int threads = 1);

// ---------------------------------------------------------------------------
// Persistence (one section payload per model)

std::string encode_linear(const LinearModel& m);
LinearModel decode_linear(const std::string& payload);
std::string encode_power(const PowerModel& m);
PowerModel decode_power(const std::string& payload);
std::string encode_forest(const RandomForestModel& m);
RandomForestModel decode_forest(const std::string& payload);

}  // namespace canopy
