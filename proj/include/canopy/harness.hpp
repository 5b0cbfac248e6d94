#pragma once

// Synthetic plot generation, the training loop, evaluation metrics and the
// report files built on them.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "canopy/baselines.hpp"
#include "canopy/core.hpp"
#include "canopy/features.hpp"
#include "canopy/models.hpp"

namespace canopy::harness {

// ---------------------------------------------------------------------------
// Synthetic data

struct SpeciesTraits {
  double crown_radius_ratio;  // crown radius / height
  double crown_length_ratio;  // crown length / height
  double wood_density;        // Mg per m^3
  double p_intercept;         // chance a pulse crossing the crown returns from it
  double p_continue;          // chance the pulse continues after a crown return
};

struct SyntheticConfig {
  double plot_radius = 15.0;
  double pulse_density = 4.5;  // pulses per m^2
  double min_stems_per_plot = 4.0;
  double max_stems_per_plot = 36.0;
  double min_stand_height = 8.0;
  double max_stand_height = 30.0;
  double height_cv = 0.12;
  double zero_tree_prob = 0.03;
  double harvested_prob = 0.02;
  double unreasonable_prob = 0.01;
  double extra_trees_prob = 0.03;
  double non_forest_prob = 0.03;
  double near_gap_fraction = 0.6;  // share of gaps in [-1, 1]; the rest are 1..9 years
  double growth_rate = 0.02;       // relative height change per year of gap
  double ground_noise = 0.03;
  double volume_coef = 0.0032;     // tree volume = coef * h^a * crown_radius^2
  double height_exponent = 1.2;
  double expansion_factor = 1.3;   // stem to above-ground biomass
  double stem_radius_ratio = 0.012;
  SpeciesTraits conifer{0.13, 0.65, 0.38, 0.85, 0.2};
  SpeciesTraits broadleaf{0.20, 0.50, 0.72, 0.60, 0.5};
};

struct Tree {
  double x = 0.0;
  double y = 0.0;
  double height = 0.0;
  bool conifer = true;
};

double tree_crown_radius(const Tree& t, const SyntheticConfig& cfg);
double tree_volume(const Tree& t, const SyntheticConfig& cfg);   // m^3
double tree_biomass(const Tree& t, const SyntheticConfig& cfg);  // Mg
double per_hectare(double plot_total, double plot_radius);

struct SyntheticPlot {
  PointCloud cloud;
  RegressionTargets targets;
  double conifer_fraction = 0.0;
  std::vector<Tree> trees;
};

/// Targets from `trees` as measured; the scan sees heights scaled by
/// (1 + growth_rate * gap).
SyntheticPlot simulate_plot(const std::vector<Tree>& trees, double time_gap_years,
                            const SyntheticConfig& cfg, Rng& rng);

/// Writes `clouds/<id>.csv` and `manifest.jsonl` under `out_dir`; returns
/// the records (split unassigned).
std::vector<PlotRecord> synth_generate(const SyntheticConfig& cfg, int n_plots,
                                       std::uint64_t seed, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Metrics and reports

struct TargetMetrics {
  double rmse = 0.0;
  double r2 = 0.0;
  bool r2_defined = true;  // false when all targets are equal
  double mape = 0.0;       // percent, over strictly positive targets
  std::size_t n = 0;
  std::size_t excluded_n = 0;  // rows left out of MAPE
};

TargetMetrics compute_metrics(const std::vector<double>& observed,
                              const std::vector<double>& predicted);

inline const std::array<std::string, 5> kConiferBins{"0", "(0,33]", "(33,66]", "(66,100)", "100"};
const std::string& conifer_bin(double conifer_fraction);

inline const std::array<std::string, 3> kTargets{"agb", "volume", "carbon"};

struct ResidualRow {
  std::string plot_id;
  std::string target;
  double conifer_fraction = 0.0;
  double observed = 0.0;
  double predicted = 0.0;
  double residual() const { return observed - predicted; }
};

struct BinMetrics {
  std::string bin;
  std::string target;
  TargetMetrics metrics;
};

struct EvalReport {
  std::string model;
  std::string split;
  std::vector<std::pair<std::string, TargetMetrics>> targets;
  std::vector<BinMetrics> bins;
  std::vector<ResidualRow> residuals;

  const TargetMetrics& metrics(const std::string& target) const;
};

/// `predictions` holds one (agb, volume) row per record; carbon derives from agb.
EvalReport build_report(const std::string& model, const std::string& split,
                        const std::vector<PlotRecord>& records,
                        const Eigen::MatrixXd& predictions);

/// Rebuilds every metric from residual rows alone.
EvalReport report_from_residuals(const std::string& model, const std::string& split,
                                 const std::vector<ResidualRow>& rows);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
void write_report_json(const std::filesystem::path& path, const EvalReport& r);
EvalReport read_report_json(const std::filesystem::path& path);

/// Columns: plot_id, target, conifer_fraction, conifer_bin, observed, predicted, residual.
void write_residuals_csv(const std::filesystem::path& path, const EvalReport& r);
std::vector<ResidualRow> read_residuals_csv(const std::filesystem::path& path);

struct CompareRow {
  std::string target;
  std::string model;
  double r2 = 0.0;
  bool r2_defined = true;
  double rmse = 0.0;
  double mape = 0.0;
};

/// Rows grouped by target, then by descending R^2 (undefined last).
std::vector<CompareRow> compare_models(const std::vector<EvalReport>& reports);
/// Columns: target, model, r2, rmse, mape.
void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);

// ---------------------------------------------------------------------------
// Baselines over the feature table

enum class BaselineKind { linear, power, rf };
std::string baseline_kind_name(BaselineKind k);
BaselineKind parse_baseline_kind(const std::string& s);

struct BaselineOptions {
  int n_trees = 200;
  ForestParams forest;
  std::optional<ForestGrid> grid;  // OOB grid search when set
  std::uint64_t seed = 0;
  int threads = 1;
};

/// One fitted regressor per target (agb, volume).
struct BaselineModel {
  BaselineKind kind = BaselineKind::linear;
  std::array<LinearModel, 2> linear;
  std::array<PowerModel, 2> power;
  std::array<RandomForestModel, 2> forest;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const;  // n x 2
};

BaselineModel fit_baseline(BaselineKind kind, const FeatureTable& train,
                           const BaselineOptions& options);
void save_baseline(const std::filesystem::path& path, const BaselineModel& m);
BaselineModel load_baseline(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training

struct TargetScaler {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};

  static TargetScaler fit(const std::vector<PlotRecord>& records);
  Eigen::RowVector2d standardize(const RegressionTargets& t) const;
  Eigen::RowVector2d restore(const Eigen::Ref<const Eigen::RowVectorXd>& z) const;
};

struct TrainConfig {
  models::ModelKind kind = models::ModelKind::minkowski;
  std::string model_config;  // key=value text; empty for defaults
  int epochs = 310;
  int batch_size = 32;
  double lr = 0.001;
  double lr_min = 0.0;
  int t0 = 10;
  int t_mult = 2;
  double weight_decay = 0.01;
  double plot_radius = 15.0;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int threads = 1;  // evaluation only; training is serial
  // After each epoch, reset batch-norm running statistics to their average
  // over clean training batches before validating.
  bool recompute_bn_stats = true;
};

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_r2 = 0.0;  // mean over agb and volume; NaN without validation data
};

struct TrainedModel {
  std::unique_ptr<models::Model> model;
  TargetScaler scaler;
  std::uint64_t seed = 0;
  int best_epoch = -1;  // -1: initialization

  /// De-standardized (agb, volume) per cloud; clouds must be normalized.
  Eigen::MatrixXd predict(const std::vector<PointCloud>& clouds, int threads = 1) const;
};

struct TrainResult {
  TrainedModel trained;
  std::vector<HistoryRow> history;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Uses the train split for updates and the validation split for model
/// selection by best mean R^2.
TrainResult train(const std::vector<PlotRecord>& records, const CloudLoader& loader,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& m);
TrainedModel load_checkpoint(const std::filesystem::path& path);
std::uint64_t file_hash(const std::filesystem::path& path);

/// Loads and normalizes every record's cloud.
std::vector<PointCloud> load_normalized(const std::vector<PlotRecord>& records,
                                        const CloudLoader& loader, double radius, int threads);

std::vector<PlotRecord> select_split(const std::vector<PlotRecord>& records, Split s);

// ---------------------------------------------------------------------------
// Gradient checks over every primitive, the SE block, the loss and one tiny
// instance of each network.

struct GradCheckCase {
  std::string name;
  std::function<nn::GradCheckResult()> run;
};

inline constexpr double kGradCheckTolerance = 1e-4;

std::vector<GradCheckCase> gradcheck_suite();

}  // namespace canopy::harness
