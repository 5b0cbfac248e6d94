#include "canopy/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "canopy/common.hpp"
#include "canopy/container.hpp"

namespace fs = std::filesystem;

namespace canopy::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const SpeciesTraits& traits(const Tree& t, const SyntheticConfig& cfg) {
  return t.conifer ? cfg.conifer : cfg.broadleaf;
}

std::string number_or_nan(double v) { return std::isfinite(v) ? format_double(v) : "nan"; }

double parse_number(const std::string& s, const fs::path& path) {
  if (s == "nan") return kNaN;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("bad number '" + s + "' in '" + path.string() + "'");
  }
}

// Comma-separated cells; double-quoted cells may hold commas and "" escapes.
std::vector<std::string> split_csv(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic data

double tree_crown_radius(const Tree& t, const SyntheticConfig& cfg) {
  return traits(t, cfg).crown_radius_ratio * t.height;
}

double tree_volume(const Tree& t, const SyntheticConfig& cfg) {
  const double cr = tree_crown_radius(t, cfg);
  return cfg.volume_coef * std::pow(t.height, cfg.height_exponent) * cr * cr;
}

double tree_biomass(const Tree& t, const SyntheticConfig& cfg) {
  return traits(t, cfg).wood_density * cfg.expansion_factor * tree_volume(t, cfg);
}

double per_hectare(double plot_total, double plot_radius) {
  return plot_total * 10000.0 / (std::numbers::pi * plot_radius * plot_radius);
}

SyntheticPlot simulate_plot(const std::vector<Tree>& trees, double time_gap_years,
                            const SyntheticConfig& cfg, Rng& rng) {
  SyntheticPlot plot;
  plot.trees = trees;
  plot.cloud.time_gap_years = time_gap_years;

  CompensatedSum agb, vol, ba_all, ba_conifer;
  for (const Tree& t : trees) {
    agb.add(tree_biomass(t, cfg));
    vol.add(tree_volume(t, cfg));
    // Basal area from a diameter that scales with height.
    const double ba = std::pow(t.height, 2.6);
    ba_all.add(ba);
    if (t.conifer) ba_conifer.add(ba);
  }
  plot.targets.agb = per_hectare(agb.value(), cfg.plot_radius);
  plot.targets.volume = per_hectare(vol.value(), cfg.plot_radius);
  plot.conifer_fraction =
      trees.empty() ? 0.0 : std::clamp(100.0 * ba_conifer.value() / ba_all.value(), 0.0, 100.0);

  struct Crown {
    double x, y, radius, center_z, half_length, stem_radius, base;
    const SpeciesTraits* species;
  };
  const double growth = std::max(0.5, 1.0 + cfg.growth_rate * time_gap_years);
  std::vector<Crown> crowns;
  for (const Tree& t : trees) {
    const double h = t.height * growth;
    const SpeciesTraits& sp = traits(t, cfg);
    const double length = sp.crown_length_ratio * h;
    crowns.push_back({t.x, t.y, sp.crown_radius_ratio * h, h - 0.5 * length, 0.5 * length,
                      cfg.stem_radius_ratio * h, h - length, &sp});
  }

  const double area = std::numbers::pi * cfg.plot_radius * cfg.plot_radius;
  const auto n_pulses = static_cast<std::size_t>(std::llround(cfg.pulse_density * area));
  struct Hit {
    double top, bottom;
    const SpeciesTraits* species;
  };
  std::vector<Hit> hits;
  std::vector<double> returns;
  for (std::size_t p = 0; p < n_pulses; ++p) {
    const double rad = cfg.plot_radius * std::sqrt(rng.uniform());
    const double ang = 2.0 * std::numbers::pi * rng.uniform();
    const double x = rad * std::cos(ang);
    const double y = rad * std::sin(ang);
    hits.clear();
    for (const Crown& c : crowns) {
      const double d2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
      if (d2 >= c.radius * c.radius) continue;
      const double half = c.half_length * std::sqrt(1.0 - d2 / (c.radius * c.radius));
      hits.push_back({c.center_z + half, c.center_z - half, c.species});
    }
    std::stable_sort(hits.begin(), hits.end(),
                     [](const Hit& a, const Hit& b) { return a.top > b.top; });
    returns.clear();
    bool alive = true;
    for (const Hit& h : hits) {
      if (rng.uniform() >= h.species->p_intercept) continue;
      returns.push_back(h.top - 0.5 * (h.top - h.bottom) * rng.uniform());
      if (rng.uniform() >= h.species->p_continue) {
        alive = false;
        break;
      }
    }
    if (alive) {
      for (const Crown& c : crowns) {
        const double d2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
        if (d2 < c.stem_radius * c.stem_radius) {
          returns.push_back(c.base * rng.uniform());
          alive = false;
          break;
        }
      }
    }
    if (alive) returns.push_back(std::abs(cfg.ground_noise * rng.normal()));
    const int count = static_cast<int>(std::min<std::size_t>(returns.size(), 5));
    for (int i = 0; i < count; ++i)
      plot.cloud.points.push_back({x, y, returns[static_cast<std::size_t>(i)], i + 1, count});
  }
  return plot;
}

std::vector<PlotRecord> synth_generate(const SyntheticConfig& cfg, int n_plots,
                                       std::uint64_t seed, const fs::path& out_dir) {
  if (n_plots < 1) throw ValidationError("n_plots must be >= 1");
  if (!(cfg.plot_radius > 0.0) || !(cfg.pulse_density > 0.0))
    throw ValidationError("plot radius and pulse density must be > 0");
  if (cfg.min_stems_per_plot < 1.0 || cfg.max_stems_per_plot < cfg.min_stems_per_plot)
    throw ValidationError("invalid stem count range");
  fs::create_directories(out_dir / "clouds");
  std::vector<PlotRecord> records;
  const int digits = std::max(4, static_cast<int>(std::to_string(n_plots).size()));
  for (int i = 0; i < n_plots; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i) + 1));
    std::vector<Tree> trees;
    if (!rng.bernoulli(cfg.zero_tree_prob)) {
      const auto n_trees = static_cast<int>(
          cfg.min_stems_per_plot +
          static_cast<double>(rng.below(static_cast<std::uint64_t>(
              cfg.max_stems_per_plot - cfg.min_stems_per_plot + 1.0))));
      const double stand_height = rng.uniform(cfg.min_stand_height, cfg.max_stand_height);
      const double mix = rng.uniform();
      const double p_conifer = mix < 0.35 ? 1.0 : (mix < 0.7 ? 0.0 : rng.uniform());
      for (int t = 0; t < n_trees; ++t) {
        const double r = cfg.plot_radius * std::sqrt(rng.uniform());
        const double a = 2.0 * std::numbers::pi * rng.uniform();
        const double h = std::max(2.0, stand_height * (1.0 + cfg.height_cv * rng.normal()));
        trees.push_back({r * std::cos(a), r * std::sin(a), h, rng.uniform() < p_conifer});
      }
    }
    double gap = rng.uniform(-1.0, 1.0);
    if (!rng.bernoulli(cfg.near_gap_fraction)) gap = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(1.0, 9.0);

    SyntheticPlot plot = simulate_plot(trees, gap, cfg, rng);
    PlotRecord rec;
    std::string num = std::to_string(i + 1);
    rec.plot_id = "plot_" + std::string(static_cast<std::size_t>(digits) - num.size(), '0') + num;
    plot.cloud.plot_id = rec.plot_id;
    rec.cloud_path = out_dir / "clouds" / (rec.plot_id + ".csv");
    rec.targets = plot.targets;
    rec.conifer_fraction = plot.conifer_fraction;
    rec.time_gap_years = gap;
    rec.error_flags.harvested = rng.bernoulli(cfg.harvested_prob);
    rec.error_flags.unreasonable = rng.bernoulli(cfg.unreasonable_prob);
    rec.error_flags.extra_trees = rng.bernoulli(cfg.extra_trees_prob);
    rec.error_flags.non_forest_objects = rng.bernoulli(cfg.non_forest_prob);
    if (rec.error_flags.harvested) rec.targets = {};
    write_cloud_csv(rec.cloud_path, plot.cloud);
    records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.jsonl", records);
  return records;
}

// ---------------------------------------------------------------------------
// Metrics

TargetMetrics compute_metrics(const std::vector<double>& observed,
                              const std::vector<double>& predicted) {
  if (observed.size() != predicted.size()) throw ValidationError("metric input length mismatch");
  if (observed.empty()) throw ValidationError("cannot evaluate an empty split");
  TargetMetrics m;
  m.n = observed.size();
  const double n = static_cast<double>(m.n);
  CompensatedSum sq, ysum, ape;
  for (std::size_t i = 0; i < m.n; ++i) {
    const double d = predicted[i] - observed[i];
    sq.add(d * d);
    ysum.add(observed[i]);
    if (observed[i] > 0.0) ape.add(100.0 * std::abs(d) / observed[i]);
    else ++m.excluded_n;
  }
  const double mean = ysum.value() / n;
  CompensatedSum tot;
  for (double y : observed) tot.add((y - mean) * (y - mean));
  m.rmse = std::sqrt(sq.value() / n);
  if (tot.value() > 0.0) {
    m.r2 = 1.0 - sq.value() / tot.value();
  } else {
    m.r2 = kNaN;
    m.r2_defined = false;
  }
  const std::size_t used = m.n - m.excluded_n;
  m.mape = used > 0 ? ape.value() / static_cast<double>(used) : kNaN;
  return m;
}

const std::string& conifer_bin(double f) {
  if (!(f >= 0.0 && f <= 100.0)) throw ValidationError("conifer fraction outside [0, 100]");
  if (f == 0.0) return kConiferBins[0];
  if (f <= 33.0) return kConiferBins[1];
  if (f <= 66.0) return kConiferBins[2];
  if (f < 100.0) return kConiferBins[3];
  return kConiferBins[4];
}

const TargetMetrics& EvalReport::metrics(const std::string& target) const {
  for (const auto& [name, m] : targets)
    if (name == target) return m;
  throw ValidationError("report has no target '" + target + "'");
}

EvalReport report_from_residuals(const std::string& model, const std::string& split,
                                 const std::vector<ResidualRow>& rows) {
  EvalReport r;
  r.model = model;
  r.split = split;
  r.residuals = rows;
  for (const std::string& target : kTargets) {
    std::vector<double> obs, pred;
    std::array<std::vector<double>, 5> bin_obs, bin_pred;
    for (const ResidualRow& row : rows) {
      if (row.target != target) continue;
      obs.push_back(row.observed);
      pred.push_back(row.predicted);
      const auto b = static_cast<std::size_t>(
          std::find(kConiferBins.begin(), kConiferBins.end(), conifer_bin(row.conifer_fraction)) -
          kConiferBins.begin());
      bin_obs[b].push_back(row.observed);
      bin_pred[b].push_back(row.predicted);
    }
    if (obs.empty()) continue;
    r.targets.emplace_back(target, compute_metrics(obs, pred));
    for (std::size_t b = 0; b < kConiferBins.size(); ++b)
      if (!bin_obs[b].empty())
        r.bins.push_back({kConiferBins[b], target, compute_metrics(bin_obs[b], bin_pred[b])});
  }
  return r;
}

EvalReport build_report(const std::string& model, const std::string& split,
                        const std::vector<PlotRecord>& records,
                        const Eigen::MatrixXd& predictions) {
  if (records.empty()) throw ValidationError("cannot evaluate an empty split");
  if (predictions.rows() != static_cast<Eigen::Index>(records.size()) || predictions.cols() != 2)
    throw ValidationError("prediction table shape mismatch");
  std::vector<ResidualRow> rows;
  for (const std::string& target : kTargets) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const PlotRecord& rec = records[i];
      ResidualRow row{rec.plot_id, target, rec.conifer_fraction, 0.0, 0.0};
      if (target == "agb") {
        row.observed = rec.targets.agb;
        row.predicted = predictions(ii, 0);
      } else if (target == "volume") {
        row.observed = rec.targets.volume;
        row.predicted = predictions(ii, 1);
      } else {
        row.observed = carbon_from_biomass(rec.targets.agb);
        row.predicted = carbon_from_prediction(predictions(ii, 0));
      }
      rows.push_back(std::move(row));
    }
  }
  return report_from_residuals(model, split, rows);
}

namespace {

nlohmann::json metrics_json(const TargetMetrics& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["rmse"] = m.rmse;
  j["r2"] = m.r2_defined ? nlohmann::json(m.r2) : nlohmann::json(nullptr);
  j["r2_defined"] = m.r2_defined;
  j["mape"] = std::isfinite(m.mape) ? nlohmann::json(m.mape) : nlohmann::json(nullptr);
  j["excluded_n"] = m.excluded_n;
  return j;
}

TargetMetrics metrics_from_json(const nlohmann::json& j) {
  TargetMetrics m;
  m.n = j.at("n").get<std::size_t>();
  m.rmse = j.at("rmse").get<double>();
  m.r2_defined = j.at("r2_defined").get<bool>();
  m.r2 = j.at("r2").is_null() ? kNaN : j.at("r2").get<double>();
  m.mape = j.at("mape").is_null() ? kNaN : j.at("mape").get<double>();
  m.excluded_n = j.at("excluded_n").get<std::size_t>();
  return m;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["model"] = r.model;
  j["split"] = r.split;
  j["targets"] = nlohmann::json::object();
  for (const auto& [name, m] : r.targets) j["targets"][name] = metrics_json(m);
  j["conifer_bins"] = nlohmann::json::array();
  for (const BinMetrics& b : r.bins) {
    nlohmann::json e = metrics_json(b.metrics);
    e["bin"] = b.bin;
    e["target"] = b.target;
    j["conifer_bins"].push_back(std::move(e));
  }
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.model = j.at("model").get<std::string>();
    r.split = j.at("split").get<std::string>();
    for (const std::string& t : kTargets)
      if (j.at("targets").contains(t)) r.targets.emplace_back(t, metrics_from_json(j["targets"][t]));
    for (const auto& e : j.at("conifer_bins"))
      r.bins.push_back({e.at("bin").get<std::string>(), e.at("target").get<std::string>(),
                        metrics_from_json(e)});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

void write_report_json(const fs::path& path, const EvalReport& r) {
  auto out = open_out(path);
  out << report_to_json(r).dump(2) << '\n';
}

EvalReport read_report_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report '" + path.string() + "'");
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("report '" + path.string() + "' is not JSON: " + e.what());
  }
}

void write_residuals_csv(const fs::path& path, const EvalReport& r) {
  auto out = open_out(path);
  out << "plot_id,target,conifer_fraction,conifer_bin,observed,predicted,residual\n";
  for (const ResidualRow& row : r.residuals)
    out << csv_field(row.plot_id) << ',' << row.target << ',' << format_double(row.conifer_fraction)
        << ',' << csv_field(conifer_bin(row.conifer_fraction)) << ',' << format_double(row.observed) << ','
        << format_double(row.predicted) << ',' << format_double(row.residual()) << '\n';
}

std::vector<ResidualRow> read_residuals_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (split_csv(line).size() != 7) throw ValidationError("unexpected residual header");
  std::vector<ResidualRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 7) throw ValidationError("bad residual row in '" + path.string() + "'");
    rows.push_back({c[0], c[1], parse_number(c[2], path), parse_number(c[4], path),
                    parse_number(c[5], path)});
  }
  return rows;
}

std::vector<CompareRow> compare_models(const std::vector<EvalReport>& reports) {
  std::vector<CompareRow> rows;
  for (const std::string& target : kTargets) {
    std::vector<CompareRow> group;
    for (const EvalReport& r : reports)
      for (const auto& [name, m] : r.targets)
        if (name == target) group.push_back({target, r.model, m.r2, m.r2_defined, m.rmse, m.mape});
    std::stable_sort(group.begin(), group.end(), [](const CompareRow& a, const CompareRow& b) {
      if (a.r2_defined != b.r2_defined) return a.r2_defined;
      if (a.r2_defined && a.r2 != b.r2) return a.r2 > b.r2;
      return a.model < b.model;
    });
    rows.insert(rows.end(), group.begin(), group.end());
  }
  return rows;
}

void write_compare_csv(const fs::path& path, const std::vector<CompareRow>& rows) {
  auto out = open_out(path);
  out << "target,model,r2,rmse,mape\n";
  for (const CompareRow& r : rows)
    out << r.target << ',' << r.model << ',' << (r.r2_defined ? format_double(r.r2) : "nan") << ','
        << number_or_nan(r.rmse) << ',' << number_or_nan(r.mape) << '\n';
}

// ---------------------------------------------------------------------------
// Baselines

std::string baseline_kind_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::linear: return "linear";
    case BaselineKind::power: return "power";
    case BaselineKind::rf: return "rf";
  }
  return "unknown";
}

BaselineKind parse_baseline_kind(const std::string& s) {
  if (s == "linear") return BaselineKind::linear;
  if (s == "power") return BaselineKind::power;
  if (s == "rf") return BaselineKind::rf;
  throw ValidationError("unknown baseline '" + s + "'");
}

Eigen::MatrixXd BaselineModel::predict(const Eigen::MatrixXd& X) const {
  Eigen::MatrixXd out(X.rows(), 2);
  switch (kind) {
    case BaselineKind::linear:
      for (int t = 0; t < 2; ++t) out.col(t) = linear[static_cast<std::size_t>(t)].predict_rows(X);
      break;
    case BaselineKind::power: {
      const auto inputs = power_inputs_from_features(X);
      for (int t = 0; t < 2; ++t)
        for (Eigen::Index i = 0; i < X.rows(); ++i)
          out(i, t) = power[static_cast<std::size_t>(t)].predict(inputs[static_cast<std::size_t>(i)]);
      break;
    }
    case BaselineKind::rf:
      for (int t = 0; t < 2; ++t) out.col(t) = forest[static_cast<std::size_t>(t)].predict_rows(X);
      break;
  }
  return out;
}

BaselineModel fit_baseline(BaselineKind kind, const FeatureTable& train,
                           const BaselineOptions& options) {
  if (train.X.rows() == 0) throw ValidationError("no training rows");
  BaselineModel m;
  m.kind = kind;
  const std::array<const Eigen::VectorXd*, 2> ys{&train.agb, &train.volume};
  for (std::size_t t = 0; t < 2; ++t) {
    const Eigen::VectorXd& y = *ys[t];
    switch (kind) {
      case BaselineKind::linear:
        m.linear[t] = fit_linear(train.X, y);
        break;
      case BaselineKind::power:
        m.power[t] = fit_power(power_inputs_from_features(train.X), y);
        break;
      case BaselineKind::rf: {
        const std::uint64_t seed = mix_seed(options.seed, t + 1);
        ForestParams params = options.forest;
        if (options.grid)
          params = grid_search_oob(train.X, y, *options.grid, options.n_trees, seed, options.threads).best;
        m.forest[t] = fit_random_forest(train.X, y, params, options.n_trees, seed, options.threads);
        break;
      }
    }
  }
  return m;
}

void save_baseline(const fs::path& path, const BaselineModel& m) {
  std::vector<Section> sections{{"baseline", baseline_kind_name(m.kind)}};
  const char* names[] = {"agb", "volume"};
  for (std::size_t t = 0; t < 2; ++t) {
    std::string payload;
    switch (m.kind) {
      case BaselineKind::linear: payload = encode_linear(m.linear[t]); break;
      case BaselineKind::power: payload = encode_power(m.power[t]); break;
      case BaselineKind::rf: payload = encode_forest(m.forest[t]); break;
    }
    sections.push_back({names[t], std::move(payload)});
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_container(path, sections);
}

BaselineModel load_baseline(const fs::path& path) {
  const auto sections = read_container(path);
  BaselineModel m;
  m.kind = parse_baseline_kind(find_section(sections, "baseline").payload);
  const char* names[] = {"agb", "volume"};
  for (std::size_t t = 0; t < 2; ++t) {
    const std::string& p = find_section(sections, names[t]).payload;
    switch (m.kind) {
      case BaselineKind::linear: m.linear[t] = decode_linear(p); break;
      case BaselineKind::power: m.power[t] = decode_power(p); break;
      case BaselineKind::rf: m.forest[t] = decode_forest(p); break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

TargetScaler TargetScaler::fit(const std::vector<PlotRecord>& records) {
  if (records.empty()) throw ValidationError("cannot fit target scaling on no records");
  TargetScaler s;
  for (int t = 0; t < 2; ++t) {
    CompensatedSum sum;
    for (const PlotRecord& r : records) sum.add(t == 0 ? r.targets.agb : r.targets.volume);
    const double mean = sum.value() / static_cast<double>(records.size());
    CompensatedSum sq;
    for (const PlotRecord& r : records) {
      const double d = (t == 0 ? r.targets.agb : r.targets.volume) - mean;
      sq.add(d * d);
    }
    const double sd = std::sqrt(sq.value() / static_cast<double>(records.size()));
    s.mean[static_cast<std::size_t>(t)] = mean;
    s.scale[static_cast<std::size_t>(t)] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

Eigen::RowVector2d TargetScaler::standardize(const RegressionTargets& t) const {
  return {(t.agb - mean[0]) / scale[0], (t.volume - mean[1]) / scale[1]};
}

Eigen::RowVector2d TargetScaler::restore(const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  return {z(0) * scale[0] + mean[0], z(1) * scale[1] + mean[1]};
}

std::vector<PlotRecord> select_split(const std::vector<PlotRecord>& records, Split s) {
  std::vector<PlotRecord> out;
  for (const PlotRecord& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

std::vector<PointCloud> load_normalized(const std::vector<PlotRecord>& records,
                                        const CloudLoader& loader, double radius, int threads) {
  std::vector<PointCloud> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    try {
      out[i] = normalize_cloud(loader(records[i]), radius);
    } catch (const ValidationError& e) {
      throw ValidationError("plot '" + records[i].plot_id + "': " + e.what());
    }
  });
  return out;
}

Eigen::MatrixXd TrainedModel::predict(const std::vector<PointCloud>& clouds, int threads) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(clouds.size()), 2);
  parallel_for(clouds.size(), threads, [&](std::size_t i) {
    const models::Sample s = models::make_sample(clouds[i]);
    const nn::Var y = model->forward(std::span<const models::Sample>(&s, 1), false);
    out.row(static_cast<Eigen::Index>(i)) = scaler.restore(y->value.row(0));
  });
  return out;
}

namespace {

std::vector<Section> checkpoint_sections(const TrainedModel& m) {
  ByteWriter meta;
  meta.str(models::model_kind_name(m.model->kind()));
  meta.str(m.model->config_text());
  meta.u64(m.seed);
  meta.i64(m.best_epoch);
  for (int t = 0; t < 2; ++t) {
    meta.f64(m.scaler.mean[static_cast<std::size_t>(t)]);
    meta.f64(m.scaler.scale[static_cast<std::size_t>(t)]);
  }
  std::vector<Section> sections{{"model", meta.take()}};
  for (Section& s : models::model_state_sections(*m.model)) sections.push_back(std::move(s));
  return sections;
}

double mean_r2(const std::vector<PlotRecord>& recs, const Eigen::MatrixXd& pred) {
  std::vector<double> obs[2], p[2];
  for (std::size_t i = 0; i < recs.size(); ++i) {
    obs[0].push_back(recs[i].targets.agb);
    obs[1].push_back(recs[i].targets.volume);
    p[0].push_back(pred(static_cast<Eigen::Index>(i), 0));
    p[1].push_back(pred(static_cast<Eigen::Index>(i), 1));
  }
  const TargetMetrics a = compute_metrics(obs[0], p[0]);
  const TargetMetrics b = compute_metrics(obs[1], p[1]);
  if (!a.r2_defined || !b.r2_defined) return kNaN;
  return 0.5 * (a.r2 + b.r2);
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainedModel& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_container(path, checkpoint_sections(m));
}

TrainedModel load_checkpoint(const fs::path& path) {
  const auto sections = read_container(path);
  ByteReader meta(find_section(sections, "model").payload);
  const models::ModelKind kind = models::parse_model_kind(meta.str());
  const std::string config = meta.str();
  TrainedModel m;
  m.seed = meta.u64();
  m.best_epoch = static_cast<int>(meta.i64());
  for (std::size_t t = 0; t < 2; ++t) {
    m.scaler.mean[t] = meta.f64();
    m.scaler.scale[t] = meta.f64();
  }
  m.model = models::make_model(kind, config, m.seed);
  models::load_model_state(*m.model, sections);
  return m;
}

std::uint64_t file_hash(const fs::path& path) { return fnv1a64(read_file_bytes(path)); }

// Replaces the running batch-norm statistics with the plain average of batch
// statistics over unaugmented training batches. The exponential average taken
// during training lags behind weights that move every step, and inference
// with the stale statistics is far worse than with current ones.
void recompute_bn_statistics(models::Model& model, const std::vector<PointCloud>& clouds,
                             const std::vector<std::size_t>& bounds) {
  auto buffers = model.buffers();
  std::vector<double> momentum;
  for (auto& [name, state] : buffers) momentum.push_back(state->momentum);
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
    // momentum 1/(k+1) turns the running update into a cumulative mean
    for (auto& [name, state] : buffers) state->momentum = 1.0 / static_cast<double>(k + 1);
    std::vector<models::Sample> batch;
    for (std::size_t j = bounds[k]; j < bounds[k + 1]; ++j) batch.push_back(models::make_sample(clouds[j]));
    model.forward(batch, true);
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i].second->momentum = momentum[i];
}

TrainResult train(const std::vector<PlotRecord>& records, const CloudLoader& loader,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs < 0) throw ValidationError("epochs must be >= 0");
  if (cfg.batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ValidationError("learning rate must be > 0");
  const auto train_recs = select_split(records, Split::train);
  const auto val_recs = select_split(records, Split::validation);
  if (train_recs.empty()) throw ValidationError("train split is empty");

  const auto train_clouds = load_normalized(train_recs, loader, cfg.plot_radius, cfg.threads);
  const auto val_clouds = load_normalized(val_recs, loader, cfg.plot_radius, cfg.threads);

  TrainResult result;
  TrainedModel& tm = result.trained;
  tm.seed = mix_seed(cfg.seed, 0x6d6f64656cULL);
  tm.scaler = TargetScaler::fit(train_recs);
  tm.model = models::make_model(cfg.kind, cfg.model_config, tm.seed);
  auto& params = tm.model->parameters();

  nn::AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const nn::WarmRestartSchedule schedule{cfg.lr, cfg.lr_min, cfg.t0, cfg.t_mult};

  // Batch boundaries; a trailing single sample joins the previous batch so
  // batch statistics never see one cloud alone.
  std::vector<std::size_t> bounds;
  for (std::size_t b = 0; b < train_recs.size(); b += static_cast<std::size_t>(cfg.batch_size))
    bounds.push_back(b);
  bounds.push_back(train_recs.size());
  if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1)
    bounds.erase(bounds.end() - 2);

  std::vector<Section> best_state = models::model_state_sections(*tm.model);
  double best_r2 = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_recs.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.lr = schedule(epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    CompensatedSum loss_sum;
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
      std::vector<models::Sample> batch;
      nn::Matrix target(static_cast<Eigen::Index>(bounds[k + 1] - bounds[k]), 2);
      for (std::size_t j = bounds[k]; j < bounds[k + 1]; ++j) {
        const std::size_t idx = order[j];
        Rng rng = sample_stream(cfg.seed, train_recs[idx].plot_id, static_cast<std::uint64_t>(epoch));
        batch.push_back(models::make_sample(augment(train_clouds[idx], rng, cfg.augment)));
        target.row(static_cast<Eigen::Index>(j - bounds[k])) = tm.scaler.standardize(train_recs[idx].targets);
      }
      nn::Var loss = nn::smooth_l1(tm.model->forward(batch, true), target);
      const double lv = loss->value(0, 0);
      if (!std::isfinite(lv))
        throw RuntimeError("non-finite training loss at epoch " + std::to_string(epoch));
      nn::backward(loss);
      opt.step(params, row.lr);
      nn::zero_grad(params);
      loss_sum.add(lv * static_cast<double>(batch.size()));
    }
    row.train_loss = loss_sum.value() / static_cast<double>(train_recs.size());
    if (cfg.recompute_bn_stats) recompute_bn_statistics(*tm.model, train_clouds, bounds);

    if (!val_recs.empty()) {
      const Eigen::MatrixXd pred = tm.predict(val_clouds, cfg.threads);
      CompensatedSum vl;
      for (std::size_t i = 0; i < val_recs.size(); ++i) {
        const Eigen::RowVector2d z = tm.scaler.standardize(val_recs[i].targets);
        for (int t = 0; t < 2; ++t) {
          const double zp = (pred(static_cast<Eigen::Index>(i), t) - tm.scaler.mean[static_cast<std::size_t>(t)]) /
                            tm.scaler.scale[static_cast<std::size_t>(t)];
          const double d = std::abs(zp - z(t));
          vl.add(d < 1.0 ? 0.5 * d * d : d - 0.5);
        }
      }
      row.val_loss = vl.value() / (2.0 * static_cast<double>(val_recs.size()));
      row.val_r2 = mean_r2(val_recs, pred);
    } else {
      row.val_loss = kNaN;
      row.val_r2 = kNaN;
    }
    if (!std::isfinite(row.train_loss))
      throw RuntimeError("non-finite training loss at epoch " + std::to_string(epoch));

    const bool last = epoch + 1 == cfg.epochs;
    if (std::isfinite(row.val_r2) ? row.val_r2 > best_r2 : (last && tm.best_epoch < 0)) {
      if (std::isfinite(row.val_r2)) best_r2 = row.val_r2;
      best_state = models::model_state_sections(*tm.model);
      tm.best_epoch = epoch;
    }
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  models::load_model_state(*tm.model, best_state);
  return result;
}

void write_history_csv(const fs::path& path, const std::vector<HistoryRow>& rows) {
  auto out = open_out(path);
  out << "epoch,lr,train_loss,val_loss,val_r2\n";
  for (const HistoryRow& r : rows)
    out << r.epoch << ',' << number_or_nan(r.lr) << ',' << number_or_nan(r.train_loss) << ','
        << number_or_nan(r.val_loss) << ',' << number_or_nan(r.val_r2) << '\n';
}

}  // namespace canopy::harness
