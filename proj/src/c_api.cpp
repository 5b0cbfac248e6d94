#include "canopy/canopy.h"

#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/harness.hpp"

namespace fs = std::filesystem;
using namespace canopy;

struct canopy_dataset {
  std::vector<PlotRecord> records;
  CloudLoader loader = csv_cloud_loader();
};

struct canopy_model {
  std::optional<harness::BaselineModel> baseline;
  std::optional<harness::TrainedModel> deep;
  std::string kind;
};

struct canopy_report {
  harness::EvalReport report;
};

namespace {

thread_local std::string g_last_error;

template <class F>
canopy_status guarded(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return CANOPY_OK;
  } catch (const ValidationError& e) {
    g_last_error = e.what();
    return CANOPY_ERR_VALIDATION;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("malformed JSON: ") + e.what();
    return CANOPY_ERR_VALIDATION;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return CANOPY_ERR_VALIDATION;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CANOPY_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return CANOPY_ERR_RUNTIME;
  }
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw ValidationError(std::string(what) + " must not be null");
}

std::vector<PlotRecord> select(const canopy_dataset& ds, canopy_split split) {
  if (split == CANOPY_SPLIT_ALL) return ds.records;
  if (split < CANOPY_SPLIT_UNASSIGNED || split > CANOPY_SPLIT_TEST)
    throw ValidationError("unknown split selector");
  return harness::select_split(ds.records, static_cast<Split>(split));
}

std::vector<PlotRecord> select_nonempty(const canopy_dataset& ds, canopy_split split) {
  auto recs = select(ds, split);
  if (recs.empty()) throw ValidationError("selected split is empty");
  return recs;
}

const char* split_label(canopy_split split) {
  return split == CANOPY_SPLIT_ALL ? "all" : split_name(static_cast<Split>(split));
}

Eigen::MatrixXd predict_records(const canopy_model& m, const canopy_dataset& ds,
                                const std::vector<PlotRecord>& recs, double plot_radius,
                                int threads) {
  if (m.baseline) return m.baseline->predict(feature_matrix(recs, ds.loader, threads).X);
  return m.deep->predict(harness::load_normalized(recs, ds.loader, plot_radius, threads), threads);
}

}  // namespace

extern "C" {

const char* canopy_version(void) { return CANOPY_VERSION_STRING; }

const char* canopy_last_error(void) { return g_last_error.c_str(); }

canopy_status canopy_parse_split(const char* name, canopy_split* out) {
  return guarded([&] {
    require(name, "split name");
    require(out, "output");
    const std::string s = name;
    *out = s == "all" ? CANOPY_SPLIT_ALL : static_cast<canopy_split>(parse_split(s));
  });
}

canopy_status canopy_file_hash(const char* path, uint64_t* out) {
  return guarded([&] {
    require(path, "path");
    require(out, "output");
    *out = harness::file_hash(path);
  });
}

canopy_status canopy_synth(const char* out_dir, int n_plots, uint64_t seed, canopy_dataset** out) {
  return guarded([&] {
    require(out_dir, "output directory");
    require(out, "output");
    auto ds = std::make_unique<canopy_dataset>();
    ds->records = harness::synth_generate(harness::SyntheticConfig{}, n_plots, seed, out_dir);
    *out = ds.release();
  });
}

canopy_status canopy_dataset_open(const char* manifest_path, canopy_dataset** out) {
  return guarded([&] {
    require(manifest_path, "manifest path");
    require(out, "output");
    auto ds = std::make_unique<canopy_dataset>();
    ds->records = read_manifest(manifest_path);
    *out = ds.release();
  });
}

void canopy_dataset_free(canopy_dataset* ds) { delete ds; }

size_t canopy_dataset_count(const canopy_dataset* ds, canopy_split split) {
  if (ds == nullptr) return 0;
  try {
    return select(*ds, split).size();
  } catch (...) {
    return 0;
  }
}

int canopy_dataset_has_splits(const canopy_dataset* ds) {
  if (ds == nullptr) return 0;
  for (const PlotRecord& r : ds->records)
    if (r.split != Split::unassigned) return 1;
  return 0;
}

canopy_status canopy_dataset_prepare(canopy_dataset* ds, uint64_t seed, double validation_fraction,
                                     double test_fraction, const char* dropped_csv) {
  return guarded([&] {
    require(ds, "dataset");
    FilterResult fr = filter_dataset(ds->records, ds->loader);
    if (dropped_csv != nullptr) {
      const fs::path path(dropped_csv);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      std::ofstream f(path);
      if (!f) throw RuntimeError("cannot write '" + path.string() + "'");
      f << "plot_id,reason\n";
      for (const DropEntry& d : fr.dropped) f << d.plot_id << ',' << d.reason << '\n';
    }
    ds->records = assign_splits(std::move(fr.survivors), seed,
                                SplitFractions{validation_fraction, test_fraction});
  });
}

canopy_status canopy_dataset_write_manifest(const canopy_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds, "dataset");
    require(path, "path");
    write_manifest(path, ds->records);
  });
}

canopy_status canopy_features_export(const canopy_dataset* ds, canopy_split split, int threads,
                                     const char* csv_path) {
  return guarded([&] {
    require(ds, "dataset");
    require(csv_path, "path");
    write_feature_csv(csv_path, feature_matrix(select_nonempty(*ds, split), ds->loader, threads));
  });
}

canopy_baseline_options canopy_baseline_options_default(void) {
  canopy_baseline_options o;
  o.n_trees = harness::BaselineOptions{}.n_trees;
  o.grid_search = 0;
  o.seed = 0;
  o.threads = 1;
  return o;
}

canopy_status canopy_fit_baseline(const canopy_dataset* ds, const char* kind,
                                  const canopy_baseline_options* options, canopy_model** out) {
  return guarded([&] {
    require(ds, "dataset");
    require(kind, "kind");
    require(out, "output");
    const canopy_baseline_options o = options ? *options : canopy_baseline_options_default();
    const harness::BaselineKind k = harness::parse_baseline_kind(kind);
    const auto train = harness::select_split(ds->records, Split::train);
    if (train.empty()) throw ValidationError("train split is empty; prepare the dataset first");
    harness::BaselineOptions bo;
    bo.n_trees = o.n_trees;
    bo.seed = o.seed;
    bo.threads = o.threads;
    if (o.grid_search != 0) bo.grid = ForestGrid::standard();
    auto m = std::make_unique<canopy_model>();
    m->baseline = harness::fit_baseline(k, feature_matrix(train, ds->loader, o.threads), bo);
    m->kind = harness::baseline_kind_name(k);
    *out = m.release();
  });
}

canopy_train_options canopy_train_options_default(void) {
  const harness::TrainConfig d;
  canopy_train_options o;
  o.model_config = nullptr;
  o.tiny = 0;
  o.epochs = d.epochs;
  o.batch_size = d.batch_size;
  o.lr = d.lr;
  o.lr_min = d.lr_min;
  o.t0 = d.t0;
  o.t_mult = d.t_mult;
  o.weight_decay = d.weight_decay;
  o.plot_radius = d.plot_radius;
  o.augment = 1;
  o.seed = 0;
  o.threads = 1;
  o.history_csv = nullptr;
  o.on_epoch = nullptr;
  o.user = nullptr;
  return o;
}

canopy_status canopy_train(const canopy_dataset* ds, const char* kind,
                           const canopy_train_options* options, canopy_model** out) {
  return guarded([&] {
    require(ds, "dataset");
    require(kind, "kind");
    require(out, "output");
    const canopy_train_options o = options ? *options : canopy_train_options_default();
    harness::TrainConfig cfg;
    cfg.kind = models::parse_model_kind(kind);
    if (o.model_config != nullptr && *o.model_config != '\0') {
      cfg.model_config = o.model_config;
    } else if (o.tiny != 0) {
      switch (cfg.kind) {
        case models::ModelKind::minkowski:
          cfg.model_config = models::to_text(models::SENetConfig::tiny());
          break;
        case models::ModelKind::kpconv:
          cfg.model_config = models::to_text(models::KPConvConfig::tiny());
          break;
        case models::ModelKind::pointnet:
          cfg.model_config = models::to_text(models::PointNetConfig::tiny());
          break;
      }
    }
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch_size;
    cfg.lr = o.lr;
    cfg.lr_min = o.lr_min;
    cfg.t0 = o.t0;
    cfg.t_mult = o.t_mult;
    cfg.weight_decay = o.weight_decay;
    cfg.plot_radius = o.plot_radius;
    if (o.augment == 0) cfg.augment = AugmentConfig::identity();
    cfg.seed = o.seed;
    cfg.threads = o.threads;
    harness::EpochCallback cb;
    if (o.on_epoch != nullptr) {
      cb = [&](const harness::HistoryRow& r) {
        const canopy_epoch row{r.epoch, r.lr, r.train_loss, r.val_loss, r.val_r2};
        o.on_epoch(&row, o.user);
      };
    }
    harness::TrainResult res = harness::train(ds->records, ds->loader, cfg, cb);
    if (o.history_csv != nullptr) harness::write_history_csv(o.history_csv, res.history);
    auto m = std::make_unique<canopy_model>();
    m->kind = models::model_kind_name(cfg.kind);
    m->deep = std::move(res.trained);
    *out = m.release();
  });
}

canopy_status canopy_model_save(const canopy_model* m, const char* path) {
  return guarded([&] {
    require(m, "model");
    require(path, "path");
    if (m->baseline)
      harness::save_baseline(path, *m->baseline);
    else
      harness::save_checkpoint(path, *m->deep);
  });
}

canopy_status canopy_model_load(const char* path, canopy_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "output");
    const auto sections = read_container(path);
    bool is_baseline = false;
    for (const Section& s : sections) is_baseline = is_baseline || s.name == "baseline";
    auto m = std::make_unique<canopy_model>();
    if (is_baseline) {
      m->baseline = harness::load_baseline(path);
      m->kind = harness::baseline_kind_name(m->baseline->kind);
    } else {
      m->deep = harness::load_checkpoint(path);
      m->kind = models::model_kind_name(m->deep->model->kind());
    }
    *out = m.release();
  });
}

void canopy_model_free(canopy_model* m) { delete m; }

const char* canopy_model_kind(const canopy_model* m) { return m ? m->kind.c_str() : ""; }

int canopy_model_best_epoch(const canopy_model* m) {
  return m && m->deep ? m->deep->best_epoch : -1;
}

canopy_status canopy_model_predict_cloud(const canopy_model* m, const char* cloud_csv,
                                         double time_gap_years, double plot_radius,
                                         double out[2]) {
  return guarded([&] {
    require(m, "model");
    require(cloud_csv, "cloud path");
    require(out, "output");
    const PointCloud cloud = read_cloud_csv(cloud_csv, fs::path(cloud_csv).stem().string(),
                                            time_gap_years);
    Eigen::MatrixXd pred;
    if (m->baseline) {
      Eigen::MatrixXd X(1, static_cast<Eigen::Index>(kFeatureCount));
      const FeatureVector f = extract_features(cloud);
      for (std::size_t j = 0; j < kFeatureCount; ++j) X(0, static_cast<Eigen::Index>(j)) = f[j];
      pred = m->baseline->predict(X);
    } else {
      pred = m->deep->predict({normalize_cloud(cloud, plot_radius)});
    }
    out[0] = pred(0, 0);
    out[1] = pred(0, 1);
  });
}

canopy_status canopy_model_predict(const canopy_model* m, const canopy_dataset* ds,
                                   canopy_split split, double plot_radius, int threads,
                                   const char* csv_path) {
  return guarded([&] {
    require(m, "model");
    require(ds, "dataset");
    require(csv_path, "path");
    const auto recs = select_nonempty(*ds, split);
    const Eigen::MatrixXd pred = predict_records(*m, *ds, recs, plot_radius, threads);
    const fs::path path(csv_path);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw RuntimeError("cannot write '" + path.string() + "'");
    f << "plot_id,agb,volume,carbon\n";
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      f << recs[i].plot_id << ',' << format_double(pred(r, 0)) << ','
        << format_double(pred(r, 1)) << ',' << format_double(carbon_from_prediction(pred(r, 0)))
        << '\n';
    }
  });
}

canopy_status canopy_evaluate(const canopy_model* m, const canopy_dataset* ds, canopy_split split,
                              double plot_radius, int threads, canopy_report** out) {
  return guarded([&] {
    require(m, "model");
    require(ds, "dataset");
    require(out, "output");
    const auto recs = select_nonempty(*ds, split);
    const Eigen::MatrixXd pred = predict_records(*m, *ds, recs, plot_radius, threads);
    auto r = std::make_unique<canopy_report>();
    r->report = harness::build_report(m->kind, split_label(split), recs, pred);
    *out = r.release();
  });
}

canopy_status canopy_report_write(const canopy_report* r, const char* json_path,
                                  const char* residuals_csv) {
  return guarded([&] {
    require(r, "report");
    if (json_path != nullptr) harness::write_report_json(json_path, r->report);
    if (residuals_csv != nullptr) harness::write_residuals_csv(residuals_csv, r->report);
  });
}

canopy_status canopy_report_read(const char* json_path, canopy_report** out) {
  return guarded([&] {
    require(json_path, "path");
    require(out, "output");
    auto r = std::make_unique<canopy_report>();
    r->report = harness::read_report_json(json_path);
    *out = r.release();
  });
}

void canopy_report_free(canopy_report* r) { delete r; }

canopy_status canopy_report_metric(const canopy_report* r, const char* target, const char* metric,
                                   double* out) {
  return guarded([&] {
    require(r, "report");
    require(target, "target");
    require(metric, "metric");
    require(out, "output");
    const harness::TargetMetrics& t = r->report.metrics(target);
    const std::string name = metric;
    if (name == "r2")
      *out = t.r2_defined ? t.r2 : std::numeric_limits<double>::quiet_NaN();
    else if (name == "rmse")
      *out = t.rmse;
    else if (name == "mape")
      *out = t.mape;
    else if (name == "n")
      *out = static_cast<double>(t.n);
    else if (name == "excluded_n")
      *out = static_cast<double>(t.excluded_n);
    else
      throw ValidationError("unknown metric '" + name + "'");
  });
}

canopy_status canopy_compare(const char* const* report_paths, size_t n, const char* csv_path) {
  return guarded([&] {
    require(csv_path, "path");
    if (n == 0) throw ValidationError("no reports to compare");
    require(report_paths, "report paths");
    std::vector<harness::EvalReport> reports;
    for (size_t i = 0; i < n; ++i) {
      require(report_paths[i], "report path");
      reports.push_back(harness::read_report_json(report_paths[i]));
    }
    harness::write_compare_csv(csv_path, harness::compare_models(reports));
  });
}

double canopy_gradcheck_tolerance(void) { return harness::kGradCheckTolerance; }

namespace {
const std::vector<harness::GradCheckCase>& suite() {
  static const std::vector<harness::GradCheckCase> cases = harness::gradcheck_suite();
  return cases;
}
}  // namespace

size_t canopy_gradcheck_count(void) { return suite().size(); }

const char* canopy_gradcheck_name(size_t index) {
  return index < suite().size() ? suite()[index].name.c_str() : nullptr;
}

canopy_status canopy_gradcheck(const char* name, canopy_gradcheck_callback cb, void* user,
                               int* n_failed) {
  return guarded([&] {
    int failed = 0;
    bool found = false;
    for (const harness::GradCheckCase& c : suite()) {
      if (name != nullptr && c.name != name) continue;
      found = true;
      const nn::GradCheckResult r = c.run();
      const bool pass = r.max_rel_error < harness::kGradCheckTolerance;
      if (!pass) ++failed;
      if (cb != nullptr) cb(c.name.c_str(), r.max_rel_error, r.checked, pass ? 1 : 0, user);
    }
    if (!found) throw ValidationError("unknown gradient check '" + std::string(name) + "'");
    if (n_failed != nullptr) *n_failed = failed;
  });
}

}  // extern "C"
