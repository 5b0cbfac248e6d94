// Command-line front end. Talks to the library only through the C API.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "canopy/canopy.h"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Carries a C API failure out to main with its exit code.
struct Failure : std::runtime_error {
  int code;
  Failure(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void check(canopy_status s) {
  if (s != CANOPY_OK) throw Failure(static_cast<int>(s), canopy_last_error());
}

struct DatasetDeleter {
  void operator()(canopy_dataset* d) const { canopy_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(canopy_model* m) const { canopy_model_free(m); }
};
struct ReportDeleter {
  void operator()(canopy_report* r) const { canopy_report_free(r); }
};
using Dataset = std::unique_ptr<canopy_dataset, DatasetDeleter>;
using Model = std::unique_ptr<canopy_model, ModelDeleter>;
using Report = std::unique_ptr<canopy_report, ReportDeleter>;

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out_dir = "out";

  std::uint64_t resolved_seed() const {
    if (seed) return *seed;
    if (const char* env = std::getenv("CANOPY_SEED"); env != nullptr && *env != '\0') {
      try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(env, &used);
        if (used == std::string(env).size()) return v;
      } catch (const std::exception&) {
      }
      throw Failure(1, std::string("CANOPY_SEED is not an unsigned integer: '") + env + "'");
    }
    return 0;
  }
};

std::string out_path(const Globals& g, const std::string& name) {
  return (fs::path(g.out_dir) / name).string();
}

void write_run_json(const Globals& g, const std::string& command, ordered_json args) {
  ordered_json j;
  j["command"] = command;
  j["version"] = canopy_version();
  j["seed"] = g.resolved_seed();
  j["threads"] = g.threads;
  j["out_dir"] = g.out_dir;
  j["args"] = std::move(args);
  fs::create_directories(g.out_dir);
  std::ofstream f(out_path(g, "run.json"), std::ios::binary);
  if (!f) throw Failure(2, "cannot write run.json");
  f << j.dump(2) << '\n';
}

canopy_split parse_split(const std::string& name) {
  canopy_split s{};
  check(canopy_parse_split(name.c_str(), &s));
  return s;
}

Dataset open_dataset(const std::string& manifest) {
  canopy_dataset* d = nullptr;
  check(canopy_dataset_open(manifest.c_str(), &d));
  return Dataset(d);
}

// Filters and splits a manifest without split labels; the split manifest is
// written next to the other outputs so later commands can reuse it.
struct SplitOptions {
  double validation = 0.15;
  double test = 0.15;
};

Dataset open_split_dataset(const Globals& g, const std::string& manifest, const SplitOptions& s) {
  Dataset d = open_dataset(manifest);
  if (canopy_dataset_has_splits(d.get()) == 0) {
    fs::create_directories(g.out_dir);
    check(canopy_dataset_prepare(d.get(), g.resolved_seed(), s.validation, s.test,
                                 out_path(g, "dropped.csv").c_str()));
    check(canopy_dataset_write_manifest(d.get(), out_path(g, "manifest.jsonl").c_str()));
  }
  return d;
}

std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s.precision(4);
  s << std::fixed << v;
  return s.str();
}

void print_report(const canopy_report* r, const std::string& label) {
  for (const char* target : {"agb", "volume", "carbon"}) {
    double r2 = 0, rmse = 0, mape = 0;
    check(canopy_report_metric(r, target, "r2", &r2));
    check(canopy_report_metric(r, target, "rmse", &rmse));
    check(canopy_report_metric(r, target, "mape", &mape));
    std::cout << label << ' ' << target << ": r2=" << format_metric(r2)
              << " rmse=" << format_metric(rmse) << " mape=" << format_metric(mape) << '\n';
  }
}

void evaluate_and_write(const Globals& g, const canopy_model* m, const canopy_dataset* d,
                        canopy_split split, double plot_radius) {
  if (canopy_dataset_count(d, split) == 0) {
    std::cout << "split is empty; no report written\n";
    return;
  }
  canopy_report* raw = nullptr;
  check(canopy_evaluate(m, d, split, plot_radius, g.threads, &raw));
  Report r(raw);
  check(canopy_report_write(r.get(), out_path(g, "report.json").c_str(),
                            out_path(g, "residuals.csv").c_str()));
  print_report(r.get(), canopy_model_kind(m));
}

void on_epoch(const canopy_epoch* row, void*) {
  std::printf("epoch %3d  lr %.3g  train %.5f  val %.5f  val_r2 %s\n", row->epoch, row->lr,
              row->train_loss, row->val_loss, format_metric(row->val_r2).c_str());
  std::fflush(stdout);
}

void on_gradcheck(const char* name, double err, size_t checked, int passed, void*) {
  std::printf("%-18s max_rel_error %.3e  entries %zu  %s\n", name, err, checked,
              passed ? "PASS" : "FAIL");
  std::fflush(stdout);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Failure(1, "cannot read '" + path + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plot-level biomass and volume regression from LiDAR point clouds"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(canopy_version()));

  Globals g;
  std::uint64_t seed_flag = 0;
  auto* seed_opt = app.add_option("--seed", seed_flag, "Random seed (default: $CANOPY_SEED or 0)");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Output directory");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate synthetic plots");
  int n_plots = 256;
  synth->add_option("--n", n_plots, "Number of plots")->check(CLI::PositiveNumber);

  // features
  auto* features = app.add_subcommand("features", "Export the per-plot feature table");
  std::string manifest;
  std::string split_name = "all";
  features->add_option("--manifest", manifest, "Manifest path")->required();
  features->add_option("--split", split_name, "all, train, validation, test or unassigned");

  // fit-baseline
  auto* fit = app.add_subcommand("fit-baseline", "Fit a feature baseline");
  std::string baseline_kind;
  SplitOptions split_opts;
  canopy_baseline_options bopts = canopy_baseline_options_default();
  bool grid_search = false;
  fit->add_option("kind", baseline_kind, "linear, power or rf")
      ->required()
      ->check(CLI::IsMember({"linear", "power", "rf"}));
  fit->add_option("--manifest", manifest, "Manifest path")->required();
  fit->add_option("--n-trees", bopts.n_trees, "Random forest size")->check(CLI::PositiveNumber);
  fit->add_flag("--grid-search", grid_search, "Choose forest hyper-parameters by OOB error");
  fit->add_option("--val-fraction", split_opts.validation, "Validation fraction");
  fit->add_option("--test-fraction", split_opts.test, "Test fraction");

  // train
  auto* train = app.add_subcommand("train", "Train a deep model");
  std::string model_kind;
  std::string config_path;
  bool tiny = false;
  bool no_augment = false;
  canopy_train_options topts = canopy_train_options_default();
  train->add_option("kind", model_kind, "minkowski, kpconv or pointnet")
      ->required()
      ->check(CLI::IsMember({"minkowski", "kpconv", "pointnet"}));
  train->add_option("--manifest", manifest, "Manifest path")->required();
  train->add_option("--config", config_path, "Model config file (key=value lines)");
  train->add_flag("--tiny", tiny, "Use the small test configuration");
  train->add_option("--epochs", topts.epochs, "Epochs")->check(CLI::NonNegativeNumber);
  train->add_option("--batch-size", topts.batch_size, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--lr", topts.lr, "Peak learning rate");
  train->add_option("--lr-min", topts.lr_min, "Learning rate floor");
  train->add_option("--t0", topts.t0, "First restart period")->check(CLI::PositiveNumber);
  train->add_option("--t-mult", topts.t_mult, "Period multiplier")->check(CLI::PositiveNumber);
  train->add_option("--weight-decay", topts.weight_decay, "Decoupled weight decay");
  train->add_option("--plot-radius", topts.plot_radius, "Plot radius in meters");
  train->add_flag("--no-augment", no_augment, "Disable augmentation");
  train->add_option("--val-fraction", split_opts.validation, "Validation fraction");
  train->add_option("--test-fraction", split_opts.test, "Test fraction");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a saved model on a split");
  std::string model_path;
  double plot_radius = 15.0;
  std::string eval_split = "test";
  eval->add_option("--model", model_path, "Model file")->required();
  eval->add_option("--manifest", manifest, "Manifest with split labels")->required();
  eval->add_option("--split", eval_split, "Split to evaluate");
  eval->add_option("--plot-radius", plot_radius, "Plot radius in meters");

  // predict
  auto* predict = app.add_subcommand("predict", "Predict AGB and volume");
  std::string cloud_path;
  double time_gap = 0.0;
  predict->add_option("--model", model_path, "Model file")->required();
  auto* p_manifest = predict->add_option("--manifest", manifest, "Manifest path");
  auto* p_cloud = predict->add_option("--cloud", cloud_path, "Single cloud CSV");
  p_manifest->excludes(p_cloud);
  predict->add_option("--split", split_name, "Split to predict (with --manifest)");
  predict->add_option("--time-gap", time_gap, "Years between scan and field work (with --cloud)");
  predict->add_option("--plot-radius", plot_radius, "Plot radius in meters");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  bool all_checks = false;
  std::string check_name;
  bool list_checks = false;
  auto* all_flag = gradcheck->add_flag("--all", all_checks, "Run every check");
  auto* op_opt = gradcheck->add_option("--op", check_name, "Run one check");
  gradcheck->add_flag("--list", list_checks, "List check names");
  all_flag->excludes(op_opt);

  // compare
  auto* compare = app.add_subcommand("compare", "Rank evaluation reports");
  std::vector<std::string> report_paths;
  compare->add_option("reports", report_paths, "report.json files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  if (seed_opt->count() > 0) g.seed = seed_flag;

  try {
    if (*synth) {
      write_run_json(g, "synth", {{"n", n_plots}});
      canopy_dataset* d = nullptr;
      check(canopy_synth(g.out_dir.c_str(), n_plots, g.resolved_seed(), &d));
      Dataset ds(d);
      std::cout << "wrote " << canopy_dataset_count(d, CANOPY_SPLIT_ALL) << " plots to "
                << out_path(g, "manifest.jsonl") << '\n';
    } else if (*features) {
      write_run_json(g, "features", {{"manifest", manifest}, {"split", split_name}});
      Dataset d = open_dataset(manifest);
      check(canopy_features_export(d.get(), parse_split(split_name), g.threads,
                                   out_path(g, "features.csv").c_str()));
      std::cout << "wrote " << out_path(g, "features.csv") << '\n';
    } else if (*fit) {
      bopts.grid_search = grid_search ? 1 : 0;
      bopts.seed = g.resolved_seed();
      bopts.threads = g.threads;
      write_run_json(g, "fit-baseline",
                     {{"kind", baseline_kind},
                      {"manifest", manifest},
                      {"n_trees", bopts.n_trees},
                      {"grid_search", grid_search},
                      {"val_fraction", split_opts.validation},
                      {"test_fraction", split_opts.test}});
      Dataset d = open_split_dataset(g, manifest, split_opts);
      canopy_model* raw = nullptr;
      check(canopy_fit_baseline(d.get(), baseline_kind.c_str(), &bopts, &raw));
      Model m(raw);
      check(canopy_model_save(m.get(), out_path(g, "model.bin").c_str()));
      evaluate_and_write(g, m.get(), d.get(), CANOPY_SPLIT_TEST, plot_radius);
    } else if (*train) {
      std::string config_text;
      if (!config_path.empty()) config_text = read_text(config_path);
      topts.model_config = config_text.c_str();
      topts.tiny = tiny ? 1 : 0;
      topts.augment = no_augment ? 0 : 1;
      topts.seed = g.resolved_seed();
      topts.threads = g.threads;
      const std::string history = out_path(g, "history.csv");
      topts.history_csv = history.c_str();
      topts.on_epoch = on_epoch;
      write_run_json(g, "train",
                     {{"kind", model_kind},
                      {"manifest", manifest},
                      {"config", config_text},
                      {"tiny", tiny},
                      {"epochs", topts.epochs},
                      {"batch_size", topts.batch_size},
                      {"lr", topts.lr},
                      {"lr_min", topts.lr_min},
                      {"t0", topts.t0},
                      {"t_mult", topts.t_mult},
                      {"weight_decay", topts.weight_decay},
                      {"plot_radius", topts.plot_radius},
                      {"augment", !no_augment},
                      {"val_fraction", split_opts.validation},
                      {"test_fraction", split_opts.test}});
      Dataset d = open_split_dataset(g, manifest, split_opts);
      canopy_model* raw = nullptr;
      check(canopy_train(d.get(), model_kind.c_str(), &topts, &raw));
      Model m(raw);
      check(canopy_model_save(m.get(), out_path(g, "checkpoint.bin").c_str()));
      std::cout << "best epoch " << canopy_model_best_epoch(m.get()) << '\n';
      evaluate_and_write(g, m.get(), d.get(), CANOPY_SPLIT_TEST, topts.plot_radius);
    } else if (*eval) {
      write_run_json(g, "eval", {{"model", model_path},
                                 {"manifest", manifest},
                                 {"split", eval_split},
                                 {"plot_radius", plot_radius}});
      canopy_model* raw = nullptr;
      check(canopy_model_load(model_path.c_str(), &raw));
      Model m(raw);
      Dataset d = open_dataset(manifest);
      const canopy_split split = parse_split(eval_split);
      if (canopy_dataset_count(d.get(), split) == 0)
        throw Failure(1, "split '" + eval_split + "' is empty");
      evaluate_and_write(g, m.get(), d.get(), split, plot_radius);
    } else if (*predict) {
      if (manifest.empty() && cloud_path.empty())
        throw Failure(1, "predict needs --manifest or --cloud");
      write_run_json(g, "predict", {{"model", model_path},
                                    {"manifest", manifest},
                                    {"cloud", cloud_path},
                                    {"split", split_name},
                                    {"time_gap", time_gap},
                                    {"plot_radius", plot_radius}});
      canopy_model* raw = nullptr;
      check(canopy_model_load(model_path.c_str(), &raw));
      Model m(raw);
      if (!cloud_path.empty()) {
        double out[2] = {0.0, 0.0};
        check(canopy_model_predict_cloud(m.get(), cloud_path.c_str(), time_gap, plot_radius, out));
        std::printf("agb %.6g\nvolume %.6g\n", out[0], out[1]);
      } else {
        Dataset d = open_dataset(manifest);
        check(canopy_model_predict(m.get(), d.get(), parse_split(split_name), plot_radius,
                                   g.threads, out_path(g, "predictions.csv").c_str()));
        std::cout << "wrote " << out_path(g, "predictions.csv") << '\n';
      }
    } else if (*gradcheck) {
      if (list_checks) {
        for (size_t i = 0; i < canopy_gradcheck_count(); ++i)
          std::cout << canopy_gradcheck_name(i) << '\n';
        return 0;
      }
      if (!all_checks && check_name.empty()) throw Failure(1, "gradcheck needs --all or --op");
      write_run_json(g, "gradcheck", {{"all", all_checks}, {"op", check_name}});
      int failed = 0;
      check(canopy_gradcheck(all_checks ? nullptr : check_name.c_str(), on_gradcheck, nullptr,
                             &failed));
      std::printf("%d check(s) above %.0e\n", failed, canopy_gradcheck_tolerance());
      if (failed > 0) return 2;
    } else if (*compare) {
      write_run_json(g, "compare", {{"reports", report_paths}});
      std::vector<const char*> paths;
      for (const std::string& p : report_paths) paths.push_back(p.c_str());
      check(canopy_compare(paths.data(), paths.size(), out_path(g, "compare.csv").c_str()));
      std::cout << read_text(out_path(g, "compare.csv"));
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.what() << '\n';
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
