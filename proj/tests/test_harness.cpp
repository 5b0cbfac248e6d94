#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "canopy/harness.hpp"
#include "support.hpp"

using namespace canopy;
using namespace canopy::harness;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<PlotRecord> small_dataset(const std::filesystem::path& dir, int n, std::uint64_t seed) {
  const auto recs = synth_generate(SyntheticConfig{}, n, seed, dir);
  const auto kept = filter_dataset(recs, csv_cloud_loader()).survivors;
  return assign_splits(kept, seed);
}

TrainConfig quick_config() {
  TrainConfig tc;
  tc.kind = models::ModelKind::pointnet;
  tc.model_config = models::to_text(models::PointNetConfig::tiny());
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 5;
  return tc;
}

}  // namespace

TEST_CASE("synthetic plots: empty plot and a single tree") {
  const SyntheticConfig cfg;
  Rng rng(1);
  const SyntheticPlot empty = simulate_plot({}, 0.0, cfg, rng);
  CHECK(empty.targets.agb == 0.0);
  CHECK(empty.targets.volume == 0.0);
  CHECK(!empty.cloud.points.empty());
  for (const Point& p : empty.cloud.points) CHECK(p.z <= kMinimumTreeHeight);

  const Tree tree{2.0, -3.0, 20.0, true};
  const SyntheticPlot one = simulate_plot({tree}, 0.0, cfg, rng);
  const double cr = 0.13 * 20.0;
  const double volume = 0.0032 * std::pow(20.0, 1.2) * cr * cr;
  const double area_ha = std::numbers::pi * 15.0 * 15.0 / 10000.0;
  CHECK(one.targets.volume == doctest::Approx(volume / area_ha).epsilon(1e-12));
  CHECK(one.targets.agb == doctest::Approx(volume * 0.38 * 1.3 / area_ha).epsilon(1e-12));
  CHECK(one.conifer_fraction == 100.0);
}

TEST_CASE("synthetic plots: biomass grows with the number of trees") {
  const SyntheticConfig cfg;
  std::vector<double> counts, agb;
  for (int s = 0; s < 100; ++s) {
    Rng rng(static_cast<std::uint64_t>(s));
    const int n = 1 + s;
    std::vector<Tree> trees;
    for (int i = 0; i < n; ++i)
      trees.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(15.0, 25.0), rng.bernoulli(0.5)});
    Rng sim(99);
    const SyntheticPlot p = simulate_plot(trees, 0.0, cfg, sim);
    counts.push_back(n);
    agb.push_back(p.targets.agb);
    std::vector<Tree> doubled = trees;
    doubled.insert(doubled.end(), trees.begin(), trees.end());
    Rng sim2(99);
    CHECK(simulate_plot(doubled, 0.0, cfg, sim2).targets.agb == doctest::Approx(2.0 * p.targets.agb));
  }
  CHECK(pearson(ranks(counts), ranks(agb)) > 0.95);
}

TEST_CASE("synth_generate: reproducible files, zero-tree plots are filtered") {
  testing::TempDir a("synth_a"), b("synth_b");
  SyntheticConfig cfg;
  cfg.zero_tree_prob = 0.3;
  const auto ra = synth_generate(cfg, 20, 7, a.path());
  const auto rb = synth_generate(cfg, 20, 7, b.path());
  REQUIRE(ra.size() == rb.size());
  CHECK(file_hash(a / "manifest.jsonl") == file_hash(b / "manifest.jsonl"));
  for (std::size_t i = 0; i < ra.size(); ++i)
    CHECK(file_hash(ra[i].cloud_path) == file_hash(rb[i].cloud_path));

  const FilterResult fr = filter_dataset(ra, csv_cloud_loader());
  std::size_t zero = 0;
  for (const PlotRecord& r : ra)
    if (r.targets.agb == 0.0 && !r.error_flags.harvested && !r.error_flags.unreasonable) ++zero;
  CHECK(zero > 0);
  for (const PlotRecord& r : fr.survivors) CHECK(r.targets.agb > 0.0);
}

TEST_CASE("metrics: definitions") {
  TargetMetrics m = compute_metrics({100, 200}, {90, 220});
  CHECK(m.rmse == doctest::Approx(std::sqrt(250.0)).epsilon(1e-12));
  CHECK(std::abs(m.rmse - 15.811) < 1e-3);
  CHECK(m.mape == 10.0);
  CHECK(m.n == 2);

  m = compute_metrics({1, 2, 3}, {1, 2, 3});
  CHECK(m.r2 == 1.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.mape == 0.0);

  m = compute_metrics({1, 2, 3}, {2, 2, 2});
  CHECK(m.r2 == 0.0);

  m = compute_metrics({0, 100, 200}, {5, 90, 220});
  CHECK(m.excluded_n == 1);
  CHECK(m.mape == 10.0);
  CHECK(m.n == 3);

  m = compute_metrics({4, 4}, {3, 5});
  CHECK(!m.r2_defined);
  CHECK(std::isnan(m.r2));
}

TEST_CASE("conifer bins partition [0, 100]") {
  CHECK(conifer_bin(0.0) == "0");
  CHECK(conifer_bin(1e-9) == "(0,33]");
  CHECK(conifer_bin(33.0) == "(0,33]");
  CHECK(conifer_bin(33.5) == "(33,66]");
  CHECK(conifer_bin(66.0) == "(33,66]");
  CHECK(conifer_bin(99.9) == "(66,100)");
  CHECK(conifer_bin(100.0) == "100");
}

TEST_CASE("reports: residual round trip reproduces every metric") {
  testing::TempDir dir("report");
  Rng rng(3);
  std::vector<PlotRecord> recs;
  Eigen::MatrixXd pred(30, 2);
  for (int i = 0; i < 30; ++i) {
    PlotRecord r;
    r.plot_id = "p" + std::to_string(i);
    r.targets = {i == 0 ? 0.0 : rng.uniform(10, 300), rng.uniform(10, 500)};
    r.conifer_fraction = i % 5 == 0 ? 0.0 : (i % 5 == 1 ? 100.0 : rng.uniform(0.0, 100.0));
    recs.push_back(r);
    pred(i, 0) = r.targets.agb + 20 * rng.normal();
    pred(i, 1) = r.targets.volume + 30 * rng.normal();
  }
  const EvalReport rep = build_report("m", "test", recs, pred);
  CHECK(rep.metrics("agb").excluded_n == 1);
  CHECK(rep.metrics("carbon").r2 == doctest::Approx(rep.metrics("agb").r2).epsilon(1e-12));

  write_report_json(dir / "r.json", rep);
  write_residuals_csv(dir / "res.csv", rep);
  const EvalReport back = report_from_residuals("m", "test", read_residuals_csv(dir / "res.csv"));
  const EvalReport js = read_report_json(dir / "r.json");
  for (const std::string& t : kTargets) {
    CHECK(back.metrics(t).r2 == rep.metrics(t).r2);
    CHECK(back.metrics(t).rmse == rep.metrics(t).rmse);
    CHECK(back.metrics(t).mape == rep.metrics(t).mape);
    CHECK(js.metrics(t).rmse == rep.metrics(t).rmse);
    CHECK(js.metrics(t).n == rep.metrics(t).n);
  }
  CHECK(back.bins.size() == rep.bins.size());

  const auto rows = compare_models({rep});
  CHECK(rows.size() == kTargets.size());
  write_compare_csv(dir / "c.csv", rows);
  std::ifstream in(dir / "c.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "target,model,r2,rmse,mape");
}

TEST_CASE("baselines through the harness") {
  testing::TempDir dir("baseline");
  const auto recs = small_dataset(dir / "data", 64, 4);
  const auto train_recs = select_split(recs, Split::train);
  const FeatureTable ft = feature_matrix(train_recs, csv_cloud_loader());
  BaselineOptions opt;
  opt.n_trees = 10;
  for (BaselineKind k : {BaselineKind::linear, BaselineKind::power, BaselineKind::rf}) {
    CAPTURE(baseline_kind_name(k));
    const BaselineModel m = fit_baseline(k, ft, opt);
    save_baseline(dir / "m.bin", m);
    const BaselineModel l = load_baseline(dir / "m.bin");
    CHECK(l.kind == k);
    CHECK(l.predict(ft.X) == m.predict(ft.X));
  }
  CHECK(parse_baseline_kind("rf") == BaselineKind::rf);
  CHECK_THROWS_AS(parse_baseline_kind("svm"), ValidationError);
}

TEST_CASE("train: zero epochs, determinism and divergence") {
  testing::TempDir dir("train");
  const auto recs = small_dataset(dir / "data", 40, 9);
  const CloudLoader loader = csv_cloud_loader();

  TrainConfig zero = quick_config();
  zero.epochs = 0;
  const TrainResult z = train(recs, loader, zero);
  CHECK(z.history.empty());
  auto fresh = models::make_model(zero.kind, zero.model_config, z.trained.seed);
  const auto a_state = models::model_state_sections(*z.trained.model);
  const auto f_state = models::model_state_sections(*fresh);
  REQUIRE(a_state.size() == f_state.size());
  for (std::size_t i = 0; i < a_state.size(); ++i) CHECK(a_state[i].payload == f_state[i].payload);

  const TrainConfig tc = quick_config();
  const TrainResult r1 = train(recs, loader, tc);
  const TrainResult r2 = train(recs, loader, tc);
  save_checkpoint(dir / "a.bin", r1.trained);
  save_checkpoint(dir / "b.bin", r2.trained);
  CHECK(file_hash(dir / "a.bin") == file_hash(dir / "b.bin"));
  REQUIRE(r1.history.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(r1.history[e].train_loss == r2.history[e].train_loss);
    CHECK(r1.history[e].val_r2 == r2.history[e].val_r2);
  }
  TrainConfig other = tc;
  other.seed = 6;
  const TrainResult r3 = train(recs, loader, other);
  CHECK(r3.history[0].train_loss != r1.history[0].train_loss);

  const TrainedModel loaded = load_checkpoint(dir / "a.bin");
  const auto test_clouds = load_normalized(select_split(recs, Split::test), loader, 15.0, 1);
  CHECK(loaded.predict(test_clouds) == r1.trained.predict(test_clouds));
  CHECK(loaded.best_epoch == r1.trained.best_epoch);

  std::vector<PlotRecord> broken = recs;
  for (PlotRecord& r : broken)
    if (r.split == Split::train) r.targets.agb = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(train(broken, loader, tc), doctest::Contains("epoch 0"), RuntimeError);
}

TEST_CASE("recomputed normalization statistics match a full-batch pass") {
  testing::TempDir dir("bnstats");
  const auto recs = small_dataset(dir / "data", 30, 2);
  TrainConfig tc = quick_config();
  tc.epochs = 1;
  tc.batch_size = 1000;  // one batch: the average equals that batch's statistics
  const TrainResult r = train(recs, csv_cloud_loader(), tc);
  const auto clouds = load_normalized(select_split(recs, Split::train), csv_cloud_loader(), 15.0, 1);
  std::vector<models::Sample> batch;
  for (const PointCloud& c : clouds) batch.push_back(models::make_sample(c));
  auto probe = models::make_model(tc.kind, tc.model_config, 1);
  models::load_model_state(*probe, models::model_state_sections(*r.trained.model));
  probe->forward(batch, true);
  // momentum 0.1 update from the stored statistics toward the same batch
  auto stored = r.trained.model->buffers();
  auto updated = probe->buffers();
  REQUIRE(stored.size() == updated.size());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const double diff = (updated[i].second->running_mean - stored[i].second->running_mean).cwiseAbs().maxCoeff();
    CHECK(diff < 1e-9);
  }
}
