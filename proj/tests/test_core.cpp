#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "canopy/core.hpp"
#include "canopy/harness.hpp"
#include "support.hpp"

using namespace canopy;

namespace {

PointCloud cloud_of(std::initializer_list<std::array<double, 3>> xyz) {
  PointCloud c;
  for (const auto& p : xyz) c.points.push_back({p[0], p[1], p[2], 1, 1});
  return c;
}

// Variance of N(0, s^2) truncated to [-c, c]:
// s^2 * (1 - 2 a phi(a) / (2 Phi(a) - 1)), a = c / s.
double truncated_normal_variance(double variance, double clip) {
  const double s = std::sqrt(variance);
  const double a = clip / s;
  const double phi = std::exp(-0.5 * a * a) / std::sqrt(2.0 * std::numbers::pi);
  const double mass = std::erf(a / std::sqrt(2.0));
  return variance * (1.0 - 2.0 * a * phi / mass);
}

}  // namespace

TEST_CASE("normalize_cloud: symmetric pair") {
  const PointCloud out = normalize_cloud(cloud_of({{15, 0, 2}, {-15, 0, 4}}), 15.0);
  CHECK(out.points[0].x == doctest::Approx(1.0));
  CHECK(out.points[1].x == doctest::Approx(-1.0));
  CHECK(out.points[0].y == 0.0);
  CHECK(out.points[0].z == 2.0);
  CHECK(out.points[1].z == 4.0);
}

TEST_CASE("normalize_cloud: singleton goes to the origin") {
  const PointCloud out = normalize_cloud(cloud_of({{7, 3, 1}}), 15.0);
  CHECK(out.points[0].x == 0.0);
  CHECK(out.points[0].y == 0.0);
  CHECK(out.points[0].z == 1.0);
}

TEST_CASE("normalize_cloud: moments of a random cloud") {
  const PointCloud in = testing::random_cloud(3, 100, 20.0);
  std::size_t outside = 0;
  const PointCloud out = normalize_cloud(in, 15.0, &outside);
  long double sum = 0.0L;
  double lo = 1e300, hi = -1e300, max_abs = 0.0;
  for (std::size_t i = 0; i < in.points.size(); ++i) {
    sum += out.points[i].x;
    lo = std::min(lo, in.points[i].x);
    hi = std::max(hi, in.points[i].x);
    max_abs = std::max(max_abs, std::abs(out.points[i].x));
    CHECK(out.points[i].z == in.points[i].z);
  }
  CHECK(std::abs(static_cast<double>(sum / 100.0L)) < 1e-12);
  // The mean lies inside [lo, hi], so no point is further than the range.
  CHECK(max_abs <= (hi - lo) / 15.0 + 1e-12);
  std::size_t count = 0;
  for (const Point& p : out.points)
    if (std::abs(p.x) > 1.0 || std::abs(p.y) > 1.0) ++count;
  CHECK(outside == count);
}

TEST_CASE("normalize_cloud: idempotent on centered clouds, rejects empty") {
  const PointCloud once = normalize_cloud(testing::random_cloud(4, 50), 15.0);
  const PointCloud twice = normalize_cloud(once, 1.0);
  for (std::size_t i = 0; i < once.points.size(); ++i) {
    CHECK(std::abs(twice.points[i].x - once.points[i].x) < 1e-12);
    CHECK(std::abs(twice.points[i].y - once.points[i].y) < 1e-12);
  }
  CHECK_THROWS_WITH_AS(normalize_cloud(PointCloud{}, 15.0), "empty point cloud", ValidationError);
}

TEST_CASE("augment: identity and half turn") {
  const PointCloud in = normalize_cloud(testing::random_cloud(5, 40), 15.0);
  Rng rng(1);
  const PointCloud same = augment(in, rng, AugmentConfig::identity());
  for (std::size_t i = 0; i < in.points.size(); ++i) {
    CHECK(same.points[i].x == in.points[i].x);
    CHECK(same.points[i].y == in.points[i].y);
    CHECK(same.points[i].z == in.points[i].z);
  }

  AugmentConfig half = AugmentConfig::identity();
  half.fixed_angle = std::numbers::pi;
  Rng rng2(2);
  const PointCloud turned = augment(in, rng2, half);
  double cx = 0, cy = 0;
  for (const Point& p : in.points) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(in.points.size());
  cy /= static_cast<double>(in.points.size());
  for (std::size_t i = 0; i < in.points.size(); ++i) {
    CHECK(turned.points[i].x == doctest::Approx(2 * cx - in.points[i].x).epsilon(1e-12));
    CHECK(turned.points[i].y == doctest::Approx(2 * cy - in.points[i].y).epsilon(1e-12));
    CHECK(turned.points[i].z == in.points[i].z);
  }
}

TEST_CASE("augment: jitter moments match the truncated normal") {
  PointCloud in;
  in.points.assign(10000, Point{0.0, 0.0, 5.0, 1, 1});
  AugmentConfig cfg = AugmentConfig::identity();
  cfg.jitter = true;
  Rng rng(7);
  const PointCloud out = augment(in, rng, cfg);
  const double expected = truncated_normal_variance(cfg.jitter_variance, cfg.jitter_clip);
  double sx = 0, sy = 0, sz = 0, max_abs = 0;
  for (const Point& p : out.points) {
    sx += p.x * p.x;
    sy += p.y * p.y;
    sz += (p.z - 5.0) * (p.z - 5.0);
    max_abs = std::max({max_abs, std::abs(p.x), std::abs(p.y), std::abs(p.z - 5.0)});
  }
  for (double s : {sx, sy, sz}) CHECK(std::abs(s / 10000.0 - expected) < 0.1 * expected);
  CHECK(max_abs <= 0.05);
}

TEST_CASE("augment: dropout keeps at least one point, streams are reproducible") {
  PointCloud single = cloud_of({{0, 0, 2}});
  AugmentConfig cfg;
  cfg.sample_dropout_prob = 1.0;
  cfg.point_dropout_rate = 1.0;
  Rng rng(3);
  CHECK(augment(single, rng, cfg).points.size() == 1);

  const PointCloud in = normalize_cloud(testing::random_cloud(9, 200), 15.0);
  Rng a = sample_stream(11, "plot_7", 4);
  Rng b = sample_stream(11, "plot_7", 4);
  const PointCloud x = augment(in, a, AugmentConfig{});
  const PointCloud y = augment(in, b, AugmentConfig{});
  REQUIRE(x.points.size() == y.points.size());
  for (std::size_t i = 0; i < x.points.size(); ++i) {
    CHECK(x.points[i].x == y.points[i].x);
    CHECK(x.points[i].z == y.points[i].z);
  }
  Rng c = sample_stream(11, "plot_7", 5);
  CHECK(c.next_u64() != sample_stream(11, "plot_7", 4).next_u64());
}

TEST_CASE("filter_dataset: flags, height rule and a brute-force re-filter") {
  testing::TempDir dir("filter");
  std::vector<PlotRecord> records;
  Rng rng(21);
  for (int i = 0; i < 10; ++i) {
    PlotRecord r;
    r.plot_id = "r" + std::to_string(i);
    r.cloud_path = dir / (r.plot_id + ".csv");
    PointCloud c;
    const double top = i == 3 ? 1.3 : rng.uniform(0.5, 20.0);
    c.points.push_back({0, 0, 0.0, 1, 1});
    c.points.push_back({1, 1, top, 1, 1});
    write_cloud_csv(r.cloud_path, c);
    r.error_flags.harvested = i == 1;
    r.error_flags.unreasonable = i == 2;
    r.error_flags.extra_trees = i == 4;
    r.error_flags.non_forest_objects = i == 5;
    records.push_back(r);
  }
  const FilterResult fr = filter_dataset(records, csv_cloud_loader());

  std::set<std::string> expected;
  for (const PlotRecord& r : records) {
    const PointCloud c = read_cloud_csv(r.cloud_path);
    double top = 0;
    for (const Point& p : c.points) top = std::max(top, p.z);
    if (!r.error_flags.harvested && !r.error_flags.unreasonable && top > 1.3)
      expected.insert(r.plot_id);
  }
  std::set<std::string> got;
  for (const PlotRecord& r : fr.survivors) got.insert(r.plot_id);
  CHECK(got == expected);
  CHECK(got.count("r3") == 0);
  CHECK(got.count("r4") == 1);
  CHECK(got.count("r5") == 1);
  bool harvested_reason = false;
  for (const DropEntry& d : fr.dropped)
    if (d.plot_id == "r1") harvested_reason = d.reason == "harvested";
  CHECK(harvested_reason);

  PlotRecord missing = records[0];
  missing.cloud_path = dir / "nope.csv";
  CHECK_THROWS_AS(filter_dataset({missing}, csv_cloud_loader()), ValidationError);
}

TEST_CASE("assign_splits: grouping, eligibility and sizes") {
  std::vector<PlotRecord> records;
  Rng rng(5);
  for (int p = 0; p < 100; ++p) {
    const int copies = 1 + static_cast<int>(rng.below(2));
    for (int c = 0; c < copies; ++c) {
      PlotRecord r;
      r.plot_id = "plot" + std::to_string(p);
      r.time_gap_years = p < 20 ? 3.0 : rng.uniform(-1.0, 1.0);
      records.push_back(r);
    }
  }
  const auto out = assign_splits(records, 42);
  REQUIRE(out.size() == records.size());
  std::map<std::string, std::set<Split>> by_plot;
  std::map<Split, std::set<std::string>> plots;
  for (const PlotRecord& r : out) {
    by_plot[r.plot_id].insert(r.split);
    plots[r.split].insert(r.plot_id);
    if (std::abs(r.time_gap_years) > 1.0) CHECK(r.split == Split::train);
  }
  for (const auto& [id, splits] : by_plot) CHECK(splits.size() == 1);
  CHECK(std::abs(static_cast<int>(plots[Split::validation].size()) - 15) <= 1);
  CHECK(std::abs(static_cast<int>(plots[Split::test].size()) - 15) <= 1);
  CHECK(std::abs(static_cast<int>(plots[Split::train].size()) - 70) <= 1);

  const auto again = assign_splits(records, 42);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].split == again[i].split);

  std::vector<PlotRecord> far(3);
  for (auto& r : far) r.time_gap_years = 5.0;
  far[0].plot_id = "a";
  far[1].plot_id = "b";
  far[2].plot_id = "c";
  CHECK_THROWS_AS(assign_splits(far, 1), ValidationError);
}

TEST_CASE("carbon_from_biomass and metric invariance") {
  CHECK(carbon_from_biomass(0.0) == 0.0);
  CHECK(carbon_from_biomass(100.0, 0.5) == 50.0);
  CHECK_THROWS_AS(carbon_from_biomass(1.0, 0.0), ValidationError);
  CHECK_THROWS_AS(carbon_from_biomass(-1.0), ValidationError);
  CHECK(carbon_from_prediction(-4.0) == -2.0);
  CHECK_THROWS_AS(carbon_from_prediction(1.0, 1.5), ValidationError);

  Rng rng(8);
  std::vector<double> y, p, yc, pc;
  for (int i = 0; i < 50; ++i) {
    y.push_back(rng.uniform(1, 300));
    p.push_back(y.back() + rng.normal() * 30);
    yc.push_back(carbon_from_biomass(y.back(), 0.37));
    pc.push_back(carbon_from_prediction(p.back(), 0.37));
  }
  const auto a = harness::compute_metrics(y, p);
  const auto c = harness::compute_metrics(yc, pc);
  CHECK(c.r2 == doctest::Approx(a.r2).epsilon(1e-12));
  CHECK(c.mape == doctest::Approx(a.mape).epsilon(1e-12));
  CHECK(c.rmse == doctest::Approx(0.37 * a.rmse).epsilon(1e-12));
}

TEST_CASE("cloud CSV and manifest round trip") {
  testing::TempDir dir("io");
  PointCloud c = testing::random_cloud(12, 30);
  write_cloud_csv(dir / "c.csv", c);
  const PointCloud back = read_cloud_csv(dir / "c.csv");
  REQUIRE(back.points.size() == c.points.size());
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    CHECK(back.points[i].x == c.points[i].x);
    CHECK(back.points[i].z == c.points[i].z);
    CHECK(back.points[i].return_count == c.points[i].return_count);
  }

  {
    std::ofstream bad(dir / "neg.csv");
    bad << "x,y,z,return_number,num_returns\n0,0,-0.5,1,1\n";
  }
  CHECK_THROWS_AS(read_cloud_csv(dir / "neg.csv"), ValidationError);

  PlotRecord r;
  r.plot_id = "plot_a";
  r.cloud_path = dir / "c.csv";
  r.targets = {120.5, 250.25};
  r.conifer_fraction = 40.0;
  r.error_flags.extra_trees = true;
  r.split = Split::test;
  r.time_gap_years = -0.5;
  write_manifest(dir / "m.jsonl", {r});
  const auto recs = read_manifest(dir / "m.jsonl");
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].plot_id == "plot_a");
  CHECK(recs[0].targets.volume == 250.25);
  CHECK(recs[0].error_flags.extra_trees);
  CHECK(recs[0].split == Split::test);
  CHECK(recs[0].time_gap_years == -0.5);
  CHECK(std::filesystem::equivalent(recs[0].cloud_path, r.cloud_path));
}
