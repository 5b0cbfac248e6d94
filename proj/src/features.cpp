#include "canopy/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace canopy {

const std::array<std::string, kFeatureCount>& feature_names() {
  static const std::array<std::string, kFeatureCount> names = [] {
    const std::array<std::string_view, kStatsPerSet> stats = {
        "mean_z", "std_z", "cv_z", "skew_z", "kurt_z", "p5",  "p10",
        "p25",    "p50",   "p75",  "p90",    "p95",    "p99"};
    std::array<std::string, kFeatureCount> out;
    for (std::size_t i = 0; i < kStatsPerSet; ++i) {
      out[i] = "all_" + std::string(stats[i]);
      out[kStatsPerSet + i] = "ag_" + std::string(stats[i]);
    }
    out[kFeatureInterceptionRatio] = "interception_ratio";
    return out;
  }();
  return names;
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ValidationError("percentile of empty sample");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

namespace {

constexpr std::array<double, 8> kPercentiles = {0.05, 0.10, 0.25, 0.50,
                                                0.75, 0.90, 0.95, 0.99};

// Fills the 13 statistics of one height sample starting at `out`.
void describe(std::vector<double> z, double* out) {
  if (z.empty()) {
    std::fill(out, out + kStatsPerSet, 0.0);
    return;
  }
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  CompensatedSum s1;
  for (double v : z) s1.add(v);
  const double mean = s1.value() / n;
  CompensatedSum s2, s3, s4;
  for (double v : z) {
    const double d = v - mean;
    const double d2 = d * d;
    s2.add(d2);
    s3.add(d2 * d);
    s4.add(d2 * d2);
  }
  const double m2 = s2.value() / n;
  const double m3 = s3.value() / n;
  const double m4 = s4.value() / n;
  const double sd = std::sqrt(m2);
  out[0] = mean;
  out[1] = sd;
  out[2] = std::abs(mean) < 1e-9 ? 0.0 : sd / mean;
  if (m2 > 0.0) {
    out[3] = m3 / std::pow(m2, 1.5);
    out[4] = m4 / (m2 * m2);
  } else {
    out[3] = 0.0;
    out[4] = 0.0;
  }
  for (std::size_t i = 0; i < kPercentiles.size(); ++i)
    out[5 + i] = percentile_sorted(z, kPercentiles[i]);
}

}  // namespace

FeatureVector extract_features(const PointCloud& cloud) {
  std::vector<double> all;
  std::vector<double> above;
  for (const Point& p : cloud.points) {
    if (p.return_index != 1) continue;
    all.push_back(p.z);
    if (p.z > 1.0) above.push_back(p.z);
  }
  if (all.empty()) throw ValidationError("no first returns");
  FeatureVector fv;
  fv.above_ground_empty = above.empty();
  fv.values[kFeatureInterceptionRatio] =
      static_cast<double>(above.size()) / static_cast<double>(all.size());
  describe(std::move(all), fv.values.data());
  describe(std::move(above), fv.values.data() + kStatsPerSet);
  return fv;
}

FeatureTable feature_matrix(const std::vector<PlotRecord>& records,
                            const CloudLoader& loader, int threads) {
  const auto n = static_cast<Eigen::Index>(records.size());
  FeatureTable t;
  t.X.resize(n, static_cast<Eigen::Index>(kFeatureCount));
  t.agb.resize(n);
  t.volume.resize(n);
  t.plot_ids.resize(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const PlotRecord& r = records[i];
    FeatureVector fv;
    try {
      fv = extract_features(loader(r));
    } catch (const ValidationError& e) {
      throw ValidationError("plot '" + r.plot_id + "': " + e.what());
    }
    const auto row = static_cast<Eigen::Index>(i);
    for (std::size_t c = 0; c < kFeatureCount; ++c)
      t.X(row, static_cast<Eigen::Index>(c)) = fv.values[c];
    t.agb(row) = r.targets.agb;
    t.volume(row) = r.targets.volume;
    t.plot_ids[i] = r.plot_id;
  });
  return t;
}

void write_feature_csv(const std::filesystem::path& path, const FeatureTable& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
  out << "plot_id";
  for (const auto& name : feature_names()) out << ',' << name;
  out << ",agb,volume\n";
  for (Eigen::Index i = 0; i < t.X.rows(); ++i) {
    out << t.plot_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < t.X.cols(); ++c) out << ',' << format_double(t.X(i, c));
    out << ',' << format_double(t.agb(i)) << ',' << format_double(t.volume(i)) << '\n';
  }
}

}  // namespace canopy
