#include "canopy/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "unassigned";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  if (name == "unassigned" || name.empty()) return Split::unassigned;
  throw ValidationError("unknown split '" + name + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw RuntimeError("cannot format number");
  return std::string(buf, ptr);
}

namespace {

double parse_double(std::string_view s, const fs::path& path, std::size_t line) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ValidationError(path.string() + ":" + std::to_string(line) +
                          ": bad number '" + std::string(s) + "'");
  }
  return v;
}

int parse_int(std::string_view s, const fs::path& path, std::size_t line) {
  const double v = parse_double(s, path, line);
  if (v != std::floor(v)) {
    throw ValidationError(path.string() + ":" + std::to_string(line) +
                          ": expected an integer");
  }
  return static_cast<int>(v);
}

}  // namespace

PointCloud read_cloud_csv(const fs::path& path, std::string plot_id,
                          double time_gap_years) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read point cloud '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) {
    throw ValidationError("empty point cloud file '" + path.string() + "'");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,z,return_number,num_returns") {
    throw ValidationError("unexpected header in '" + path.string() + "'");
  }
  PointCloud cloud;
  cloud.plot_id = std::move(plot_id);
  cloud.time_gap_years = time_gap_years;
  std::size_t line_no = 1;
  std::array<std::string_view, 5> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::string_view rest(line);
    for (std::size_t f = 0; f < fields.size(); ++f) {
      const auto comma = rest.find(',');
      if ((comma == std::string_view::npos) != (f + 1 == fields.size())) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": expected 5 fields");
      }
      fields[f] = rest.substr(0, comma);
      if (comma != std::string_view::npos) rest.remove_prefix(comma + 1);
    }
    Point p;
    p.x = parse_double(fields[0], path, line_no);
    p.y = parse_double(fields[1], path, line_no);
    p.z = parse_double(fields[2], path, line_no);
    p.return_index = parse_int(fields[3], path, line_no);
    p.return_count = parse_int(fields[4], path, line_no);
    if (p.z < -1e-6) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": negative height");
    }
    if (p.z < 0.0) p.z = 0.0;
    if (p.return_index < 1 || p.return_count < 1 ||
        p.return_index > p.return_count) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": invalid return numbering");
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

void write_cloud_csv(const fs::path& path, const PointCloud& cloud) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
  out << "x,y,z,return_number,num_returns\n";
  for (const Point& p : cloud.points) {
    out << format_double(p.x) << ',' << format_double(p.y) << ','
        << format_double(p.z) << ',' << p.return_index << ',' << p.return_count
        << '\n';
  }
  if (!out) throw RuntimeError("write failed for '" + path.string() + "'");
}

namespace {

json record_to_json(const PlotRecord& r) {
  json j;
  j["plot_id"] = r.plot_id;
  j["cloud_path"] = r.cloud_path.generic_string();
  j["targets"] = {{"agb", r.targets.agb}, {"volume", r.targets.volume}};
  j["conifer_fraction"] = r.conifer_fraction;
  j["error_flags"] = {{"extra_trees", r.error_flags.extra_trees},
                      {"non_forest_objects", r.error_flags.non_forest_objects},
                      {"harvested", r.error_flags.harvested},
                      {"unreasonable", r.error_flags.unreasonable}};
  j["split"] = split_name(r.split);
  j["time_gap_years"] = r.time_gap_years;
  return j;
}

PlotRecord record_from_json(const json& j, const fs::path& base) {
  PlotRecord r;
  r.plot_id = j.at("plot_id").get<std::string>();
  fs::path cloud = j.at("cloud_path").get<std::string>();
  r.cloud_path = cloud.is_absolute() ? cloud : base / cloud;
  r.targets.agb = j.at("targets").at("agb").get<double>();
  r.targets.volume = j.at("targets").at("volume").get<double>();
  r.conifer_fraction = j.at("conifer_fraction").get<double>();
  const json& flags = j.at("error_flags");
  r.error_flags.extra_trees = flags.at("extra_trees").get<bool>();
  r.error_flags.non_forest_objects = flags.at("non_forest_objects").get<bool>();
  r.error_flags.harvested = flags.at("harvested").get<bool>();
  r.error_flags.unreasonable = flags.at("unreasonable").get<bool>();
  r.split = parse_split(j.value("split", std::string("unassigned")));
  r.time_gap_years = j.at("time_gap_years").get<double>();
  if (!std::isfinite(r.targets.agb) || !std::isfinite(r.targets.volume) ||
      r.targets.agb < 0.0 || r.targets.volume < 0.0) {
    throw ValidationError("plot '" + r.plot_id + "': targets must be finite and >= 0");
  }
  if (!(r.conifer_fraction >= 0.0 && r.conifer_fraction <= 100.0)) {
    throw ValidationError("plot '" + r.plot_id + "': conifer_fraction outside [0,100]");
  }
  return r;
}

}  // namespace

std::vector<PlotRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();
  std::vector<PlotRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json(json::parse(line), base));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
  return records;
}

void write_manifest(const fs::path& path, const std::vector<PlotRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
  const fs::path base = path.parent_path();
  for (PlotRecord r : records) {
    if (r.cloud_path.is_absolute() || !base.empty()) {
      std::error_code ec;
      auto rel = fs::relative(r.cloud_path, base.empty() ? fs::path(".") : base, ec);
      if (!ec && !rel.empty()) r.cloud_path = rel;
    }
    out << record_to_json(r).dump() << '\n';
  }
}

CloudLoader csv_cloud_loader() {
  return [](const PlotRecord& r) {
    return read_cloud_csv(r.cloud_path, r.plot_id, r.time_gap_years);
  };
}

PointCloud normalize_cloud(const PointCloud& cloud, double radius_m,
                           std::size_t* n_outside) {
  if (!(radius_m > 0.0)) throw ValidationError("normalization radius must be > 0");
  if (cloud.points.empty()) throw ValidationError("empty point cloud");
  CompensatedSum sx, sy;
  for (const Point& p : cloud.points) {
    sx.add(p.x);
    sy.add(p.y);
  }
  const double n = static_cast<double>(cloud.points.size());
  const double mx = sx.value() / n;
  const double my = sy.value() / n;
  PointCloud out = cloud;
  std::size_t outside = 0;
  for (Point& p : out.points) {
    p.x = (p.x - mx) / radius_m;
    p.y = (p.y - my) / radius_m;
    if (std::abs(p.x) > 1.0 || std::abs(p.y) > 1.0) ++outside;
  }
  if (n_outside) *n_outside = outside;
  return out;
}

Rng sample_stream(std::uint64_t global_seed, const std::string& plot_id,
                  std::uint64_t epoch) {
  return Rng(mix_seed(mix_seed(global_seed, fnv1a64(plot_id)), epoch));
}

PointCloud augment(const PointCloud& cloud, Rng& rng, const AugmentConfig& cfg) {
  PointCloud out = cloud;
  if (out.points.empty()) return out;

  // Draws happen unconditionally so that toggling one stage does not shift
  // the stream seen by the others.
  const double angle_draw = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool drop_sample = rng.bernoulli(cfg.sample_dropout_prob);

  const double theta = cfg.fixed_angle ? *cfg.fixed_angle : angle_draw;
  if ((cfg.rotate || cfg.fixed_angle) && theta != 0.0) {
    CompensatedSum sx, sy;
    for (const Point& p : out.points) {
      sx.add(p.x);
      sy.add(p.y);
    }
    const double n = static_cast<double>(out.points.size());
    const double cx = sx.value() / n;
    const double cy = sy.value() / n;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    for (Point& p : out.points) {
      const double dx = p.x - cx;
      const double dy = p.y - cy;
      p.x = cx + c * dx - s * dy;
      p.y = cy + s * dx + c * dy;
    }
  }

  if (drop_sample && cfg.point_dropout_rate > 0.0) {
    std::vector<Point> kept;
    kept.reserve(out.points.size());
    for (std::size_t i = 0; i < out.points.size(); ++i) {
      if (!rng.bernoulli(cfg.point_dropout_rate)) kept.push_back(out.points[i]);
    }
    if (kept.empty()) {
      kept.push_back(out.points[rng.below(out.points.size())]);
    }
    out.points = std::move(kept);
  }

  if (cfg.jitter && cfg.jitter_variance > 0.0) {
    const double sd = std::sqrt(cfg.jitter_variance);
    for (Point& p : out.points) {
      p.x += rng.truncated_normal(sd, cfg.jitter_clip);
      p.y += rng.truncated_normal(sd, cfg.jitter_clip);
      p.z += rng.truncated_normal(sd, cfg.jitter_clip);
    }
  }
  return out;
}

FilterResult filter_dataset(const std::vector<PlotRecord>& records,
                            const CloudLoader& loader) {
  FilterResult result;
  for (const PlotRecord& r : records) {
    if (r.error_flags.harvested) {
      result.dropped.push_back({r.plot_id, "harvested"});
      continue;
    }
    if (r.error_flags.unreasonable) {
      result.dropped.push_back({r.plot_id, "unreasonable"});
      continue;
    }
    PointCloud cloud;
    try {
      cloud = loader(r);
    } catch (const std::exception& e) {
      throw ValidationError("cannot load cloud '" + r.cloud_path.string() +
                            "': " + e.what());
    }
    const bool has_tall = std::any_of(
        cloud.points.begin(), cloud.points.end(),
        [](const Point& p) { return p.z > kMinimumTreeHeight; });
    if (!has_tall) {
      result.dropped.push_back({r.plot_id, "no points above 1.3 m"});
      continue;
    }
    result.survivors.push_back(r);
  }
  return result;
}

std::vector<PlotRecord> assign_splits(std::vector<PlotRecord> records,
                                      std::uint64_t seed,
                                      const SplitFractions& fractions) {
  if (fractions.validation < 0.0 || fractions.test < 0.0 ||
      fractions.validation + fractions.test > 1.0) {
    throw ValidationError("split fractions must be >= 0 and sum to <= 1");
  }
  // std::map keeps plot ids in a canonical order independent of input order.
  std::map<std::string, bool> eligible;
  for (const PlotRecord& r : records) {
    const bool near = std::abs(r.time_gap_years) <= 1.0;
    auto [it, inserted] = eligible.emplace(r.plot_id, near);
    if (!inserted) it->second = it->second && near;
  }
  std::vector<std::string> pool;
  for (const auto& [id, ok] : eligible)
    if (ok) pool.push_back(id);
  if (pool.empty()) throw ValidationError("no plots eligible for validation/test");

  const double n_plots = static_cast<double>(eligible.size());
  const auto n_val = static_cast<std::size_t>(std::llround(fractions.validation * n_plots));
  const auto n_test = static_cast<std::size_t>(std::llround(fractions.test * n_plots));
  if (n_val + n_test > pool.size()) {
    throw ValidationError("only " + std::to_string(pool.size()) +
                          " eligible plots for " + std::to_string(n_val + n_test) +
                          " validation/test slots");
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(pool));
  std::map<std::string, Split> assigned;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (i < n_val)
      assigned[pool[i]] = Split::validation;
    else if (i < n_val + n_test)
      assigned[pool[i]] = Split::test;
  }
  for (PlotRecord& r : records) {
    auto it = assigned.find(r.plot_id);
    r.split = it == assigned.end() ? Split::train : it->second;
  }
  return records;
}

double carbon_from_biomass(double agb, double factor) {
  if (agb < 0.0) throw ValidationError("biomass must be >= 0");
  if (!(factor > 0.0 && factor <= 1.0)) throw ValidationError("carbon factor must be in (0,1]");
  return factor * agb;
}

double carbon_from_prediction(double agb, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw ValidationError("carbon factor must be in (0,1]");
  return factor * agb;
}

}  // namespace canopy
