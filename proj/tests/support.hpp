#pragma once

#include <filesystem>
#include <string>

#include "canopy/core.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("canopy_test_" + tag + "_" + std::to_string(::canopy::fnv1a64(tag) & 0xffffff));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline canopy::PointCloud random_cloud(std::uint64_t seed, int n, double extent = 15.0,
                                       double max_z = 25.0) {
  canopy::Rng rng(seed);
  canopy::PointCloud c;
  c.plot_id = "p" + std::to_string(seed);
  for (int i = 0; i < n; ++i) {
    canopy::Point p;
    p.x = rng.uniform(-extent, extent);
    p.y = rng.uniform(-extent, extent);
    p.z = rng.uniform(0.0, max_z);
    p.return_count = 1 + static_cast<int>(rng.below(3));
    p.return_index = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(p.return_count)));
    c.points.push_back(p);
  }
  return c;
}

}  // namespace testing
