#pragma once

// Sparse voxel tensors: quantization, kernel maps, generalized sparse
// convolution, pooling and radius neighborhoods. Feature matrices are
// row-major with one row per active voxel, rows in canonical key order.

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace canopy::sparse {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector3 = Eigen::Vector3d;

struct VoxelKey {
  std::int32_t b = 0;  // batch element
  std::int32_t i = 0;
  std::int32_t j = 0;
  std::int32_t k = 0;

  auto operator<=>(const VoxelKey&) const = default;
};

struct SparseTensor {
  std::vector<VoxelKey> keys;  // sorted, unique
  Matrix features;             // keys.size() x C
  int stride_level = 1;
  double base_grid_m = 1.0;

  std::size_t size() const { return keys.size(); }
  Eigen::Index channels() const { return features.cols(); }
};

using Offset = std::array<int, 3>;

/// Cubic kernel offsets, each component in [-k/2, k/2], in (di, dj, dk)
/// lexicographic order. The order fixes the accumulation order.
std::vector<Offset> cubic_offsets(int kernel_size);

/// Floor division that rounds toward negative infinity.
inline std::int32_t floor_div(std::int32_t a, std::int32_t s) {
  std::int32_t q = a / s;
  if ((a % s != 0) && ((a < 0) != (s < 0))) --q;
  return q;
}

/// Open-addressing hash index from key to row.
class KeyIndex {
 public:
  explicit KeyIndex(std::span<const VoxelKey> keys);
  int find(const VoxelKey& key) const;  // -1 when absent

 private:
  std::vector<std::uint64_t> slots_;
  std::vector<int> rows_;
  std::uint64_t mask_ = 0;
  int shift_ = 64;
};

std::uint64_t pack_key(const VoxelKey& key);

/// Distinct floor(key / stride) of the inputs, sorted.
std::vector<VoxelKey> strided_keys(std::span<const VoxelKey> keys, int stride);

/// For every kernel offset, the (input row, output row) pairs it connects.
/// Pairs are ordered by output row.
struct KernelMap {
  std::vector<std::vector<std::pair<int, int>>> pairs;
  std::size_t n_in = 0;
  std::size_t n_out = 0;
};

/// Output key o gathers inputs at o * stride + offset.
KernelMap convolution_map(std::span<const VoxelKey> in_keys,
                          std::span<const VoxelKey> out_keys,
                          std::span<const Offset> offsets, int stride);

/// Output key o pools inputs in the window [o * stride, o * stride + kernel - 1].
KernelMap pooling_map(std::span<const VoxelKey> in_keys,
                      std::span<const VoxelKey> out_keys, int kernel, int stride);

/// sum_offset W_offset' f_in + bias. `weights` stacks the per-offset
/// (C_in x C_out) blocks vertically.
Matrix apply_convolution(const KernelMap& map, const Matrix& in, const Matrix& weights,
                         const Eigen::RowVectorXd& bias);

struct ConvWeights {
  int kernel_size = 1;
  Matrix weights;  // (offsets * C_in) x C_out
  Eigen::RowVectorXd bias;
};

SparseTensor sparse_conv3d(const SparseTensor& input, const ConvWeights& w, int stride);

SparseTensor sparse_maxpool(const SparseTensor& input, int kernel, int stride);

/// Mean of each batch element's rows, summed in key order. One row per
/// batch element 0..max(b).
Matrix global_avg_pool(const SparseTensor& input);

/// Row ranges [begin, end) of each batch element in a sorted key list.
std::vector<std::pair<int, int>> batch_ranges(std::span<const VoxelKey> keys);

// ---------------------------------------------------------------------------
// Quantization

/// Voxelizes points (n x 3) with per-point features (n x C) at `grid_m`.
/// Features of points sharing a voxel are averaged; rows within a voxel are
/// summed in a canonical order so the result ignores input order.
SparseTensor grid_sample(const Matrix& positions, const Matrix& features, double grid_m,
                         int batch = 0);

struct PointSet {
  Matrix positions;  // n x 3
  Matrix features;   // n x C
};

/// Same bucketing as grid_sample but emits the mean position of each cell.
PointSet grid_sample_mean_points(const Matrix& positions, const Matrix& features,
                                 double grid_m);

/// Concatenates per-sample tensors, rewriting batch indices to 0..n-1.
SparseTensor concat_batch(std::span<const SparseTensor> parts);

// ---------------------------------------------------------------------------
// Neighborhoods

/// Indices of support points within distance <= r of each query, ascending.
std::vector<std::vector<int>> radius_neighbors(const Matrix& queries, const Matrix& support,
                                               double r);

}  // namespace canopy::sparse
