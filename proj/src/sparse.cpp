#include "canopy/sparse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "canopy/common.hpp"

namespace canopy::sparse {

namespace {

constexpr std::int64_t kCoordBias = 1 << 15;

std::uint64_t pack_field(std::int64_t v, std::int64_t bias, int bits) {
  const std::int64_t shifted = v + bias;
  if (shifted < 0 || shifted >= (std::int64_t{1} << bits))
    throw ValidationError("voxel coordinate out of range");
  return static_cast<std::uint64_t>(shifted);
}

// 3D cell key with 21 bits per axis for the neighbor search grid.
std::uint64_t pack_cell(std::int64_t i, std::int64_t j, std::int64_t k) {
  constexpr std::int64_t bias = 1 << 20;
  return (pack_field(i, bias, 21) << 42) | (pack_field(j, bias, 21) << 21) |
         pack_field(k, bias, 21);
}

std::int32_t to_cell(double v, double size) {
  const double c = std::floor(v / size);
  if (!(std::abs(c) < 1e9)) throw ValidationError("coordinate cannot be quantized");
  return static_cast<std::int32_t>(c);
}

}  // namespace

std::uint64_t pack_key(const VoxelKey& key) {
  return (pack_field(key.b, 0, 16) << 48) | (pack_field(key.i, kCoordBias, 16) << 32) |
         (pack_field(key.j, kCoordBias, 16) << 16) | pack_field(key.k, kCoordBias, 16);
}

std::vector<Offset> cubic_offsets(int kernel_size) {
  if (kernel_size < 1) throw ValidationError("kernel size must be >= 1");
  const int h = kernel_size / 2;
  std::vector<Offset> out;
  out.reserve(static_cast<std::size_t>(kernel_size * kernel_size * kernel_size));
  for (int a = -h; a <= kernel_size - 1 - h; ++a)
    for (int b = -h; b <= kernel_size - 1 - h; ++b)
      for (int c = -h; c <= kernel_size - 1 - h; ++c) out.push_back({a, b, c});
  return out;
}

namespace {

constexpr std::uint64_t kEmptySlot = ~std::uint64_t{0};
constexpr std::uint64_t kFibonacci = 0x9E3779B97F4A7C15ULL;

}  // namespace

KeyIndex::KeyIndex(std::span<const VoxelKey> keys) {
  std::size_t cap = 16;
  while (cap < 2 * keys.size()) cap *= 2;
  slots_.assign(cap, kEmptySlot);
  rows_.assign(cap, -1);
  mask_ = cap - 1;
  shift_ = 64 - std::countr_zero(cap);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    if (keys[r].b < 0 || keys[r].b >= 0xFFFF) throw ValidationError("batch index out of range");
    const std::uint64_t key = pack_key(keys[r]);
    std::uint64_t h = (key * kFibonacci) >> shift_;
    while (slots_[h] != kEmptySlot && slots_[h] != key) h = (h + 1) & mask_;
    if (slots_[h] == key) continue;  // duplicate key keeps its first row
    slots_[h] = key;
    rows_[h] = static_cast<int>(r);
  }
}

int KeyIndex::find(const VoxelKey& key) const {
  if (key.i + kCoordBias < 0 || key.i + kCoordBias >= (1 << 16) || key.j + kCoordBias < 0 ||
      key.j + kCoordBias >= (1 << 16) || key.k + kCoordBias < 0 || key.k + kCoordBias >= (1 << 16))
    return -1;
  if (key.b < 0 || key.b >= 0xFFFF) return -1;
  const std::uint64_t packed = pack_key(key);
  std::uint64_t h = (packed * kFibonacci) >> shift_;
  while (slots_[h] != kEmptySlot) {
    if (slots_[h] == packed) return rows_[h];
    h = (h + 1) & mask_;
  }
  return -1;
}

std::vector<VoxelKey> strided_keys(std::span<const VoxelKey> keys, int stride) {
  if (stride < 1) throw ValidationError("stride must be >= 1");
  std::vector<VoxelKey> out;
  out.reserve(keys.size());
  for (const VoxelKey& k : keys)
    out.push_back({k.b, floor_div(k.i, stride), floor_div(k.j, stride), floor_div(k.k, stride)});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

bool is_cubic(std::span<const Offset> offsets, int& kernel_size) {
  const auto n = offsets.size();
  int k = static_cast<int>(std::lround(std::cbrt(static_cast<double>(n))));
  if (static_cast<std::size_t>(k * k * k) != n) return false;
  const auto ref = cubic_offsets(k);
  if (!std::equal(ref.begin(), ref.end(), offsets.begin())) return false;
  kernel_size = k;
  return true;
}

}  // namespace

KernelMap convolution_map(std::span<const VoxelKey> in_keys,
                          std::span<const VoxelKey> out_keys,
                          std::span<const Offset> offsets, int stride) {
  KernelMap map;
  map.pairs.resize(offsets.size());
  map.n_in = in_keys.size();
  map.n_out = out_keys.size();
  int kernel = 0;
  const bool cubic = is_cubic(offsets, kernel);

  if (!cubic || offsets.size() <= 27) {
    const KeyIndex index(in_keys);
    for (std::size_t o = 0; o < out_keys.size(); ++o) {
      const VoxelKey& ok = out_keys[o];
      for (std::size_t f = 0; f < offsets.size(); ++f) {
        const VoxelKey q{ok.b, ok.i * stride + offsets[f][0], ok.j * stride + offsets[f][1],
                         ok.k * stride + offsets[f][2]};
        const int r = index.find(q);
        if (r >= 0) map.pairs[f].emplace_back(r, static_cast<int>(o));
      }
    }
    return map;
  }

  // Large kernels over sparse data: scan inputs in the blocks overlapping each
  // window instead of probing every offset.
  const int h = kernel / 2;
  const int block = kernel;
  std::unordered_map<std::uint64_t, std::vector<int>> blocks;
  auto block_key = [&](std::int32_t b, std::int32_t i, std::int32_t j, std::int32_t k) {
    return pack_key({b, i, j, k});
  };
  for (std::size_t r = 0; r < in_keys.size(); ++r) {
    const VoxelKey& k = in_keys[r];
    blocks[block_key(k.b, floor_div(k.i, block), floor_div(k.j, block), floor_div(k.k, block))]
        .push_back(static_cast<int>(r));
  }
  std::vector<std::pair<int, int>> found;  // (offset index, input row)
  for (std::size_t o = 0; o < out_keys.size(); ++o) {
    const VoxelKey& ok = out_keys[o];
    const std::array<std::int32_t, 3> c{ok.i * stride, ok.j * stride, ok.k * stride};
    std::array<std::int32_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = floor_div(c[a] - h, block);
      hi[a] = floor_div(c[a] + h, block);
    }
    found.clear();
    for (std::int32_t bi = lo[0]; bi <= hi[0]; ++bi)
      for (std::int32_t bj = lo[1]; bj <= hi[1]; ++bj)
        for (std::int32_t bk = lo[2]; bk <= hi[2]; ++bk) {
          auto it = blocks.find(block_key(ok.b, bi, bj, bk));
          if (it == blocks.end()) continue;
          for (int r : it->second) {
            const VoxelKey& k = in_keys[static_cast<std::size_t>(r)];
            const int di = k.i - c[0], dj = k.j - c[1], dk = k.k - c[2];
            if (std::abs(di) > h || std::abs(dj) > h || std::abs(dk) > h) continue;
            found.emplace_back(((di + h) * kernel + (dj + h)) * kernel + (dk + h), r);
          }
        }
    for (const auto& [f, r] : found) map.pairs[static_cast<std::size_t>(f)].emplace_back(r, static_cast<int>(o));
  }
  return map;
}

KernelMap pooling_map(std::span<const VoxelKey> in_keys, std::span<const VoxelKey> out_keys,
                      int kernel, int stride) {
  if (kernel < stride) throw ValidationError("pooling kernel must be >= stride");
  std::vector<Offset> window;
  for (int a = 0; a < kernel; ++a)
    for (int b = 0; b < kernel; ++b)
      for (int c = 0; c < kernel; ++c) window.push_back({a, b, c});
  KernelMap map;
  map.pairs.resize(window.size());
  map.n_in = in_keys.size();
  map.n_out = out_keys.size();
  const KeyIndex index(in_keys);
  for (std::size_t o = 0; o < out_keys.size(); ++o) {
    const VoxelKey& ok = out_keys[o];
    for (std::size_t f = 0; f < window.size(); ++f) {
      const VoxelKey q{ok.b, ok.i * stride + window[f][0], ok.j * stride + window[f][1],
                       ok.k * stride + window[f][2]};
      const int r = index.find(q);
      if (r >= 0) map.pairs[f].emplace_back(r, static_cast<int>(o));
    }
  }
  return map;
}

Matrix apply_convolution(const KernelMap& map, const Matrix& in, const Matrix& weights,
                         const Eigen::RowVectorXd& bias) {
  const Eigen::Index cin = in.cols();
  const Eigen::Index cout = weights.cols();
  if (weights.rows() != static_cast<Eigen::Index>(map.pairs.size()) * cin)
    throw ValidationError("convolution weights do not match kernel and input channels");
  if (bias.size() != cout) throw ValidationError("convolution bias has wrong length");
  if (static_cast<std::size_t>(in.rows()) != map.n_in)
    throw ValidationError("convolution input does not match kernel map");
  Matrix out(static_cast<Eigen::Index>(map.n_out), cout);
  out.rowwise() = bias;
  // Direct accumulation: each output element sums its terms in (offset,
  // input channel) order, independent of how pairs are batched.
  const double* x = in.data();
  double* o = out.data();
  for (std::size_t f = 0; f < map.pairs.size(); ++f) {
    const double* wf = weights.data() + static_cast<Eigen::Index>(f) * cin * cout;
    for (const auto& [r_in, r_out] : map.pairs[f]) {
      const double* xr = x + static_cast<Eigen::Index>(r_in) * cin;
      double* orow = o + static_cast<Eigen::Index>(r_out) * cout;
      for (Eigen::Index c = 0; c < cin; ++c) {
        const double xv = xr[c];
        const double* wr = wf + c * cout;
        for (Eigen::Index j = 0; j < cout; ++j) orow[j] += xv * wr[j];
      }
    }
  }
  return out;
}

SparseTensor sparse_conv3d(const SparseTensor& input, const ConvWeights& w, int stride) {
  if (stride < 1 || stride > 3) throw ValidationError("stride must be 1, 2 or 3");
  const auto offsets = cubic_offsets(w.kernel_size);
  SparseTensor out;
  out.keys = stride == 1 ? input.keys : strided_keys(input.keys, stride);
  const KernelMap map = convolution_map(input.keys, out.keys, offsets, stride);
  out.features = apply_convolution(map, input.features, w.weights, w.bias);
  out.stride_level = input.stride_level * stride;
  out.base_grid_m = input.base_grid_m;
  return out;
}

SparseTensor sparse_maxpool(const SparseTensor& input, int kernel, int stride) {
  SparseTensor out;
  out.keys = strided_keys(input.keys, stride);
  const KernelMap map = pooling_map(input.keys, out.keys, kernel, stride);
  out.features = Matrix::Constant(static_cast<Eigen::Index>(out.keys.size()), input.channels(),
                                  -std::numeric_limits<double>::infinity());
  for (const auto& pairs : map.pairs)
    for (const auto& [r, o] : pairs) out.features.row(o) = out.features.row(o).cwiseMax(input.features.row(r));
  out.stride_level = input.stride_level * stride;
  out.base_grid_m = input.base_grid_m;
  return out;
}

std::vector<std::pair<int, int>> batch_ranges(std::span<const VoxelKey> keys) {
  if (keys.empty()) throw ValidationError("empty sparse tensor");
  const int n_batch = keys.back().b + 1;
  std::vector<std::pair<int, int>> ranges(static_cast<std::size_t>(n_batch), {-1, -1});
  for (std::size_t r = 0; r < keys.size(); ++r) {
    auto& range = ranges[static_cast<std::size_t>(keys[r].b)];
    if (range.first < 0) range.first = static_cast<int>(r);
    range.second = static_cast<int>(r) + 1;
  }
  for (std::size_t b = 0; b < ranges.size(); ++b)
    if (ranges[b].first < 0)
      throw ValidationError("batch element " + std::to_string(b) + " has no voxels");
  return ranges;
}

Matrix global_avg_pool(const SparseTensor& input) {
  const auto ranges = batch_ranges(input.keys);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(ranges.size()), input.channels());
  for (std::size_t b = 0; b < ranges.size(); ++b) {
    const auto [begin, end] = ranges[b];
    for (int r = begin; r < end; ++r) out.row(static_cast<Eigen::Index>(b)) += input.features.row(r);
    out.row(static_cast<Eigen::Index>(b)) /= static_cast<double>(end - begin);
  }
  return out;
}

namespace {

struct Bucketing {
  std::vector<VoxelKey> keys;
  std::vector<int> start;  // size keys+1, into `order`
  std::vector<int> order;  // point indices grouped by voxel, canonical within
};

Bucketing bucket_points(const Matrix& positions, const Matrix& features, double grid_m, int batch) {
  if (!(grid_m > 0.0)) throw ValidationError("grid size must be > 0");
  if (positions.cols() != 3) throw ValidationError("positions must have 3 columns");
  if (features.rows() != positions.rows()) throw ValidationError("positions/features row mismatch");
  const auto n = static_cast<std::size_t>(positions.rows());
  std::vector<VoxelKey> point_key(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto r = static_cast<Eigen::Index>(p);
    point_key[p] = {batch, to_cell(positions(r, 0), grid_m), to_cell(positions(r, 1), grid_m),
                    to_cell(positions(r, 2), grid_m)};
  }
  Bucketing out;
  out.order.resize(n);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::sort(out.order.begin(), out.order.end(), [&](int a, int b) {
    if (point_key[static_cast<std::size_t>(a)] != point_key[static_cast<std::size_t>(b)])
      return point_key[static_cast<std::size_t>(a)] < point_key[static_cast<std::size_t>(b)];
    for (Eigen::Index c = 0; c < 3; ++c)
      if (positions(a, c) != positions(b, c)) return positions(a, c) < positions(b, c);
    for (Eigen::Index c = 0; c < features.cols(); ++c)
      if (features(a, c) != features(b, c)) return features(a, c) < features(b, c);
    return false;
  });
  for (std::size_t i = 0; i < n; ++i) {
    const VoxelKey& k = point_key[static_cast<std::size_t>(out.order[i])];
    if (out.keys.empty() || out.keys.back() != k) {
      out.keys.push_back(k);
      out.start.push_back(static_cast<int>(i));
    }
  }
  out.start.push_back(static_cast<int>(n));
  return out;
}

Matrix mean_rows(const Bucketing& bk, const Matrix& values) {
  Matrix out(static_cast<Eigen::Index>(bk.keys.size()), values.cols());
  std::vector<CompensatedSum> acc(static_cast<std::size_t>(values.cols()));
  for (std::size_t v = 0; v < bk.keys.size(); ++v) {
    std::fill(acc.begin(), acc.end(), CompensatedSum{});
    const int begin = bk.start[v], end = bk.start[v + 1];
    for (int i = begin; i < end; ++i)
      for (Eigen::Index c = 0; c < values.cols(); ++c)
        acc[static_cast<std::size_t>(c)].add(values(bk.order[static_cast<std::size_t>(i)], c));
    for (Eigen::Index c = 0; c < values.cols(); ++c)
      out(static_cast<Eigen::Index>(v), c) = acc[static_cast<std::size_t>(c)].value() / (end - begin);
  }
  return out;
}

}  // namespace

SparseTensor grid_sample(const Matrix& positions, const Matrix& features, double grid_m, int batch) {
  const Bucketing bk = bucket_points(positions, features, grid_m, batch);
  SparseTensor t;
  t.features = mean_rows(bk, features);
  t.keys = bk.keys;
  t.stride_level = 1;
  t.base_grid_m = grid_m;
  return t;
}

PointSet grid_sample_mean_points(const Matrix& positions, const Matrix& features, double grid_m) {
  const Bucketing bk = bucket_points(positions, features, grid_m, 0);
  return {mean_rows(bk, positions), mean_rows(bk, features)};
}

SparseTensor concat_batch(std::span<const SparseTensor> parts) {
  if (parts.empty()) throw ValidationError("empty batch");
  SparseTensor out;
  Eigen::Index rows = 0;
  for (const SparseTensor& p : parts) rows += static_cast<Eigen::Index>(p.size());
  out.features.resize(rows, parts.front().channels());
  out.stride_level = parts.front().stride_level;
  out.base_grid_m = parts.front().base_grid_m;
  Eigen::Index r = 0;
  for (std::size_t b = 0; b < parts.size(); ++b) {
    const SparseTensor& p = parts[b];
    if (p.channels() != out.features.cols()) throw ValidationError("channel mismatch in batch");
    if (p.size() == 0) throw ValidationError("batch element has no voxels");
    for (const VoxelKey& k : p.keys) out.keys.push_back({static_cast<std::int32_t>(b), k.i, k.j, k.k});
    out.features.middleRows(r, static_cast<Eigen::Index>(p.size())) = p.features;
    r += static_cast<Eigen::Index>(p.size());
  }
  return out;
}

std::vector<std::vector<int>> radius_neighbors(const Matrix& queries, const Matrix& support,
                                               double r) {
  if (!(r > 0.0)) throw ValidationError("radius must be > 0");
  // Cells at least r wide, so the 27 surrounding cells cover the ball. Very
  // small radii get wider cells to keep indices inside the packed range.
  double extent = 0.0;
  if (support.size() > 0) extent = support.cwiseAbs().maxCoeff();
  if (queries.size() > 0) extent = std::max(extent, queries.cwiseAbs().maxCoeff());
  const double cell = std::max(r, extent * 0x1.0p-19);
  std::unordered_map<std::uint64_t, std::vector<int>> cells;
  cells.reserve(static_cast<std::size_t>(support.rows()) * 2);
  for (Eigen::Index s = 0; s < support.rows(); ++s) {
    cells[pack_cell(to_cell(support(s, 0), cell), to_cell(support(s, 1), cell), to_cell(support(s, 2), cell))]
        .push_back(static_cast<int>(s));
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const std::int32_t ci = to_cell(queries(q, 0), cell);
    const std::int32_t cj = to_cell(queries(q, 1), cell);
    const std::int32_t ck = to_cell(queries(q, 2), cell);
    auto& list = out[static_cast<std::size_t>(q)];
    for (int a = -1; a <= 1; ++a)
      for (int b = -1; b <= 1; ++b)
        for (int c = -1; c <= 1; ++c) {
          auto it = cells.find(pack_cell(ci + a, cj + b, ck + c));
          if (it == cells.end()) continue;
          for (int s : it->second) {
            const double dx = support(s, 0) - queries(q, 0);
            const double dy = support(s, 1) - queries(q, 1);
            const double dz = support(s, 2) - queries(q, 2);
            if (std::sqrt(dx * dx + dy * dy + dz * dz) <= r) list.push_back(s);
          }
        }
    std::sort(list.begin(), list.end());
  }
  return out;
}

}  // namespace canopy::sparse
