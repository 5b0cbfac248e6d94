#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance binary. None of them call the code under test.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "canopy/common.hpp"
#include "canopy/sparse.hpp"

namespace oracle {

using canopy::sparse::Matrix;
using canopy::sparse::SparseTensor;
using canopy::sparse::VoxelKey;
using canopy::sparse::Vector3;

// Random tensor with keys in [0, box)^3 for one batch element.
inline SparseTensor random_tensor(canopy::Rng& rng, int box, double density, int channels) {
  std::set<VoxelKey> keys;
  for (int i = 0; i < box; ++i)
    for (int j = 0; j < box; ++j)
      for (int k = 0; k < box; ++k)
        if (rng.bernoulli(density)) keys.insert({0, i, j, k});
  if (keys.empty()) keys.insert({0, static_cast<int>(rng.below(static_cast<std::uint64_t>(box))), 0, 0});
  SparseTensor t;
  t.keys.assign(keys.begin(), keys.end());
  t.features.resize(static_cast<Eigen::Index>(t.keys.size()), channels);
  for (Eigen::Index r = 0; r < t.features.rows(); ++r)
    for (Eigen::Index c = 0; c < channels; ++c) t.features(r, c) = rng.uniform(-1.0, 1.0);
  return t;
}

// Dense grid holding a tensor's features, zero at inactive sites.
class DenseGrid {
 public:
  DenseGrid(const SparseTensor& t, int box) : box_(box), c_(static_cast<int>(t.channels())) {
    data_.assign(static_cast<std::size_t>(box * box * box * c_), 0.0);
    for (std::size_t r = 0; r < t.keys.size(); ++r)
      for (int c = 0; c < c_; ++c)
        at(t.keys[r].i, t.keys[r].j, t.keys[r].k)[c] = t.features(static_cast<Eigen::Index>(r), c);
  }
  bool inside(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < box_ && j < box_ && k < box_;
  }
  double* at(int i, int j, int k) {
    return &data_[static_cast<std::size_t>(((i * box_ + j) * box_ + k) * c_)];
  }
  const double* at(int i, int j, int k) const {
    return &data_[static_cast<std::size_t>(((i * box_ + j) * box_ + k) * c_)];
  }

 private:
  int box_;
  int c_;
  std::vector<double> data_;
};

// Zero-padded dense 3D convolution evaluated at output position (oi, oj, ok):
// sum over the k^3 window centered at o*stride of W_offset' x + bias.
// `weights` stacks per-offset blocks in (di, dj, dk) lexicographic order.
inline Eigen::RowVectorXd dense_conv_at(const DenseGrid& grid, int kernel, int stride,
                                        const Matrix& weights, const Eigen::RowVectorXd& bias,
                                        int cin, int oi, int oj, int ok) {
  Eigen::RowVectorXd out = bias;
  const int h = kernel / 2;
  int f = 0;
  for (int di = -h; di <= h; ++di)
    for (int dj = -h; dj <= h; ++dj)
      for (int dk = -h; dk <= h; ++dk, ++f) {
        const int i = oi * stride + di, j = oj * stride + dj, k = ok * stride + dk;
        if (!grid.inside(i, j, k)) continue;
        const double* x = grid.at(i, j, k);
        for (int c = 0; c < cin; ++c)
          for (Eigen::Index o = 0; o < out.size(); ++o) out(o) += x[c] * weights(f * cin + c, o);
      }
  return out;
}

// Channelwise max over the window [o*stride, o*stride + kernel - 1] restricted
// to active sites.
inline Eigen::RowVectorXd dense_maxpool_at(const SparseTensor& t, int kernel, int stride,
                                           const VoxelKey& o) {
  Eigen::RowVectorXd best = Eigen::RowVectorXd::Constant(t.channels(), -HUGE_VAL);
  for (std::size_t r = 0; r < t.keys.size(); ++r) {
    const VoxelKey& k = t.keys[r];
    const bool in = k.i >= o.i * stride && k.i < o.i * stride + kernel &&
                    k.j >= o.j * stride && k.j < o.j * stride + kernel &&
                    k.k >= o.k * stride && k.k < o.k * stride + kernel;
    if (in) best = best.cwiseMax(t.features.row(static_cast<Eigen::Index>(r)));
  }
  return best;
}

// Direct double loop over queries and supports of
//   g(x) = sum_{|x_i - x| <= r} sum_k max(0, 1 - |x_i - x - k| / sigma) W_k' f_i.
inline Matrix kpconv_brute(const Matrix& support, const Matrix& features, const Matrix& queries,
                           const std::vector<Vector3>& kernel, const Matrix& weights, double r,
                           double sigma) {
  const Eigen::Index cin = features.cols();
  const Eigen::Index cout = weights.cols();
  Matrix out = Matrix::Zero(queries.rows(), cout);
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    for (Eigen::Index s = 0; s < support.rows(); ++s) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) d2 += (support(s, a) - queries(q, a)) * (support(s, a) - queries(q, a));
      if (std::sqrt(d2) > r) continue;
      for (std::size_t k = 0; k < kernel.size(); ++k) {
        double e = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double v = support(s, a) - queries(q, a) - kernel[k](a);
          e += v * v;
        }
        const double h = std::max(0.0, 1.0 - std::sqrt(e) / sigma);
        if (h == 0.0) continue;
        for (Eigen::Index c = 0; c < cin; ++c)
          for (Eigen::Index o = 0; o < cout; ++o)
            out(q, o) += h * features(s, c) * weights(static_cast<Eigen::Index>(k) * cin + c, o);
      }
    }
  }
  return out;
}

// Least squares with intercept from the normal equations
// (A'A + ridge I) beta = A'y, A = [X 1], solved by full-pivot LU. The last
// entry is the intercept.
inline Eigen::VectorXd normal_equation_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                           double ridge) {
  Eigen::MatrixXd A(X.rows(), X.cols() + 1);
  A << X, Eigen::VectorXd::Ones(X.rows());
  Eigen::MatrixXd G = A.transpose() * A;
  G.diagonal().array() += ridge;
  return G.fullPivLu().solve(A.transpose() * y);
}

inline Eigen::MatrixXd uniform_matrix(canopy::Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                      double lo = -1.0, double hi = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

}  // namespace oracle
