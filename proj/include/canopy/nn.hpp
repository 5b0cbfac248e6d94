#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices, plus
// the layers, loss, optimizer and learning-rate schedule used for training.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "canopy/sparse.hpp"

namespace canopy::nn {

using Matrix = sparse::Matrix;
using RowVector = Eigen::RowVectorXd;
using Ranges = std::vector<std::pair<int, int>>;  // [begin, end) row ranges

struct Node {
  Matrix value;
  Matrix grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  bool requires_grad = false;
  bool backward_done = false;

  Matrix& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

using Var = std::shared_ptr<Node>;

Var constant(Matrix value);
Var variable(Matrix value);  // leaf that collects gradients

/// Reverse sweep from a scalar. Each reachable node's backward rule runs
/// exactly once, in reverse topological order. A second call on the same
/// loss throws.
void backward(const Var& loss);

struct Parameter {
  std::string name;
  Var node;
  bool decay_exempt = false;

  const Matrix& value() const { return node->value; }
  Matrix& value() { return node->value; }
};

void zero_grad(std::span<Parameter> params);

// ---------------------------------------------------------------------------
// Primitives

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& row);  // broadcast a 1 x C row
Var mul(const Var& a, const Var& b);        // elementwise
Var fully_connected(const Var& x, const Var& weight, const Var& bias);
Var concat_cols(const Var& a, const Var& b);
Var sum(const Var& x);  // 1 x 1

Var relu(const Var& x);
Var elu(const Var& x);  // alpha = 1
Var sigmoid(const Var& x);

struct BatchNormState {
  RowVector running_mean;
  RowVector running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(Eigen::Index channels = 0)
      : running_mean(RowVector::Zero(channels)), running_var(RowVector::Ones(channels)) {}
};

/// Per-channel normalization over all rows. Training mode uses batch
/// statistics and updates the running estimates; eval mode is affine.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool train);

/// Channelwise max / mean over each row range; one output row per range.
Var max_reduce(const Var& x, const Ranges& ranges);
Var mean_reduce(const Var& x, const Ranges& ranges);
/// Repeats row s of `v` over range s.
Var broadcast_rows(const Var& v, const Ranges& ranges);
/// Rows of range s times the d x d matrix stored row-major in row s of `t`.
Var segment_matmul(const Var& x, const Ranges& ranges, const Var& t);

/// Sparse convolution over a precomputed kernel map.
Var sparse_conv(const Var& x, std::shared_ptr<const sparse::KernelMap> map, const Var& weight,
                const Var& bias);

/// Channelwise max over each output's input list; empty lists yield zeros.
Var gather_max(const Var& x, std::shared_ptr<const std::vector<std::vector<int>>> lists);

/// Weighted slot gather: output row q, block s (C columns) holds
/// sum over entries (q, i, s, w) of w * x_i.
struct SlotGather {
  std::size_t n_out = 0;
  std::size_t n_in = 0;
  std::size_t n_slots = 0;
  std::vector<int> row_start;  // n_out + 1 offsets into the entry arrays
  std::vector<int> input;
  std::vector<int> slot;
  std::vector<double> weight;
};

Var slot_gather(const Var& x, std::shared_ptr<const SlotGather> g);

/// Mean over elements of the smooth-L1 penalty with knee beta.
Var smooth_l1(const Var& pred, const Matrix& target, double beta = 1.0);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline constexpr double kGradCheckFloor = 1e-6;

/// Central differences on every entry of every input of a scalar function.
GradCheckResult gradcheck(const std::function<Var(std::span<const Var>)>& fn,
                          std::vector<Matrix> inputs, double h = 1e-5);

/// Central differences on parameter entries (at most `max_per_param` evenly
/// spaced entries each, 0 for all).
GradCheckResult gradcheck_parameters(std::span<Parameter> params,
                                     const std::function<Var()>& loss_fn, double h = 1e-5,
                                     std::size_t max_per_param = 0);

// ---------------------------------------------------------------------------
// Optimization

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay (skipped for exempt parameters) followed by the
/// bias-corrected Adam update.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<Parameter> params, double lr);
  long steps() const { return t_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct WarmRestartSchedule {
  double lr_max = 0.001;
  double lr_min = 0.0;
  int t0 = 10;
  int t_mult = 2;

  double operator()(int epoch) const;
  /// Epoch indices at which a new cycle starts, up to `horizon`.
  std::vector<int> restarts(int horizon) const;
};

double cosine_warm_restart_lr(int epoch, double lr_max = 0.001, double lr_min = 0.0,
                              int t0 = 10, int t_mult = 2);

}  // namespace canopy::nn
