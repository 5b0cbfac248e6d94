#include "canopy/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "canopy/common.hpp"

namespace canopy::nn {

namespace {

Var make_node(Matrix value, std::vector<Var> parents, const char* op,
              std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const Var& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ValidationError(std::string(op) + ": shape mismatch");
}

void check_ranges(const Ranges& ranges, Eigen::Index rows, const char* op) {
  int expect = 0;
  for (const auto& [b, e] : ranges) {
    if (b != expect || e <= b) throw ValidationError(std::string(op) + ": invalid row ranges");
    expect = e;
  }
  if (expect != rows) throw ValidationError(std::string(op) + ": ranges do not cover input");
}

}  // namespace

Var constant(Matrix value) { return make_node(std::move(value), {}, "constant", nullptr); }

Var variable(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "variable";
  return n;
}

void backward(const Var& loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1)
    throw ValidationError("backward: loss must be a scalar");
  if (loss->backward_done) throw ValidationError("backward called twice on the same graph");
  loss->backward_done = true;
  if (!loss->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->grad_buffer().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  // Intermediate gradients are no longer needed; parameters keep theirs.
  for (Node* n : order)
    if (n->backward_fn) n->grad.resize(0, 0);
}

void zero_grad(std::span<Parameter> params) {
  for (Parameter& p : params) p.node->grad.setZero(p.node->value.rows(), p.node->value.cols());
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols() != b->value.rows()) throw ValidationError("matmul: shape mismatch");
  Matrix out = a->value * b->value;
  return make_node(std::move(out), {a, b}, "matmul", [](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a->requires_grad) a->grad_buffer().noalias() += n.grad * b->value.transpose();
    if (b->requires_grad) b->grad_buffer().noalias() += a->value.transpose() * n.grad;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b}, "add", [](Node& n) {
    for (const Var& p : n.parents)
      if (p->requires_grad) p->grad_buffer() += n.grad;
  });
}

Var add_row(const Var& x, const Var& row) {
  if (row->value.rows() != 1 || row->value.cols() != x->value.cols())
    throw ValidationError("add_row: shape mismatch");
  Matrix out = x->value;
  out.rowwise() += row->value.row(0);
  return make_node(std::move(out), {x, row}, "add_row", [](Node& n) {
    const Var& x = n.parents[0];
    const Var& row = n.parents[1];
    if (x->requires_grad) x->grad_buffer() += n.grad;
    if (row->requires_grad) row->grad_buffer() += n.grad.colwise().sum();
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_node(a->value.cwiseProduct(b->value), {a, b}, "mul", [](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a->requires_grad) a->grad_buffer() += n.grad.cwiseProduct(b->value);
    if (b->requires_grad) b->grad_buffer() += n.grad.cwiseProduct(a->value);
  });
}

Var fully_connected(const Var& x, const Var& weight, const Var& bias) {
  return add_row(matmul(x, weight), bias);
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows()) throw ValidationError("concat_cols: row mismatch");
  Matrix out(a->value.rows(), a->value.cols() + b->value.cols());
  out.leftCols(a->value.cols()) = a->value;
  out.rightCols(b->value.cols()) = b->value;
  return make_node(std::move(out), {a, b}, "concat_cols", [](Node& n) {
    const Var& a = n.parents[0];
    const Var& b = n.parents[1];
    if (a->requires_grad) a->grad_buffer() += n.grad.leftCols(a->value.cols());
    if (b->requires_grad) b->grad_buffer() += n.grad.rightCols(b->value.cols());
  });
}

Var sum(const Var& x) {
  Matrix out(1, 1);
  out(0, 0) = x->value.sum();
  return make_node(std::move(out), {x}, "sum", [](Node& n) {
    n.parents[0]->grad_buffer().array() += n.grad(0, 0);
  });
}

Var relu(const Var& x) {
  return make_node(x->value.cwiseMax(0.0), {x}, "relu", [](Node& n) {
    const Var& x = n.parents[0];
    x->grad_buffer().array() += (x->value.array() > 0.0).select(n.grad.array(), 0.0);
  });
}

Var elu(const Var& x) {
  // Vectorized exp on the clamped input; exp(v) - 1 differs from expm1 by
  // at most one ulp of 1 near zero.
  const auto v = x->value.array();
  Matrix out = (v > 0.0).select(v, v.min(0.0).exp() - 1.0);
  return make_node(std::move(out), {x}, "elu", [](Node& n) {
    const Var& x = n.parents[0];
    // d/dv elu = 1 for v > 0, exp(v) = elu(v) + 1 otherwise.
    const double* in = x->value.data();
    const double* y = n.value.data();
    const double* g = n.grad.data();
    double* gx = x->grad_buffer().data();
    for (Eigen::Index i = 0; i < n.value.size(); ++i)
      gx[i] += in[i] > 0.0 ? g[i] : g[i] * (y[i] + 1.0);
  });
}

Var sigmoid(const Var& x) {
  Matrix out = x->value.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return make_node(std::move(out), {x}, "sigmoid", [](Node& n) {
    n.parents[0]->grad_buffer().array() +=
        n.grad.array() * n.value.array() * (1.0 - n.value.array());
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool train) {
  const Eigen::Index rows = x->value.rows();
  const Eigen::Index c = x->value.cols();
  if (gamma->value.cols() != c || beta->value.cols() != c || state.running_mean.size() != c)
    throw ValidationError("batch_norm: channel mismatch");
  if (rows == 0) throw ValidationError("batch_norm: empty input");

  if (!train) {
    const RowVector inv_std = (state.running_var.array() + state.eps).rsqrt().matrix();
    const RowVector scale = gamma->value.row(0).cwiseProduct(inv_std);
    const RowVector shift = beta->value.row(0) - state.running_mean.cwiseProduct(scale);
    Matrix out = (x->value.array().rowwise() * scale.array()).rowwise() + shift.array();
    return make_node(std::move(out), {x, gamma, beta}, "batch_norm_eval",
                     [inv_std, state_mean = state.running_mean](Node& n) {
                       const Var& x = n.parents[0];
                       const Var& gamma = n.parents[1];
                       const Var& beta = n.parents[2];
                       if (x->requires_grad)
                         x->grad_buffer().array() +=
                             n.grad.array().rowwise() * (gamma->value.row(0).cwiseProduct(inv_std)).array();
                       if (gamma->requires_grad) {
                         const Matrix xhat =
                             (x->value.rowwise() - state_mean).array().rowwise() * inv_std.array();
                         gamma->grad_buffer() += n.grad.cwiseProduct(xhat).colwise().sum();
                       }
                       if (beta->requires_grad) beta->grad_buffer() += n.grad.colwise().sum();
                     });
  }

  const double count = static_cast<double>(rows);
  const double* xv = x->value.data();
  RowVector mean = RowVector::Zero(c);
  RowVector var = RowVector::Zero(c);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < c; ++j) mean(j) += xv[i * c + j];
  mean /= count;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mean(j);
      var(j) += d * d;
    }
  var /= count;
  const RowVector inv_std = (var.array() + state.eps).rsqrt().matrix();
  Matrix xhat(rows, c);
  Matrix out(rows, c);
  {
    const double* gam = gamma->value.data();
    const double* bet = beta->value.data();
    double* xh = xhat.data();
    double* o = out.data();
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        const double v = (xv[i * c + j] - mean(j)) * inv_std(j);
        xh[i * c + j] = v;
        o[i * c + j] = v * gam[j] + bet[j];
      }
  }

  const double unbias = rows > 1 ? count / (count - 1.0) : 1.0;
  state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean;
  state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * unbias * var;

  return make_node(std::move(out), {x, gamma, beta}, "batch_norm",
                   [xhat = std::move(xhat), inv_std, count](Node& n) {
                     const Var& x = n.parents[0];
                     const Var& gamma = n.parents[1];
                     const Var& beta = n.parents[2];
                     const Eigen::Index rows = n.grad.rows();
                     const Eigen::Index c = n.grad.cols();
                     const double* g = n.grad.data();
                     const double* xh = xhat.data();
                     RowVector dbeta = RowVector::Zero(c);
                     RowVector dgamma = RowVector::Zero(c);
                     for (Eigen::Index i = 0; i < rows; ++i)
                       for (Eigen::Index j = 0; j < c; ++j) {
                         dbeta(j) += g[i * c + j];
                         dgamma(j) += g[i * c + j] * xh[i * c + j];
                       }
                     if (gamma->requires_grad) gamma->grad_buffer() += dgamma;
                     if (beta->requires_grad) beta->grad_buffer() += dbeta;
                     if (x->requires_grad) {
                       const RowVector k = gamma->value.row(0).cwiseProduct(inv_std) / count;
                       double* gx = x->grad_buffer().data();
                       for (Eigen::Index i = 0; i < rows; ++i)
                         for (Eigen::Index j = 0; j < c; ++j)
                           gx[i * c + j] += k(j) * (count * g[i * c + j] - dbeta(j) -
                                                    xh[i * c + j] * dgamma(j));
                     }
                   });
}

Var max_reduce(const Var& x, const Ranges& ranges) {
  check_ranges(ranges, x->value.rows(), "max_reduce");
  const Eigen::Index c = x->value.cols();
  Matrix out(static_cast<Eigen::Index>(ranges.size()), c);
  std::vector<int> argmax(ranges.size() * static_cast<std::size_t>(c));
  for (std::size_t s = 0; s < ranges.size(); ++s) {
    for (Eigen::Index j = 0; j < c; ++j) {
      int best = ranges[s].first;
      for (int r = ranges[s].first + 1; r < ranges[s].second; ++r)
        if (x->value(r, j) > x->value(best, j)) best = r;
      argmax[s * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)] = best;
      out(static_cast<Eigen::Index>(s), j) = x->value(best, j);
    }
  }
  return make_node(std::move(out), {x}, "max_reduce", [argmax = std::move(argmax)](Node& n) {
    Matrix& g = n.parents[0]->grad_buffer();
    const Eigen::Index c = n.grad.cols();
    for (Eigen::Index s = 0; s < n.grad.rows(); ++s)
      for (Eigen::Index j = 0; j < c; ++j)
        g(argmax[static_cast<std::size_t>(s * c + j)], j) += n.grad(s, j);
  });
}

Var mean_reduce(const Var& x, const Ranges& ranges) {
  check_ranges(ranges, x->value.rows(), "mean_reduce");
  Matrix out(static_cast<Eigen::Index>(ranges.size()), x->value.cols());
  for (std::size_t s = 0; s < ranges.size(); ++s) {
    const auto [b, e] = ranges[s];
    out.row(static_cast<Eigen::Index>(s)) = x->value.middleRows(b, e - b).colwise().sum() / (e - b);
  }
  return make_node(std::move(out), {x}, "mean_reduce", [ranges](Node& n) {
    Matrix& g = n.parents[0]->grad_buffer();
    for (std::size_t s = 0; s < ranges.size(); ++s) {
      const auto [b, e] = ranges[s];
      g.middleRows(b, e - b).rowwise() += n.grad.row(static_cast<Eigen::Index>(s)) / (e - b);
    }
  });
}

Var broadcast_rows(const Var& v, const Ranges& ranges) {
  if (static_cast<std::size_t>(v->value.rows()) != ranges.size())
    throw ValidationError("broadcast_rows: one row per range expected");
  const int rows = ranges.empty() ? 0 : ranges.back().second;
  Matrix out(rows, v->value.cols());
  for (std::size_t s = 0; s < ranges.size(); ++s) {
    const auto [b, e] = ranges[s];
    out.middleRows(b, e - b).rowwise() = v->value.row(static_cast<Eigen::Index>(s));
  }
  return make_node(std::move(out), {v}, "broadcast_rows", [ranges](Node& n) {
    Matrix& g = n.parents[0]->grad_buffer();
    for (std::size_t s = 0; s < ranges.size(); ++s) {
      const auto [b, e] = ranges[s];
      g.row(static_cast<Eigen::Index>(s)) += n.grad.middleRows(b, e - b).colwise().sum();
    }
  });
}

Var segment_matmul(const Var& x, const Ranges& ranges, const Var& t) {
  check_ranges(ranges, x->value.rows(), "segment_matmul");
  const Eigen::Index d = x->value.cols();
  if (t->value.rows() != static_cast<Eigen::Index>(ranges.size()) || t->value.cols() != d * d)
    throw ValidationError("segment_matmul: transform shape mismatch");
  Matrix out(x->value.rows(), d);
  for (std::size_t s = 0; s < ranges.size(); ++s) {
    const auto [b, e] = ranges[s];
    Eigen::Map<const Matrix> T(t->value.row(static_cast<Eigen::Index>(s)).data(), d, d);
    out.middleRows(b, e - b).noalias() = x->value.middleRows(b, e - b) * T;
  }
  return make_node(std::move(out), {x, t}, "segment_matmul", [ranges, d](Node& n) {
    const Var& x = n.parents[0];
    const Var& t = n.parents[1];
    for (std::size_t s = 0; s < ranges.size(); ++s) {
      const auto [b, e] = ranges[s];
      const auto row = static_cast<Eigen::Index>(s);
      Eigen::Map<const Matrix> T(t->value.row(row).data(), d, d);
      if (x->requires_grad)
        x->grad_buffer().middleRows(b, e - b).noalias() += n.grad.middleRows(b, e - b) * T.transpose();
      if (t->requires_grad) {
        const Matrix dT = x->value.middleRows(b, e - b).transpose() * n.grad.middleRows(b, e - b);
        Eigen::Map<Matrix> G(t->grad_buffer().row(row).data(), d, d);
        G += dT;
      }
    }
  });
}

Var sparse_conv(const Var& x, std::shared_ptr<const sparse::KernelMap> map, const Var& weight,
                const Var& bias) {
  Matrix out = sparse::apply_convolution(*map, x->value, weight->value, bias->value.row(0));
  return make_node(std::move(out), {x, weight, bias}, "sparse_conv", [map](Node& n) {
    const Var& x = n.parents[0];
    const Var& w = n.parents[1];
    const Var& b = n.parents[2];
    const Eigen::Index cin = x->value.cols();
    const Eigen::Index cout = n.grad.cols();
    if (b->requires_grad) b->grad_buffer() += n.grad.colwise().sum();
    const double* g = n.grad.data();
    const double* xv = x->value.data();
    double* gw = w->requires_grad ? w->grad_buffer().data() : nullptr;
    double* gx = x->requires_grad ? x->grad_buffer().data() : nullptr;
    for (std::size_t f = 0; f < map->pairs.size(); ++f) {
      const Eigen::Index base = static_cast<Eigen::Index>(f) * cin * cout;
      const double* wf = w->value.data() + base;
      for (const auto& [r_in, r_out] : map->pairs[f]) {
        const double* grow = g + static_cast<Eigen::Index>(r_out) * cout;
        const double* xr = xv + static_cast<Eigen::Index>(r_in) * cin;
        for (Eigen::Index c = 0; c < cin; ++c) {
          if (gw) {
            double* gwr = gw + base + c * cout;
            const double xc = xr[c];
            for (Eigen::Index j = 0; j < cout; ++j) gwr[j] += xc * grow[j];
          }
          if (gx) {
            const double* wr = wf + c * cout;
            double acc = 0.0;
            for (Eigen::Index j = 0; j < cout; ++j) acc += grow[j] * wr[j];
            gx[static_cast<Eigen::Index>(r_in) * cin + c] += acc;
          }
        }
      }
    }
  });
}

Var gather_max(const Var& x, std::shared_ptr<const std::vector<std::vector<int>>> lists) {
  const Eigen::Index c = x->value.cols();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(lists->size()), c);
  std::vector<int> argmax(lists->size() * static_cast<std::size_t>(c), -1);
  for (std::size_t q = 0; q < lists->size(); ++q) {
    const auto& list = (*lists)[q];
    if (list.empty()) continue;
    for (Eigen::Index j = 0; j < c; ++j) {
      int best = list.front();
      for (int r : list)
        if (x->value(r, j) > x->value(best, j)) best = r;
      argmax[q * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)] = best;
      out(static_cast<Eigen::Index>(q), j) = x->value(best, j);
    }
  }
  return make_node(std::move(out), {x}, "gather_max", [argmax = std::move(argmax)](Node& n) {
    Matrix& g = n.parents[0]->grad_buffer();
    const Eigen::Index c = n.grad.cols();
    for (Eigen::Index q = 0; q < n.grad.rows(); ++q)
      for (Eigen::Index j = 0; j < c; ++j) {
        const int r = argmax[static_cast<std::size_t>(q * c + j)];
        if (r >= 0) g(r, j) += n.grad(q, j);
      }
  });
}

Var slot_gather(const Var& x, std::shared_ptr<const SlotGather> g) {
  const Eigen::Index c = x->value.cols();
  if (static_cast<std::size_t>(x->value.rows()) != g->n_in)
    throw ValidationError("slot_gather: input rows do not match");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(g->n_out),
                            static_cast<Eigen::Index>(g->n_slots) * c);
  for (std::size_t q = 0; q < g->n_out; ++q) {
    for (int e = g->row_start[q]; e < g->row_start[q + 1]; ++e) {
      const auto ue = static_cast<std::size_t>(e);
      out.row(static_cast<Eigen::Index>(q)).segment(g->slot[ue] * c, c) += g->weight[ue] * x->value.row(g->input[ue]);
    }
  }
  return make_node(std::move(out), {x}, "slot_gather", [g](Node& n) {
    Matrix& gx = n.parents[0]->grad_buffer();
    const Eigen::Index c = gx.cols();
    for (std::size_t q = 0; q < g->n_out; ++q) {
      for (int e = g->row_start[q]; e < g->row_start[q + 1]; ++e) {
        const auto ue = static_cast<std::size_t>(e);
        gx.row(g->input[ue]) += g->weight[ue] * n.grad.row(static_cast<Eigen::Index>(q)).segment(g->slot[ue] * c, c);
      }
    }
  });
}

Var smooth_l1(const Var& pred, const Matrix& target, double beta) {
  if (pred->value.rows() != target.rows() || pred->value.cols() != target.cols())
    throw ValidationError("smooth_l1: shape mismatch");
  const Matrix diff = pred->value - target;
  const double count = static_cast<double>(diff.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < diff.rows(); ++i)
    for (Eigen::Index j = 0; j < diff.cols(); ++j) {
      const double d = std::abs(diff(i, j));
      total += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return make_node(std::move(out), {pred}, "smooth_l1", [diff, beta, count](Node& n) {
    const double g = n.grad(0, 0) / count;
    n.parents[0]->grad_buffer() += diff.unaryExpr([beta, g](double d) {
      if (std::abs(d) < beta) return g * d / beta;
      return d > 0.0 ? g : -g;
    });
  });
}

// ---------------------------------------------------------------------------

namespace {

void record(GradCheckResult& res, double analytic, double numeric) {
  const double abs_err = std::abs(analytic - numeric);
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  res.max_abs_error = std::max(res.max_abs_error, abs_err);
  res.max_rel_error = std::max(res.max_rel_error, abs_err / denom);
  ++res.checked;
}

double scalar_of(const Var& v) {
  if (v->value.size() != 1) throw ValidationError("gradcheck: function must return a scalar");
  return v->value(0, 0);
}

}  // namespace

GradCheckResult gradcheck(const std::function<Var(std::span<const Var>)>& fn,
                          std::vector<Matrix> inputs, double h) {
  std::vector<Var> vars;
  for (Matrix& m : inputs) vars.push_back(variable(m));
  Var out = fn(vars);
  scalar_of(out);
  backward(out);
  std::vector<Matrix> analytic;
  for (const Var& v : vars) analytic.push_back(v->has_grad() ? v->grad : Matrix::Zero(v->value.rows(), v->value.cols()));

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].rows(); ++i)
      for (Eigen::Index j = 0; j < inputs[k].cols(); ++j) {
        const double orig = inputs[k](i, j);
        auto eval = [&](double v) {
          std::vector<Var> cs;
          for (std::size_t q = 0; q < inputs.size(); ++q) {
            Matrix m = inputs[q];
            if (q == k) m(i, j) = v;
            cs.push_back(constant(std::move(m)));
          }
          return scalar_of(fn(cs));
        };
        const double numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        record(res, analytic[k](i, j), numeric);
      }
  }
  return res;
}

GradCheckResult gradcheck_parameters(std::span<Parameter> params,
                                     const std::function<Var()>& loss_fn, double h,
                                     std::size_t max_per_param) {
  zero_grad(params);
  Var loss = loss_fn();
  scalar_of(loss);
  backward(loss);
  std::vector<Matrix> analytic;
  for (const Parameter& p : params) analytic.push_back(p.node->grad);

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& value = params[k].node->value;
    const auto total = static_cast<std::size_t>(value.size());
    const std::size_t step =
        (max_per_param == 0 || total <= max_per_param) ? 1 : (total + max_per_param - 1) / max_per_param;
    for (std::size_t flat = 0; flat < total; flat += step) {
      double* entry = value.data() + flat;
      const double orig = *entry;
      *entry = orig + h;
      const double up = scalar_of(loss_fn());
      *entry = orig - h;
      const double down = scalar_of(loss_fn());
      *entry = orig;
      record(res, analytic[k].data()[flat], (up - down) / (2.0 * h));
    }
  }
  zero_grad(params);
  return res;
}

// ---------------------------------------------------------------------------

void AdamW::step(std::span<Parameter> params, double lr) {
  if (m_.empty()) {
    for (const Parameter& p : params) {
      m_.push_back(Matrix::Zero(p.value().rows(), p.value().cols()));
      v_.push_back(Matrix::Zero(p.value().rows(), p.value().cols()));
    }
  }
  if (m_.size() != params.size()) throw ValidationError("AdamW: parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    Matrix& w = p.node->value;
    if (m_[k].rows() != w.rows() || m_[k].cols() != w.cols())
      throw ValidationError("AdamW: moment shape mismatch for " + p.name);
    if (!p.decay_exempt && cfg_.weight_decay != 0.0) w *= (1.0 - lr * cfg_.weight_decay);
    if (!p.node->has_grad()) {
      m_[k] *= cfg_.beta1;
      v_[k] *= cfg_.beta2;
    } else {
      const Matrix& g = p.node->grad;
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    }
    w.array() -= lr * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + cfg_.eps);
  }
}

double WarmRestartSchedule::operator()(int epoch) const {
  if (epoch < 0) throw ValidationError("epoch must be >= 0");
  long start = 0;
  long length = t0;
  while (epoch >= start + length) {
    start += length;
    length *= t_mult;
  }
  const double t_cur = static_cast<double>(epoch - start);
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * t_cur / static_cast<double>(length)));
}

std::vector<int> WarmRestartSchedule::restarts(int horizon) const {
  std::vector<int> out;
  long start = 0;
  long length = t0;
  while (start <= horizon) {
    out.push_back(static_cast<int>(start));
    start += length;
    length *= t_mult;
  }
  return out;
}

double cosine_warm_restart_lr(int epoch, double lr_max, double lr_min, int t0, int t_mult) {
  return WarmRestartSchedule{lr_max, lr_min, t0, t_mult}(epoch);
}

}  // namespace canopy::nn
