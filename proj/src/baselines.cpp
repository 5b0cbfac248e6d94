#include "canopy/baselines.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>

#include "canopy/common.hpp"
#include "canopy/features.hpp"

namespace canopy {

// ---------------------------------------------------------------------------
// Linear

double LinearModel::predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  return row.dot(weights) + bias;
}

Eigen::VectorXd LinearModel::predict_rows(const Eigen::MatrixXd& X) const {
  return (X * weights).array() + bias;
}

LinearModel fit_linear(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (y.size() != n) throw ValidationError("fit_linear: X and y row counts differ");
  if (n <= d + 1) {
    throw ValidationError("fit_linear: need more than " + std::to_string(d + 1) +
                          " rows, got " + std::to_string(n));
  }
  if (!X.allFinite() || !y.allFinite()) throw ValidationError("fit_linear: non-finite input");

  Eigen::MatrixXd A(n, d + 1);
  A.leftCols(d) = X;
  A.col(d).setOnes();
  Eigen::MatrixXd gram = A.transpose() * A;
  gram.diagonal().array() += kRidgeJitter;
  const Eigen::VectorXd rhs = A.transpose() * y;

  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      (ldlt.vectorD().array() <= 0.0).any()) {
    throw RuntimeError("rank deficient");
  }
  const Eigen::VectorXd beta = ldlt.solve(rhs);
  if (!beta.allFinite()) throw RuntimeError("rank deficient");

  LinearModel m;
  m.weights = beta.head(d);
  m.bias = beta(d);
  return m;
}

// ---------------------------------------------------------------------------
// Power model

namespace {

// 0^w = 0 for w > 0 and 0^0 = 1.
double power_term(double base, double exponent) {
  if (base == 0.0) return exponent == 0.0 ? 1.0 : (exponent > 0.0 ? 0.0 : HUGE_VAL);
  return std::pow(base, exponent);
}

double safe_log(double v) { return v > 0.0 ? std::log(v) : 0.0; }

}  // namespace

double PowerModel::predict(const PowerInputs& in) const {
  return w[0] * power_term(in.mean_z, w[1]) * power_term(in.p95_z, w[2]) *
         power_term(in.interception_ratio, w[3]);
}

std::vector<PowerInputs> power_inputs_from_features(const Eigen::MatrixXd& X) {
  if (X.cols() != static_cast<Eigen::Index>(kFeatureCount))
    throw ValidationError("power model expects the 27-column feature matrix");
  std::vector<PowerInputs> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = {
        X(i, static_cast<Eigen::Index>(kFeatureMeanZAboveGround)),
        X(i, static_cast<Eigen::Index>(kFeatureP95AboveGround)),
        X(i, static_cast<Eigen::Index>(kFeatureInterceptionRatio))};
  }
  return out;
}

double power_objective(const PowerModel& m, const std::vector<PowerInputs>& inputs,
                       const Eigen::VectorXd& y) {
  double sse = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double r = y(static_cast<Eigen::Index>(i)) - m.predict(inputs[i]);
    sse += r * r;
  }
  return sse;
}

PowerModel fit_power(const std::vector<PowerInputs>& inputs, const Eigen::VectorXd& y,
                     const PowerFitOptions& opt, PowerFitReport* report) {
  if (static_cast<Eigen::Index>(inputs.size()) != y.size())
    throw ValidationError("fit_power: inputs and targets differ in length");
  for (const PowerInputs& in : inputs) {
    if (in.mean_z < 0.0 || in.p95_z < 0.0 || in.interception_ratio < 0.0)
      throw ValidationError("fit_power: inputs must be non-negative");
  }

  // Parameter layout: index 0 is w1, then one entry per free exponent.
  std::vector<int> exponent_slot;  // which of w2..w4 each free parameter is
  for (int e = 0; e < 3; ++e)
    if (opt.free_exponents[static_cast<std::size_t>(e)]) exponent_slot.push_back(e);
  const auto p = static_cast<Eigen::Index>(1 + exponent_slot.size());

  // Stage 1: log-space OLS on strictly positive rows.
  std::vector<std::size_t> positive;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const PowerInputs& in = inputs[i];
    if (y(static_cast<Eigen::Index>(i)) > 0.0 && in.mean_z > 0.0 && in.p95_z > 0.0 &&
        in.interception_ratio > 0.0)
      positive.push_back(i);
  }
  if (positive.size() < 10) {
    throw ValidationError("fit_power: need at least 10 strictly positive samples, got " +
                          std::to_string(positive.size()));
  }
  Eigen::MatrixXd L(static_cast<Eigen::Index>(positive.size()), p);
  Eigen::VectorXd ly(static_cast<Eigen::Index>(positive.size()));
  for (std::size_t r = 0; r < positive.size(); ++r) {
    const PowerInputs& in = inputs[positive[r]];
    const std::array<double, 3> logs = {std::log(in.mean_z), std::log(in.p95_z),
                                        std::log(in.interception_ratio)};
    const auto row = static_cast<Eigen::Index>(r);
    L(row, 0) = 1.0;
    for (std::size_t k = 0; k < exponent_slot.size(); ++k)
      L(row, static_cast<Eigen::Index>(k + 1)) = logs[static_cast<std::size_t>(exponent_slot[k])];
    ly(row) = std::log(y(static_cast<Eigen::Index>(positive[r])));
  }
  const Eigen::VectorXd init = L.colPivHouseholderQr().solve(ly);

  PowerModel model;
  model.w = {std::exp(init(0)), 0.0, 0.0, 0.0};
  for (std::size_t k = 0; k < exponent_slot.size(); ++k)
    model.w[static_cast<std::size_t>(exponent_slot[k]) + 1] = init(static_cast<Eigen::Index>(k + 1));

  auto to_params = [&](const PowerModel& m) {
    Eigen::VectorXd theta(p);
    theta(0) = m.w[0];
    for (std::size_t k = 0; k < exponent_slot.size(); ++k)
      theta(static_cast<Eigen::Index>(k + 1)) = m.w[static_cast<std::size_t>(exponent_slot[k]) + 1];
    return theta;
  };
  auto from_params = [&](const Eigen::VectorXd& theta) {
    PowerModel m = model;
    m.w[0] = theta(0);
    for (std::size_t k = 0; k < exponent_slot.size(); ++k)
      m.w[static_cast<std::size_t>(exponent_slot[k]) + 1] = theta(static_cast<Eigen::Index>(k + 1));
    return m;
  };

  // Stage 2: Levenberg-Marquardt on the original scale over every row.
  const auto n = static_cast<Eigen::Index>(inputs.size());
  double objective = power_objective(model, inputs, y);
  if (!std::isfinite(objective)) throw RuntimeError("diverged");
  PowerFitReport local;
  local.initial_objective = objective;
  double lambda = opt.initial_damping;
  Eigen::MatrixXd J(n, p);
  Eigen::VectorXd residual(n);
  int iter = 0;
  bool converged = false;
  for (; iter < opt.max_iterations && objective > 0.0 && !converged; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const PowerInputs& in = inputs[static_cast<std::size_t>(i)];
      const double g = power_term(in.mean_z, model.w[1]) * power_term(in.p95_z, model.w[2]) *
                       power_term(in.interception_ratio, model.w[3]);
      const double f = model.w[0] * g;
      const std::array<double, 3> logs = {safe_log(in.mean_z), safe_log(in.p95_z),
                                          safe_log(in.interception_ratio)};
      J(i, 0) = g;
      for (std::size_t k = 0; k < exponent_slot.size(); ++k)
        J(i, static_cast<Eigen::Index>(k + 1)) = f * logs[static_cast<std::size_t>(exponent_slot[k])];
      residual(i) = y(i) - f;
    }
    const Eigen::MatrixXd JtJ = J.transpose() * J;
    const Eigen::VectorXd Jtr = J.transpose() * residual;
    const Eigen::VectorXd theta = to_params(model);
    bool accepted = false;
    while (!accepted && lambda < 1e20) {
      Eigen::MatrixXd A = JtJ;
      for (Eigen::Index k = 0; k < p; ++k)
        A(k, k) += lambda * std::max(JtJ(k, k), 1e-12);
      const Eigen::VectorXd step = A.ldlt().solve(Jtr);
      const Eigen::VectorXd candidate = theta + step;
      const PowerModel trial = from_params(candidate);
      const double trial_obj =
          (candidate.allFinite() && trial.w[0] > 0.0) ? power_objective(trial, inputs, y) : HUGE_VAL;
      if (std::isfinite(trial_obj) && trial_obj < objective) {
        const double rel = (objective - trial_obj) / objective;
        model = trial;
        objective = trial_obj;
        local.accepted_objectives.push_back(objective);
        lambda = std::max(lambda / 10.0, 1e-15);
        accepted = true;
        converged = rel < opt.relative_tolerance;
      } else {
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  if (!std::isfinite(objective) || !std::isfinite(model.w[0])) throw RuntimeError("diverged");
  local.iterations = iter;
  local.final_objective = objective;
  if (report) *report = std::move(local);
  return model;
}

// ---------------------------------------------------------------------------
// Random forest

std::string ForestParams::describe() const {
  std::ostringstream os;
  os << "feature_ratio=" << feature_ratio << " sample_ratio=" << sample_ratio
     << " max_depth=" << (max_depth == kUnlimitedDepth ? std::string("inf") : std::to_string(max_depth))
     << " min_leaf=" << min_leaf;
  return os.str();
}

double RegressionTree::predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  int node = 0;
  while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const TreeNode& t = nodes[static_cast<std::size_t>(node)];
    node = row(t.feature) <= t.threshold ? t.left : t.right;
  }
  return nodes[static_cast<std::size_t>(node)].value;
}

int RegressionTree::depth() const {
  int d = 0;
  for (const TreeNode& n : nodes) d = std::max(d, n.depth);
  return d;
}

namespace {

void validate_params(const ForestParams& hp, Eigen::Index n_rows) {
  if (!(hp.feature_ratio > 0.0 && hp.feature_ratio <= 1.0))
    throw ValidationError("feature_ratio must be in (0,1]");
  if (!(hp.sample_ratio > 0.0 && hp.sample_ratio <= 1.0))
    throw ValidationError("sample_ratio must be in (0,1]");
  if (hp.min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
  if (hp.max_depth < 0 && hp.max_depth != kUnlimitedDepth)
    throw ValidationError("max_depth must be >= 0 or unlimited");
  if (hp.min_leaf >= n_rows) throw ValidationError("min_leaf must be smaller than the row count");
}

struct TreeBuilder {
  const Eigen::MatrixXd& X;
  const Eigen::VectorXd& y;
  const ForestParams& hp;
  Rng rng;
  std::size_t n_features_per_split;
  RegressionTree tree;

  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  // Rows stay in canonical order; per-feature scans use a stable sort.
  int build(std::vector<std::uint32_t> rows, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double sum = 0.0;
    for (std::uint32_t r : rows) sum += y(r);
    const double n = static_cast<double>(rows.size());
    {
      TreeNode& node = tree.nodes.back();
      node.value = sum / n;
      node.n_samples = static_cast<int>(rows.size());
      node.depth = depth;
    }
    const bool depth_ok = hp.max_depth == kUnlimitedDepth || depth < hp.max_depth;
    if (!depth_ok || rows.size() < 2 * static_cast<std::size_t>(hp.min_leaf)) return id;

    const Split best = find_split(rows, sum);
    if (best.feature < 0) return id;

    std::vector<std::uint32_t> left, right;
    for (std::uint32_t r : rows) (X(r, best.feature) <= best.threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(std::move(left), depth + 1);
    const int rgt = build(std::move(right), depth + 1);
    TreeNode& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = l;
    node.right = rgt;
    return id;
  }

  Split find_split(const std::vector<std::uint32_t>& rows, double total) {
    const auto d = static_cast<std::size_t>(X.cols());
    std::vector<int> features(d);
    std::iota(features.begin(), features.end(), 0);
    for (std::size_t i = 0; i < n_features_per_split; ++i) {
      const std::size_t j = i + rng.below(d - i);
      std::swap(features[i], features[j]);
    }
    features.resize(n_features_per_split);
    std::sort(features.begin(), features.end());

    const double n = static_cast<double>(rows.size());
    const double parent = total * total / n;
    const auto min_leaf = static_cast<std::size_t>(hp.min_leaf);
    Split best;
    std::vector<std::uint32_t> order(rows);
    for (int f : features) {
      order = rows;
      std::stable_sort(order.begin(), order.end(),
                       [&](std::uint32_t a, std::uint32_t b) { return X(a, f) < X(b, f); });
      double left_sum = 0.0;
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        left_sum += y(order[i]);
        const std::size_t nl = i + 1;
        const std::size_t nr = order.size() - nl;
        const double xa = X(order[i], f);
        const double xb = X(order[i + 1], f);
        if (xa == xb || nl < min_leaf || nr < min_leaf) continue;
        const double right_sum = total - left_sum;
        const double gain = left_sum * left_sum / static_cast<double>(nl) +
                            right_sum * right_sum / static_cast<double>(nr) - parent;
        if (gain > best.gain + 1e-12 * std::abs(parent) && gain > 0.0) {
          double thr = 0.5 * (xa + xb);
          if (!(thr < xb)) thr = xa;
          best = {f, thr, gain};
        }
      }
    }
    return best;
  }
};

std::uint64_t row_fingerprint(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                              Eigen::Index r) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    h = mix_seed(h, std::bit_cast<std::uint64_t>(X(r, c)));
  return mix_seed(h, std::bit_cast<std::uint64_t>(y(r)));
}

// Orders rows by a seed-dependent key derived from their content. Identical
// rows are interchangeable, so the order is a function of the row multiset.
std::vector<std::uint32_t> content_order(const Eigen::MatrixXd& X,
                                         const Eigen::VectorXd& y,
                                         const std::vector<std::uint64_t>& fingerprints,
                                         std::uint64_t seed) {
  std::vector<std::uint32_t> idx(static_cast<std::size_t>(X.rows()));
  std::iota(idx.begin(), idx.end(), 0u);
  std::vector<std::uint64_t> key(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) key[i] = mix_seed(seed, fingerprints[i]);
  std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (key[a] != key[b]) return key[a] < key[b];
    for (Eigen::Index c = 0; c < X.cols(); ++c)
      if (X(a, c) != X(b, c)) return X(a, c) < X(b, c);
    return y(a) < y(b);
  });
  return idx;
}

RegressionTree build_tree(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                          std::vector<std::uint32_t> rows, const ForestParams& hp,
                          std::uint64_t seed) {
  const auto d = static_cast<std::size_t>(X.cols());
  const auto n_feat = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(hp.feature_ratio * static_cast<double>(d) - 1e-12)), 1, d);
  TreeBuilder b{X, y, hp, Rng(seed), n_feat, {}};
  b.tree.in_sample = rows;
  std::sort(b.tree.in_sample.begin(), b.tree.in_sample.end());
  b.build(std::move(rows), 0);
  return std::move(b.tree);
}

}  // namespace

RegressionTree fit_tree(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const ForestParams& hp, std::uint64_t seed) {
  validate_params(hp, X.rows());
  std::vector<std::uint64_t> fp(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) fp[static_cast<std::size_t>(r)] = row_fingerprint(X, y, r);
  auto order = content_order(X, y, fp, seed);
  const auto m = static_cast<std::size_t>(
      std::ceil(hp.sample_ratio * static_cast<double>(X.rows()) - 1e-12));
  order.resize(std::clamp<std::size_t>(m, 1, order.size()));
  return build_tree(X, y, std::move(order), hp, mix_seed(seed, 0x5EED));
}

double RandomForestModel::predict(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  std::vector<double> out(trees.size());
  for (std::size_t t = 0; t < trees.size(); ++t) out[t] = trees[t].predict(row);
  std::sort(out.begin(), out.end());
  double s = 0.0;
  for (double v : out) s += v;
  return s / static_cast<double>(out.size());
}

Eigen::VectorXd RandomForestModel::predict_rows(const Eigen::MatrixXd& X) const {
  Eigen::VectorXd out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) out(i) = predict(X.row(i));
  return out;
}

RandomForestModel fit_random_forest(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                    const ForestParams& hp, int n_trees,
                                    std::uint64_t seed, int threads) {
  if (n_trees < 1) throw ValidationError("n_trees must be >= 1");
  if (X.rows() != y.size()) throw ValidationError("X and y row counts differ");
  validate_params(hp, X.rows());
  RandomForestModel model;
  model.params = hp;
  model.n_training_rows = static_cast<std::size_t>(X.rows());
  model.trees.resize(static_cast<std::size_t>(n_trees));
  model.tree_seeds.resize(static_cast<std::size_t>(n_trees));
  for (int t = 0; t < n_trees; ++t)
    model.tree_seeds[static_cast<std::size_t>(t)] = mix_seed(seed, static_cast<std::uint64_t>(t));
  std::vector<std::uint64_t> fp(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) fp[static_cast<std::size_t>(r)] = row_fingerprint(X, y, r);
  const auto m = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(hp.sample_ratio * static_cast<double>(X.rows()) - 1e-12)), 1,
      static_cast<std::size_t>(X.rows()));
  parallel_for(model.trees.size(), threads, [&](std::size_t t) {
    const std::uint64_t s = model.tree_seeds[t];
    auto order = content_order(X, y, fp, s);
    order.resize(m);
    model.trees[t] = build_tree(X, y, std::move(order), hp, mix_seed(s, 0x5EED));
  });
  try {
    model.oob_error = oob_error(model, X, y).mse;
  } catch (const ValidationError&) {
    // every row was in every tree's sample; oob_error stays NaN
  }
  return model;
}

OobResult oob_error(const RandomForestModel& model, const Eigen::MatrixXd& X,
                    const Eigen::VectorXd& y) {
  if (static_cast<std::size_t>(X.rows()) != model.n_training_rows)
    throw ValidationError("oob_error needs the training matrix");
  OobResult res;
  double sse = 0.0;
  std::vector<double> preds;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    preds.clear();
    for (const RegressionTree& t : model.trees) {
      if (!std::binary_search(t.in_sample.begin(), t.in_sample.end(), static_cast<std::uint32_t>(i)))
        preds.push_back(t.predict(X.row(i)));
    }
    if (preds.empty()) {
      ++res.rows_skipped;
      continue;
    }
    std::sort(preds.begin(), preds.end());
    double s = 0.0;
    for (double v : preds) s += v;
    const double r = y(i) - s / static_cast<double>(preds.size());
    sse += r * r;
    ++res.rows_used;
  }
  if (res.rows_used == 0) throw ValidationError("no OOB rows");
  res.mse = sse / static_cast<double>(res.rows_used);
  return res;
}

double tree_oob_error(const RegressionTree& tree, const Eigen::MatrixXd& X,
                      const Eigen::VectorXd& y) {
  double sse = 0.0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if (std::binary_search(tree.in_sample.begin(), tree.in_sample.end(), static_cast<std::uint32_t>(i)))
      continue;
    const double r = y(i) - tree.predict(X.row(i));
    sse += r * r;
    ++n;
  }
  if (n == 0) throw ValidationError("no OOB rows");
  return sse / static_cast<double>(n);
}

ForestGrid ForestGrid::standard() {
  ForestGrid g;
  for (int i = 1; i <= 10; ++i) {
    g.feature_ratios.push_back(i / 10.0);
    g.sample_ratios.push_back(i / 10.0);
  }
  for (int d = 5; d <= 20; ++d) g.max_depths.push_back(d);
  g.max_depths.push_back(kUnlimitedDepth);
  g.min_leafs = {1, 2, 4, 8, 16};
  return g;
}

GridSearchResult grid_search_oob(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                 const ForestGrid& grid, int n_trees,
                                 std::uint64_t seed, int threads) {
  if (grid.size() == 0) throw ValidationError("empty hyper-parameter grid");
  GridSearchResult res;
  res.best_oob = HUGE_VAL;
  bool have_best = false;
  for (double fr : grid.feature_ratios)
    for (double sr : grid.sample_ratios)
      for (int depth : grid.max_depths)
        for (int leaf : grid.min_leafs) {
          const ForestParams hp{fr, sr, depth, leaf};
          const RandomForestModel m = fit_random_forest(X, y, hp, n_trees, seed, threads);
          const double oob = std::isnan(m.oob_error) ? HUGE_VAL : m.oob_error;
          res.table.push_back({hp, oob});
          if (!have_best || oob < res.best_oob) {
            res.best = hp;
            res.best_oob = oob;
            have_best = true;
          }
        }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

std::string encode_linear(const LinearModel& m) {
  ByteWriter w;
  w.u64(static_cast<std::uint64_t>(m.weights.size()));
  w.f64s(m.weights.data(), static_cast<std::size_t>(m.weights.size()));
  w.f64(m.bias);
  return w.take();
}

LinearModel decode_linear(const std::string& payload) {
  ByteReader r(payload);
  LinearModel m;
  const auto n = r.u64();
  const auto v = r.f64s(static_cast<std::size_t>(n));
  m.weights = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  m.bias = r.f64();
  return m;
}

std::string encode_power(const PowerModel& m) {
  ByteWriter w;
  w.f64s(m.w.data(), m.w.size());
  return w.take();
}

PowerModel decode_power(const std::string& payload) {
  ByteReader r(payload);
  PowerModel m;
  const auto v = r.f64s(4);
  std::copy(v.begin(), v.end(), m.w.begin());
  return m;
}

std::string encode_forest(const RandomForestModel& m) {
  ByteWriter w;
  w.f64(m.params.feature_ratio);
  w.f64(m.params.sample_ratio);
  w.i64(m.params.max_depth);
  w.i64(m.params.min_leaf);
  w.u64(m.n_training_rows);
  w.f64(m.oob_error);
  w.u64(m.trees.size());
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    const RegressionTree& tree = m.trees[t];
    w.u64(m.tree_seeds[t]);
    w.u64(tree.in_sample.size());
    for (std::uint32_t r : tree.in_sample) w.u32(r);
    w.u64(tree.nodes.size());
    for (const TreeNode& n : tree.nodes) {
      w.i64(n.feature);
      w.f64(n.threshold);
      w.i64(n.left);
      w.i64(n.right);
      w.f64(n.value);
      w.i64(n.n_samples);
      w.i64(n.depth);
    }
  }
  return w.take();
}

RandomForestModel decode_forest(const std::string& payload) {
  ByteReader r(payload);
  RandomForestModel m;
  m.params.feature_ratio = r.f64();
  m.params.sample_ratio = r.f64();
  m.params.max_depth = static_cast<int>(r.i64());
  m.params.min_leaf = static_cast<int>(r.i64());
  m.n_training_rows = r.u64();
  m.oob_error = r.f64();
  const auto n_trees = r.u64();
  for (std::uint64_t t = 0; t < n_trees; ++t) {
    RegressionTree tree;
    m.tree_seeds.push_back(r.u64());
    const auto n_in = r.u64();
    for (std::uint64_t i = 0; i < n_in; ++i) tree.in_sample.push_back(r.u32());
    const auto n_nodes = r.u64();
    for (std::uint64_t i = 0; i < n_nodes; ++i) {
      TreeNode n;
      n.feature = static_cast<int>(r.i64());
      n.threshold = r.f64();
      n.left = static_cast<int>(r.i64());
      n.right = static_cast<int>(r.i64());
      n.value = r.f64();
      n.n_samples = static_cast<int>(r.i64());
      n.depth = static_cast<int>(r.i64());
      tree.nodes.push_back(n);
    }
    m.trees.push_back(std::move(tree));
  }
  return m;
}

}  // namespace canopy
