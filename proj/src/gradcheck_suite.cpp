#include <algorithm>
#include <cmath>
#include <memory>

#include "canopy/harness.hpp"

namespace canopy::harness {

using nn::GradCheckResult;
using nn::Matrix;
using nn::Var;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Entries bounded away from zero so kinks stay outside the difference step.
Matrix away_from_zero(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double mag = rng.uniform(0.1, 1.5);
    m.data()[i] = rng.bernoulli(0.5) ? mag : -mag;
  }
  return m;
}

// Distinct, well-separated values, shuffled.
Matrix distinct_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::vector<double> v(static_cast<std::size_t>(rows * cols));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i) - 1.0;
  rng.shuffle(std::span<double>(v));
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

// A weighted sum keeps every output entry's gradient distinct.
Var probe(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return nn::sum(nn::mul(y, nn::constant(random_matrix(rng, y->value.rows(), y->value.cols()))));
}

GradCheckResult check(std::function<Var(std::span<const Var>)> fn, std::vector<Matrix> inputs) {
  return nn::gradcheck(
      [fn = std::move(fn)](std::span<const Var> in) { return probe(fn(in), 99); },
      std::move(inputs));
}

std::vector<sparse::VoxelKey> random_keys(Rng& rng, int n, int box, int batches) {
  std::vector<sparse::VoxelKey> keys;
  for (int b = 0; b < batches; ++b)
    for (int t = 0; t < n; ++t)
      keys.push_back({b, static_cast<std::int32_t>(rng.below(box)),
                      static_cast<std::int32_t>(rng.below(box)),
                      static_cast<std::int32_t>(rng.below(box))});
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

std::vector<models::Sample> tiny_samples(std::uint64_t seed, int n_samples, int n_points,
                                         double extent) {
  Rng rng(seed);
  std::vector<models::Sample> out;
  for (int s = 0; s < n_samples; ++s) {
    models::Sample sample;
    sample.positions.resize(n_points, 3);
    sample.features.resize(n_points, models::kInputChannels);
    for (int i = 0; i < n_points; ++i) {
      sample.positions(i, 0) = rng.uniform(-extent, extent);
      sample.positions(i, 1) = rng.uniform(-extent, extent);
      sample.positions(i, 2) = rng.uniform(0.0, 2.0 * extent);
      const int count = 1 + static_cast<int>(rng.below(3));
      sample.features(i, 0) = static_cast<double>(1 + rng.below(count));
      sample.features(i, 1) = count;
      sample.features(i, 2) = sample.positions(i, 2);
      sample.features(i, 3) = 0.5 * s;
    }
    out.push_back(std::move(sample));
  }
  return out;
}

GradCheckResult check_model(models::Model& model, std::span<const models::Sample> batch) {
  Rng rng(5);
  const Matrix target = random_matrix(rng, static_cast<Eigen::Index>(batch.size()), models::kOutputs);
  auto& params = model.parameters();
  return nn::gradcheck_parameters(
      params, [&] { return nn::smooth_l1(model.forward(batch, true), target); }, 1e-5, 3);
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite() {
  std::vector<GradCheckCase> cases;
  auto add = [&](std::string name, std::function<GradCheckResult()> run) {
    cases.push_back({std::move(name), std::move(run)});
  };

  add("matmul", [] {
    Rng rng(1);
    return check([](auto in) { return nn::matmul(in[0], in[1]); },
                 {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)});
  });
  add("add", [] {
    Rng rng(2);
    return check([](auto in) { return nn::add(in[0], in[1]); },
                 {random_matrix(rng, 3, 2), random_matrix(rng, 3, 2)});
  });
  add("add_row", [] {
    Rng rng(3);
    return check([](auto in) { return nn::add_row(in[0], in[1]); },
                 {random_matrix(rng, 4, 3), random_matrix(rng, 1, 3)});
  });
  add("mul", [] {
    Rng rng(4);
    return check([](auto in) { return nn::mul(in[0], in[1]); },
                 {random_matrix(rng, 3, 3), random_matrix(rng, 3, 3)});
  });
  add("fully_connected", [] {
    Rng rng(5);
    return check([](auto in) { return nn::fully_connected(in[0], in[1], in[2]); },
                 {random_matrix(rng, 5, 3), random_matrix(rng, 3, 2), random_matrix(rng, 1, 2)});
  });
  add("concat_cols", [] {
    Rng rng(6);
    return check([](auto in) { return nn::concat_cols(in[0], in[1]); },
                 {random_matrix(rng, 3, 2), random_matrix(rng, 3, 4)});
  });
  add("sum", [] {
    Rng rng(7);
    return nn::gradcheck([](auto in) { return nn::sum(nn::mul(in[0], in[0])); },
                         {random_matrix(rng, 3, 3)});
  });
  add("relu", [] {
    Rng rng(8);
    return check([](auto in) { return nn::relu(in[0]); }, {away_from_zero(rng, 4, 3)});
  });
  add("elu", [] {
    Rng rng(9);
    return check([](auto in) { return nn::elu(in[0]); }, {away_from_zero(rng, 4, 3)});
  });
  add("sigmoid", [] {
    Rng rng(10);
    return check([](auto in) { return nn::sigmoid(in[0]); }, {random_matrix(rng, 4, 3, 2.0)});
  });
  add("batch_norm_train", [] {
    Rng rng(11);
    auto state = std::make_shared<nn::BatchNormState>(3);
    return check(
        [state](auto in) { return nn::batch_norm(in[0], in[1], in[2], *state, true); },
        {random_matrix(rng, 6, 3), random_matrix(rng, 1, 3), random_matrix(rng, 1, 3)});
  });
  add("batch_norm_eval", [] {
    Rng rng(12);
    auto state = std::make_shared<nn::BatchNormState>(3);
    state->running_mean << 0.2, -0.1, 0.4;
    state->running_var << 1.5, 0.7, 2.0;
    return check(
        [state](auto in) { return nn::batch_norm(in[0], in[1], in[2], *state, false); },
        {random_matrix(rng, 5, 3), random_matrix(rng, 1, 3), random_matrix(rng, 1, 3)});
  });
  const nn::Ranges ranges{{0, 3}, {3, 4}, {4, 8}};
  add("max_reduce", [ranges] {
    Rng rng(13);
    return check([ranges](auto in) { return nn::max_reduce(in[0], ranges); },
                 {distinct_matrix(rng, 8, 3)});
  });
  add("mean_reduce", [ranges] {
    Rng rng(14);
    return check([ranges](auto in) { return nn::mean_reduce(in[0], ranges); },
                 {random_matrix(rng, 8, 3)});
  });
  add("broadcast_rows", [ranges] {
    Rng rng(15);
    return check([ranges](auto in) { return nn::broadcast_rows(in[0], ranges); },
                 {random_matrix(rng, 3, 2)});
  });
  add("segment_matmul", [ranges] {
    Rng rng(16);
    return check([ranges](auto in) { return nn::segment_matmul(in[0], ranges, in[1]); },
                 {random_matrix(rng, 8, 3), random_matrix(rng, 3, 9)});
  });
  add("sparse_conv", [] {
    Rng rng(17);
    const auto in_keys = random_keys(rng, 14, 4, 2);
    const auto out_keys = sparse::strided_keys(in_keys, 2);
    const auto offsets = sparse::cubic_offsets(3);
    auto map = std::make_shared<const sparse::KernelMap>(
        sparse::convolution_map(in_keys, out_keys, offsets, 2));
    const auto n_in = static_cast<Eigen::Index>(in_keys.size());
    const auto taps = static_cast<Eigen::Index>(offsets.size());
    return check([map](auto in) { return nn::sparse_conv(in[0], map, in[1], in[2]); },
                 {random_matrix(rng, n_in, 2), random_matrix(rng, taps * 2, 3),
                  random_matrix(rng, 1, 3)});
  });
  add("gather_max", [] {
    Rng rng(18);
    auto lists = std::make_shared<const std::vector<std::vector<int>>>(
        std::vector<std::vector<int>>{{0, 2, 5}, {}, {1}, {3, 4, 5, 6}});
    return check([lists](auto in) { return nn::gather_max(in[0], lists); },
                 {distinct_matrix(rng, 7, 3)});
  });
  add("slot_gather", [] {
    Rng rng(19);
    auto g = std::make_shared<nn::SlotGather>();
    g->n_out = 3;
    g->n_in = 4;
    g->n_slots = 2;
    g->row_start = {0, 3, 3, 6};
    g->input = {0, 2, 3, 1, 1, 3};
    g->slot = {0, 1, 1, 0, 1, 0};
    g->weight = {0.5, 0.25, 0.9, 0.3, 0.7, 0.1};
    std::shared_ptr<const nn::SlotGather> cg = g;
    return check([cg](auto in) { return nn::slot_gather(in[0], cg); },
                 {random_matrix(rng, 4, 3)});
  });
  add("smooth_l1", [] {
    Rng rng(20);
    Matrix pred = away_from_zero(rng, 4, 2);
    // Residuals on both sides of the knee, none within 0.1 of it.
    const Matrix target = pred + (Matrix(4, 2) << 0.3, -2.0, 1.6, -0.5, 0.05, 3.0, -0.7, -1.4)
                                     .finished();
    return nn::gradcheck(
        [target](auto in) { return nn::smooth_l1(in[0], target); }, {pred});
  });
  add("se_block", [] {
    Rng rng(21);
    models::ParamStore store(22);
    auto block = std::make_shared<models::SEBlock>(store, "block", 4, 2, 2, 2);
    const auto keys = random_keys(rng, 12, 4, 2);
    Matrix x = random_matrix(rng, static_cast<Eigen::Index>(keys.size()), 4);
    auto input = nn::variable(x);
    const auto loss = [&] {
      return probe(models::se_block_forward(*block, input, keys, true).out, 23);
    };
    GradCheckResult r = nn::gradcheck_parameters(store.parameters(), loss);
    std::vector<nn::Parameter> in_param{{"input", input, false}};
    const GradCheckResult ri = nn::gradcheck_parameters(in_param, loss);
    r.max_rel_error = std::max(r.max_rel_error, ri.max_rel_error);
    r.max_abs_error = std::max(r.max_abs_error, ri.max_abs_error);
    r.checked += ri.checked;
    return r;
  });
  add("senet_tiny", [] {
    models::SENetConfig cfg = models::SENetConfig::tiny();
    cfg.grid = 0.05;
    auto model = models::make_senet(cfg, 31);
    const auto batch = tiny_samples(32, 2, 60, 0.25);
    return check_model(*model, batch);
  });
  add("kpcnn_tiny", [] {
    models::KPConvConfig cfg = models::KPConvConfig::tiny();
    cfg.grid = 0.1;
    auto model = models::make_kpcnn(cfg, 33);
    const auto batch = tiny_samples(34, 2, 40, 0.3);
    return check_model(*model, batch);
  });
  add("pointnet_tiny", [] {
    auto model = models::make_pointnet(models::PointNetConfig::tiny(), 35);
    const auto batch = tiny_samples(36, 2, 24, 0.5);
    return check_model(*model, batch);
  });
  return cases;
}

}  // namespace canopy::harness
