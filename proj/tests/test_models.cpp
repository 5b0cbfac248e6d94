#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "canopy/models.hpp"
#include "oracles.hpp"

using namespace canopy;
using namespace canopy::models;

namespace {

// Points at voxel centers of a 0.025 grid, so shifted copies quantize to
// exactly shifted keys.
Sample cell_centered_sample(Rng& rng, int n, double gap = 0.0) {
  Sample s{Matrix(n, 3), Matrix(n, kInputChannels)};
  for (int i = 0; i < n; ++i) {
    const double z = (static_cast<double>(rng.below(400)) + 0.5) * 0.025;
    s.positions.row(i) << (static_cast<double>(rng.below(80)) - 40.0 + 0.5) * 0.025,
        (static_cast<double>(rng.below(80)) - 40.0 + 0.5) * 0.025, z;
    const int count = 1 + static_cast<int>(rng.below(3));
    s.features.row(i) << 1.0 + static_cast<double>(rng.below(static_cast<std::uint64_t>(count))), count, z, gap;
  }
  return s;
}

Sample small_sample(Rng& rng, int n, double extent) {
  Sample s{Matrix(n, 3), Matrix(n, kInputChannels)};
  for (int i = 0; i < n; ++i) {
    const double z = rng.uniform(0.0, 20.0);
    s.positions.row(i) << rng.uniform(-extent, extent), rng.uniform(-extent, extent), z;
    s.features.row(i) << 1.0, 1.0 + static_cast<double>(rng.below(2)), z, 0.0;
  }
  return s;
}

Sample permuted(const Sample& s, Rng& rng) {
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(s.positions.rows()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Eigen::Index>(i);
  rng.shuffle(std::span<Eigen::Index>(perm));
  Sample out{Matrix(s.positions.rows(), 3), Matrix(s.features.rows(), s.features.cols())};
  for (Eigen::Index i = 0; i < s.positions.rows(); ++i) {
    out.positions.row(i) = s.positions.row(perm[static_cast<std::size_t>(i)]);
    out.features.row(i) = s.features.row(perm[static_cast<std::size_t>(i)]);
  }
  return out;
}

Matrix eval_forward(Model& m, const Sample& s) {
  return m.forward(std::span<const Sample>(&s, 1), false)->value;
}

// Full-batch AdamW on 8 samples until the loss falls below 1e-3.
int memorize(Model& model, const std::vector<Sample>& batch, int max_epochs) {
  Rng rng(3);
  const Matrix target = oracle::uniform_matrix(rng, static_cast<Eigen::Index>(batch.size()), kOutputs);
  nn::AdamW opt({0.9, 0.999, 1e-8, 0.0});
  for (int e = 0; e < max_epochs; ++e) {
    const nn::Var loss = nn::smooth_l1(model.forward(batch, true), target);
    if (loss->value(0, 0) < 1e-3) return e;
    nn::backward(loss);
    opt.step(model.parameters(), 0.01);
    nn::zero_grad(model.parameters());
  }
  return -1;
}

}  // namespace

TEST_CASE("kernel_influence: linear correlation") {
  const Vector3 k(0.1, 0.2, 0.3);
  CHECK(kernel_influence(k, k, 0.5) == 1.0);
  CHECK(kernel_influence(k + Vector3(0.5, 0, 0), k, 0.5) == 0.0);
  CHECK(kernel_influence(k + Vector3(0, 0.25, 0), k, 0.5) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("kpconv_apply: examples and the brute-force double loop") {
  Matrix support(1, 3), feat(1, 1), query(1, 3), w(1, 2);
  support << 0.3, 0.1, 0.2;
  query = support;
  feat << 2.0;
  w << 1.5, -0.5;
  const std::vector<Vector3> origin{Vector3::Zero()};
  Matrix out = kpconv_apply(support, feat, query, origin, w, 1.0, 0.5);
  CHECK(out(0, 0) == 3.0);
  CHECK(out(0, 1) == -1.0);

  Matrix far(1, 3);
  far << 0.3 + 0.6, 0.1, 0.2;
  out = kpconv_apply(far, feat, query, origin, w, 1.0, 0.5);
  CHECK(out(0, 0) == 0.0);

  Rng rng(11);
  const auto kernel = rigid_kernel_points(15, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix s = oracle::uniform_matrix(rng, 20, 3);
    const Matrix f = oracle::uniform_matrix(rng, 20, 3);
    const Matrix q = oracle::uniform_matrix(rng, 5, 3);
    const Matrix W = oracle::uniform_matrix(rng, 15 * 3, 4);
    const Matrix got = kpconv_apply(s, f, q, kernel, W, 1.0, 0.4);
    const Matrix ref = oracle::kpconv_brute(s, f, q, kernel, W, 1.0, 0.4);
    CHECK((got - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("rigid_kernel_points: small K and spacing") {
  const auto one = rigid_kernel_points(1, 2.0);
  REQUIRE(one.size() == 1);
  CHECK(one[0].norm() == 0.0);

  // With the center fixed, a second point minimizes 1/d at the boundary.
  const auto two = rigid_kernel_points(2, 2.0);
  REQUIRE(two.size() == 2);
  double best_radius = 0.0, best_energy = HUGE_VAL;
  for (int i = 1; i <= 132; ++i) {
    const double rad = 0.01 * i;
    const std::vector<Vector3> trial{Vector3::Zero(), Vector3(rad, 0, 0)};
    const double e = repulsion_energy(trial);
    if (e < best_energy) {
      best_energy = e;
      best_radius = rad;
    }
  }
  const double r2 = std::max(two[0].norm(), two[1].norm());
  CHECK(r2 == doctest::Approx(0.66 * 2.0).epsilon(1e-6));
  CHECK(best_radius == doctest::Approx(r2).epsilon(1e-9));

  for (int k : {5, 15}) {
    const auto pts = rigid_kernel_points(k, 1.0);
    Rng rng(static_cast<std::uint64_t>(k));
    double best_random = 0.0;
    for (int restart = 0; restart < 100; ++restart) {
      std::vector<Vector3> cand{Vector3::Zero()};
      while (static_cast<int>(cand.size()) < k) {
        const Vector3 v(rng.uniform(-0.66, 0.66), rng.uniform(-0.66, 0.66), rng.uniform(-0.66, 0.66));
        if (v.norm() <= 0.66) cand.push_back(v);
      }
      best_random = std::max(best_random, min_pairwise_distance(cand));
    }
    CHECK(min_pairwise_distance(pts) >= 0.9 * best_random);
    for (const Vector3& p : pts) CHECK(p.norm() <= 0.66 + 1e-12);
  }
}

TEST_CASE("SENet: zero input, permutation and translation invariance") {
  auto model = make_senet(SENetConfig::tiny(), 5);
  Rng rng(8);
  Sample s = cell_centered_sample(rng, 300, 0.5);

  Sample zero = s;
  zero.features.setZero();
  const Matrix z1 = eval_forward(*model, zero);
  const std::vector<Sample> pair{zero, s};
  const Matrix z2 = model->forward(pair, false)->value;
  CHECK(z1.allFinite());
  CHECK(z1.row(0) == z2.row(0));

  const Matrix base = eval_forward(*model, s);
  CHECK(base.rows() == 1);
  CHECK(base.cols() == 2);
  CHECK(eval_forward(*model, permuted(s, rng)) == base);

  // Pooling and strides make the network see keys modulo 3 * 2 * 2 * 2.
  for (int m : {-1, 1, 2}) {
    Sample moved = s;
    moved.positions.col(0).array() += 24.0 * m * 0.025;
    moved.positions.col(1).array() -= 48.0 * m * 0.025;
    CHECK(eval_forward(*model, moved) == base);
  }
}

TEST_CASE("SE block: forced gate values") {
  ParamStore store(3);
  const SEBlock block(store, "b", 8, 2, 1, 4);
  Rng rng(4);
  std::vector<sparse::VoxelKey> keys;
  for (int i = 0; i < 20; ++i) keys.push_back({0, i / 4, i % 4, 0});
  const nn::Var x = nn::constant(oracle::uniform_matrix(rng, 20, 8));
  const auto off = se_block_forward(block, x, keys, true, 0.0);
  CHECK(off.out->value == x->value);
  CHECK(off.keys == keys);
  const auto on = se_block_forward(block, x, keys, true, 1.0);
  const auto half = se_block_forward(block, x, keys, true, 0.5);
  CHECK((half.out->value - 0.5 * (on.out->value + off.out->value)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((on.out->value - x->value).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("PointNet: permutation and duplication invariance") {
  auto model = make_pointnet(PointNetConfig::tiny(), 9);
  Rng rng(1);
  const Sample s = small_sample(rng, 50, 1.0);
  const Matrix base = eval_forward(*model, s);
  CHECK(eval_forward(*model, permuted(s, rng)) == base);
  Sample dup{Matrix(100, 3), Matrix(100, kInputChannels)};
  dup.positions << s.positions, s.positions;
  dup.features << s.features, s.features;
  CHECK(eval_forward(*model, dup) == base);
}

TEST_CASE("KP-CNN: single point and permutation") {
  KPConvConfig cfg = KPConvConfig::tiny();
  cfg.grid = 0.1;
  auto model = make_kpcnn(cfg, 2);
  Sample one{Matrix(1, 3), Matrix(1, kInputChannels)};
  one.positions << 0.1, -0.2, 5.0;
  one.features << 1, 1, 5.0, 0.0;
  CHECK(eval_forward(*model, one).allFinite());

  Rng rng(6);
  const Sample s = small_sample(rng, 80, 0.5);
  CHECK(eval_forward(*model, permuted(s, rng)) == eval_forward(*model, s));
}

TEST_CASE("models memorize eight samples") {
  Rng rng(2);
  std::vector<Sample> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(small_sample(rng, 40, 0.3));

  SENetConfig sc = SENetConfig::tiny();
  sc.grid = 0.05;
  auto senet = make_senet(sc, 1);
  CHECK(memorize(*senet, batch, 500) >= 0);

  KPConvConfig kc = KPConvConfig::tiny();
  kc.grid = 0.1;
  auto kp = make_kpcnn(kc, 1);
  CHECK(memorize(*kp, batch, 500) >= 0);

  auto pn = make_pointnet(PointNetConfig::tiny(), 1);
  CHECK(memorize(*pn, batch, 500) >= 0);
}

TEST_CASE("model state and config round trip") {
  auto a = make_senet(SENetConfig::tiny(), 4);
  auto b = make_model(ModelKind::minkowski, a->config_text(), 99);
  load_model_state(*b, model_state_sections(*a));
  Rng rng(7);
  const Sample s = cell_centered_sample(rng, 100);
  CHECK(eval_forward(*a, s) == eval_forward(*b, s));
  CHECK(senet_config_from_text(a->config_text()).widths == SENetConfig::tiny().widths);
  CHECK_THROWS_AS(make_model(ModelKind::minkowski, "nonsense_key=3\n", 1), ValidationError);
  CHECK(parse_model_kind("pointnet") == ModelKind::pointnet);
  CHECK_THROWS_AS(parse_model_kind("resnet"), ValidationError);
}
