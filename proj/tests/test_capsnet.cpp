#include <cmath>
#include <doctest.h>

#include "icaps/capsnet.hpp"

using namespace icaps;

namespace {

double vec_norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ClassCapsuleOutput capsule_output_from(const Tensor& capsules) {
  ClassCapsuleOutput out;
  out.capsules = capsules;
  out.norms = l2norm_lastdim(capsules);
  return out;
}

// Capsules whose norms hit the requested values exactly (axis-aligned).
Tensor capsules_with_norms(const std::vector<float>& norms, int L) {
  const int k = static_cast<int>(norms.size());
  std::vector<float> v(static_cast<size_t>(k) * L, 0.0f);
  for (int j = 0; j < k; ++j) v[static_cast<size_t>(j) * L] = norms[static_cast<size_t>(j)];
  return Tensor::from_vector({1, k, L}, std::move(v));
}

}  // namespace

TEST_CASE("squash zero and norm identities") {
  Tensor zero = Tensor::zeros({1, 3});
  Tensor sz = squash_lastdim(zero);
  for (int i = 0; i < 3; ++i) CHECK(sz.data()[i] == 0.0f);

  // Unit input vector shrinks to norm 0.5.
  Tensor unit = Tensor::from_vector({1, 3}, {1, 0, 0});
  CHECK(l2norm_lastdim(squash_lastdim(unit)).item() == doctest::Approx(0.5).epsilon(1e-6));

  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor v = Tensor::uniform({1, 4}, rng, -3, 3);
    const double n = l2norm_lastdim(v).item();
    const double squashed = l2norm_lastdim(squash_lastdim(v)).item();
    CHECK(squashed == doctest::Approx(n * n / (1 + n * n)).epsilon(1e-6));
    CHECK(squashed < 1.0);
    // Direction preserved.
    Tensor sv = squash_lastdim(v);
    for (int i = 0; i < 4; ++i)
      CHECK(sv.data()[i] * v.data()[i] >= -1e-6f);
  }
}

TEST_CASE("squash is scale-monotone") {
  Rng rng(103);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor dir = Tensor::uniform({1, 3}, rng, -1, 1);
    const float s1 = rng.uniform(0.1f, 2.0f);
    const float s2 = s1 + rng.uniform(0.05f, 2.0f);
    const double n1 = l2norm_lastdim(squash_lastdim(mul_scalar(dir, s1))).item();
    const double n2 = l2norm_lastdim(squash_lastdim(mul_scalar(dir, s2))).item();
    CHECK(n1 < n2);
  }
}

TEST_CASE("squash gradient matches finite differences") {
  Rng rng(107);
  Tensor v = Tensor::uniform({2, 4}, rng, -2, 2);
  CHECK(grad_check([](const Tensor& t) { return sum(square(squash_lastdim(t))); }, v, 1e-3f,
                   1e-3f, 8, rng)
            .ok);
}

TEST_CASE("one-iteration routing gives uniform coupling") {
  Rng rng(109);
  CapsuleLayerParams params;
  params.routing_iterations = 1;
  params.w = Tensor::uniform({5, 3, 4, 2}, rng, -1, 1, true);
  Tensor u = Tensor::uniform({2, 5, 2}, rng, -1, 1);
  RoutingTrace trace;
  ClassCapsuleOutput out = dynamic_routing(u, params, &trace);
  REQUIRE(trace.couplings.size() == 1);
  const Tensor& c = trace.couplings[0];
  for (int64_t i = 0; i < c.numel(); ++i)
    CHECK(c.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));
  CHECK(out.capsules.shape() == Shape{2, 3, 4});
}

TEST_CASE("coupling rows are distributions at every iteration") {
  Rng rng(113);
  CapsuleLayerParams params;
  params.routing_iterations = 4;
  params.w = Tensor::uniform({6, 2, 3, 2}, rng, -1, 1, true);
  Tensor u = Tensor::uniform({3, 6, 2}, rng, -1, 1);
  RoutingTrace trace;
  dynamic_routing(u, params, &trace);
  REQUIRE(trace.couplings.size() == 4);
  for (const Tensor& c : trace.couplings) {
    const int rows = c.dim(0) * c.dim(1);
    const int k = c.dim(2);
    for (int r = 0; r < rows; ++r) {
      double s = 0;
      for (int j = 0; j < k; ++j) {
        const float v = c.data()[static_cast<int64_t>(r) * k + j];
        CHECK(v >= 0.0f);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("three-iteration routing matches a hand-unrolled oracle") {
  // One primary capsule (dim 2), two classes (dim 2), hand-set weights.
  CapsuleLayerParams params;
  params.routing_iterations = 3;
  params.w = Tensor::from_vector({1, 2, 2, 2}, {0.5f, -0.2f, 0.1f, 0.4f,   // W[0,0]
                                                -0.3f, 0.6f, 0.2f, -0.5f}  // W[0,1]
  );
  Tensor u = Tensor::from_vector({1, 1, 2}, {0.8f, -0.4f});

  ClassCapsuleOutput out = dynamic_routing(u, params);

  // Independent double-precision unroll of the same recurrence.
  const double uv[2] = {0.8, -0.4};
  const double W[2][2][2] = {{{0.5, -0.2}, {0.1, 0.4}}, {{-0.3, 0.6}, {0.2, -0.5}}};
  double uhat[2][2];
  for (int j = 0; j < 2; ++j)
    for (int l = 0; l < 2; ++l) uhat[j][l] = W[j][l][0] * uv[0] + W[j][l][1] * uv[1];
  double b[2] = {0, 0};
  std::vector<std::vector<double>> v_final(2, std::vector<double>(2));
  for (int it = 0; it < 3; ++it) {
    const double mx = std::max(b[0], b[1]);
    const double e0 = std::exp(b[0] - mx), e1 = std::exp(b[1] - mx);
    const double c0 = e0 / (e0 + e1), c1 = e1 / (e0 + e1);
    const double cpl[2] = {c0, c1};
    for (int j = 0; j < 2; ++j) {
      std::vector<double> s{cpl[j] * uhat[j][0], cpl[j] * uhat[j][1]};
      const double n = vec_norm(s);
      const double factor = n > 0 ? n / (1 + n * n) : 0.0;
      v_final[j] = {factor * s[0], factor * s[1]};
      b[j] += uhat[j][0] * v_final[j][0] + uhat[j][1] * v_final[j][1];
    }
  }
  for (int j = 0; j < 2; ++j)
    for (int l = 0; l < 2; ++l)
      CHECK(std::fabs(out.capsules.at({0, j, l}) - v_final[j][l]) < 1e-6);
}

TEST_CASE("routing rejects zero iterations and propagates gradients") {
  Rng rng(127);
  CapsuleLayerParams params;
  params.routing_iterations = 0;
  params.w = Tensor::uniform({2, 2, 2, 2}, rng, -1, 1, true);
  Tensor u = Tensor::uniform({1, 2, 2}, rng, -1, 1);
  CHECK_THROWS_AS(dynamic_routing(u, params), ValueError);

  params.routing_iterations = 3;
  ClassCapsuleOutput out = dynamic_routing(u, params);
  sum(square(out.capsules)).backward();
  CHECK(params.w.grad().defined());
}

TEST_CASE("margin loss exact values") {
  MarginLossParams p;  // lambda 1
  // Both hinges inactive exactly at the thresholds.
  CHECK(margin_loss(capsule_output_from(capsules_with_norms({0.9f, 0.1f}, 4)), {0}, p).item() ==
        doctest::Approx(0.0).epsilon(1e-9));
  // Only the positive hinge active: (0.9)^2.
  CHECK(margin_loss(capsule_output_from(capsules_with_norms({0.0f, 0.0f}, 4)), {0}, p).item() ==
        doctest::Approx(0.81).epsilon(1e-6));
  // (0.4)^2 + 0.5*(0.5)^2 with one wrong class at 0.6 and two others at 0.
  CHECK(margin_loss(capsule_output_from(capsules_with_norms({0.5f, 0.6f, 0.0f, 0.0f}, 4)), {0}, p)
            .item() == doctest::Approx(0.285).epsilon(1e-6));
  CHECK_THROWS_AS(
      margin_loss(capsule_output_from(capsules_with_norms({0.5f, 0.5f}, 4)), {2}, p), ValueError);
}

TEST_CASE("margin loss is zero iff norms clear both thresholds") {
  MarginLossParams p;
  Rng rng(131);
  for (int trial = 0; trial < 30; ++trial) {
    const float ny = rng.uniform(0.0f, 0.99f);
    const float nw = rng.uniform(0.0f, 0.99f);
    const float loss =
        margin_loss(capsule_output_from(capsules_with_norms({ny, nw}, 3)), {0}, p).item();
    const bool should_be_zero = ny >= p.m_plus && nw <= p.m_minus;
    if (should_be_zero)
      CHECK(loss == 0.0f);
    else
      CHECK(loss > 0.0f);
  }
}

TEST_CASE("margin loss gradient matches finite differences") {
  Rng rng(137);
  MarginLossParams p;
  Tensor caps = Tensor::uniform({3, 2, 4}, rng, -0.7f, 0.7f);
  auto f = [&](const Tensor& t) {
    return margin_loss(capsule_output_from(t), {0, 1, 0}, p);
  };
  CHECK(grad_check(f, caps, 1e-3f, 1e-3f, 20, rng).ok);
}

TEST_CASE("reconstruction loss values and oracle") {
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0f);
  CHECK(reconstruction_loss(x, x, 1.0f).item() == 0.0f);
  CHECK(reconstruction_loss(x, ones, 1.0f).item() == doctest::Approx(4.0).epsilon(1e-9));
  CHECK_THROWS_AS(reconstruction_loss(x, Tensor::zeros({1, 1, 3, 3}), 1.0f), ShapeError);

  Rng rng(139);
  Tensor a = Tensor::uniform({3, 1, 4, 4}, rng, 0, 1);
  Tensor b = Tensor::uniform({3, 1, 4, 4}, rng, 0, 1);
  // Brute-force sum of squares, averaged over the batch.
  double expect = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    expect += d * d;
  }
  expect /= 3.0;
  CHECK(reconstruction_loss(a, b, 0.5f).item() == doctest::Approx(0.5 * expect).epsilon(1e-5));

  CHECK(grad_check([&](const Tensor& t) { return reconstruction_loss(t, b, 0.5f); }, a, 1e-3f,
                   1e-3f, 20, rng)
            .ok);
}
