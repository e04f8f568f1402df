#include <cmath>
#include <cstring>
#include <doctest.h>

#include "icaps/losses.hpp"

using namespace icaps;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.cc_conv1_channels = 4;
  cfg.pc_capsule_types = 2;
  cfg.enc_conv1_channels = 4;
  cfg.enc_conv2_channels = 4;
  cfg.gen_fc_channels = 4;
  cfg.gen_conv1_channels = 4;
  cfg.critic_conv1_channels = 4;
  cfg.critic_conv2_channels = 4;
  cfg.critic_fc = 8;
  cfg.cr_conv1_channels = 4;
  cfg.cr_conv2_channels = 4;
  cfg.cr_fc = 8;
  return cfg;
}

// Eq.-style re-evaluation of one signed family term with plain loops.
double family_term_oracle(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.dim(0), k = logits.dim(1);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    double anti = 0, pos = 0;
    for (int j = 0; j < k; ++j) {
      const double v = logits.at({i, j});
      if (j == labels[static_cast<size_t>(i)])
        pos += v;
      else
        anti += v;
    }
    total += anti - pos;
  }
  return total / n;
}

}  // namespace

TEST_CASE("loss_cg sign structure and oracle") {
  // Huge correct-class logits make every family strongly negative.
  const std::vector<int> y{0, 1};
  Tensor confident = Tensor::from_vector({2, 2}, {50.0f, 0.0f, 0.0f, 50.0f});
  Tensor v = loss_cg(confident, y, confident, y, confident, y, 1.0f);
  CHECK(v.item() < -100.0f);

  // k=2 with uniform logits [a,a] contributes zero per family.
  Tensor uniform = Tensor::from_vector({2, 2}, {3.0f, 3.0f, -1.0f, -1.0f});
  CHECK(loss_cg(uniform, y, uniform, y, uniform, y, 1.0f).item() == doctest::Approx(0).epsilon(1e-6));

  Rng rng(211);
  Tensor lr = Tensor::uniform({4, 3}, rng, -2, 2);
  Tensor lrec = Tensor::uniform({4, 3}, rng, -2, 2);
  Tensor lsw = Tensor::uniform({4, 3}, rng, -2, 2);
  const std::vector<int> labels{0, 2, 1, 2};
  const double expect = family_term_oracle(lr, labels) + family_term_oracle(lrec, labels) +
                        family_term_oracle(lsw, labels);
  CHECK(loss_cg(lr, labels, lrec, labels, lsw, labels, 0.7f).item() ==
        doctest::Approx(0.7 * expect).epsilon(1e-5));

  CHECK(grad_check(
            [&](const Tensor& t) { return loss_cg(t, labels, lrec, labels, lsw, labels, 1.0f); },
            lr, 1e-3f, 1e-3f, 12, rng)
            .ok);
}

TEST_CASE("loss_cs values and oracle") {
  Tensor a = Tensor::from_vector({1, 2}, {1, 0});
  Tensor b = Tensor::from_vector({1, 2}, {0, 1});
  CHECK(loss_cs(a, a, 1.0f).item() == 0.0f);
  CHECK(loss_cs(a, b, 1.0f).item() == doctest::Approx(2.0).epsilon(1e-9));
  CHECK_THROWS_AS(loss_cs(a, Tensor::zeros({1, 3}), 1.0f), ShapeError);

  Rng rng(223);
  Tensor x = Tensor::uniform({5, 4}, rng, -2, 2);
  Tensor y = Tensor::uniform({5, 4}, rng, -2, 2);
  double expect = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x.data()[i]) - y.data()[i];
    expect += d * d;
  }
  expect /= 5.0;
  CHECK(loss_cs(x, y, 0.1f).item() == doctest::Approx(0.1 * expect).epsilon(1e-5));
  CHECK(grad_check([&](const Tensor& t) { return loss_cs(t, y, 0.1f); }, x, 1e-3f, 1e-3f, 12, rng)
            .ok);
}

TEST_CASE("loss_rs values and oracle") {
  Tensor a = Tensor::from_vector({1, 3}, {1, 2, 3});
  CHECK(loss_rs(a, a, 1.0f).item() == 0.0f);
  Tensor b = Tensor::from_vector({1, 3}, {1, 3, 3});
  CHECK(loss_rs(a, b, 1.0f).item() == doctest::Approx(1.0).epsilon(1e-9));

  Rng rng(227);
  Tensor x = Tensor::uniform({6, 8}, rng, -1, 1);
  Tensor y = Tensor::uniform({6, 8}, rng, -1, 1);
  double expect = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x.data()[i]) - y.data()[i];
    expect += d * d;
  }
  expect /= 6.0;
  CHECK(loss_rs(x, y, 0.1f).item() == doctest::Approx(0.1 * expect).epsilon(1e-5));
  CHECK(grad_check([&](const Tensor& t) { return loss_rs(t, y, 1.0f); }, x, 1e-3f, 1e-3f, 12, rng)
            .ok);
}

TEST_CASE("loss_concept selection, ties and equivariance") {
  // Batch means engineered directly: single-row batches.
  Tensor ci = Tensor::from_vector({1, 4}, {0.5f, 0.2f, 0.9f, 0.4f});
  Tensor cj = Tensor::zeros({1, 4});
  CHECK(loss_concept(ci, cj, 1.0f).item() == doctest::Approx(-0.2).epsilon(1e-6));
  CHECK(loss_concept(cj, cj, 1.0f).item() == 0.0f);
  CHECK_THROWS_AS(loss_concept(Tensor::zeros({0, 4}), cj, 1.0f), ValueError);

  // Tie between dims 1 and 3 breaks toward the lowest index: gradient
  // lands on dimension 1 only.
  Tensor tied = Tensor::from_vector({1, 4}, {0.5f, 0.2f, 0.9f, 0.2f}).set_requires_grad(true);
  Tensor loss = loss_concept(tied, cj, 1.0f);
  CHECK(loss.item() == doctest::Approx(-0.2).epsilon(1e-6));
  loss.backward();
  CHECK(tied.grad().data()[1] != 0.0f);
  CHECK(tied.grad().data()[3] == 0.0f);

  // Permutation equivariance: permuting both batches identically leaves
  // the value unchanged.
  Rng rng(229);
  Tensor bi = Tensor::uniform({6, 4}, rng, -1, 1);
  Tensor bj = Tensor::uniform({6, 4}, rng, -1, 1);
  const float base = loss_concept(bi, bj, 0.1f).item();
  const std::vector<int> perm{2, 0, 3, 1};
  auto permute_cols = [&](const Tensor& t) {
    std::vector<float> v(static_cast<size_t>(t.numel()));
    for (int i = 0; i < t.dim(0); ++i)
      for (int l = 0; l < 4; ++l)
        v[static_cast<size_t>(i) * 4 + l] = t.at({i, perm[static_cast<size_t>(l)]});
    return Tensor::from_vector(t.shape(), std::move(v));
  };
  CHECK(loss_concept(permute_cols(bi), permute_cols(bj), 0.1f).item() ==
        doctest::Approx(base).epsilon(1e-6));

  // Unique-minimum instance is differentiable.
  CHECK(grad_check([&](const Tensor& t) { return loss_concept(t, cj, 0.5f); }, ci, 1e-4f, 1e-3f,
                   4, rng)
            .ok);
}

TEST_CASE("loss_cr values and oracle") {
  Tensor onehot = Tensor::from_vector({1, 4}, {0, 0, 1, 0});
  CHECK(loss_cr(onehot, {2}, 1.0f).item() == doctest::Approx(0.0).epsilon(1e-6));
  Tensor uniform = Tensor::full({1, 4}, 0.25f);
  CHECK(loss_cr(uniform, {1}, 1.0f).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  CHECK_THROWS_AS(loss_cr(uniform, {4}, 1.0f), ValueError);

  Rng rng(233);
  Tensor logits = Tensor::uniform({5, 4}, rng, -2, 2);
  Tensor probs = softmax(logits, 1);
  const std::vector<int> idx{0, 3, 1, 2, 2};
  double expect = 0;
  for (int i = 0; i < 5; ++i) expect -= std::log(static_cast<double>(probs.at({i, idx[static_cast<size_t>(i)]})));
  expect /= 5.0;
  CHECK(loss_cr(probs, idx, 0.5f).item() == doctest::Approx(0.5 * expect).epsilon(1e-5));
  CHECK(grad_check([&](const Tensor& t) { return loss_cr(softmax(t, 1), idx, 0.5f); }, logits,
                   1e-3f, 1e-3f, 12, rng)
            .ok);
}

TEST_CASE("loss_gan values and oracle") {
  Tensor fake = Tensor::from_vector({4}, {2, 2, 2, 2});
  Tensor real = Tensor::from_vector({4}, {2, 2, 2, 2});
  GanLosses g = loss_gan(fake, real, 1.0f, 1.0f);
  CHECK(g.dg.item() == 0.0f);
  CHECK(g.g.item() == doctest::Approx(-2.0).epsilon(1e-9));

  Rng rng(239);
  Tensor f2 = Tensor::uniform({6}, rng, -3, 3);
  Tensor r2 = Tensor::uniform({6}, rng, -3, 3);
  double mf = 0, mr = 0;
  for (int i = 0; i < 6; ++i) {
    mf += f2.data()[i];
    mr += r2.data()[i];
  }
  mf /= 6;
  mr /= 6;
  GanLosses g2 = loss_gan(f2, r2, 0.5f, 2.0f);
  CHECK(g2.g.item() == doctest::Approx(-0.5 * mf).epsilon(1e-5));
  CHECK(g2.dg.item() == doctest::Approx(2.0 * (mf - mr)).epsilon(1e-5));
}

TEST_CASE("loss_lgp trivial critics") {
  Rng rng(241);
  Tensor x = Tensor::uniform({3, 1, 4, 4}, rng, 0, 1);

  // Zero critic: one-sided hinge is inactive.
  auto zero_critic = [](const Tensor& xin) {
    return mul_scalar(sum_axis(reshape(xin, {xin.dim(0), -1}), 1), 0.0f);
  };
  CHECK(loss_lgp(zero_critic, x, 10.0f).item() == doctest::Approx(0.0).epsilon(1e-9));

  // Linear critic with a unit-norm weight vector: gradient norm exactly 1.
  Tensor w_dir = Tensor::normal({16, 1}, rng);
  float nrm = 0;
  for (int i = 0; i < 16; ++i) nrm += w_dir.data()[i] * w_dir.data()[i];
  Tensor w_unit = mul_scalar(w_dir, 1.0f / std::sqrt(nrm));
  auto linear_critic = [&](const Tensor& xin) {
    return reshape(matmul(reshape(xin, {xin.dim(0), -1}), w_unit), {xin.dim(0)});
  };
  CHECK(loss_lgp(linear_critic, x, 10.0f).item() == doctest::Approx(0.0).epsilon(1e-9));

  // Scaled critic: gradient norm s everywhere, penalty (s-1)^2.
  const float s = 2.5f;
  auto scaled_critic = [&](const Tensor& xin) {
    return reshape(matmul(reshape(xin, {xin.dim(0), -1}), mul_scalar(w_unit, s)), {xin.dim(0)});
  };
  CHECK(loss_lgp(scaled_critic, x, 1.0f).item() ==
        doctest::Approx((s - 1.0) * (s - 1.0)).epsilon(1e-4));
}

TEST_CASE("loss_lgp against a finite-difference gradient norm") {
  ModelConfig cfg = tiny_config();
  cfg.seed = 5;
  ModelState state = ModelState::init(cfg);
  state.set_all_requires_grad(false);
  Rng rng(251);
  Tensor x = Tensor::uniform({1, 1, 8, 8}, rng, 0, 1);

  // Analytic input-gradient norm via the penalty machinery.
  Tensor xv = x.detach().set_requires_grad(true);
  Tensor gx = grad_of(sum(state.critic.critic(xv)), {xv}, false)[0];
  double analytic_sq = 0;
  for (int64_t i = 0; i < gx.numel(); ++i)
    analytic_sq += static_cast<double>(gx.data()[i]) * gx.data()[i];
  const double analytic_norm = std::sqrt(analytic_sq);

  // Full finite-difference estimate of the same gradient.
  double fd_sq = 0;
  const float eps = 1e-3f;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.detach();
    Tensor xm = x.detach();
    xp.mutable_data()[i] += eps;
    xm.mutable_data()[i] -= eps;
    NoGradGuard ng;
    const double d = (state.critic.critic(xp).item() - state.critic.critic(xm).item()) / (2 * eps);
    fd_sq += d * d;
  }
  const double fd_norm = std::sqrt(fd_sq);
  CHECK(std::fabs(analytic_norm - fd_norm) < 1e-2);

  // Loss value agrees with the scripted penalty at the analytic norm.
  const double expect = 10.0 * std::pow(std::max(0.0, analytic_norm - 1.0), 2.0);
  CHECK(loss_lgp([&](const Tensor& t) { return state.critic.critic(t); }, x, 10.0f).item() ==
        doctest::Approx(expect).epsilon(1e-3));
}

TEST_CASE("loss_lgp trains critic parameters (double backward)") {
  ModelConfig cfg = tiny_config();
  cfg.seed = 9;
  ModelState state = ModelState::init(cfg);
  state.set_all_requires_grad(false);
  Rng rng(257);
  Tensor x = Tensor::uniform({2, 1, 8, 8}, rng, 0, 1);

  // Finite differences on critic weights vs the double-backward gradient.
  auto f = [&](const Tensor& w) {
    Tensor target = state.critic.conv1.w;
    std::memcpy(target.mutable_data(), w.data(),
                static_cast<size_t>(w.numel()) * sizeof(float));
    return loss_lgp([&](const Tensor& t) { return state.critic.critic(t); }, x, 10.0f);
  };
  state.critic.conv1.w.set_requires_grad(true);
  state.critic.conv1.w.zero_grad();
  Tensor loss = loss_lgp([&](const Tensor& t) { return state.critic.critic(t); }, x, 10.0f);
  CHECK(loss.item() >= 0.0f);
  loss.backward();
  Tensor analytic = state.critic.conv1.w.grad();
  REQUIRE(analytic.defined());

  Tensor w0 = state.critic.conv1.w.detach();
  const float eps = 1e-3f;
  int checked = 0;
  for (int64_t i = 0; i < w0.numel() && checked < 12; i += w0.numel() / 12, ++checked) {
    Tensor wp = w0.detach();
    Tensor wm = w0.detach();
    wp.mutable_data()[i] += eps;
    wm.mutable_data()[i] -= eps;
    const double fp = f(wp).item();
    const double fm = f(wm).item();
    const double numeric = (fp - fm) / (2 * eps);
    const double a = analytic.data()[i];
    const double rel = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
    // Composite double-backward check; float32 value rounding dominates.
    CHECK(rel < 5e-3);
  }
  // Restore pristine weights.
  Tensor target = state.critic.conv1.w;
  std::memcpy(target.mutable_data(), w0.data(), static_cast<size_t>(w0.numel()) * sizeof(float));
}

TEST_CASE("loss_kl values and oracle") {
  ResidualPosterior post;
  post.mu = Tensor::zeros({1, 3});
  post.logvar = Tensor::zeros({1, 3});
  CHECK(loss_kl(post, 1.0f).item() == 0.0f);

  ResidualPosterior p2;
  p2.mu = Tensor::from_vector({1, 1}, {1.0f});
  p2.logvar = Tensor::zeros({1, 1});
  CHECK(loss_kl(p2, 1.0f).item() == doctest::Approx(0.5).epsilon(1e-6));

  Rng rng(263);
  ResidualPosterior p3;
  p3.mu = Tensor::uniform({4, 5}, rng, -1, 1);
  p3.logvar = Tensor::uniform({4, 5}, rng, -1, 1);
  double expect = 0;
  for (int64_t i = 0; i < p3.mu.numel(); ++i) {
    const double mu = p3.mu.data()[i];
    const double lv = p3.logvar.data()[i];
    expect += 0.5 * (std::exp(lv) + mu * mu - 1.0 - lv);
  }
  expect /= 4.0;
  CHECK(loss_kl(p3, 0.01f).item() == doctest::Approx(0.01 * expect).epsilon(1e-4));

  CHECK(grad_check(
            [&](const Tensor& t) {
              ResidualPosterior p;
              p.mu = t;
              p.logvar = p3.logvar;
              return loss_kl(p, 1.0f);
            },
            p3.mu, 1e-3f, 1e-3f, 12, rng)
            .ok);
  CHECK(grad_check(
            [&](const Tensor& t) {
              ResidualPosterior p;
              p.mu = p3.mu;
              p.logvar = t;
              return loss_kl(p, 1.0f);
            },
            p3.logvar, 1e-3f, 1e-3f, 12, rng)
            .ok);
}

TEST_CASE("loss weights validation") {
  LossWeights w;
  w.validate();
  w.cg = -1.0f;
  CHECK_THROWS_AS(w.validate(), ValueError);
}
