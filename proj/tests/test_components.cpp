#include <cmath>
#include <cstring>
#include <doctest.h>
#include <set>

#include "icaps/components.hpp"

using namespace icaps;

namespace {

ModelConfig default_config() {
  ModelConfig cfg;
  cfg.seed = 1;
  return cfg;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(float)) == 0;
}

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.data()[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("encode_class_relevant shapes and selection rules") {
  ModelState state = ModelState::init(default_config());
  Rng rng(301);
  Tensor x = Tensor::uniform({3, 1, 16, 16}, rng, 0, 1);

  auto [caps, c_inferred] = state.encode_class_relevant(x);
  CHECK(caps.capsules.shape() == Shape{3, 2, 4});
  CHECK(c_inferred.shape() == Shape{3, 4});

  // With labels: the returned c is exactly the labeled row.
  std::vector<int> labels{1, 0, 1};
  auto [caps2, c_label] = state.encode_class_relevant(x, &labels);
  for (int i = 0; i < 3; ++i)
    for (int l = 0; l < 4; ++l)
      CHECK(c_label.at({i, l}) == caps2.capsules.at({i, labels[static_cast<size_t>(i)], l}));

  // Without labels: the argmax-norm row.
  std::vector<int> argmax = argmax_rows(caps.norms);
  for (int i = 0; i < 3; ++i)
    for (int l = 0; l < 4; ++l)
      CHECK(c_inferred.at({i, l}) == caps.capsules.at({i, argmax[static_cast<size_t>(i)], l}));

  // Selection-rule consistency: explicit argmax labels equal inference mode.
  auto [caps3, c_explicit] = state.encode_class_relevant(x, &argmax);
  CHECK(bitwise_equal(c_inferred, c_explicit));

  std::vector<int> bad{2, 0, 0};
  CHECK_THROWS_AS(state.encode_class_relevant(x, &bad), ValueError);
}

TEST_CASE("capsule norms stay below one") {
  ModelState state = ModelState::init(default_config());
  Rng rng(303);
  Tensor x = Tensor::uniform({8, 1, 16, 16}, rng, 0, 1);
  auto [caps, c] = state.encode_class_relevant(x);
  for (int64_t i = 0; i < caps.norms.numel(); ++i) {
    CHECK(caps.norms.data()[i] >= 0.0f);
    CHECK(caps.norms.data()[i] < 1.0f);
  }
}

TEST_CASE("encode_residual determinism and shapes") {
  ModelState state = ModelState::init(default_config());
  Rng rng(307);
  Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, 0, 1);

  auto [post, r] = state.encode_residual(x, nullptr, /*deterministic=*/true);
  CHECK(r.shape() == Shape{2, 8});
  CHECK(bitwise_equal(r, post.mu));

  // Same x, same seed: identical samples.
  Rng ra(99), rb(99);
  auto [post_a, r_a] = state.encode_residual(x, &ra);
  auto [post_b, r_b] = state.encode_residual(x, &rb);
  CHECK(bitwise_equal(r_a, r_b));
  CHECK_FALSE(bitwise_equal(r_a, post_a.mu));

  // Clamped log-variance floor: the noise underflows against mu bitwise.
  ResidualPosterior floor_post;
  floor_post.mu = Tensor::uniform({2, 8}, rng, 0.1f, 1.0f);
  floor_post.logvar = Tensor::full({2, 8}, -60.0f);
  Rng rc(5);
  Tensor sample = state.enc.sample(floor_post, &rc);
  CHECK(bitwise_equal(sample, floor_post.mu));
}

TEST_CASE("generator shape, range and determinism") {
  ModelState state = ModelState::init(default_config());
  Rng rng(311);
  Tensor c = Tensor::uniform({4, 4}, rng, -1, 1);
  Tensor r = Tensor::uniform({4, 8}, rng, -1, 1);
  Tensor img1 = state.generate(c, r);
  Tensor img2 = state.generate(c, r);
  CHECK(img1.shape() == Shape{4, 1, 16, 16});
  CHECK(bitwise_equal(img1, img2));
  for (int64_t i = 0; i < img1.numel(); ++i) {
    CHECK(img1.data()[i] >= 0.0f);
    CHECK(img1.data()[i] <= 1.0f);
  }
  CHECK_THROWS_AS(state.generate(Tensor::zeros({4, 3}), r), ShapeError);
}

TEST_CASE("generator gradient w.r.t. concepts matches finite differences") {
  ModelState state = ModelState::init(default_config());
  state.set_all_requires_grad(false);
  Rng rng(313);
  Tensor c0 = Tensor::uniform({2, 4}, rng, -1, 1);
  Tensor r = Tensor::uniform({2, 8}, rng, -1, 1);
  Tensor target = Tensor::uniform({2, 1, 16, 16}, rng, 0, 1);
  auto f = [&](const Tensor& c) {
    return reconstruction_loss(state.generate(c, r), target, 1.0f);
  };
  // Composite-net check: float32 rounding of the O(30) loss value puts the
  // finite-difference noise floor near 1e-3, so the tolerance is looser than
  // the per-op suite.
  GradCheckReport rep = grad_check(f, c0, 1e-3f, 5e-3f, 8, rng);
  CHECK(rep.ok);
}

TEST_CASE("critic and classifier share the trunk but not the heads") {
  ModelState state = ModelState::init(default_config());
  Rng rng(317);
  Tensor x = Tensor::uniform({3, 1, 16, 16}, rng, 0, 1);
  auto [score, logits] = state.discriminate_and_classify(x);
  CHECK(score.shape() == Shape{3});
  CHECK(logits.shape() == Shape{3, 2});

  // Perturbing only the critic head leaves logits unchanged.
  Tensor before = logits;
  Tensor head = state.critic.critic_head.w;
  std::vector<float> saved(head.data(), head.data() + head.numel());
  for (int64_t i = 0; i < head.numel(); ++i) head.mutable_data()[i] += 1.5f;
  auto [score2, logits2] = state.discriminate_and_classify(x);
  CHECK(bitwise_equal(before, logits2));
  CHECK_FALSE(bitwise_equal(score, score2));
  std::memcpy(head.mutable_data(), saved.data(), saved.size() * sizeof(float));
}

TEST_CASE("cr discriminator outputs a distribution and tolerates equal inputs") {
  ModelState state = ModelState::init(default_config());
  Rng rng(331);
  Tensor xa = Tensor::uniform({4, 1, 16, 16}, rng, 0, 1);
  Tensor xb = Tensor::uniform({4, 1, 16, 16}, rng, 0, 1);
  Tensor p = state.cr_discriminate(xa, xb);
  CHECK(p.shape() == Shape{4, 4});
  for (int i = 0; i < 4; ++i) {
    double row = 0;
    for (int l = 0; l < 4; ++l) row += p.at({i, l});
    CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
  }
  Tensor same = state.cr_discriminate(xa, xa);
  CHECK(all_finite(same));
  CHECK_THROWS_AS(state.cr_discriminate(xa, Tensor::zeros({4, 1, 8, 8})), ShapeError);
}

TEST_CASE("parameter partition is exact") {
  ModelState state = ModelState::init(default_config());
  std::set<const Node*> seen;
  size_t total = 0;
  for (ParamGroup g :
       {ParamGroup::CC, ParamGroup::E, ParamGroup::DGCG, ParamGroup::G, ParamGroup::DCR}) {
    for (auto& [name, t] : state.group_params(g)) {
      CHECK(seen.insert(t.node().get()).second);  // pairwise disjoint
      ++total;
    }
  }
  NamedParams all = state.all_params();
  CHECK(all.size() == total);
  for (auto& [name, t] : all) CHECK(seen.count(t.node().get()) == 1);

  // Names are unique (checkpoint keys).
  std::set<std::string> names;
  for (auto& [name, t] : all) CHECK(names.insert(name).second);
}

TEST_CASE("all forward maps are finite at initialization") {
  ModelConfig cfg = default_config();
  ModelState state = ModelState::init(cfg);
  Rng rng(cfg.seed);
  Tensor x = Tensor::uniform({6, 1, 16, 16}, rng, 0, 1);

  auto [caps, c] = state.encode_class_relevant(x);
  CHECK(all_finite(caps.capsules));
  auto [post, r] = state.encode_residual(x, &rng);
  CHECK(all_finite(post.mu));
  CHECK(all_finite(post.logvar));
  CHECK(all_finite(r));
  Tensor img = state.generate(c, r);
  CHECK(all_finite(img));
  auto [score, logits] = state.discriminate_and_classify(img);
  CHECK(all_finite(score));
  CHECK(all_finite(logits));
  CHECK(all_finite(state.cr_discriminate(img, img)));
}

TEST_CASE("same seed reproduces initialization bitwise") {
  ModelConfig cfg = default_config();
  cfg.seed = 42;
  ModelState a = ModelState::init(cfg);
  ModelState b = ModelState::init(cfg);
  NamedParams pa = a.all_params();
  NamedParams pb = b.all_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i].second, pb[i].second));
}

TEST_CASE("config validation") {
  ModelConfig cfg = default_config();
  cfg.concept_dim = 1;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = default_config();
  cfg.image_h = 15;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg = default_config();
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
}
