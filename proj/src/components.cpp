#include "icaps/components.hpp"

#include <cmath>

namespace icaps {

namespace {

// Fan-in-scaled uniform (He-style) init.
Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -limit, limit, /*requires_grad=*/true);
}

}  // namespace

void ModelConfig::validate() const {
  if (image_h <= 0 || image_w <= 0 || image_c <= 0)
    throw ValueError("config: image dimensions must be positive");
  if (image_h % 4 != 0 || image_w % 4 != 0)
    throw ValueError("config: image size must be divisible by 4 (two stride-2 stages)");
  if (classes < 2) throw ValueError("config: classes must be >= 2");
  if (concept_dim < 2) throw ValueError("config: concept_dim must be >= 2");
  if (residual_dim < 1) throw ValueError("config: residual_dim must be >= 1");
  if (routing_iterations < 1) throw ValueError("config: routing_iterations must be >= 1");
}

void Conv2dLayer::init(int co, int ci, int kh, int kw, int stride_, int padding_, Rng& rng) {
  stride = stride_;
  padding = padding_;
  w = he_uniform({co, ci, kh, kw}, ci * kh * kw, rng);
  b = Tensor::zeros({co}, /*requires_grad=*/true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return add(conv2d(x, w, stride, padding), reshape(b, {b.dim(0), 1, 1}));
}

void ConvT2dLayer::init(int c_from, int c_to, int kh, int kw, int stride_, int padding_,
                        Rng& rng) {
  stride = stride_;
  padding = padding_;
  w = he_uniform({c_from, c_to, kh, kw}, c_from * kh * kw / (stride_ * stride_), rng);
  b = Tensor::zeros({c_to}, /*requires_grad=*/true);
}

Tensor ConvT2dLayer::forward(const Tensor& x) const {
  return add(conv_transpose2d(x, w, stride, padding), reshape(b, {b.dim(0), 1, 1}));
}

void LinearLayer::init(int in, int out, Rng& rng) {
  w = he_uniform({in, out}, in, rng);
  b = Tensor::zeros({out}, /*requires_grad=*/true);
}

Tensor LinearLayer::forward(const Tensor& x) const { return add(matmul(x, w), b); }

// --- C_C ---

void CapsClassifier::init(const ModelConfig& cfg, Rng& rng) {
  pc_types = cfg.pc_capsule_types;
  pc_dim = cfg.pc_capsule_dim;
  conv1.init(cfg.cc_conv1_channels, cfg.image_c, 4, 4, 2, 1, rng);
  conv2.init(pc_types * pc_dim, cfg.cc_conv1_channels, 4, 4, 2, 1, rng);
  const int n_pc = pc_types * (cfg.image_h / 4) * (cfg.image_w / 4);
  caps.routing_iterations = cfg.routing_iterations;
  caps.w = he_uniform({n_pc, cfg.classes, cfg.concept_dim, pc_dim}, pc_dim, rng);
}

ClassCapsuleOutput CapsClassifier::forward(const Tensor& x, RoutingTrace* trace) const {
  Tensor h1 = relu(conv1.forward(x));
  Tensor h2 = conv2.forward(h1);  // [n, types*dim, h', w']
  const int n = h2.dim(0), hh = h2.dim(2), ww = h2.dim(3);
  Tensor grouped = reshape(h2, {n, pc_types, pc_dim, hh * ww});
  Tensor arranged = permute(grouped, {0, 1, 3, 2});  // [n, types, hw, dim]
  Tensor u = squash_lastdim(reshape(arranged, {n, pc_types * hh * ww, pc_dim}));
  return dynamic_routing(u, caps, trace);
}

NamedParams CapsClassifier::params(const std::string& prefix) const {
  return {{prefix + ".conv1.w", conv1.w}, {prefix + ".conv1.b", conv1.b},
          {prefix + ".conv2.w", conv2.w}, {prefix + ".conv2.b", conv2.b},
          {prefix + ".caps.w", caps.w}};
}

// --- E ---

void ResidualEncoder::init(const ModelConfig& cfg, Rng& rng) {
  residual_dim = cfg.residual_dim;
  conv1.init(cfg.enc_conv1_channels, cfg.image_c, 4, 4, 2, 1, rng);
  conv2.init(cfg.enc_conv2_channels, cfg.enc_conv1_channels, 4, 4, 2, 1, rng);
  const int flat = cfg.enc_conv2_channels * (cfg.image_h / 4) * (cfg.image_w / 4);
  fc.init(flat, 2 * residual_dim, rng);
}

ResidualPosterior ResidualEncoder::forward(const Tensor& x) const {
  Tensor h1 = relu(conv1.forward(x));
  Tensor h2 = relu(conv2.forward(h1));
  const int n = h2.dim(0);
  Tensor out = fc.forward(reshape(h2, {n, -1}));
  ResidualPosterior post;
  post.mu = slice(out, 1, 0, residual_dim);
  // Clamped for numerical safety; the floor is low enough that exp(logvar/2)
  // underflows against any non-degenerate mu.
  post.logvar = clamp(slice(out, 1, residual_dim, residual_dim), -60.0f, 10.0f);
  return post;
}

Tensor ResidualEncoder::sample(const ResidualPosterior& post, Rng* rng,
                               bool deterministic) const {
  if (deterministic || rng == nullptr) return post.mu;
  Tensor eps = Tensor::normal(post.mu.shape(), *rng);
  return add(post.mu, mul(exp(mul_scalar(post.logvar, 0.5f)), eps));
}

NamedParams ResidualEncoder::params(const std::string& prefix) const {
  return {{prefix + ".conv1.w", conv1.w}, {prefix + ".conv1.b", conv1.b},
          {prefix + ".conv2.w", conv2.w}, {prefix + ".conv2.b", conv2.b},
          {prefix + ".fc.w", fc.w},       {prefix + ".fc.b", fc.b}};
}

// --- G ---

void Generator::init(const ModelConfig& cfg, Rng& rng) {
  seed_channels = cfg.gen_fc_channels;
  seed_hw = cfg.image_h / 4;
  fc.init(cfg.concept_dim + cfg.residual_dim, seed_channels * seed_hw * seed_hw, rng);
  deconv1.init(seed_channels, cfg.gen_conv1_channels, 4, 4, 2, 1, rng);
  deconv2.init(cfg.gen_conv1_channels, cfg.image_c, 4, 4, 2, 1, rng);
}

Tensor Generator::forward(const Tensor& c, const Tensor& r) const {
  if (c.rank() != 2 || r.rank() != 2 || c.dim(0) != r.dim(0))
    throw ShapeError("generate: expects c[n,L], r[n,R], got " + shape_str(c.shape()) + " and " +
                     shape_str(r.shape()));
  if (c.dim(1) + r.dim(1) != fc.w.dim(0))
    throw ShapeError("generate: latent length " + std::to_string(c.dim(1) + r.dim(1)) +
                     " does not match configured " + std::to_string(fc.w.dim(0)));
  Tensor z = concat({c, r}, 1);
  const int n = z.dim(0);
  Tensor h = relu(fc.forward(z));
  Tensor fmap = reshape(h, {n, seed_channels, seed_hw, seed_hw});
  Tensor up1 = relu(deconv1.forward(fmap));
  Tensor img = tanh(deconv2.forward(up1));  // [-1, 1]
  return mul_scalar(add_scalar(img, 1.0f), 0.5f);  // rescaled to [0, 1]
}

NamedParams Generator::params(const std::string& prefix) const {
  return {{prefix + ".fc.w", fc.w},           {prefix + ".fc.b", fc.b},
          {prefix + ".deconv1.w", deconv1.w}, {prefix + ".deconv1.b", deconv1.b},
          {prefix + ".deconv2.w", deconv2.w}, {prefix + ".deconv2.b", deconv2.b}};
}

// --- D_G / C_G ---

void CriticClassifier::init(const ModelConfig& cfg, Rng& rng) {
  conv1.init(cfg.critic_conv1_channels, cfg.image_c, 4, 4, 2, 1, rng);
  conv2.init(cfg.critic_conv2_channels, cfg.critic_conv1_channels, 4, 4, 2, 1, rng);
  const int flat = cfg.critic_conv2_channels * (cfg.image_h / 4) * (cfg.image_w / 4);
  fc.init(flat, cfg.critic_fc, rng);
  critic_head.init(cfg.critic_fc, 1, rng);
  class_head.init(cfg.critic_fc, cfg.classes, rng);
}

Tensor CriticClassifier::trunk(const Tensor& x) const {
  Tensor h1 = leaky_relu(conv1.forward(x), 0.2f);
  Tensor h2 = leaky_relu(conv2.forward(h1), 0.2f);
  const int n = h2.dim(0);
  return leaky_relu(fc.forward(reshape(h2, {n, -1})), 0.2f);
}

std::pair<Tensor, Tensor> CriticClassifier::forward(const Tensor& x) const {
  Tensor feat = trunk(x);
  Tensor score = reshape(critic_head.forward(feat), {feat.dim(0)});
  Tensor lgt = class_head.forward(feat);
  return {score, lgt};
}

Tensor CriticClassifier::critic(const Tensor& x) const {
  Tensor feat = trunk(x);
  return reshape(critic_head.forward(feat), {feat.dim(0)});
}

Tensor CriticClassifier::logits(const Tensor& x) const { return class_head.forward(trunk(x)); }

NamedParams CriticClassifier::params(const std::string& prefix) const {
  return {{prefix + ".conv1.w", conv1.w},       {prefix + ".conv1.b", conv1.b},
          {prefix + ".conv2.w", conv2.w},       {prefix + ".conv2.b", conv2.b},
          {prefix + ".fc.w", fc.w},             {prefix + ".fc.b", fc.b},
          {prefix + ".critic.w", critic_head.w}, {prefix + ".critic.b", critic_head.b},
          {prefix + ".class.w", class_head.w},   {prefix + ".class.b", class_head.b}};
}

// --- D_CR ---

void TraversalDiscriminator::init(const ModelConfig& cfg, Rng& rng) {
  conv1.init(cfg.cr_conv1_channels, 2 * cfg.image_c, 4, 4, 2, 1, rng);
  conv2.init(cfg.cr_conv2_channels, cfg.cr_conv1_channels, 4, 4, 2, 1, rng);
  const int flat = cfg.cr_conv2_channels * (cfg.image_h / 4) * (cfg.image_w / 4);
  fc.init(flat, cfg.cr_fc, rng);
  head.init(cfg.cr_fc, cfg.concept_dim, rng);
}

Tensor TraversalDiscriminator::logits(const Tensor& x_a, const Tensor& x_b) const {
  if (x_a.shape() != x_b.shape())
    throw ShapeError("cr_discriminate: shape " + shape_str(x_a.shape()) + " vs " +
                     shape_str(x_b.shape()));
  Tensor x = concat({x_a, x_b}, 1);
  Tensor h1 = leaky_relu(conv1.forward(x), 0.2f);
  Tensor h2 = leaky_relu(conv2.forward(h1), 0.2f);
  const int n = h2.dim(0);
  Tensor feat = leaky_relu(fc.forward(reshape(h2, {n, -1})), 0.2f);
  return head.forward(feat);
}

Tensor TraversalDiscriminator::probabilities(const Tensor& x_a, const Tensor& x_b) const {
  return softmax(logits(x_a, x_b), 1);
}

NamedParams TraversalDiscriminator::params(const std::string& prefix) const {
  return {{prefix + ".conv1.w", conv1.w}, {prefix + ".conv1.b", conv1.b},
          {prefix + ".conv2.w", conv2.w}, {prefix + ".conv2.b", conv2.b},
          {prefix + ".fc.w", fc.w},       {prefix + ".fc.b", fc.b},
          {prefix + ".head.w", head.w},   {prefix + ".head.b", head.b}};
}

// --- ModelState ---

ModelState ModelState::init(const ModelConfig& cfg) {
  cfg.validate();
  ModelState s;
  s.cfg = cfg;
  Rng rng(cfg.seed);
  s.cc.init(cfg, rng);
  s.enc.init(cfg, rng);
  s.gen.init(cfg, rng);
  s.critic.init(cfg, rng);
  s.cr.init(cfg, rng);
  return s;
}

NamedParams ModelState::group_params(ParamGroup g) const {
  switch (g) {
    case ParamGroup::CC: return cc.params("cc");
    case ParamGroup::E: return enc.params("e");
    case ParamGroup::DGCG: return critic.params("dgcg");
    case ParamGroup::G: return gen.params("g");
    case ParamGroup::DCR: return cr.params("dcr");
  }
  throw ValueError("unknown parameter group");
}

NamedParams ModelState::all_params() const {
  NamedParams all;
  for (ParamGroup g :
       {ParamGroup::CC, ParamGroup::E, ParamGroup::DGCG, ParamGroup::G, ParamGroup::DCR}) {
    NamedParams ps = group_params(g);
    all.insert(all.end(), ps.begin(), ps.end());
  }
  return all;
}

void ModelState::set_group_requires_grad(ParamGroup g, bool value) {
  for (auto& [name, t] : group_params(g)) {
    Tensor tt = t;
    tt.set_requires_grad(value);
  }
}

void ModelState::set_all_requires_grad(bool value) {
  for (ParamGroup g :
       {ParamGroup::CC, ParamGroup::E, ParamGroup::DGCG, ParamGroup::G, ParamGroup::DCR})
    set_group_requires_grad(g, value);
}

void ModelState::zero_all_grads() {
  for (auto& [name, t] : all_params()) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

std::vector<int> argmax_rows(const Tensor& t) {
  const int n = t.dim(0), k = t.dim(1);
  std::vector<int> out(static_cast<size_t>(n));
  const float* p = t.data();
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (p[static_cast<int64_t>(i) * k + j] > p[static_cast<int64_t>(i) * k + best]) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

std::pair<ClassCapsuleOutput, Tensor> ModelState::encode_class_relevant(
    const Tensor& x, const std::vector<int>* labels) const {
  ClassCapsuleOutput out = cc.forward(x);
  std::vector<int> rows;
  if (labels) {
    if (static_cast<int>(labels->size()) != x.dim(0))
      throw ShapeError("encode_class_relevant: label count mismatch");
    rows = *labels;
  } else {
    rows = argmax_rows(out.norms);
  }
  Tensor c = select_row(out.capsules, rows);
  return {out, c};
}

std::pair<ResidualPosterior, Tensor> ModelState::encode_residual(const Tensor& x, Rng* rng,
                                                                 bool deterministic) const {
  ResidualPosterior post = enc.forward(x);
  Tensor r = enc.sample(post, rng, deterministic);
  return {post, r};
}

Tensor ModelState::generate(const Tensor& c, const Tensor& r) const { return gen.forward(c, r); }

std::pair<Tensor, Tensor> ModelState::discriminate_and_classify(const Tensor& x) const {
  return critic.forward(x);
}

Tensor ModelState::cr_discriminate(const Tensor& x_a, const Tensor& x_b) const {
  return cr.probabilities(x_a, x_b);
}

}  // namespace icaps
