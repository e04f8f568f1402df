#include "icaps/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "icaps/log.hpp"

namespace icaps {

using nlohmann::json;

void PairedBatch::validate() const {
  if (!x_i.defined() || !x_j.defined() || pairs() == 0)
    throw ValueError("paired batch: empty");
  if (x_i.shape() != x_j.shape()) throw ShapeError("paired batch: sub-batch shapes differ");
  if (static_cast<int>(y_i.size()) != pairs() || static_cast<int>(y_j.size()) != pairs())
    throw ValueError("paired batch: label count mismatch");
  for (int s = 0; s < pairs(); ++s)
    if (y_i[static_cast<size_t>(s)] == y_j[static_cast<size_t>(s)])
      throw ValueError("paired batch: pair " + std::to_string(s) + " has equal labels");
}

PairedBatch pair_batch(const Dataset& data, int batch_size, Rng& rng) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ValueError("pair_batch: batch_size must be a positive even number");
  data.validate();
  if (data.classes < 2) throw ValueError("pair_batch: dataset needs at least 2 classes");
  const int nb = batch_size / 2;

  std::vector<std::vector<int>> pools(static_cast<size_t>(data.classes));
  for (int i = 0; i < data.size(); ++i) pools[static_cast<size_t>(data.labels[i])].push_back(i);

  // Two distinct class labels per batch, ordered pair sampled uniformly.
  const int a = static_cast<int>(rng.below(static_cast<uint64_t>(data.classes)));
  int b = static_cast<int>(rng.below(static_cast<uint64_t>(data.classes - 1)));
  if (b >= a) ++b;

  for (int cls : {a, b})
    if (static_cast<int>(pools[static_cast<size_t>(cls)].size()) < nb)
      throw ValueError("pair_batch: class " + std::to_string(cls) + " has only " +
                       std::to_string(pools[static_cast<size_t>(cls)].size()) +
                       " samples, need " + std::to_string(nb));

  auto draw = [&](int cls) {
    std::vector<int>& pool = pools[static_cast<size_t>(cls)];
    // Partial Fisher-Yates: first nb entries become the sample.
    for (int i = 0; i < nb; ++i) {
      const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(pool.size() - i)));
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    return std::vector<int>(pool.begin(), pool.begin() + nb);
  };
  const std::vector<int> idx_i = draw(a);
  const std::vector<int> idx_j = draw(b);

  const int c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
  const int64_t px = static_cast<int64_t>(c) * h * w;
  std::vector<float> buf_i(static_cast<size_t>(nb) * px), buf_j(buf_i.size());
  const float* src = data.images.data();
  for (int s = 0; s < nb; ++s) {
    std::memcpy(buf_i.data() + s * px, src + idx_i[static_cast<size_t>(s)] * px,
                static_cast<size_t>(px) * sizeof(float));
    std::memcpy(buf_j.data() + s * px, src + idx_j[static_cast<size_t>(s)] * px,
                static_cast<size_t>(px) * sizeof(float));
  }
  PairedBatch out;
  out.x_i = Tensor::from_vector({nb, c, h, w}, std::move(buf_i));
  out.x_j = Tensor::from_vector({nb, c, h, w}, std::move(buf_j));
  out.y_i.assign(static_cast<size_t>(nb), a);
  out.y_j.assign(static_cast<size_t>(nb), b);
  return out;
}

StepNoise sample_step_noise(int pairs, const ModelConfig& cfg, Rng& rng) {
  StepNoise noise;
  noise.eps_i = Tensor::normal({pairs, cfg.residual_dim}, rng);
  noise.eps_j = Tensor::normal({pairs, cfg.residual_dim}, rng);
  noise.trav_index.resize(static_cast<size_t>(pairs));
  std::vector<float> mask(static_cast<size_t>(pairs) * cfg.concept_dim, 0.0f);
  std::vector<float> va(static_cast<size_t>(pairs)), vb(va.size());
  for (int s = 0; s < pairs; ++s) {
    const int l = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.concept_dim)));
    noise.trav_index[static_cast<size_t>(s)] = l;
    mask[static_cast<size_t>(s) * cfg.concept_dim + l] = 1.0f;
    va[static_cast<size_t>(s)] = rng.uniform(-1.0f, 1.0f);
    vb[static_cast<size_t>(s)] = rng.uniform(-1.0f, 1.0f);
  }
  noise.trav_mask = Tensor::from_vector({pairs, cfg.concept_dim}, std::move(mask));
  noise.trav_a = Tensor::from_vector({pairs, 1}, std::move(va));
  noise.trav_b = Tensor::from_vector({pairs, 1}, std::move(vb));
  return noise;
}

SwapBundle build_swap_bundle(const PairedBatch& batch, const ModelState& state,
                             const StepNoise& noise) {
  SwapBundle b;
  b.x_i = batch.x_i;
  b.x_j = batch.x_j;
  b.y_i = batch.y_i;
  b.y_j = batch.y_j;
  b.caps_i = state.cc.forward(batch.x_i);
  b.caps_j = state.cc.forward(batch.x_j);
  b.c_i = select_row(b.caps_i.capsules, batch.y_i);
  b.c_j = select_row(b.caps_j.capsules, batch.y_j);
  b.post_i = state.enc.forward(batch.x_i);
  b.post_j = state.enc.forward(batch.x_j);
  b.r_i = add(b.post_i.mu, mul(exp(mul_scalar(b.post_i.logvar, 0.5f)), noise.eps_i));
  b.r_j = add(b.post_j.mu, mul(exp(mul_scalar(b.post_j.logvar, 0.5f)), noise.eps_j));
  b.gen_ii = state.gen.forward(b.c_i, b.r_i);
  b.gen_jj = state.gen.forward(b.c_j, b.r_j);
  b.gen_ij = state.gen.forward(b.c_i, b.r_j);
  b.gen_ji = state.gen.forward(b.c_j, b.r_i);
  return b;
}

SwapBundle build_swap_bundle(const PairedBatch& batch, const ModelState& state, Rng& rng) {
  return build_swap_bundle(batch, state, sample_step_noise(batch.pairs(), state.cfg, rng));
}

namespace {

struct TermMask {
  bool margin = false, recon = false, concept_v = false, cg = false, cs = false, rs = false;
  bool cr = false, kl = false, g = false, dg = false, lgp = false;
};

struct StepLosses {
  Tensor margin, recon, concept_v, cg, cs, rs, cr, kl, g, dg, lgp;
};

TermMask equation_mask(ParamGroup group, const LossWeights& w) {
  TermMask m;
  switch (group) {
    case ParamGroup::CC:
      m.margin = w.margin > 0;
      m.recon = w.recon > 0;
      m.concept_v = w.concept_w > 0;
      m.cg = w.cg > 0;
      m.cs = w.cs > 0;
      m.rs = w.rs > 0;
      m.cr = w.cr > 0;
      break;
    case ParamGroup::E:
      m.recon = w.recon > 0;
      m.kl = w.kl > 0;
      m.cs = w.cs > 0;
      m.rs = w.rs > 0;
      m.cg = w.cg > 0;
      break;
    case ParamGroup::DGCG:
      m.dg = w.dg > 0;
      m.cg = w.cg > 0;
      m.cs = w.cs > 0;
      m.lgp = w.lgp > 0;
      break;
    case ParamGroup::G:
      m.g = w.g > 0;
      m.cg = w.cg > 0;
      m.recon = w.recon > 0;
      m.cs = w.cs > 0;
      m.rs = w.rs > 0;
      m.cr = w.cr > 0;
      break;
    case ParamGroup::DCR:
      m.cr = w.cr > 0;
      break;
  }
  return m;
}

TermMask record_mask(const LossWeights& w) {
  TermMask m;
  m.margin = w.margin > 0;
  m.recon = w.recon > 0;
  m.concept_v = w.concept_w > 0;
  m.cg = w.cg > 0;
  m.cs = w.cs > 0;
  m.rs = w.rs > 0;
  m.cr = w.cr > 0;
  m.kl = w.kl > 0;
  m.g = w.g > 0;
  m.dg = w.dg > 0;
  m.lgp = w.lgp > 0;
  return m;
}

StepLosses compute_losses(const ModelState& state, const PairedBatch& batch,
                          const StepNoise& noise, const LossWeights& w, const TermMask& m) {
  StepLosses out;
  const int nb = batch.pairs();
  const bool need_gen = m.recon || m.cg || m.cs || m.rs || m.g || m.dg || m.lgp;
  const bool need_caps = m.margin || m.concept_v || m.cr || need_gen;
  const bool need_post = m.kl || m.cr || need_gen;

  ClassCapsuleOutput caps_i, caps_j;
  Tensor c_i, c_j;
  if (need_caps) {
    caps_i = state.cc.forward(batch.x_i);
    caps_j = state.cc.forward(batch.x_j);
    c_i = select_row(caps_i.capsules, batch.y_i);
    c_j = select_row(caps_j.capsules, batch.y_j);
  }
  if (m.margin) {
    MarginLossParams mp;
    mp.lambda_m = w.margin;
    out.margin = mul_scalar(
        add(margin_loss(caps_i, batch.y_i, mp), margin_loss(caps_j, batch.y_j, mp)), 0.5f);
  }
  if (m.concept_v) out.concept_v = loss_concept(c_i, c_j, w.concept_w);

  ResidualPosterior post_i, post_j;
  Tensor r_i, r_j;
  if (need_post) {
    post_i = state.enc.forward(batch.x_i);
    post_j = state.enc.forward(batch.x_j);
    r_i = add(post_i.mu, mul(exp(mul_scalar(post_i.logvar, 0.5f)), noise.eps_i));
    r_j = add(post_j.mu, mul(exp(mul_scalar(post_j.logvar, 0.5f)), noise.eps_j));
  }
  if (m.kl)
    out.kl = mul_scalar(add(loss_kl(post_i, w.kl), loss_kl(post_j, w.kl)), 0.5f);

  Tensor gen_ii, gen_jj, gen_ij, gen_ji, fakes;
  if (need_gen) {
    gen_ii = state.gen.forward(c_i, r_i);
    gen_jj = state.gen.forward(c_j, r_j);
    gen_ij = state.gen.forward(c_i, r_j);
    gen_ji = state.gen.forward(c_j, r_i);
    fakes = concat({gen_ii, gen_jj, gen_ij, gen_ji}, 0);
  }
  if (m.recon)
    out.recon = mul_scalar(add(reconstruction_loss(gen_ii, batch.x_i, w.recon),
                               reconstruction_loss(gen_jj, batch.x_j, w.recon)),
                           0.5f);

  if (m.cg || m.cs || m.g || m.dg) {
    Tensor score_fake, logits_fake;
    if (m.g || m.dg) {
      auto [s, l] = state.critic.forward(fakes);
      score_fake = s;
      logits_fake = l;
    } else {
      logits_fake = state.critic.logits(fakes);
    }
    Tensor score_real, logits_real;
    if (m.cg || m.dg) {
      Tensor reals = concat({batch.x_i, batch.x_j}, 0);
      if (m.dg) {
        auto [s, l] = state.critic.forward(reals);
        score_real = s;
        logits_real = l;
      } else {
        logits_real = state.critic.logits(reals);
      }
    }
    std::vector<int> y_all = batch.y_i;
    y_all.insert(y_all.end(), batch.y_j.begin(), batch.y_j.end());
    if (m.cg) {
      Tensor logits_recon = slice(logits_fake, 0, 0, 2 * nb);
      Tensor logits_swap = slice(logits_fake, 0, 2 * nb, 2 * nb);
      out.cg = loss_cg(logits_real, y_all, logits_recon, y_all, logits_swap, y_all, w.cg);
    }
    if (m.cs) {
      Tensor l_ii = slice(logits_fake, 0, 0, nb);
      Tensor l_jj = slice(logits_fake, 0, nb, nb);
      Tensor l_ij = slice(logits_fake, 0, 2 * nb, nb);
      Tensor l_ji = slice(logits_fake, 0, 3 * nb, nb);
      out.cs = mul_scalar(add(loss_cs(l_ii, l_ij, w.cs), loss_cs(l_jj, l_ji, w.cs)), 0.5f);
    }
    if (m.dg) {
      GanLosses gan = loss_gan(score_fake, score_real, w.g, w.dg);
      if (m.g) out.g = gan.g;
      out.dg = gan.dg;
    } else if (m.g) {
      out.g = mul_scalar(mean(score_fake), -w.g);
    }
  }

  if (m.rs) {
    ResidualPosterior post_swap_ji = state.enc.forward(gen_ji);
    ResidualPosterior post_swap_ij = state.enc.forward(gen_ij);
    out.rs = mul_scalar(add(loss_rs(post_i.mu, post_swap_ji.mu, w.rs),
                            loss_rs(post_j.mu, post_swap_ij.mu, w.rs)),
                        0.5f);
  }

  if (m.lgp)
    out.lgp = loss_lgp([&state](const Tensor& x) { return state.critic.critic(x); }, fakes,
                       w.lgp);

  if (m.cr) {
    // Traversal pair from the i-side: one concept element resampled twice.
    Tensor keep = add_scalar(neg(noise.trav_mask), 1.0f);
    Tensor c_a = add(mul(c_i, keep), mul(noise.trav_a, noise.trav_mask));
    Tensor c_b = add(mul(c_i, keep), mul(noise.trav_b, noise.trav_mask));
    Tensor x_a = state.gen.forward(c_a, post_i.mu);
    Tensor x_b = state.gen.forward(c_b, post_i.mu);
    Tensor probs = state.cr.probabilities(x_a, x_b);
    out.cr = loss_cr(probs, noise.trav_index, w.cr);
  }
  return out;
}

float term_value(const Tensor& t) { return t.defined() ? t.item() : 0.0f; }

void check_finite(const char* name, const Tensor& t) {
  if (t.defined() && !std::isfinite(t.item()))
    throw ValueError(std::string("NaN/Inf loss in term '") + name + "'");
}

void check_losses_finite(const StepLosses& ls) {
  check_finite("margin", ls.margin);
  check_finite("recon", ls.recon);
  check_finite("concept", ls.concept_v);
  check_finite("cg", ls.cg);
  check_finite("cs", ls.cs);
  check_finite("rs", ls.rs);
  check_finite("cr", ls.cr);
  check_finite("kl", ls.kl);
  check_finite("g", ls.g);
  check_finite("dg", ls.dg);
  check_finite("lgp", ls.lgp);
}

Tensor equation_total(const StepLosses& ls) {
  Tensor total;
  for (const Tensor* t : {&ls.margin, &ls.recon, &ls.concept_v, &ls.cg, &ls.cs, &ls.rs, &ls.cr,
                          &ls.kl, &ls.g, &ls.dg, &ls.lgp}) {
    if (!t->defined()) continue;
    total = total.defined() ? add(total, *t) : *t;
  }
  return total;
}

}  // namespace

std::string LossRecord::to_jsonl() const {
  json j{{"step", step},   {"epoch", epoch}, {"margin", margin}, {"recon", recon},
         {"concept", concept_v}, {"cg", cg},  {"cs", cs},         {"rs", rs},
         {"cr", cr},       {"kl", kl},       {"g", g},           {"dg", dg},
         {"lgp", lgp}};
  return j.dump();
}

void AdamOptimizer::step(const NamedParams& params) {
  if (m.size() != params.size()) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(static_cast<size_t>(params[i].second.numel()), 0.0f);
      v[i].assign(static_cast<size_t>(params[i].second.numel()), 0.0f);
    }
  }
  ++t;
  const float corr1 = 1.0f - std::pow(beta1, static_cast<float>(t));
  const float corr2 = 1.0f - std::pow(beta2, static_cast<float>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i].second;
    Tensor grad = param.grad();
    if (!grad.defined()) continue;
    const float* gp = grad.data();
    float* pp = param.mutable_data();
    float* mp = m[i].data();
    float* vp = v[i].data();
    const int64_t n = param.numel();
    for (int64_t j = 0; j < n; ++j) {
      const float gv = gp[j];
      mp[j] = beta1 * mp[j] + (1.0f - beta1) * gv;
      vp[j] = beta2 * vp[j] + (1.0f - beta2) * gv * gv;
      const float mhat = mp[j] / corr1;
      const float vhat = vp[j] / corr2;
      pp[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

Trainer::Trainer(ModelState state, TrainConfig tc, LossWeights weights)
    : state_(std::move(state)), tc_(tc), weights_(weights), rng_(tc.seed) {
  tc_.validate();
  weights_.validate();
  for (ParamGroup g :
       {ParamGroup::CC, ParamGroup::E, ParamGroup::DGCG, ParamGroup::G, ParamGroup::DCR}) {
    AdamOptimizer& opt = opts_[static_cast<size_t>(g)];
    opt.lr = tc_.lr;
    opt.eps = tc_.adam_eps;
    const bool adversarial = g == ParamGroup::DGCG || g == ParamGroup::G || g == ParamGroup::DCR;
    opt.beta1 = adversarial ? tc_.beta1_adv : tc_.beta1;
    opt.beta2 = adversarial ? tc_.beta2_adv : tc_.beta2;
  }
}

void Trainer::update_group(ParamGroup group, const PairedBatch& batch, const StepNoise& noise) {
  const TermMask mask = equation_mask(group, weights_);
  const bool any = mask.margin || mask.recon || mask.concept_v || mask.cg || mask.cs ||
                   mask.rs || mask.cr || mask.kl || mask.g || mask.dg || mask.lgp;
  if (!any) return;  // every term of this equation is weighted zero
  state_.set_all_requires_grad(false);
  state_.set_group_requires_grad(group, true);
  for (auto& [name, t] : state_.group_params(group)) {
    Tensor tt = t;
    tt.zero_grad();
  }
  StepLosses ls = compute_losses(state_, batch, noise, weights_, mask);
  check_losses_finite(ls);
  Tensor total = equation_total(ls);
  total.backward();
  opts_[static_cast<size_t>(group)].step(state_.group_params(group));
}

LossRecord Trainer::train_step(const PairedBatch& batch) {
  StepNoise noise = sample_step_noise(batch.pairs(), state_.cfg, rng_);
  return train_step(batch, noise);
}

LossRecord Trainer::train_step(const PairedBatch& batch, const StepNoise& noise) {
  batch.validate();
  // Loss record: every enabled term evaluated at step-start parameters.
  state_.set_all_requires_grad(false);
  StepLosses rec = compute_losses(state_, batch, noise, weights_, record_mask(weights_));
  check_losses_finite(rec);
  LossRecord record;
  record.step = ++step_count_;
  record.margin = term_value(rec.margin);
  record.recon = term_value(rec.recon);
  record.concept_v = term_value(rec.concept_v);
  record.cg = term_value(rec.cg);
  record.cs = term_value(rec.cs);
  record.rs = term_value(rec.rs);
  record.cr = term_value(rec.cr);
  record.kl = term_value(rec.kl);
  record.g = term_value(rec.g);
  record.dg = term_value(rec.dg);
  record.lgp = term_value(rec.lgp);

  // Critic/classifier first, then C_C, E, G, D_CR.
  for (int c = 0; c < tc_.critic_steps; ++c) update_group(ParamGroup::DGCG, batch, noise);
  update_group(ParamGroup::CC, batch, noise);
  update_group(ParamGroup::E, batch, noise);
  update_group(ParamGroup::G, batch, noise);
  update_group(ParamGroup::DCR, batch, noise);
  state_.set_all_requires_grad(true);
  return record;
}

// --- checkpoint ---

namespace {

constexpr char kCkptMagic[4] = {'I', 'C', 'A', 'P'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw IoError("corrupt checkpoint: truncated");
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

void write_tensor_record(std::ostream& os, const std::string& name, const Shape& shape,
                         const float* data, int64_t count) {
  write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_le<uint32_t>(os, static_cast<uint32_t>(shape.size()));
  for (int d : shape) write_le<uint32_t>(os, static_cast<uint32_t>(d));
  os.write(reinterpret_cast<const char*>(data), count * static_cast<int64_t>(sizeof(float)));
}

constexpr ParamGroup kAllGroups[5] = {ParamGroup::CC, ParamGroup::E, ParamGroup::DGCG,
                                      ParamGroup::G, ParamGroup::DCR};

}  // namespace

void save_checkpoint(const ModelState& state, const std::array<AdamOptimizer, 5>* opts,
                     const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kCkptMagic, 4);
  write_le<uint32_t>(os, kCkptVersion);

  json header;
  header["model"] = json::parse(model_config_to_json(state.cfg));
  if (opts) {
    json steps;
    for (ParamGroup g : kAllGroups)
      steps[param_group_name(g)] = (*opts)[static_cast<size_t>(g)].t;
    header["optimizer_steps"] = steps;
  }
  const std::string header_text = header.dump();
  write_le<uint32_t>(os, static_cast<uint32_t>(header_text.size()));
  os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  NamedParams params = state.all_params();
  uint32_t count = static_cast<uint32_t>(params.size());
  if (opts) {
    for (ParamGroup g : kAllGroups) {
      const AdamOptimizer& opt = (*opts)[static_cast<size_t>(g)];
      count += 2 * static_cast<uint32_t>(opt.m.size());
    }
  }
  write_le<uint32_t>(os, count);
  for (const auto& [name, t] : params)
    write_tensor_record(os, name, t.shape(), t.data(), t.numel());
  if (opts) {
    for (ParamGroup g : kAllGroups) {
      const AdamOptimizer& opt = (*opts)[static_cast<size_t>(g)];
      NamedParams group = state.group_params(g);
      for (size_t i = 0; i < opt.m.size(); ++i) {
        const Shape& shape = group[i].second.shape();
        write_tensor_record(os, "opt." + group[i].first + ".m", shape, opt.m[i].data(),
                            static_cast<int64_t>(opt.m[i].size()));
        write_tensor_record(os, "opt." + group[i].first + ".v", shape, opt.v[i].data(),
                            static_cast<int64_t>(opt.v[i].size()));
      }
    }
  }
  if (!os) throw IoError("write failure on " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw IoError("corrupt checkpoint: bad magic in " + path);
  const uint32_t version = read_le<uint32_t>(is);
  if (version != kCkptVersion)
    throw IoError("checkpoint version mismatch: file has " + std::to_string(version) +
                  ", supported " + std::to_string(kCkptVersion));
  const uint32_t header_len = read_le<uint32_t>(is);
  std::string header_text(header_len, '\0');
  is.read(header_text.data(), header_len);
  if (!is) throw IoError("corrupt checkpoint: truncated header");
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception&) {
    throw IoError("corrupt checkpoint: invalid header JSON");
  }
  ModelConfig cfg = parse_model_config_text(header.at("model").dump());
  if (expected && model_config_to_json(cfg) != model_config_to_json(*expected))
    throw ValueError("checkpoint config mismatch: stored model differs from the requested one");

  LoadedCheckpoint out{ModelState::init(cfg)};
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
  const uint32_t count = read_le<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_le<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("corrupt checkpoint: truncated tensor name");
    const uint32_t rank = read_le<uint32_t>(is);
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int>(read_le<uint32_t>(is));
      numel *= shape[d];
    }
    std::vector<float> data(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()), numel * static_cast<int64_t>(sizeof(float)));
    if (!is) throw IoError("corrupt checkpoint: truncated tensor data for '" + name + "'");
    tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }

  for (auto& [name, t] : out.state.all_params()) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw IoError("corrupt checkpoint: missing tensor '" + name + "'");
    if (it->second.first != t.shape())
      throw IoError("corrupt checkpoint: tensor '" + name + "' has shape " +
                    shape_str(it->second.first) + ", expected " + shape_str(t.shape()));
    Tensor tt = t;
    std::memcpy(tt.mutable_data(), it->second.second.data(),
                it->second.second.size() * sizeof(float));
  }

  if (header.contains("optimizer_steps")) {
    out.has_optimizer = true;
    for (ParamGroup g : kAllGroups) {
      AdamOptimizer& opt = out.opts[static_cast<size_t>(g)];
      opt.t = header.at("optimizer_steps").at(param_group_name(g)).get<int64_t>();
      NamedParams group = out.state.group_params(g);
      opt.m.resize(group.size());
      opt.v.resize(group.size());
      for (size_t i = 0; i < group.size(); ++i) {
        auto mit = tensors.find("opt." + group[i].first + ".m");
        auto vit = tensors.find("opt." + group[i].first + ".v");
        if (mit == tensors.end() || vit == tensors.end())
          throw IoError("corrupt checkpoint: missing optimizer state for '" + group[i].first + "'");
        opt.m[i] = mit->second.second;
        opt.v[i] = vit->second.second;
      }
    }
  }
  return out;
}

TrainOutput train_model(const Dataset& data, const FullConfig& cfg, const TrainOptions& options) {
  data.validate();
  for (int y : data.labels)
    if (y >= cfg.model.classes)
      throw ValueError("dataset label " + std::to_string(y) + " exceeds configured classes " +
                       std::to_string(cfg.model.classes));

  Trainer trainer(ModelState::init(cfg.model), cfg.train, cfg.weights);
  Rng batch_rng(cfg.train.seed ^ 0x9e3779b97f4a7c15ull);

  std::ofstream log_stream;
  namespace fs = std::filesystem;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    std::ofstream cfg_out(options.out_dir + "/config.json");
    cfg_out << config_to_json(cfg) << "\n";
    log_stream.open(options.out_dir + "/train_log.jsonl");
    if (!log_stream) throw IoError("cannot open training log in " + options.out_dir);
  }
  log_info("training: %d samples, %d epochs, batch %d", data.size(), cfg.train.epochs,
           cfg.train.batch_size);

  TrainOutput out;
  const int steps_per_epoch =
      std::max(1, (data.size() + cfg.train.batch_size - 1) / cfg.train.batch_size);
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      PairedBatch batch = pair_batch(data, cfg.train.batch_size, batch_rng);
      LossRecord record = trainer.train_step(batch);
      record.epoch = epoch;
      if (log_stream) log_stream << record.to_jsonl() << "\n";
      if (options.on_step) options.on_step(record);
      out.log.push_back(record);
    }
    if (!options.out_dir.empty() && epoch % cfg.train.checkpoint_interval == 0 &&
        epoch != cfg.train.epochs) {
      const std::string path = options.out_dir + "/ckpt_epoch" + std::to_string(epoch) + ".icap";
      std::array<AdamOptimizer, 5> opts;
      for (size_t i = 0; i < 5; ++i) opts[i] = trainer.optimizer(static_cast<ParamGroup>(i));
      save_checkpoint(trainer.state(), &opts, path);
      log_info("checkpoint: %s", path.c_str());
    }
    if (!out.log.empty())
      log_debug("epoch %d done: margin %.4f", epoch, out.log.back().margin);
  }
  if (!options.out_dir.empty()) {
    out.final_checkpoint = options.out_dir + "/final.icap";
    std::array<AdamOptimizer, 5> opts;
    for (size_t i = 0; i < 5; ++i) opts[i] = trainer.optimizer(static_cast<ParamGroup>(i));
    save_checkpoint(trainer.state(), &opts, out.final_checkpoint);
    log_info("checkpoint: %s", out.final_checkpoint.c_str());
  }
  out.state = trainer.state();
  return out;
}

}  // namespace icaps
