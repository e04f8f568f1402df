#include "icaps/losses.hpp"

#include <cmath>

namespace icaps {

void LossWeights::validate() const {
  const float all[] = {margin, recon, cg, cs, rs, concept_w, cr, g, dg, lgp, kl};
  for (float v : all)
    if (!(v >= 0.0f) || !std::isfinite(v))
      throw ValueError("loss weights must be finite and non-negative");
}

Tensor one_hot(const std::vector<int>& labels, int k) {
  std::vector<float> v(labels.size() * static_cast<size_t>(k), 0.0f);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw ValueError("one_hot: class index " + std::to_string(labels[i]) +
                       " out of range [0," + std::to_string(k) + ")");
    v[i * k + labels[i]] = 1.0f;
  }
  return Tensor::from_vector({static_cast<int>(labels.size()), k}, std::move(v));
}

namespace {

// <1-y, logits> - <y, logits>, batch mean.
Tensor signed_family_term(const Tensor& logits, const std::vector<int>& labels) {
  const int k = logits.dim(1);
  Tensor y = one_hot(labels, k);
  Tensor anti = add_scalar(neg(y), 1.0f);
  Tensor per_sample = sub(sum_axis(mul(anti, logits), 1), sum_axis(mul(y, logits), 1));
  return mean(per_sample);
}

}  // namespace

Tensor loss_cg(const Tensor& logits_real, const std::vector<int>& y_real,
               const Tensor& logits_recon, const std::vector<int>& y_recon,
               const Tensor& logits_swap, const std::vector<int>& y_swap, float lambda_cg) {
  Tensor total = add(add(signed_family_term(logits_real, y_real),
                         signed_family_term(logits_recon, y_recon)),
                     signed_family_term(logits_swap, y_swap));
  return mul_scalar(total, lambda_cg);
}

Tensor loss_cs(const Tensor& logits_ii, const Tensor& logits_ij, float lambda_cs) {
  if (logits_ii.shape() != logits_ij.shape())
    throw ShapeError("loss_cs: logit shapes " + shape_str(logits_ii.shape()) + " vs " +
                     shape_str(logits_ij.shape()));
  Tensor per_sample = sum_axis(square(sub(logits_ii, logits_ij)), 1);
  return mul_scalar(mean(per_sample), lambda_cs);
}

Tensor loss_rs(const Tensor& r_i, const Tensor& r_of_swap, float lambda_rs) {
  if (r_i.shape() != r_of_swap.shape())
    throw ShapeError("loss_rs: shapes " + shape_str(r_i.shape()) + " vs " +
                     shape_str(r_of_swap.shape()));
  Tensor per_sample = sum_axis(square(sub(r_i, r_of_swap)), 1);
  return mul_scalar(mean(per_sample), lambda_rs);
}

Tensor loss_concept(const Tensor& c_batch_i, const Tensor& c_batch_j, float lambda_concept) {
  if (c_batch_i.rank() != 2 || c_batch_j.rank() != 2)
    throw ShapeError("loss_concept: expects [batch, L] concept matrices");
  if (c_batch_i.dim(0) == 0 || c_batch_j.dim(0) == 0)
    throw ValueError("loss_concept: empty batch");
  if (c_batch_i.dim(1) != c_batch_j.dim(1))
    throw ShapeError("loss_concept: concept dims " + shape_str(c_batch_i.shape()) + " vs " +
                     shape_str(c_batch_j.shape()));
  Tensor gaps = abs(sub(mean_axis(c_batch_i, 0), mean_axis(c_batch_j, 0)));  // [L]
  // Smallest gap, first index on ties; gradient flows through that dimension.
  const float* g = gaps.data();
  int best = 0;
  for (int l = 1; l < gaps.dim(0); ++l)
    if (g[l] < g[best]) best = l;
  Tensor smallest = reshape(slice(gaps, 0, best, 1), {});
  return mul_scalar(smallest, -lambda_concept);
}

Tensor loss_cr(const Tensor& d_cr_probs, const std::vector<int>& changed_index,
               float lambda_cr) {
  if (d_cr_probs.rank() != 2)
    throw ShapeError("loss_cr: expects probabilities [n,L], got " +
                     shape_str(d_cr_probs.shape()));
  const int L = d_cr_probs.dim(1);
  for (int l : changed_index)
    if (l < 0 || l >= L)
      throw ValueError("loss_cr: changed index " + std::to_string(l) + " out of range [0," +
                       std::to_string(L) + ")");
  Tensor p = select_index(d_cr_probs, changed_index);
  // Floor guards log under a saturated discriminator; exact above 1e-12.
  Tensor p_safe = add(p, relu(add_scalar(neg(p), 1e-12f)));
  return mul_scalar(mean(log(p_safe)), -lambda_cr);
}

GanLosses loss_gan(const Tensor& critic_fake, const Tensor& critic_real, float lambda_g,
                   float lambda_dg) {
  GanLosses out;
  Tensor fake_mean = mean(critic_fake);
  Tensor real_mean = mean(critic_real);
  out.g = mul_scalar(fake_mean, -lambda_g);
  out.dg = mul_scalar(sub(fake_mean, real_mean), lambda_dg);
  return out;
}

Tensor loss_lgp(const std::function<Tensor(const Tensor&)>& critic_fn, const Tensor& x_hat,
                float lambda_lgp) {
  Tensor x = x_hat.detach();
  x.set_requires_grad(true);
  Tensor score_sum = sum(critic_fn(x));
  Tensor gx = grad_of(score_sum, {x}, /*create_graph=*/true)[0];
  const int n = x.dim(0);
  Tensor grad_sq = sum_axis(reshape(square(gx), {n, -1}), 1);
  Tensor grad_norm = sqrt(add_scalar(grad_sq, 1e-12f));
  Tensor penalty = square(relu(add_scalar(grad_norm, -1.0f)));
  return mul_scalar(mean(penalty), lambda_lgp);
}

Tensor loss_kl(const ResidualPosterior& post, float lambda_kl) {
  Tensor var = exp(post.logvar);
  Tensor per_dim = sub(sub(add(var, square(post.mu)), Tensor::full(post.mu.shape(), 1.0f)),
                       post.logvar);
  Tensor per_sample = mul_scalar(sum_axis(per_dim, 1), 0.5f);
  return mul_scalar(mean(per_sample), lambda_kl);
}

}  // namespace icaps
