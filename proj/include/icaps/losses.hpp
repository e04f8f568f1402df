#pragma once

#include <vector>

#include "icaps/components.hpp"
#include "icaps/tensor.hpp"

namespace icaps {

struct LossWeights {
  float margin = 1.0f;
  float recon = 0.5f;
  float cg = 1.0f;
  float cs = 0.1f;
  float rs = 0.1f;
  float concept_w = 0.1f;
  float cr = 0.5f;
  float g = 1.0f;
  float dg = 1.0f;
  float lgp = 10.0f;
  float kl = 0.01f;

  void validate() const;
};

// One paired training batch after encoding and generation: real images of
// two different classes, their latents, and the four generated images
// (two reconstructions, two with r swapped across the pair).
struct SwapBundle {
  Tensor x_i, x_j;          // real sub-batches, labels differ elementwise
  std::vector<int> y_i, y_j;
  ClassCapsuleOutput caps_i, caps_j;
  Tensor c_i, c_j;          // ground-truth capsule rows
  ResidualPosterior post_i, post_j;
  Tensor r_i, r_j;          // reparameterized samples
  Tensor gen_ii, gen_jj;    // G(c_i,r_i), G(c_j,r_j)
  Tensor gen_ij, gen_ji;    // G(c_i,r_j), G(c_j,r_i)
};

// Signed classifier alignment over the three image families: real images,
// reconstructions, and r-swapped generations. Each term is
// <1-y, logits> - <y, logits>, batch-averaged per family; lower means the
// correct-class logit dominates.
Tensor loss_cg(const Tensor& logits_real, const std::vector<int>& y_real,
               const Tensor& logits_recon, const std::vector<int>& y_recon,
               const Tensor& logits_swap, const std::vector<int>& y_swap, float lambda_cg);

// Class similarity: same c, different r must yield identical logits.
Tensor loss_cs(const Tensor& logits_ii, const Tensor& logits_ij, float lambda_cs);

// Residual similarity between r of a real image and r re-encoded from the
// generation that reused that r under the other class's c.
Tensor loss_rs(const Tensor& r_i, const Tensor& r_of_swap, float lambda_rs);

// Pushes every concept dimension to separate the two classes: negative of
// the smallest per-dimension gap between class means. Ties break toward
// the lowest dimension index.
Tensor loss_concept(const Tensor& c_batch_i, const Tensor& c_batch_j, float lambda_concept);

// Cross-entropy of the traversal discriminator against the changed index.
Tensor loss_cr(const Tensor& d_cr_probs, const std::vector<int>& changed_index,
               float lambda_cr);

struct GanLosses {
  Tensor g;   // -lambda_g * E[D(fake)]
  Tensor dg;  // lambda_dg * (E[D(fake)] - E[D(real)])
};
GanLosses loss_gan(const Tensor& critic_fake, const Tensor& critic_real, float lambda_g,
                   float lambda_dg);

// One-sided Lipschitz gradient penalty at generated samples. The critic's
// input gradient is obtained as a differentiable graph, so the penalty
// trains the critic parameters exactly. critic_fn maps [n,c,h,w] to [n]
// scores.
Tensor loss_lgp(const std::function<Tensor(const Tensor&)>& critic_fn, const Tensor& x_hat,
                float lambda_lgp);

// KL of the diagonal-Gaussian residual posterior against the unit normal.
Tensor loss_kl(const ResidualPosterior& post, float lambda_kl);

Tensor one_hot(const std::vector<int>& labels, int k);

}  // namespace icaps
