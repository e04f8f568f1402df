#pragma once

#include <vector>

#include "icaps/tensor.hpp"

namespace icaps {

// Prediction weights from N_pc primary capsules (dim d_pc) to k class
// capsules (dim L), plus the routing iteration count.
struct CapsuleLayerParams {
  Tensor w;  // [N_pc, k, L, d_pc]
  int routing_iterations = 3;
};

// Final class capsules: k vectors of length L per sample; the norm of
// capsule j is the predicted probability for class j (always < 1).
struct ClassCapsuleOutput {
  Tensor capsules;  // [n, k, L]
  Tensor norms;     // [n, k]
  int k() const { return capsules.dim(1); }
  int concept_dim() const { return capsules.dim(2); }
};

struct MarginLossParams {
  float m_plus = 0.9f;
  float m_minus = 0.1f;
  float downweight = 0.5f;
  float lambda_m = 1.0f;
};

// Per-iteration coupling coefficients, exposed for inspection/tests.
struct RoutingTrace {
  std::vector<Tensor> couplings;  // each [n, N_pc, k], rows sum to 1
};

// Direction-preserving shrink: v * |v| / (1 + |v|^2) over the last axis.
Tensor squash_lastdim(const Tensor& v);

// Routing by agreement. Coupling logits start at zero each call; gradients
// flow through the final weighted sum and squash only (couplings are
// treated as computed constants).
ClassCapsuleOutput dynamic_routing(const Tensor& primary_caps, const CapsuleLayerParams& params,
                                   RoutingTrace* trace = nullptr);

// Margin loss of the class-capsule norms, averaged over the batch.
Tensor margin_loss(const ClassCapsuleOutput& out, const std::vector<int>& labels,
                   const MarginLossParams& params);

// lambda * batch mean of squared Frobenius distance.
Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, float lambda_recon);

}  // namespace icaps
