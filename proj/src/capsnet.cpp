#include "icaps/capsnet.hpp"

#include <cmath>

namespace icaps {

Tensor squash_lastdim(const Tensor& v) {
  Tensor n = l2norm_lastdim(v, /*keepdim=*/true);
  Tensor factor = div(n, add_scalar(square(n), 1.0f));
  return mul(v, factor);
}

ClassCapsuleOutput dynamic_routing(const Tensor& primary_caps, const CapsuleLayerParams& params,
                                   RoutingTrace* trace) {
  if (primary_caps.rank() != 3)
    throw ShapeError("dynamic_routing: expects primary capsules [n,N,d], got " +
                     shape_str(primary_caps.shape()));
  if (params.routing_iterations < 1)
    throw ValueError("dynamic_routing: routing_iterations must be >= 1");
  const int n = primary_caps.dim(0);
  const int N = primary_caps.dim(1);
  const int k = params.w.dim(1);
  const int L = params.w.dim(2);

  Tensor uhat = caps_predict(primary_caps, params.w);  // [n,N,k,L]
  const float* pu = uhat.data();

  // Logits start at zero each forward pass (stateless routing).
  std::vector<float> b(static_cast<size_t>(n) * N * k, 0.0f);
  std::vector<float> coupling(b.size());
  std::vector<float> s(static_cast<size_t>(n) * k * L);
  std::vector<float> v(s.size());

  for (int it = 0; it < params.routing_iterations; ++it) {
    // coupling = softmax over classes of b, per primary capsule
    for (size_t row = 0; row < b.size() / k; ++row) {
      const float* brow = b.data() + row * k;
      float mx = brow[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, brow[j]);
      double denom = 0.0;
      float* crow = coupling.data() + row * k;
      for (int j = 0; j < k; ++j) {
        crow[j] = std::exp(brow[j] - mx);
        denom += crow[j];
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j < k; ++j) crow[j] *= inv;
    }
    if (trace)
      trace->couplings.push_back(Tensor::from_vector({n, N, k}, coupling));

    // s_j = sum_i coupling[i,j] * uhat[i,j]; v_j = squash(s_j)
    std::fill(s.begin(), s.end(), 0.0f);
    for (int bi = 0; bi < n; ++bi)
      for (int i = 0; i < N; ++i) {
        const float* crow = coupling.data() + (static_cast<size_t>(bi) * N + i) * k;
        const float* urow = pu + ((static_cast<int64_t>(bi) * N + i) * k) * L;
        float* srow = s.data() + static_cast<size_t>(bi) * k * L;
        for (int j = 0; j < k; ++j)
          for (int l = 0; l < L; ++l) srow[j * L + l] += crow[j] * urow[j * L + l];
      }
    for (int bi = 0; bi < n; ++bi)
      for (int j = 0; j < k; ++j) {
        const float* srow = s.data() + (static_cast<size_t>(bi) * k + j) * L;
        float* vrow = v.data() + (static_cast<size_t>(bi) * k + j) * L;
        double nsq = 0.0;
        for (int l = 0; l < L; ++l) nsq += static_cast<double>(srow[l]) * srow[l];
        const double norm = std::sqrt(nsq);
        const float factor = norm > 0 ? static_cast<float>(norm / (1.0 + nsq)) : 0.0f;
        for (int l = 0; l < L; ++l) vrow[l] = factor * srow[l];
      }

    // b[i,j] += <uhat[i,j], v_j>
    for (int bi = 0; bi < n; ++bi)
      for (int i = 0; i < N; ++i) {
        const float* urow = pu + ((static_cast<int64_t>(bi) * N + i) * k) * L;
        const float* vrow = v.data() + static_cast<size_t>(bi) * k * L;
        float* brow = b.data() + (static_cast<size_t>(bi) * N + i) * k;
        for (int j = 0; j < k; ++j) {
          float acc = 0.0f;
          for (int l = 0; l < L; ++l) acc += urow[j * L + l] * vrow[j * L + l];
          brow[j] += acc;
        }
      }
  }

  // Taped final pass with the last iteration's coupling held constant.
  Tensor coupling_t = Tensor::from_vector({n, N, k}, coupling);
  Tensor s_final = caps_weighted_sum(uhat, coupling_t);
  Tensor capsules = squash_lastdim(s_final);
  ClassCapsuleOutput out;
  out.capsules = capsules;
  out.norms = l2norm_lastdim(capsules);
  return out;
}

Tensor margin_loss(const ClassCapsuleOutput& out, const std::vector<int>& labels,
                   const MarginLossParams& params) {
  const int n = out.norms.dim(0);
  const int k = out.norms.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("margin_loss: label count " + std::to_string(labels.size()) +
                     " vs batch " + std::to_string(n));
  for (int y : labels)
    if (y < 0 || y >= k)
      throw ValueError("margin_loss: class index " + std::to_string(y) + " out of range [0," +
                       std::to_string(k) + ")");
  Tensor norms = out.norms;
  Tensor pos_sel = select_index(norms, labels);                       // [n]
  Tensor pos = square(relu(add_scalar(neg(pos_sel), params.m_plus)));  // max(0, m+ - |c_y|)^2
  Tensor neg_all = square(relu(add_scalar(norms, -params.m_minus)));   // [n,k]
  Tensor neg_sel = square(relu(add_scalar(pos_sel, -params.m_minus)));
  Tensor neg_sum = sub(sum_axis(neg_all, 1), neg_sel);                 // sum over j != y
  Tensor per_sample = add(pos, mul_scalar(neg_sum, params.downweight));
  return mul_scalar(mean(per_sample), params.lambda_m);
}

Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, float lambda_recon) {
  if (x_hat.shape() != x.shape())
    throw ShapeError("reconstruction_loss: shape " + shape_str(x_hat.shape()) + " vs " +
                     shape_str(x.shape()));
  const int n = x.dim(0);
  Tensor diff = sub(x_hat, x);
  Tensor per_sample = sum_axis(reshape(square(diff), {n, -1}), 1);
  return mul_scalar(mean(per_sample), lambda_recon);
}

}  // namespace icaps
