#pragma once

#include <string>
#include <utility>
#include <vector>

#include "icaps/capsnet.hpp"
#include "icaps/tensor.hpp"

namespace icaps {

struct ModelConfig {
  int image_h = 16;
  int image_w = 16;
  int image_c = 1;
  int classes = 2;       // k
  int concept_dim = 4;   // L
  int residual_dim = 8;  // R
  int cc_conv1_channels = 8;
  int pc_capsule_types = 4;
  int pc_capsule_dim = 4;
  int routing_iterations = 3;
  int enc_conv1_channels = 8;
  int enc_conv2_channels = 16;
  int gen_fc_channels = 16;  // channels of the 4x4 seed feature map
  int gen_conv1_channels = 8;
  int critic_conv1_channels = 8;
  int critic_conv2_channels = 16;
  int critic_fc = 64;
  int cr_conv1_channels = 8;
  int cr_conv2_channels = 16;
  int cr_fc = 64;
  uint64_t seed = 1;

  void validate() const;
};

// Named parameter list; names are stable and used by checkpoints.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct Conv2dLayer {
  Tensor w;  // [co, ci, kh, kw]
  Tensor b;  // [co]
  int stride = 1;
  int padding = 0;
  void init(int co, int ci, int kh, int kw, int stride_, int padding_, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct ConvT2dLayer {
  Tensor w;  // [c_from, c_to, kh, kw]
  Tensor b;  // [c_to]
  int stride = 1;
  int padding = 0;
  void init(int c_from, int c_to, int kh, int kw, int stride_, int padding_, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct LinearLayer {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  void init(int in, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

// C_C: convolutional feature extractor -> primary capsules -> routed class
// capsules. The capsule norms are the class probabilities; the capsule
// elements are the concepts.
struct CapsClassifier {
  Conv2dLayer conv1;
  Conv2dLayer conv2;  // emits pc_capsule_types * pc_capsule_dim channels
  CapsuleLayerParams caps;
  int pc_types = 0;
  int pc_dim = 0;

  void init(const ModelConfig& cfg, Rng& rng);
  ClassCapsuleOutput forward(const Tensor& x, RoutingTrace* trace = nullptr) const;
  NamedParams params(const std::string& prefix) const;
};

struct ResidualPosterior {
  Tensor mu;      // [n, R]
  Tensor logvar;  // [n, R]
};

// E: residual encoder with a diagonal-Gaussian posterior.
struct ResidualEncoder {
  Conv2dLayer conv1;
  Conv2dLayer conv2;
  LinearLayer fc;  // -> 2R (mu, logvar)
  int residual_dim = 0;

  void init(const ModelConfig& cfg, Rng& rng);
  ResidualPosterior forward(const Tensor& x) const;
  // Reparameterized sample; pass deterministic=true (or rng=nullptr) for r = mu.
  Tensor sample(const ResidualPosterior& post, Rng* rng, bool deterministic = false) const;
  NamedParams params(const std::string& prefix) const;
};

// G: generator from c (+) r to an image in [0,1].
struct Generator {
  LinearLayer fc;
  ConvT2dLayer deconv1;
  ConvT2dLayer deconv2;
  int seed_channels = 0;
  int seed_hw = 4;

  void init(const ModelConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& c, const Tensor& r) const;
  NamedParams params(const std::string& prefix) const;
};

// D_G / C_G: one shared trunk, a critic head (unbounded score) and a
// classifier head (k logits).
struct CriticClassifier {
  Conv2dLayer conv1;
  Conv2dLayer conv2;
  LinearLayer fc;
  LinearLayer critic_head;  // -> 1
  LinearLayer class_head;   // -> k

  void init(const ModelConfig& cfg, Rng& rng);
  Tensor trunk(const Tensor& x) const;
  // (critic score [n], logits [n,k])
  std::pair<Tensor, Tensor> forward(const Tensor& x) const;
  Tensor critic(const Tensor& x) const;
  Tensor logits(const Tensor& x) const;
  NamedParams params(const std::string& prefix) const;
};

// D_CR: takes two images that differ in one concept element and predicts
// which element changed. Inputs are channel-concatenated.
struct TraversalDiscriminator {
  Conv2dLayer conv1;
  Conv2dLayer conv2;
  LinearLayer fc;
  LinearLayer head;  // -> L

  void init(const ModelConfig& cfg, Rng& rng);
  Tensor logits(const Tensor& x_a, const Tensor& x_b) const;
  Tensor probabilities(const Tensor& x_a, const Tensor& x_b) const;
  NamedParams params(const std::string& prefix) const;
};

enum class ParamGroup { CC, E, DGCG, G, DCR };
inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::CC: return "cc";
    case ParamGroup::E: return "e";
    case ParamGroup::DGCG: return "dgcg";
    case ParamGroup::G: return "g";
    case ParamGroup::DCR: return "dcr";
  }
  return "?";
}

// All six components plus the exact five-way parameter partition.
struct ModelState {
  ModelConfig cfg;
  CapsClassifier cc;
  ResidualEncoder enc;
  Generator gen;
  CriticClassifier critic;
  TraversalDiscriminator cr;

  static ModelState init(const ModelConfig& cfg);

  NamedParams group_params(ParamGroup g) const;
  NamedParams all_params() const;
  void set_group_requires_grad(ParamGroup g, bool value);
  void set_all_requires_grad(bool value);
  void zero_all_grads();

  // (full capsule output, c): c is the capsule row for the given label when
  // provided, else the argmax-norm row.
  std::pair<ClassCapsuleOutput, Tensor> encode_class_relevant(
      const Tensor& x, const std::vector<int>* labels = nullptr) const;
  std::pair<ResidualPosterior, Tensor> encode_residual(const Tensor& x, Rng* rng,
                                                       bool deterministic = false) const;
  Tensor generate(const Tensor& c, const Tensor& r) const;
  std::pair<Tensor, Tensor> discriminate_and_classify(const Tensor& x) const;
  Tensor cr_discriminate(const Tensor& x_a, const Tensor& x_b) const;
};

std::vector<int> argmax_rows(const Tensor& t);  // [n,k] -> per-row argmax

}  // namespace icaps
