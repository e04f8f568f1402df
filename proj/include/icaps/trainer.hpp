#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icaps/data_io.hpp"
#include "icaps/losses.hpp"

namespace icaps {

// Two sub-batches with pairwise different labels.
struct PairedBatch {
  Tensor x_i, x_j;
  std::vector<int> y_i, y_j;
  int pairs() const { return x_i.defined() ? x_i.dim(0) : 0; }
  void validate() const;
};

// Two distinct class labels per batch; for binary data that means every
// pair holds opposite classes.
PairedBatch pair_batch(const Dataset& data, int batch_size, Rng& rng);

// Randomness of one training step, sampled once and shared by the loss
// record and all five sub-updates so each equation sees the same batch.
struct StepNoise {
  Tensor eps_i, eps_j;          // [B,R] reparameterization draws
  std::vector<int> trav_index;  // changed concept element per i-side sample
  Tensor trav_mask;             // [B,L] one-hot rows of trav_index
  Tensor trav_a, trav_b;        // [B,1] replacement values in [-1,1]
};
StepNoise sample_step_noise(int pairs, const ModelConfig& cfg, Rng& rng);

SwapBundle build_swap_bundle(const PairedBatch& batch, const ModelState& state,
                             const StepNoise& noise);
SwapBundle build_swap_bundle(const PairedBatch& batch, const ModelState& state, Rng& rng);

struct LossRecord {
  int step = 0;
  int epoch = 0;
  float margin = 0, recon = 0, concept_v = 0, cg = 0, cs = 0, rs = 0, cr = 0, kl = 0;
  float g = 0, dg = 0, lgp = 0;
  std::string to_jsonl() const;
};

struct AdamOptimizer {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;

  void step(const NamedParams& params);
};

// Alternating five-way optimization: critic/classifier first, then the
// capsule classifier, residual encoder, generator, and the traversal
// discriminator, each on a fresh forward pass at current parameters.
class Trainer {
 public:
  Trainer(ModelState state, TrainConfig tc, LossWeights weights);

  LossRecord train_step(const PairedBatch& batch);
  LossRecord train_step(const PairedBatch& batch, const StepNoise& noise);
  // One equation's sub-update in isolation (train_step runs all five).
  void update_group(ParamGroup group, const PairedBatch& batch, const StepNoise& noise);

  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }
  Rng& rng() { return rng_; }
  AdamOptimizer& optimizer(ParamGroup g) { return opts_[static_cast<size_t>(g)]; }
  const TrainConfig& config() const { return tc_; }
  const LossWeights& weights() const { return weights_; }

 private:
  ModelState state_;
  TrainConfig tc_;
  LossWeights weights_;
  std::array<AdamOptimizer, 5> opts_;
  Rng rng_;
  int step_count_ = 0;
};

// Little-endian binary checkpoint: magic "ICAP", format version u32, a
// length-prefixed JSON config block, then named tensor records.
void save_checkpoint(const ModelState& state, const std::array<AdamOptimizer, 5>* opts,
                     const std::string& path);

struct LoadedCheckpoint {
  ModelState state;
  bool has_optimizer = false;
  std::array<AdamOptimizer, 5> opts;
};
LoadedCheckpoint load_checkpoint(const std::string& path,
                                 const ModelConfig* expected = nullptr);

struct TrainOptions {
  std::string out_dir;  // empty: keep everything in memory
  std::function<void(const LossRecord&)> on_step;
};

struct TrainOutput {
  ModelState state;
  std::vector<LossRecord> log;
  std::string final_checkpoint;
};

TrainOutput train_model(const Dataset& data, const FullConfig& cfg,
                        const TrainOptions& options = {});

}  // namespace icaps
