#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "icaps/components.hpp"
#include "icaps/losses.hpp"
#include "icaps/tensor.hpp"

namespace icaps {

// In-memory dataset: images in [0,1], NCHW, with integer class labels.
struct Dataset {
  Tensor images;            // [n, c, h, w]
  std::vector<int> labels;  // n entries, < classes
  int classes = 0;
  std::string split;

  int size() const { return images.defined() ? images.dim(0) : 0; }
  Tensor image(int i) const;  // [1, c, h, w]
  void validate() const;
};

// ICDS container: magic "ICDS", version u32, n/c/h/w u32, pixels as u8
// (value/255), labels as u16. Little-endian throughout.
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// Synthetic factor dataset. The class-relevant factor (stroke motif:
// circle / line / cross / dots) determines the label exactly; position,
// rotation and thickness are sampled independently of the label.
struct SyntheticSpec {
  int image_size = 16;
  int classes = 2;  // up to 4 motifs
  uint64_t seed = 1;
  int max_offset = 2;
  int min_thickness = 1;
  int max_thickness = 2;

  void validate() const;
};

// Ground-truth factor values per sample, by factor name.
struct FactorTable {
  std::vector<std::string> names;            // shape, dx, dy, rotation, thickness
  std::vector<std::vector<float>> columns;   // one column per name
};

std::pair<Dataset, FactorTable> generate_synthetic(const SyntheticSpec& spec, int n);

SyntheticSpec parse_synthetic_spec(const std::string& json_text);
SyntheticSpec load_synthetic_spec(const std::string& path);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;  // total images per step; two sub-batches of half
  float lr = 2e-4f;
  float beta1 = 0.9f;       // C_C and E
  float beta2 = 0.999f;
  float beta1_adv = 0.5f;   // adversarial groups
  float beta2_adv = 0.9f;
  float adam_eps = 1e-8f;
  int critic_steps = 1;
  int checkpoint_interval = 10;  // epochs
  uint64_t seed = 1;

  void validate() const;
};

struct FullConfig {
  ModelConfig model;
  TrainConfig train;
  LossWeights weights;
};

// Strict JSON config: unknown keys are rejected (with their path), absent
// keys take defaults. The resolved config can be serialized back out.
FullConfig parse_config_text(const std::string& json_text);
FullConfig parse_config(const std::string& path);
std::string config_to_json(const FullConfig& cfg);
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig parse_model_config_text(const std::string& json_text);

// IDX (standard raw digit-image files) to ICDS, with optional box-filter
// resize to `target_size` (0 keeps the source size).
Dataset convert_idx(const std::string& images_path, const std::string& labels_path,
                    int target_size);

}  // namespace icaps
