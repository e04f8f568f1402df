#pragma once

#include <optional>
#include <string>
#include <vector>

#include "icaps/data_io.hpp"
#include "icaps/trainer.hpp"

namespace icaps {

// Fraction of samples whose argmax capsule norm equals the label.
double accuracy_c(const ModelState& state, const Dataset& test);

struct ProbeConfig {
  int hidden = 64;
  int epochs = 50;
  int batch_size = 64;
  float lr = 1e-3f;
  uint64_t seed = 7;
};

// Trains a fresh single-hidden-layer classifier on frozen residual means
// and reports test accuracy; chance is 1/k, lower is better.
double residual_probe(const ModelState& state, const Dataset& train, const Dataset& test,
                      const ProbeConfig& cfg = {});

// Same probe on arbitrary precomputed features (used by sanity checks and
// the informativeness ordering).
double feature_probe(const std::vector<std::vector<float>>& train_features,
                     const std::vector<int>& train_labels,
                     const std::vector<std::vector<float>>& test_features,
                     const std::vector<int>& test_labels, int classes, const ProbeConfig& cfg);

// Histogram mutual information in nats between scalar values and discrete
// labels: equal-frequency bins over the values, exact counts over labels.
double mutual_information(const std::vector<float>& values, const std::vector<int>& labels,
                          int bins);

struct MIEstimate {
  std::vector<double> mi_c;  // per concept dimension
  std::vector<double> mi_r;  // per residual dimension
  int bins = 20;
  double mean_c() const;
  double mean_r() const;
};

MIEstimate mi_estimate(const ModelState& state, const Dataset& data, int bins = 20);

struct TraversalGrid {
  int concept_dim = 0;             // rows
  int steps = 0;                   // columns
  std::vector<float> values;       // interpolation points, size steps
  std::vector<Tensor> images;      // row-major, size rows*steps, each [1,c,h,w]
  const Tensor& image(int row, int col) const { return images[static_cast<size_t>(row) * steps + col]; }
};

// For each concept element: fix c at the predicted-class capsule and r at
// the posterior mean, sweep that element over [-1,1] in `steps` points.
TraversalGrid traversal_grid(const ModelState& state, const Tensor& x, int steps);

// Max |cosine similarity| between the per-row pixel-delta sequences; lower
// means rows change in more distinct ways. All-zero delta pairs score 1.
double distinctness_score(const TraversalGrid& grid);

struct SwapGrid {
  Tensor recon_ii, recon_jj;  // G(c_i,r_i), G(c_j,r_j)
  Tensor swap_ji, swap_ij;    // G(c_j,r_i), G(c_i,r_j)
};
SwapGrid swap_grid(const ModelState& state, const Tensor& x_i, int y_i, const Tensor& x_j,
                   int y_j);

struct ExplanationRecord {
  int sample_id = -1;
  int predicted_class = -1;
  float confidence = 0.0f;             // capsule norm, in [0,1)
  std::vector<float> concepts;         // winning capsule elements
  std::vector<std::string> concept_names;  // optional human labels
  std::string to_json() const;
};

ExplanationRecord explain_sample(const ModelState& state, const Tensor& x,
                                 const std::vector<std::string>* names = nullptr);

// Binary PPM (P6) writers for image grids.
void write_ppm(const std::string& path, const std::vector<std::vector<Tensor>>& rows);
void write_traversal_ppm(const std::string& path, const TraversalGrid& grid);
void write_swap_ppm(const std::string& path, const SwapGrid& grid);

struct EvalReport {
  double accuracy = 0.0;
  double probe_accuracy = 0.0;
  double chance = 0.0;
  MIEstimate mi;
  std::optional<double> distinctness;
  std::vector<ExplanationRecord> explanations;
};

// Writes mi.csv, explanations.json, summary.md (plus any grids the caller
// already rendered) into `out_dir`.
void emit_report(const EvalReport& report, const std::string& out_dir);

}  // namespace icaps
