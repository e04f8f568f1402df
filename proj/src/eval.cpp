#include "icaps/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace icaps {

using nlohmann::json;

double accuracy_c(const ModelState& state, const Dataset& test) {
  if (test.size() == 0) throw ValueError("accuracy_c: empty test set");
  NoGradGuard ng;
  ClassCapsuleOutput out = state.cc.forward(test.images);
  std::vector<int> pred = argmax_rows(out.norms);
  int correct = 0;
  for (int i = 0; i < test.size(); ++i)
    if (pred[static_cast<size_t>(i)] == test.labels[static_cast<size_t>(i)]) ++correct;
  return static_cast<double>(correct) / test.size();
}

double feature_probe(const std::vector<std::vector<float>>& train_features,
                     const std::vector<int>& train_labels,
                     const std::vector<std::vector<float>>& test_features,
                     const std::vector<int>& test_labels, int classes, const ProbeConfig& cfg) {
  if (train_features.empty() || test_features.empty())
    throw ValueError("feature_probe: empty feature set");
  const int dim = static_cast<int>(train_features[0].size());
  const int n_train = static_cast<int>(train_features.size());
  Rng rng(cfg.seed);
  Tensor w1 = Tensor::uniform({dim, cfg.hidden}, rng, -std::sqrt(6.0f / dim),
                              std::sqrt(6.0f / dim), true);
  Tensor b1 = Tensor::zeros({cfg.hidden}, true);
  Tensor w2 = Tensor::uniform({cfg.hidden, classes}, rng, -std::sqrt(6.0f / cfg.hidden),
                              std::sqrt(6.0f / cfg.hidden), true);
  Tensor b2 = Tensor::zeros({classes}, true);
  NamedParams params{{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
  AdamOptimizer opt;
  opt.lr = cfg.lr;

  auto forward = [&](const Tensor& x) {
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
  };

  std::vector<int> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic shuffle per epoch.
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.below(static_cast<uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int nb = std::min(cfg.batch_size, n_train - start);
      std::vector<float> xb(static_cast<size_t>(nb) * dim);
      std::vector<int> yb(static_cast<size_t>(nb));
      for (int s = 0; s < nb; ++s) {
        const int idx = order[static_cast<size_t>(start + s)];
        std::memcpy(xb.data() + static_cast<size_t>(s) * dim,
                    train_features[static_cast<size_t>(idx)].data(),
                    static_cast<size_t>(dim) * sizeof(float));
        yb[static_cast<size_t>(s)] = train_labels[static_cast<size_t>(idx)];
      }
      Tensor x = Tensor::from_vector({nb, dim}, std::move(xb));
      Tensor logits = forward(x);
      Tensor logp = log(add_scalar(softmax(logits, 1), 1e-12f));
      Tensor nll = neg(mean(select_index(logp, yb)));
      for (auto& [name, t] : params) {
        Tensor tt = t;
        tt.zero_grad();
      }
      nll.backward();
      opt.step(params);
    }
  }

  NoGradGuard ng;
  const int n_test = static_cast<int>(test_features.size());
  std::vector<float> xt(static_cast<size_t>(n_test) * dim);
  for (int i = 0; i < n_test; ++i)
    std::memcpy(xt.data() + static_cast<size_t>(i) * dim, test_features[static_cast<size_t>(i)].data(),
                static_cast<size_t>(dim) * sizeof(float));
  Tensor logits = forward(Tensor::from_vector({n_test, dim}, std::move(xt)));
  std::vector<int> pred = argmax_rows(logits);
  int correct = 0;
  for (int i = 0; i < n_test; ++i)
    if (pred[static_cast<size_t>(i)] == test_labels[static_cast<size_t>(i)]) ++correct;
  return static_cast<double>(correct) / n_test;
}

namespace {

std::vector<std::vector<float>> residual_features(const ModelState& state, const Dataset& data) {
  NoGradGuard ng;
  ResidualPosterior post = state.enc.forward(data.images);
  const int n = data.size();
  const int dim = post.mu.dim(1);
  std::vector<std::vector<float>> features(static_cast<size_t>(n));
  const float* p = post.mu.data();
  for (int i = 0; i < n; ++i)
    features[static_cast<size_t>(i)].assign(p + static_cast<int64_t>(i) * dim,
                                            p + static_cast<int64_t>(i + 1) * dim);
  return features;
}

std::vector<std::vector<float>> concept_features(const ModelState& state, const Dataset& data) {
  NoGradGuard ng;
  auto [caps, c] = state.encode_class_relevant(data.images);
  const int n = data.size();
  const int dim = c.dim(1);
  std::vector<std::vector<float>> features(static_cast<size_t>(n));
  const float* p = c.data();
  for (int i = 0; i < n; ++i)
    features[static_cast<size_t>(i)].assign(p + static_cast<int64_t>(i) * dim,
                                            p + static_cast<int64_t>(i + 1) * dim);
  return features;
}

}  // namespace

double residual_probe(const ModelState& state, const Dataset& train, const Dataset& test,
                      const ProbeConfig& cfg) {
  return feature_probe(residual_features(state, train), train.labels,
                       residual_features(state, test), test.labels, state.cfg.classes, cfg);
}

double mutual_information(const std::vector<float>& values, const std::vector<int>& labels,
                          int bins) {
  if (bins < 2) throw ValueError("mutual_information: bins must be >= 2");
  if (values.size() != labels.size() || values.empty())
    throw ValueError("mutual_information: values/labels size mismatch");
  const int n = static_cast<int>(values.size());
  int k = 0;
  for (int y : labels) {
    if (y < 0) throw ValueError("mutual_information: negative label");
    k = std::max(k, y + 1);
  }
  // Equal-frequency bin edges; a sample's bin counts the edges at or below
  // its value, so ties always share a bin and constant input occupies one.
  std::vector<float> sorted(values);
  std::sort(sorted.begin(), sorted.end());
  std::vector<float> edges;
  for (int b = 1; b < bins; ++b)
    edges.push_back(sorted[static_cast<size_t>(static_cast<int64_t>(n) * b / bins)]);
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  const int nb = static_cast<int>(edges.size()) + 1;
  std::vector<int64_t> joint(static_cast<size_t>(nb) * k, 0);
  std::vector<int64_t> bin_count(static_cast<size_t>(nb), 0);
  std::vector<int64_t> label_count(static_cast<size_t>(k), 0);
  for (int i = 0; i < n; ++i) {
    const int b = static_cast<int>(
        std::upper_bound(edges.begin(), edges.end(), values[static_cast<size_t>(i)]) -
        edges.begin());
    ++joint[static_cast<size_t>(b) * k + labels[static_cast<size_t>(i)]];
    ++bin_count[static_cast<size_t>(b)];
    ++label_count[static_cast<size_t>(labels[static_cast<size_t>(i)])];
  }
  double mi = 0.0;
  for (int b = 0; b < nb; ++b)
    for (int y = 0; y < k; ++y) {
      const int64_t c = joint[static_cast<size_t>(b) * k + y];
      if (c == 0) continue;
      const double p_joint = static_cast<double>(c) / n;
      const double p_b = static_cast<double>(bin_count[static_cast<size_t>(b)]) / n;
      const double p_y = static_cast<double>(label_count[static_cast<size_t>(y)]) / n;
      mi += p_joint * std::log(p_joint / (p_b * p_y));
    }
  return std::max(0.0, mi);
}

double MIEstimate::mean_c() const {
  double s = 0.0;
  for (double v : mi_c) s += v;
  return mi_c.empty() ? 0.0 : s / static_cast<double>(mi_c.size());
}

double MIEstimate::mean_r() const {
  double s = 0.0;
  for (double v : mi_r) s += v;
  return mi_r.empty() ? 0.0 : s / static_cast<double>(mi_r.size());
}

MIEstimate mi_estimate(const ModelState& state, const Dataset& data, int bins) {
  NoGradGuard ng;
  MIEstimate est;
  est.bins = bins;
  auto [caps, c] = state.encode_class_relevant(data.images);
  ResidualPosterior post = state.enc.forward(data.images);
  const int n = data.size();
  const int L = c.dim(1);
  const int R = post.mu.dim(1);
  const float* pc = c.data();
  const float* pr = post.mu.data();
  std::vector<float> column(static_cast<size_t>(n));
  for (int l = 0; l < L; ++l) {
    for (int i = 0; i < n; ++i) column[static_cast<size_t>(i)] = pc[static_cast<int64_t>(i) * L + l];
    est.mi_c.push_back(mutual_information(column, data.labels, bins));
  }
  for (int r = 0; r < R; ++r) {
    for (int i = 0; i < n; ++i) column[static_cast<size_t>(i)] = pr[static_cast<int64_t>(i) * R + r];
    est.mi_r.push_back(mutual_information(column, data.labels, bins));
  }
  return est;
}

TraversalGrid traversal_grid(const ModelState& state, const Tensor& x, int steps) {
  if (steps < 2) throw ValueError("traversal_grid: steps must be >= 2");
  NoGradGuard ng;
  auto [caps, c] = state.encode_class_relevant(x);
  auto [post, r] = state.encode_residual(x, nullptr, /*deterministic=*/true);
  const int L = c.dim(1);
  TraversalGrid grid;
  grid.concept_dim = L;
  grid.steps = steps;
  for (int s = 0; s < steps; ++s)
    grid.values.push_back(-1.0f + 2.0f * static_cast<float>(s) / (steps - 1));
  for (int l = 0; l < L; ++l) {
    for (int s = 0; s < steps; ++s) {
      std::vector<float> cv(c.values());
      cv[static_cast<size_t>(l)] = grid.values[static_cast<size_t>(s)];
      Tensor c_mod = Tensor::from_vector({1, L}, std::move(cv));
      grid.images.push_back(state.gen.forward(c_mod, post.mu));
    }
  }
  return grid;
}

double distinctness_score(const TraversalGrid& grid) {
  if (grid.steps < 2) throw ValueError("distinctness_score: needs at least 2 steps");
  const int L = grid.concept_dim;
  const int S = grid.steps;
  const int64_t px = grid.images[0].numel();
  const int64_t delta_len = px * (S - 1);
  std::vector<std::vector<double>> deltas(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    auto& row = deltas[static_cast<size_t>(l)];
    row.resize(static_cast<size_t>(delta_len));
    for (int s = 0; s + 1 < S; ++s) {
      const float* a = grid.image(l, s).data();
      const float* b = grid.image(l, s + 1).data();
      for (int64_t i = 0; i < px; ++i)
        row[static_cast<size_t>(s) * px + i] = static_cast<double>(b[i]) - a[i];
    }
  }
  double worst = 0.0;
  for (int a = 0; a < L; ++a)
    for (int b = a + 1; b < L; ++b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int64_t i = 0; i < delta_len; ++i) {
        dot += deltas[static_cast<size_t>(a)][static_cast<size_t>(i)] *
               deltas[static_cast<size_t>(b)][static_cast<size_t>(i)];
        na += deltas[static_cast<size_t>(a)][static_cast<size_t>(i)] *
              deltas[static_cast<size_t>(a)][static_cast<size_t>(i)];
        nb += deltas[static_cast<size_t>(b)][static_cast<size_t>(i)] *
              deltas[static_cast<size_t>(b)][static_cast<size_t>(i)];
      }
      // Degenerate all-zero sequences count as maximally overlapping.
      const double sim = (na == 0.0 || nb == 0.0) ? 1.0 : std::fabs(dot / std::sqrt(na * nb));
      worst = std::max(worst, sim);
    }
  return worst;
}

SwapGrid swap_grid(const ModelState& state, const Tensor& x_i, int y_i, const Tensor& x_j,
                   int y_j) {
  if (y_i == y_j)
    throw ValueError("swap_grid: inputs must have different labels, both are " +
                     std::to_string(y_i));
  NoGradGuard ng;
  std::vector<int> yi{y_i}, yj{y_j};
  auto [caps_i, c_i] = state.encode_class_relevant(x_i, &yi);
  auto [caps_j, c_j] = state.encode_class_relevant(x_j, &yj);
  auto [post_i, r_i] = state.encode_residual(x_i, nullptr, true);
  auto [post_j, r_j] = state.encode_residual(x_j, nullptr, true);
  SwapGrid out;
  out.recon_ii = state.gen.forward(c_i, r_i);
  out.recon_jj = state.gen.forward(c_j, r_j);
  out.swap_ji = state.gen.forward(c_j, r_i);
  out.swap_ij = state.gen.forward(c_i, r_j);
  return out;
}

ExplanationRecord explain_sample(const ModelState& state, const Tensor& x,
                                 const std::vector<std::string>* names) {
  NoGradGuard ng;
  ClassCapsuleOutput out = state.cc.forward(x);
  const std::vector<int> pred = argmax_rows(out.norms);
  ExplanationRecord rec;
  rec.predicted_class = pred[0];
  rec.confidence = out.norms.at({0, pred[0]});
  Tensor c = select_row(out.capsules, pred);
  rec.concepts.assign(c.data(), c.data() + c.numel());
  if (names) {
    if (static_cast<int>(names->size()) != static_cast<int>(rec.concepts.size()))
      throw ValueError("explain_sample: concept-name count " + std::to_string(names->size()) +
                       " does not match concept dimension " +
                       std::to_string(rec.concepts.size()));
    rec.concept_names = *names;
  }
  return rec;
}

std::string ExplanationRecord::to_json() const {
  json j;
  j["sample_id"] = sample_id;
  j["predicted_class"] = predicted_class;
  j["confidence"] = confidence;
  j["concepts"] = concepts;
  if (!concept_names.empty()) j["concept_names"] = concept_names;
  return j.dump();
}

void write_ppm(const std::string& path, const std::vector<std::vector<Tensor>>& rows) {
  if (rows.empty() || rows[0].empty()) throw ValueError("write_ppm: empty grid");
  const Tensor& first = rows[0][0];
  const int c = first.dim(1), h = first.dim(2), w = first.dim(3);
  const int pad = 1;
  const int grid_h = static_cast<int>(rows.size()) * (h + pad) + pad;
  const int grid_w = static_cast<int>(rows[0].size()) * (w + pad) + pad;
  std::vector<unsigned char> rgb(static_cast<size_t>(grid_h) * grid_w * 3, 40);
  for (size_t row = 0; row < rows.size(); ++row) {
    if (rows[row].size() != rows[0].size()) throw ValueError("write_ppm: ragged grid");
    for (size_t col = 0; col < rows[row].size(); ++col) {
      const Tensor& img = rows[row][col];
      const float* p = img.data();
      const int oy = static_cast<int>(row) * (h + pad) + pad;
      const int ox = static_cast<int>(col) * (w + pad) + pad;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float v = 0.0f;
          for (int ch = 0; ch < c; ++ch) v += p[(static_cast<int64_t>(ch) * h + y) * w + x];
          v /= static_cast<float>(c);
          const unsigned char u =
              static_cast<unsigned char>(std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0f));
          const size_t off = (static_cast<size_t>(oy + y) * grid_w + (ox + x)) * 3;
          rgb[off] = rgb[off + 1] = rgb[off + 2] = u;
        }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "P6\n" << grid_w << " " << grid_h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw IoError("write failure on " + path);
}

void write_traversal_ppm(const std::string& path, const TraversalGrid& grid) {
  std::vector<std::vector<Tensor>> rows(static_cast<size_t>(grid.concept_dim));
  for (int l = 0; l < grid.concept_dim; ++l)
    for (int s = 0; s < grid.steps; ++s) rows[static_cast<size_t>(l)].push_back(grid.image(l, s));
  write_ppm(path, rows);
}

void write_swap_ppm(const std::string& path, const SwapGrid& grid) {
  write_ppm(path, {{grid.recon_ii, grid.recon_jj}, {grid.swap_ji, grid.swap_ij}});
}

void emit_report(const EvalReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create report directory " + out_dir);

  {
    std::ofstream csv(out_dir + "/mi.csv");
    if (!csv) throw IoError("cannot write " + out_dir + "/mi.csv");
    csv << "kind,dimension,mi_nats\n";
    for (size_t i = 0; i < report.mi.mi_c.size(); ++i)
      csv << "c," << i << "," << report.mi.mi_c[i] << "\n";
    for (size_t i = 0; i < report.mi.mi_r.size(); ++i)
      csv << "r," << i << "," << report.mi.mi_r[i] << "\n";
  }
  {
    std::ofstream ex(out_dir + "/explanations.json");
    if (!ex) throw IoError("cannot write " + out_dir + "/explanations.json");
    ex << "[\n";
    for (size_t i = 0; i < report.explanations.size(); ++i) {
      ex << "  " << report.explanations[i].to_json();
      if (i + 1 < report.explanations.size()) ex << ",";
      ex << "\n";
    }
    ex << "]\n";
  }
  {
    std::ofstream md(out_dir + "/summary.md");
    if (!md) throw IoError("cannot write " + out_dir + "/summary.md");
    md << "# Evaluation summary\n\n";
    md << "| metric | value |\n|---|---|\n";
    md << "| accuracy (argmax capsule norm) | " << report.accuracy << " |\n";
    md << "| residual probe accuracy | " << report.probe_accuracy << " |\n";
    md << "| chance | " << report.chance << " |\n";
    md << "| mean MI of c (nats) | " << report.mi.mean_c() << " |\n";
    md << "| mean MI of r (nats) | " << report.mi.mean_r() << " |\n";
    if (report.distinctness)
      md << "| distinctness score | " << *report.distinctness << " |\n";
    md << "\nPer-dimension mutual information is in `mi.csv`; sample\n";
    md << "explanations are in `explanations.json`.\n";
  }
}

}  // namespace icaps
