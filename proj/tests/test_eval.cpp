#include <cmath>
#include <cstring>
#include <doctest.h>
#include <filesystem>
#include <fstream>

#include "icaps/eval.hpp"

using namespace icaps;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * sizeof(float)) == 0;
}

Dataset synth(int n, int classes = 2, uint64_t seed = 1) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.seed = seed;
  return generate_synthetic(spec, n).first;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("mutual information: perfect dependence reaches log k") {
  const int n = 10000;
  std::vector<float> values;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    labels.push_back(i % 2);
    values.push_back(static_cast<float>(i % 2));
  }
  CHECK(mutual_information(values, labels, 20) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Any injective mapping of balanced labels, k = 4.
  const float mapped[4] = {7.5f, -2.0f, 0.25f, 100.0f};
  values.clear();
  labels.clear();
  for (int i = 0; i < n; ++i) {
    labels.push_back(i % 4);
    values.push_back(mapped[i % 4]);
  }
  CHECK(mutual_information(values, labels, 20) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("mutual information: independence decays to zero") {
  Rng rng(401);
  const int n = 10000;
  std::vector<float> values;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    labels.push_back(i % 2);
    values.push_back(rng.uniform(-1, 1));
  }
  const double mi = mutual_information(values, labels, 20);
  CHECK(mi >= 0.0);
  CHECK(mi < 0.02);
}

TEST_CASE("mutual information: eight-sample contingency table by hand") {
  // Two value groups, bins = 2: joint counts (3,1 / 1,3).
  const std::vector<float> values{0.1f, 0.1f, 0.1f, 0.1f, 0.9f, 0.9f, 0.9f, 0.9f};
  const std::vector<int> labels{0, 0, 0, 1, 1, 1, 1, 0};
  const double p_joint[2][2] = {{3.0 / 8, 1.0 / 8}, {1.0 / 8, 3.0 / 8}};
  double expect = 0.0;
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 2; ++y)
      expect += p_joint[b][y] * std::log(p_joint[b][y] / (0.5 * 0.5));
  CHECK(mutual_information(values, labels, 2) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("mutual information: constant values occupy a single bin") {
  std::vector<float> values(100, 3.25f);
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 2);
  CHECK(mutual_information(values, labels, 20) == 0.0);
}

TEST_CASE("mutual information: bounded above by log(min(k, bins))") {
  Rng rng(409);
  std::vector<float> values;
  std::vector<int> labels;
  for (int i = 0; i < 1000; ++i) {
    labels.push_back(static_cast<int>(rng.below(6)));
    values.push_back(rng.uniform(-1, 1) + labels.back());
  }
  const double mi = mutual_information(values, labels, 4);
  CHECK(mi <= std::log(4.0) + 1e-9);
  CHECK(mi >= 0.0);
  CHECK_THROWS_AS(mutual_information(values, labels, 1), ValueError);
}

TEST_CASE("feature probe sanity: labels as features are learnable") {
  Rng rng(411);
  std::vector<std::vector<float>> train_f, test_f;
  std::vector<int> train_y, test_y;
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2;
    std::vector<float> onehot{y == 0 ? 1.0f : 0.0f, y == 1 ? 1.0f : 0.0f};
    if (i < 160) {
      train_f.push_back(onehot);
      train_y.push_back(y);
    } else {
      test_f.push_back(onehot);
      test_y.push_back(y);
    }
  }
  ProbeConfig pc;
  pc.epochs = 30;
  const double acc = feature_probe(train_f, train_y, test_f, test_y, 2, pc);
  CHECK(acc >= 0.99);
}

TEST_CASE("accuracy and residual probe run on an untrained model") {
  ModelConfig cfg;
  cfg.seed = 23;
  ModelState state = ModelState::init(cfg);
  Dataset train = synth(64, 2, 23);
  Dataset test = synth(32, 2, 29);
  const double acc = accuracy_c(state, test);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  ProbeConfig pc;
  pc.epochs = 5;
  const double probe = residual_probe(state, train, test, pc);
  CHECK(probe >= 0.0);
  CHECK(probe <= 1.0);
  CHECK_THROWS_AS(accuracy_c(state, Dataset{}), ValueError);
}

TEST_CASE("mi_estimate shapes and bounds") {
  ModelConfig cfg;
  cfg.seed = 31;
  ModelState state = ModelState::init(cfg);
  Dataset data = synth(256, 2, 31);
  MIEstimate est = mi_estimate(state, data, 20);
  CHECK(est.mi_c.size() == 4);
  CHECK(est.mi_r.size() == 8);
  for (double v : est.mi_c) {
    CHECK(v >= 0.0);
    CHECK(v <= std::log(2.0) + 1e-9);
  }
  for (double v : est.mi_r) CHECK(v >= 0.0);
}

TEST_CASE("traversal grid layout and cell identity") {
  ModelConfig cfg;
  cfg.seed = 37;
  ModelState state = ModelState::init(cfg);
  Dataset data = synth(8, 2, 37);
  Tensor x = data.image(0);
  TraversalGrid grid = traversal_grid(state, x, 8);
  CHECK(grid.steps == 8);
  CHECK(grid.concept_dim == 4);
  CHECK(grid.values.front() == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(grid.values.back() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(grid.images.size() == 32);

  // Every cell equals an independent generation with the element substituted;
  // in particular a grid value equal to the sample's own c_l reproduces
  // generate(c, r) exactly.
  NoGradGuard ng;
  auto [caps, c] = state.encode_class_relevant(x);
  auto [post, r] = state.encode_residual(x, nullptr, true);
  for (int l = 0; l < 4; ++l)
    for (int s = 0; s < 8; ++s) {
      std::vector<float> cv(c.values());
      cv[static_cast<size_t>(l)] = grid.values[static_cast<size_t>(s)];
      Tensor expect = state.gen.forward(Tensor::from_vector({1, 4}, std::move(cv)), post.mu);
      CHECK(bitwise_equal(grid.image(l, s), expect));
    }
  CHECK_THROWS_AS(traversal_grid(state, x, 1), ValueError);
}

TEST_CASE("distinctness score extremes and symmetry") {
  auto image = [](std::vector<float> v) {
    return Tensor::from_vector({1, 1, 2, 2}, std::move(v));
  };
  // Two identical rows.
  TraversalGrid ident;
  ident.concept_dim = 2;
  ident.steps = 2;
  ident.values = {-1, 1};
  ident.images = {image({0, 0, 0, 0}), image({1, 0, 0, 0}),
                  image({0, 0, 0, 0}), image({1, 0, 0, 0})};
  CHECK(distinctness_score(ident) == doctest::Approx(1.0).epsilon(1e-12));

  // Orthogonal deltas.
  TraversalGrid ortho = ident;
  ortho.images = {image({0, 0, 0, 0}), image({1, 0, 0, 0}),
                  image({0, 0, 0, 0}), image({0, 1, 0, 0})};
  CHECK(distinctness_score(ortho) == doctest::Approx(0.0).epsilon(1e-12));

  // All-zero deltas count as overlapping.
  TraversalGrid degen = ident;
  degen.images = {image({0, 0, 0, 0}), image({0, 0, 0, 0}),
                  image({0, 0, 0, 0}), image({1, 0, 0, 0})};
  CHECK(distinctness_score(degen) == doctest::Approx(1.0).epsilon(1e-12));

  // Row permutation leaves the score unchanged.
  Rng rng(41);
  TraversalGrid random_grid;
  random_grid.concept_dim = 4;
  random_grid.steps = 5;
  random_grid.values = {-1, -0.5, 0, 0.5, 1};
  for (int i = 0; i < 20; ++i)
    random_grid.images.push_back(Tensor::uniform({1, 1, 3, 3}, rng, 0, 1));
  TraversalGrid permuted = random_grid;
  const std::vector<int> perm{2, 0, 3, 1};
  for (int l = 0; l < 4; ++l)
    for (int s = 0; s < 5; ++s)
      permuted.images[static_cast<size_t>(l) * 5 + s] =
          random_grid.images[static_cast<size_t>(perm[static_cast<size_t>(l)]) * 5 + s];
  CHECK(distinctness_score(permuted) ==
        doctest::Approx(distinctness_score(random_grid)).epsilon(1e-12));
}

TEST_CASE("swap grid shapes, rejection and involution") {
  ModelConfig cfg;
  cfg.seed = 43;
  ModelState state = ModelState::init(cfg);
  Dataset data = synth(8, 2, 43);
  Tensor x0 = data.image(0);  // label 0
  Tensor x1 = data.image(1);  // label 1
  SwapGrid grid = swap_grid(state, x0, 0, x1, 1);
  CHECK(grid.recon_ii.shape() == Shape{1, 1, 16, 16});
  CHECK(grid.swap_ij.shape() == Shape{1, 1, 16, 16});
  CHECK_THROWS_AS(swap_grid(state, x0, 0, x1, 0), ValueError);

  SwapGrid mirrored = swap_grid(state, x1, 1, x0, 0);
  CHECK(bitwise_equal(mirrored.swap_ij, grid.swap_ji));
  CHECK(bitwise_equal(mirrored.swap_ji, grid.swap_ij));
  CHECK(bitwise_equal(mirrored.recon_ii, grid.recon_jj));
}

TEST_CASE("explain_sample consistency") {
  ModelConfig cfg;
  cfg.seed = 47;
  ModelState state = ModelState::init(cfg);
  Dataset data = synth(8, 2, 47);
  Tensor x = data.image(3);
  ExplanationRecord rec = explain_sample(state, x);
  CHECK(rec.confidence >= 0.0f);
  CHECK(rec.confidence < 1.0f);
  CHECK(rec.concepts.size() == 4);

  NoGradGuard ng;
  auto [caps, c] = state.encode_class_relevant(x);
  for (int l = 0; l < 4; ++l) CHECK(rec.concepts[static_cast<size_t>(l)] == c.data()[l]);
  CHECK(rec.predicted_class == argmax_rows(caps.norms)[0]);

  std::vector<std::string> bad_names{"one", "two"};
  CHECK_THROWS_AS(explain_sample(state, x, &bad_names), ValueError);
  std::vector<std::string> names{"a", "b", "c", "d"};
  ExplanationRecord named = explain_sample(state, x, &names);
  CHECK(named.concept_names.size() == 4);
  CHECK(named.to_json().find("concept_names") != std::string::npos);
}

TEST_CASE("ppm writer and report emission") {
  ModelConfig cfg;
  cfg.seed = 53;
  ModelState state = ModelState::init(cfg);
  Dataset data = synth(8, 2, 53);
  TraversalGrid grid = traversal_grid(state, data.image(0), 4);

  const std::string dir = tmp_path("icaps_report_dir");
  std::filesystem::remove_all(dir);
  write_traversal_ppm(dir + ".ppm", grid);
  {
    std::ifstream is(dir + ".ppm", std::ios::binary);
    std::string header(2, '\0');
    is.read(header.data(), 2);
    CHECK(header == "P6");
  }
  std::filesystem::remove(dir + ".ppm");

  EvalReport report;
  report.accuracy = 0.5;
  report.probe_accuracy = 0.5;
  report.chance = 0.5;
  report.mi = mi_estimate(state, data, 4);
  report.distinctness = distinctness_score(grid);
  ExplanationRecord rec = explain_sample(state, data.image(0));
  rec.sample_id = 0;
  report.explanations.push_back(rec);
  emit_report(report, dir);
  CHECK(std::filesystem::exists(dir + "/mi.csv"));
  CHECK(std::filesystem::exists(dir + "/explanations.json"));
  CHECK(std::filesystem::exists(dir + "/summary.md"));
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(emit_report(report, "/proc/no_such_dir/x"), IoError);
}
