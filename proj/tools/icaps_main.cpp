#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "icaps/eval.hpp"
#include "icaps/log.hpp"
#include "icaps/trainer.hpp"

namespace {

using namespace icaps;

Dataset load_and_check(const std::string& path, int classes) {
  Dataset d = load_dataset(path);
  for (int y : d.labels)
    if (y >= classes)
      throw ValueError("dataset " + path + " has label " + std::to_string(y) +
                       " but the model is configured for " + std::to_string(classes) +
                       " classes");
  d.classes = classes;
  return d;
}

void write_factors_csv(const std::string& path, const FactorTable& table) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  for (size_t i = 0; i < table.names.size(); ++i) os << (i ? "," : "") << table.names[i];
  os << "\n";
  if (table.columns.empty()) return;
  const size_t n = table.columns[0].size();
  for (size_t row = 0; row < n; ++row) {
    for (size_t i = 0; i < table.columns.size(); ++i)
      os << (i ? "," : "") << table.columns[i][row];
    os << "\n";
  }
}

int run(int argc, char** argv) {
  CLI::App app{"iCaps: interpretable capsule classifier with class-supervised disentanglement"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model, writing checkpoints and a JSONL log");
  std::string train_config, train_data, train_out;
  train_cmd->add_option("--config", train_config, "JSON config file")->required();
  train_cmd->add_option("--data", train_data, "training dataset (.icds)")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "classification accuracy of the capsule head");
  std::string eval_ckpt, eval_data;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "test dataset (.icds)")->required();

  // probe-residual
  auto* probe_cmd = app.add_subcommand(
      "probe-residual", "train a fresh classifier on residual features; near-chance is good");
  std::string probe_ckpt, probe_data, probe_train_data;
  uint64_t probe_seed = 7;
  probe_cmd->add_option("--ckpt", probe_ckpt, "checkpoint file")->required();
  probe_cmd->add_option("--data", probe_data, "test dataset (.icds)")->required();
  probe_cmd->add_option("--train-data", probe_train_data,
                        "probe training dataset; defaults to an 80/20 split of --data");
  probe_cmd->add_option("--seed", probe_seed, "probe initialization seed");

  // mi-report
  auto* mi_cmd = app.add_subcommand("mi-report", "per-dimension mutual information with labels");
  std::string mi_ckpt, mi_data, mi_out = "mi.csv";
  int mi_bins = 20;
  mi_cmd->add_option("--ckpt", mi_ckpt, "checkpoint file")->required();
  mi_cmd->add_option("--data", mi_data, "dataset (.icds)")->required();
  mi_cmd->add_option("--bins", mi_bins, "histogram bins (equal frequency)");
  mi_cmd->add_option("--out", mi_out, "output CSV path");

  // traverse
  auto* trav_cmd = app.add_subcommand("traverse", "latent traversal grid for one sample");
  std::string trav_ckpt, trav_data, trav_out = "traversal.ppm";
  int trav_sample = 0, trav_steps = 8;
  trav_cmd->add_option("--ckpt", trav_ckpt, "checkpoint file")->required();
  trav_cmd->add_option("--data", trav_data, "dataset (.icds)")->required();
  trav_cmd->add_option("--sample-id", trav_sample, "sample index")->required();
  trav_cmd->add_option("--steps", trav_steps, "interpolation steps over [-1,1]");
  trav_cmd->add_option("--out", trav_out, "output PPM path");

  // swap
  auto* swap_cmd = app.add_subcommand("swap", "reconstructions plus class/residual swaps");
  std::string swap_ckpt, swap_data, swap_out = "swap.ppm";
  int swap_i = 0, swap_j = 1;
  swap_cmd->add_option("--ckpt", swap_ckpt, "checkpoint file")->required();
  swap_cmd->add_option("--data", swap_data, "dataset (.icds)")->required();
  swap_cmd->add_option("--i", swap_i, "first sample index")->required();
  swap_cmd->add_option("--j", swap_j, "second sample index (different class)")->required();
  swap_cmd->add_option("--out", swap_out, "output PPM path");

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "concept-level explanation for one sample");
  std::string explain_ckpt, explain_data, explain_names, explain_out;
  int explain_sample_id = 0;
  explain_cmd->add_option("--ckpt", explain_ckpt, "checkpoint file")->required();
  explain_cmd->add_option("--data", explain_data, "dataset (.icds)")->required();
  explain_cmd->add_option("--sample-id", explain_sample_id, "sample index")->required();
  explain_cmd->add_option("--names", explain_names, "JSON array of concept names");
  explain_cmd->add_option("--out", explain_out, "write the record here as well");

  // make-synth
  auto* synth_cmd = app.add_subcommand("make-synth", "generate the synthetic factor dataset");
  std::string synth_spec, synth_out, synth_factors;
  int synth_n = 2000;
  uint64_t synth_seed = 0;
  bool synth_seed_set = false;
  synth_cmd->add_option("--spec", synth_spec, "JSON spec file (defaults apply when omitted)");
  synth_cmd->add_option("--n", synth_n, "sample count")->required();
  synth_cmd->add_option("--out", synth_out, "output dataset (.icds)")->required();
  synth_cmd->add_option("--factors", synth_factors, "also write ground-truth factors CSV");
  synth_cmd->add_option("--seed", synth_seed, "override the spec seed")
      ->each([&](const std::string&) { synth_seed_set = true; });

  // convert
  auto* conv_cmd = app.add_subcommand("convert", "convert IDX digit images to ICDS");
  std::string conv_in, conv_labels, conv_out;
  int conv_size = 16;
  conv_cmd->add_option("--in", conv_in, "IDX image file")->required();
  conv_cmd->add_option("--labels", conv_labels, "IDX label file")->required();
  conv_cmd->add_option("--out", conv_out, "output dataset (.icds)")->required();
  conv_cmd->add_option("--size", conv_size, "target square size (0 keeps source size)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  if (*train_cmd) {
    FullConfig cfg = parse_config(train_config);
    std::cout << "resolved config:\n" << config_to_json(cfg) << "\n";
    Dataset data = load_and_check(train_data, cfg.model.classes);
    TrainOptions options;
    options.out_dir = train_out;
    int last_epoch = 0;
    options.on_step = [&](const LossRecord& r) {
      if (r.epoch != last_epoch) {
        last_epoch = r.epoch;
        std::cout << "epoch " << r.epoch << " margin " << r.margin << " recon " << r.recon
                  << " cg " << r.cg << " dg " << r.dg << "\n";
      }
    };
    TrainOutput out = train_model(data, cfg, options);
    std::cout << "final checkpoint: " << out.final_checkpoint << "\n";
    return 0;
  }
  if (*eval_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(eval_ckpt);
    Dataset data = load_and_check(eval_data, ckpt.state.cfg.classes);
    const double acc = accuracy_c(ckpt.state, data);
    std::printf("accuracy %.17g\n", acc);
    return 0;
  }
  if (*probe_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(probe_ckpt);
    Dataset test = load_and_check(probe_data, ckpt.state.cfg.classes);
    Dataset train;
    if (!probe_train_data.empty()) {
      train = load_and_check(probe_train_data, ckpt.state.cfg.classes);
    } else {
      // Deterministic 80/20 split by index.
      const int n = test.size();
      const int cut = n * 4 / 5;
      Dataset head;
      head.images = slice(test.images, 0, 0, cut).detach();
      head.labels.assign(test.labels.begin(), test.labels.begin() + cut);
      head.classes = test.classes;
      Dataset tail;
      tail.images = slice(test.images, 0, cut, n - cut).detach();
      tail.labels.assign(test.labels.begin() + cut, test.labels.end());
      tail.classes = test.classes;
      train = std::move(head);
      test = std::move(tail);
    }
    ProbeConfig pc;
    pc.seed = probe_seed;
    const double acc = residual_probe(ckpt.state, train, test, pc);
    std::printf("probe_accuracy %.17g\n", acc);
    std::printf("chance %.17g\n", 1.0 / ckpt.state.cfg.classes);
    return 0;
  }
  if (*mi_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(mi_ckpt);
    Dataset data = load_and_check(mi_data, ckpt.state.cfg.classes);
    MIEstimate est = mi_estimate(ckpt.state, data, mi_bins);
    std::ofstream csv(mi_out);
    if (!csv) throw IoError("cannot write " + mi_out);
    csv << "kind,dimension,mi_nats\n";
    for (size_t i = 0; i < est.mi_c.size(); ++i) csv << "c," << i << "," << est.mi_c[i] << "\n";
    for (size_t i = 0; i < est.mi_r.size(); ++i) csv << "r," << i << "," << est.mi_r[i] << "\n";
    std::printf("mean_mi_c %.17g\n", est.mean_c());
    std::printf("mean_mi_r %.17g\n", est.mean_r());
    std::cout << "wrote " << mi_out << "\n";
    return 0;
  }
  if (*trav_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(trav_ckpt);
    Dataset data = load_and_check(trav_data, ckpt.state.cfg.classes);
    TraversalGrid grid = traversal_grid(ckpt.state, data.image(trav_sample), trav_steps);
    write_traversal_ppm(trav_out, grid);
    std::printf("distinctness %.17g\n", distinctness_score(grid));
    std::cout << "wrote " << trav_out << "\n";
    return 0;
  }
  if (*swap_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(swap_ckpt);
    Dataset data = load_and_check(swap_data, ckpt.state.cfg.classes);
    SwapGrid grid = swap_grid(ckpt.state, data.image(swap_i), data.labels[swap_i],
                              data.image(swap_j), data.labels[swap_j]);
    write_swap_ppm(swap_out, grid);
    std::cout << "wrote " << swap_out << "\n";
    return 0;
  }
  if (*explain_cmd) {
    LoadedCheckpoint ckpt = load_checkpoint(explain_ckpt);
    Dataset data = load_and_check(explain_data, ckpt.state.cfg.classes);
    std::vector<std::string> names;
    const std::vector<std::string>* names_ptr = nullptr;
    if (!explain_names.empty()) {
      std::ifstream is(explain_names);
      if (!is) throw IoError("cannot open " + explain_names);
      try {
        nlohmann::json j;
        is >> j;
        names = j.get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("names file: ") + e.what());
      }
      names_ptr = &names;
    }
    ExplanationRecord rec = explain_sample(ckpt.state, data.image(explain_sample_id), names_ptr);
    rec.sample_id = explain_sample_id;
    std::cout << rec.to_json() << "\n";
    if (!explain_out.empty()) {
      std::ofstream os(explain_out);
      if (!os) throw IoError("cannot write " + explain_out);
      os << rec.to_json() << "\n";
    }
    return 0;
  }
  if (*synth_cmd) {
    SyntheticSpec spec;
    if (!synth_spec.empty()) spec = load_synthetic_spec(synth_spec);
    if (synth_seed_set) spec.seed = synth_seed;
    auto [data, factors] = generate_synthetic(spec, synth_n);
    save_dataset(data, synth_out);
    if (!synth_factors.empty()) write_factors_csv(synth_factors, factors);
    std::cout << "wrote " << synth_out << " (" << data.size() << " samples, " << data.classes
              << " classes)\n";
    return 0;
  }
  if (*conv_cmd) {
    Dataset d = convert_idx(conv_in, conv_labels, conv_size);
    save_dataset(d, conv_out);
    std::cout << "wrote " << conv_out << " (" << d.size() << " samples, " << d.classes
              << " classes)\n";
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const icaps::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const icaps::ValueError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const icaps::ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
