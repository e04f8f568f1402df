#include "icaps/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace icaps {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'I', 'C', 'D', 'S'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw IoError(std::string("dataset file truncated while reading ") + what);
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

float quantize_u8(float v) {
  const float clamped = std::min(1.0f, std::max(0.0f, v));
  return std::round(clamped * 255.0f) / 255.0f;
}

}  // namespace

Tensor Dataset::image(int i) const {
  if (i < 0 || i >= size())
    throw ValueError("dataset: sample index " + std::to_string(i) + " out of range [0," +
                     std::to_string(size()) + ")");
  Tensor one = slice(images, 0, i, 1);
  return one;
}

void Dataset::validate() const {
  if (size() == 0) throw ValueError("dataset: empty");
  if (static_cast<int>(labels.size()) != size())
    throw ValueError("dataset: label count does not match image count");
  std::vector<int> counts(static_cast<size_t>(classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= classes)
      throw ValueError("dataset: label " + std::to_string(y) + " out of range for " +
                       std::to_string(classes) + " classes");
    ++counts[static_cast<size_t>(y)];
  }
  for (int c = 0; c < classes; ++c)
    if (counts[static_cast<size_t>(c)] < 2)
      throw ValueError("dataset: class " + std::to_string(c) + " has fewer than 2 samples");
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_le<uint32_t>(os, kVersion);
  const uint32_t n = static_cast<uint32_t>(d.size());
  write_le<uint32_t>(os, n);
  write_le<uint32_t>(os, static_cast<uint32_t>(d.images.dim(1)));
  write_le<uint32_t>(os, static_cast<uint32_t>(d.images.dim(2)));
  write_le<uint32_t>(os, static_cast<uint32_t>(d.images.dim(3)));
  const float* p = d.images.data();
  std::vector<unsigned char> pixels(static_cast<size_t>(d.images.numel()));
  for (size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, p[i]));
    pixels[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  for (int y : d.labels) write_le<uint16_t>(os, static_cast<uint16_t>(y));
  if (!os) throw IoError("write failure on " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad magic in " + path + ": not an ICDS dataset");
  const uint32_t version = read_le<uint32_t>(is, "version");
  if (version != kVersion)
    throw IoError("unsupported ICDS version " + std::to_string(version));
  const uint32_t n = read_le<uint32_t>(is, "count");
  const uint32_t c = read_le<uint32_t>(is, "channels");
  const uint32_t h = read_le<uint32_t>(is, "height");
  const uint32_t w = read_le<uint32_t>(is, "width");
  const size_t pixel_count = static_cast<size_t>(n) * c * h * w;
  std::vector<unsigned char> pixels(pixel_count);
  is.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixel_count));
  if (!is) throw IoError("dataset file truncated in pixel block: " + path);
  std::vector<float> values(pixel_count);
  for (size_t i = 0; i < pixel_count; ++i) values[i] = static_cast<float>(pixels[i]) / 255.0f;
  Dataset d;
  d.images = Tensor::from_vector(
      {static_cast<int>(n), static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)},
      std::move(values));
  d.labels.resize(n);
  int max_label = 0;
  for (uint32_t i = 0; i < n; ++i) {
    d.labels[i] = read_le<uint16_t>(is, "labels");
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = max_label + 1;
  return d;
}

// --- synthetic factor dataset ---

void SyntheticSpec::validate() const {
  if (image_size < 8) throw ValueError("synthetic spec: image_size must be >= 8");
  if (image_size % 4 != 0) throw ValueError("synthetic spec: image_size must be divisible by 4");
  if (classes < 2 || classes > 4)
    throw ValueError("synthetic spec: classes must be in [2,4] (available motifs)");
  if (max_offset < 0 || max_offset > image_size / 4)
    throw ValueError("synthetic spec: max_offset out of range");
  if (min_thickness < 1 || max_thickness < min_thickness)
    throw ValueError("synthetic spec: invalid thickness range");
}

namespace {

struct Vec2 {
  float x, y;
};

float dist_to_segment(Vec2 p, Vec2 center, float angle, float half_len) {
  const Vec2 dir{std::cos(angle), std::sin(angle)};
  const Vec2 rel{p.x - center.x, p.y - center.y};
  float along = rel.x * dir.x + rel.y * dir.y;
  along = std::min(half_len, std::max(-half_len, along));
  const Vec2 closest{center.x + along * dir.x, center.y + along * dir.y};
  const float dx = p.x - closest.x, dy = p.y - closest.y;
  return std::sqrt(dx * dx + dy * dy);
}

// Distance field per motif; pixel intensity = coverage of a stroke of the
// given thickness around the zero set.
float motif_distance(int shape, Vec2 p, Vec2 center, float angle, float scale) {
  switch (shape) {
    case 0: {  // circle
      const float dx = p.x - center.x, dy = p.y - center.y;
      return std::fabs(std::sqrt(dx * dx + dy * dy) - 0.28f * scale);
    }
    case 1:  // line
      return dist_to_segment(p, center, angle, 0.34f * scale);
    case 2: {  // cross
      const float d1 = dist_to_segment(p, center, angle, 0.30f * scale);
      const float d2 = dist_to_segment(p, center, angle + 1.5707963f, 0.30f * scale);
      return std::min(d1, d2);
    }
    default: {  // two dots
      const float off = 0.22f * scale;
      const Vec2 c1{center.x + off * std::cos(angle), center.y + off * std::sin(angle)};
      const Vec2 c2{center.x - off * std::cos(angle), center.y - off * std::sin(angle)};
      const float dx1 = p.x - c1.x, dy1 = p.y - c1.y;
      const float dx2 = p.x - c2.x, dy2 = p.y - c2.y;
      const float d = std::min(std::sqrt(dx1 * dx1 + dy1 * dy1), std::sqrt(dx2 * dx2 + dy2 * dy2));
      return std::fabs(d - 0.06f * scale);
    }
  }
}

}  // namespace

std::pair<Dataset, FactorTable> generate_synthetic(const SyntheticSpec& spec, int n) {
  spec.validate();
  if (n < 2 * spec.classes)
    throw ValueError("generate_synthetic: need at least " + std::to_string(2 * spec.classes) +
                     " samples");
  Rng rng(spec.seed);
  const int hw = spec.image_size;
  const float scale = static_cast<float>(hw);
  std::vector<float> images(static_cast<size_t>(n) * hw * hw, 0.0f);
  std::vector<int> labels(static_cast<size_t>(n));

  FactorTable table;
  table.names = {"shape", "dx", "dy", "rotation", "thickness"};
  table.columns.assign(table.names.size(), {});
  for (auto& col : table.columns) col.reserve(static_cast<size_t>(n));

  for (int i = 0; i < n; ++i) {
    // Round-robin labels keep classes exactly balanced.
    const int label = i % spec.classes;
    labels[static_cast<size_t>(i)] = label;
    const float dx = rng.uniform(-static_cast<float>(spec.max_offset),
                                 static_cast<float>(spec.max_offset));
    const float dy = rng.uniform(-static_cast<float>(spec.max_offset),
                                 static_cast<float>(spec.max_offset));
    const float rotation = rng.uniform(0.0f, 3.14159265f);
    const float thickness =
        rng.uniform(static_cast<float>(spec.min_thickness), static_cast<float>(spec.max_thickness));
    table.columns[0].push_back(static_cast<float>(label));
    table.columns[1].push_back(dx);
    table.columns[2].push_back(dy);
    table.columns[3].push_back(rotation);
    table.columns[4].push_back(thickness);

    const Vec2 center{hw * 0.5f + dx, hw * 0.5f + dy};
    float* img = images.data() + static_cast<size_t>(i) * hw * hw;
    for (int py = 0; py < hw; ++py)
      for (int px = 0; px < hw; ++px) {
        const Vec2 p{px + 0.5f, py + 0.5f};
        const float d = motif_distance(label, p, center, rotation, scale);
        const float v = std::min(1.0f, std::max(0.0f, thickness * 0.5f + 0.5f - d));
        img[py * hw + px] = quantize_u8(v);
      }
  }

  Dataset d;
  d.images = Tensor::from_vector({n, 1, hw, hw}, std::move(images));
  d.labels = std::move(labels);
  d.classes = spec.classes;
  return {std::move(d), std::move(table)};
}

// --- config ---

namespace {

void check_keys(const json& obj, const std::string& prefix, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key))
      throw ValueError("config: unknown key '" + (prefix.empty() ? key : prefix + "." + key) + "'");
  }
}

template <typename T>
void take(const json& obj, const std::string& prefix, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValueError("config: key '" + (prefix.empty() ? key : prefix + "." + key) +
                     "' has the wrong type");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ValueError("config: train.epochs must be positive");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw ValueError("config: train.batch_size must be a positive even number");
  if (!(lr > 0.0f)) throw ValueError("config: train.lr must be positive");
  if (critic_steps < 1) throw ValueError("config: train.critic_steps must be >= 1");
  if (checkpoint_interval < 1) throw ValueError("config: train.checkpoint_interval must be >= 1");
}

namespace {

ModelConfig model_from_json(const json& m) {
  ModelConfig cfg;
  check_keys(m, "model",
             {"image_h", "image_w", "image_channels", "classes", "concept_dim", "residual_dim",
              "cc_conv1_channels", "pc_capsule_types", "pc_capsule_dim", "routing_iterations",
              "enc_conv1_channels", "enc_conv2_channels", "gen_fc_channels", "gen_conv1_channels",
              "critic_conv1_channels", "critic_conv2_channels", "critic_fc", "cr_conv1_channels",
              "cr_conv2_channels", "cr_fc", "seed"});
  take(m, "model", "image_h", cfg.image_h);
  take(m, "model", "image_w", cfg.image_w);
  take(m, "model", "image_channels", cfg.image_c);
  take(m, "model", "classes", cfg.classes);
  take(m, "model", "concept_dim", cfg.concept_dim);
  take(m, "model", "residual_dim", cfg.residual_dim);
  take(m, "model", "cc_conv1_channels", cfg.cc_conv1_channels);
  take(m, "model", "pc_capsule_types", cfg.pc_capsule_types);
  take(m, "model", "pc_capsule_dim", cfg.pc_capsule_dim);
  take(m, "model", "routing_iterations", cfg.routing_iterations);
  take(m, "model", "enc_conv1_channels", cfg.enc_conv1_channels);
  take(m, "model", "enc_conv2_channels", cfg.enc_conv2_channels);
  take(m, "model", "gen_fc_channels", cfg.gen_fc_channels);
  take(m, "model", "gen_conv1_channels", cfg.gen_conv1_channels);
  take(m, "model", "critic_conv1_channels", cfg.critic_conv1_channels);
  take(m, "model", "critic_conv2_channels", cfg.critic_conv2_channels);
  take(m, "model", "critic_fc", cfg.critic_fc);
  take(m, "model", "cr_conv1_channels", cfg.cr_conv1_channels);
  take(m, "model", "cr_conv2_channels", cfg.cr_conv2_channels);
  take(m, "model", "cr_fc", cfg.cr_fc);
  take(m, "model", "seed", cfg.seed);
  return cfg;
}

json model_to_json(const ModelConfig& cfg) {
  return json{{"image_h", cfg.image_h},
              {"image_w", cfg.image_w},
              {"image_channels", cfg.image_c},
              {"classes", cfg.classes},
              {"concept_dim", cfg.concept_dim},
              {"residual_dim", cfg.residual_dim},
              {"cc_conv1_channels", cfg.cc_conv1_channels},
              {"pc_capsule_types", cfg.pc_capsule_types},
              {"pc_capsule_dim", cfg.pc_capsule_dim},
              {"routing_iterations", cfg.routing_iterations},
              {"enc_conv1_channels", cfg.enc_conv1_channels},
              {"enc_conv2_channels", cfg.enc_conv2_channels},
              {"gen_fc_channels", cfg.gen_fc_channels},
              {"gen_conv1_channels", cfg.gen_conv1_channels},
              {"critic_conv1_channels", cfg.critic_conv1_channels},
              {"critic_conv2_channels", cfg.critic_conv2_channels},
              {"critic_fc", cfg.critic_fc},
              {"cr_conv1_channels", cfg.cr_conv1_channels},
              {"cr_conv2_channels", cfg.cr_conv2_channels},
              {"cr_fc", cfg.cr_fc},
              {"seed", cfg.seed}};
}

}  // namespace

FullConfig parse_config_text(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValueError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(root, "", {"model", "train", "loss_weights"});
  FullConfig cfg;
  if (root.contains("model")) cfg.model = model_from_json(root.at("model"));
  if (root.contains("train")) {
    const json& t = root.at("train");
    check_keys(t, "train",
               {"epochs", "batch_size", "lr", "beta1", "beta2", "beta1_adv", "beta2_adv",
                "adam_eps", "critic_steps", "checkpoint_interval", "seed"});
    take(t, "train", "epochs", cfg.train.epochs);
    take(t, "train", "batch_size", cfg.train.batch_size);
    take(t, "train", "lr", cfg.train.lr);
    take(t, "train", "beta1", cfg.train.beta1);
    take(t, "train", "beta2", cfg.train.beta2);
    take(t, "train", "beta1_adv", cfg.train.beta1_adv);
    take(t, "train", "beta2_adv", cfg.train.beta2_adv);
    take(t, "train", "adam_eps", cfg.train.adam_eps);
    take(t, "train", "critic_steps", cfg.train.critic_steps);
    take(t, "train", "checkpoint_interval", cfg.train.checkpoint_interval);
    take(t, "train", "seed", cfg.train.seed);
  }
  if (root.contains("loss_weights")) {
    const json& w = root.at("loss_weights");
    check_keys(w, "loss_weights",
               {"margin", "recon", "cg", "cs", "rs", "concept", "cr", "g", "dg", "lgp", "kl"});
    take(w, "loss_weights", "margin", cfg.weights.margin);
    take(w, "loss_weights", "recon", cfg.weights.recon);
    take(w, "loss_weights", "cg", cfg.weights.cg);
    take(w, "loss_weights", "cs", cfg.weights.cs);
    take(w, "loss_weights", "rs", cfg.weights.rs);
    take(w, "loss_weights", "concept", cfg.weights.concept_w);
    take(w, "loss_weights", "cr", cfg.weights.cr);
    take(w, "loss_weights", "g", cfg.weights.g);
    take(w, "loss_weights", "dg", cfg.weights.dg);
    take(w, "loss_weights", "lgp", cfg.weights.lgp);
    take(w, "loss_weights", "kl", cfg.weights.kl);
  }
  cfg.model.validate();
  cfg.train.validate();
  cfg.weights.validate();
  return cfg;
}

FullConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

std::string config_to_json(const FullConfig& cfg) {
  json root;
  root["model"] = model_to_json(cfg.model);
  root["train"] = json{{"epochs", cfg.train.epochs},
                       {"batch_size", cfg.train.batch_size},
                       {"lr", cfg.train.lr},
                       {"beta1", cfg.train.beta1},
                       {"beta2", cfg.train.beta2},
                       {"beta1_adv", cfg.train.beta1_adv},
                       {"beta2_adv", cfg.train.beta2_adv},
                       {"adam_eps", cfg.train.adam_eps},
                       {"critic_steps", cfg.train.critic_steps},
                       {"checkpoint_interval", cfg.train.checkpoint_interval},
                       {"seed", cfg.train.seed}};
  root["loss_weights"] = json{{"margin", cfg.weights.margin},
                              {"recon", cfg.weights.recon},
                              {"cg", cfg.weights.cg},
                              {"cs", cfg.weights.cs},
                              {"rs", cfg.weights.rs},
                              {"concept", cfg.weights.concept_w},
                              {"cr", cfg.weights.cr},
                              {"g", cfg.weights.g},
                              {"dg", cfg.weights.dg},
                              {"lgp", cfg.weights.lgp},
                              {"kl", cfg.weights.kl}};
  return root.dump(2);
}

std::string model_config_to_json(const ModelConfig& cfg) { return model_to_json(cfg).dump(); }

ModelConfig parse_model_config_text(const std::string& json_text) {
  json m;
  try {
    m = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValueError(std::string("model config: invalid JSON: ") + e.what());
  }
  return model_from_json(m);
}

SyntheticSpec parse_synthetic_spec(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValueError(std::string("synthetic spec: invalid JSON: ") + e.what());
  }
  check_keys(root, "",
             {"image_size", "classes", "seed", "max_offset", "min_thickness", "max_thickness"});
  SyntheticSpec spec;
  take(root, "", "image_size", spec.image_size);
  take(root, "", "classes", spec.classes);
  take(root, "", "seed", spec.seed);
  take(root, "", "max_offset", spec.max_offset);
  take(root, "", "min_thickness", spec.min_thickness);
  take(root, "", "max_thickness", spec.max_thickness);
  spec.validate();
  return spec;
}

SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open spec " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_synthetic_spec(text);
}

// --- IDX conversion ---

namespace {

uint32_t read_be32(std::istream& is, const char* what) {
  unsigned char buf[4];
  is.read(reinterpret_cast<char*>(buf), 4);
  if (!is) throw IoError(std::string("IDX file truncated while reading ") + what);
  return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
         (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

}  // namespace

Dataset convert_idx(const std::string& images_path, const std::string& labels_path,
                    int target_size) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("cannot open " + images_path);
  if (read_be32(imgs, "magic") != 2051u)
    throw IoError(images_path + " is not an IDX image file");
  const uint32_t n = read_be32(imgs, "count");
  const uint32_t rows = read_be32(imgs, "rows");
  const uint32_t cols = read_be32(imgs, "cols");

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw IoError("cannot open " + labels_path);
  if (read_be32(labs, "magic") != 2049u)
    throw IoError(labels_path + " is not an IDX label file");
  const uint32_t ln = read_be32(labs, "count");
  if (ln != n) throw ValueError("IDX image/label counts differ");

  const int out_hw = target_size > 0 ? target_size : static_cast<int>(rows);
  std::vector<float> out(static_cast<size_t>(n) * out_hw * out_hw);
  std::vector<unsigned char> src(static_cast<size_t>(rows) * cols);
  Dataset d;
  d.labels.resize(n);
  int max_label = 0;
  for (uint32_t i = 0; i < n; ++i) {
    imgs.read(reinterpret_cast<char*>(src.data()), static_cast<std::streamsize>(src.size()));
    if (!imgs) throw IoError("IDX image file truncated");
    float* dst = out.data() + static_cast<size_t>(i) * out_hw * out_hw;
    // Box filter over the covered source region.
    for (int oy = 0; oy < out_hw; ++oy) {
      const int y0 = oy * static_cast<int>(rows) / out_hw;
      const int y1 = std::max(y0 + 1, (oy + 1) * static_cast<int>(rows) / out_hw);
      for (int ox = 0; ox < out_hw; ++ox) {
        const int x0 = ox * static_cast<int>(cols) / out_hw;
        const int x1 = std::max(x0 + 1, (ox + 1) * static_cast<int>(cols) / out_hw);
        double acc = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) acc += src[static_cast<size_t>(y) * cols + x];
        dst[oy * out_hw + ox] =
            quantize_u8(static_cast<float>(acc / (255.0 * (y1 - y0) * (x1 - x0))));
      }
    }
    unsigned char lab;
    labs.read(reinterpret_cast<char*>(&lab), 1);
    if (!labs) throw IoError("IDX label file truncated");
    d.labels[i] = lab;
    max_label = std::max(max_label, static_cast<int>(lab));
  }
  d.images = Tensor::from_vector({static_cast<int>(n), 1, out_hw, out_hw}, std::move(out));
  d.classes = max_label + 1;
  return d;
}

}  // namespace icaps
