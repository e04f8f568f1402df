#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "icaps/eval.hpp"
#include "icaps/trainer.hpp"

namespace py = pybind11;
using namespace icaps;

namespace {

Tensor tensor_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
  Shape shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(static_cast<int>(arr.shape(i)));
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor::from_vector(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  for (int d : t.shape()) shape.push_back(d);
  py::array_t<float> arr(shape);
  std::memcpy(arr.mutable_data(), t.data(), static_cast<size_t>(t.numel()) * sizeof(float));
  return arr;
}

Dataset dataset_from_arrays(py::array images, py::array labels, int classes) {
  Tensor imgs = tensor_from_array(images.cast<py::array_t<float>>());
  if (imgs.rank() != 4) throw ShapeError("images must have shape [n, c, h, w]");
  auto labs = labels.cast<py::array_t<int64_t>>();
  Dataset d;
  d.images = imgs;
  d.labels.reserve(static_cast<size_t>(labs.size()));
  int max_label = 0;
  for (py::ssize_t i = 0; i < labs.size(); ++i) {
    d.labels.push_back(static_cast<int>(labs.data()[i]));
    max_label = std::max(max_label, d.labels.back());
  }
  d.classes = classes > 0 ? classes : max_label + 1;
  return d;
}

// Thin handle pairing a model with its configuration for the Python side.
struct PyModel {
  ModelState state;

  static PyModel from_config(const std::string& config_json) {
    FullConfig cfg = parse_config_text(config_json);
    return PyModel{ModelState::init(cfg.model)};
  }

  py::tuple predict(py::array images) const {
    Tensor x = tensor_from_array(images.cast<py::array_t<float>>());
    NoGradGuard ng;
    ClassCapsuleOutput out = state.cc.forward(x);
    std::vector<int> pred = argmax_rows(out.norms);
    py::array_t<int64_t> labels(static_cast<py::ssize_t>(pred.size()));
    std::vector<float> conf(pred.size());
    for (size_t i = 0; i < pred.size(); ++i)
      conf[i] = out.norms.at({static_cast<int>(i), pred[i]});
    for (size_t i = 0; i < pred.size(); ++i) labels.mutable_data()[i] = pred[i];
    py::array_t<float> confidence(static_cast<py::ssize_t>(conf.size()));
    std::memcpy(confidence.mutable_data(), conf.data(), conf.size() * sizeof(float));
    return py::make_tuple(labels, confidence);
  }

  py::array encode_concepts(py::array images) const {
    Tensor x = tensor_from_array(images.cast<py::array_t<float>>());
    NoGradGuard ng;
    auto [caps, c] = state.encode_class_relevant(x);
    return array_from_tensor(c);
  }

  py::array encode_residual(py::array images) const {
    Tensor x = tensor_from_array(images.cast<py::array_t<float>>());
    NoGradGuard ng;
    auto [post, r] = state.encode_residual(x, nullptr, /*deterministic=*/true);
    return array_from_tensor(r);
  }

  py::array generate(py::array c, py::array r) const {
    NoGradGuard ng;
    Tensor ct = tensor_from_array(c.cast<py::array_t<float>>());
    Tensor rt = tensor_from_array(r.cast<py::array_t<float>>());
    return array_from_tensor(state.gen.forward(ct, rt));
  }

  double accuracy(py::array images, py::array labels) const {
    Dataset d = dataset_from_arrays(images, labels, state.cfg.classes);
    return accuracy_c(state, d);
  }

  double residual_probe_accuracy(py::array train_images, py::array train_labels,
                                 py::array test_images, py::array test_labels,
                                 uint64_t seed) const {
    Dataset train = dataset_from_arrays(train_images, train_labels, state.cfg.classes);
    Dataset test = dataset_from_arrays(test_images, test_labels, state.cfg.classes);
    ProbeConfig pc;
    pc.seed = seed;
    return residual_probe(state, train, test, pc);
  }

  py::dict mi_report(py::array images, py::array labels, int bins) const {
    Dataset d = dataset_from_arrays(images, labels, state.cfg.classes);
    MIEstimate est = mi_estimate(state, d, bins);
    py::dict out;
    out["mi_c"] = est.mi_c;
    out["mi_r"] = est.mi_r;
    out["mean_c"] = est.mean_c();
    out["mean_r"] = est.mean_r();
    return out;
  }

  py::tuple traversal(py::array image, int steps) const {
    Tensor x = tensor_from_array(image.cast<py::array_t<float>>());
    TraversalGrid grid = traversal_grid(state, x, steps);
    const int c = grid.images[0].dim(1), h = grid.images[0].dim(2), w = grid.images[0].dim(3);
    py::array_t<float> arr({grid.concept_dim, grid.steps, c, h, w});
    float* dst = arr.mutable_data();
    const int64_t px = static_cast<int64_t>(c) * h * w;
    for (size_t i = 0; i < grid.images.size(); ++i)
      std::memcpy(dst + static_cast<int64_t>(i) * px, grid.images[i].data(),
                  static_cast<size_t>(px) * sizeof(float));
    return py::make_tuple(arr, distinctness_score(grid));
  }

  py::dict explain(py::array image, std::optional<std::vector<std::string>> names) const {
    Tensor x = tensor_from_array(image.cast<py::array_t<float>>());
    ExplanationRecord rec = explain_sample(state, x, names ? &*names : nullptr);
    py::dict out;
    out["predicted_class"] = rec.predicted_class;
    out["confidence"] = rec.confidence;
    out["concepts"] = rec.concepts;
    if (!rec.concept_names.empty()) out["concept_names"] = rec.concept_names;
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(state, nullptr, path); }

  static PyModel load(const std::string& path) {
    return PyModel{load_checkpoint(path).state};
  }

  std::string config_json() const { return model_config_to_json(state.cfg); }
};

PyModel train_py(const std::string& config_json, py::array images, py::array labels,
                 const std::string& out_dir, py::object on_step) {
  FullConfig cfg = parse_config_text(config_json);
  Dataset data = dataset_from_arrays(images, labels, cfg.model.classes);
  TrainOptions options;
  options.out_dir = out_dir;
  if (!on_step.is_none()) {
    options.on_step = [on_step](const LossRecord& r) {
      py::dict d;
      d["step"] = r.step;
      d["epoch"] = r.epoch;
      d["margin"] = r.margin;
      d["recon"] = r.recon;
      d["concept"] = r.concept_v;
      d["cg"] = r.cg;
      d["cs"] = r.cs;
      d["rs"] = r.rs;
      d["cr"] = r.cr;
      d["kl"] = r.kl;
      d["g"] = r.g;
      d["dg"] = r.dg;
      d["lgp"] = r.lgp;
      on_step(d);
    };
  }
  TrainOutput out = train_model(data, cfg, options);
  return PyModel{out.state};
}

py::tuple make_synthetic_py(int n, int image_size, int classes, uint64_t seed, int max_offset,
                            int min_thickness, int max_thickness) {
  SyntheticSpec spec;
  spec.image_size = image_size;
  spec.classes = classes;
  spec.seed = seed;
  spec.max_offset = max_offset;
  spec.min_thickness = min_thickness;
  spec.max_thickness = max_thickness;
  auto [data, factors] = generate_synthetic(spec, n);
  py::array_t<int64_t> labels(static_cast<py::ssize_t>(data.labels.size()));
  for (size_t i = 0; i < data.labels.size(); ++i) labels.mutable_data()[i] = data.labels[i];
  py::dict factor_dict;
  for (size_t i = 0; i < factors.names.size(); ++i) {
    py::array_t<float> col(static_cast<py::ssize_t>(factors.columns[i].size()));
    std::memcpy(col.mutable_data(), factors.columns[i].data(),
                factors.columns[i].size() * sizeof(float));
    factor_dict[factors.names[i].c_str()] = col;
  }
  return py::make_tuple(array_from_tensor(data.images), labels, factor_dict);
}

}  // namespace

PYBIND11_MODULE(_icaps, m) {
  m.doc() = "Interpretable capsule classifier with class-supervised disentanglement";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  m.def("make_synthetic", &make_synthetic_py, py::arg("n"), py::arg("image_size") = 16,
        py::arg("classes") = 2, py::arg("seed") = 1, py::arg("max_offset") = 2,
        py::arg("min_thickness") = 1, py::arg("max_thickness") = 2,
        "Generate the synthetic factor dataset: (images, labels, factors)");

  m.def(
      "save_dataset",
      [](const std::string& path, py::array images, py::array labels) {
        save_dataset(dataset_from_arrays(images, labels, 0), path);
      },
      py::arg("path"), py::arg("images"), py::arg("labels"));

  m.def(
      "load_dataset",
      [](const std::string& path) {
        Dataset d = load_dataset(path);
        py::array_t<int64_t> labels(static_cast<py::ssize_t>(d.labels.size()));
        for (size_t i = 0; i < d.labels.size(); ++i) labels.mutable_data()[i] = d.labels[i];
        return py::make_tuple(array_from_tensor(d.images), labels);
      },
      py::arg("path"));

  m.def(
      "mutual_information",
      [](const std::vector<float>& values, const std::vector<int>& labels, int bins) {
        return mutual_information(values, labels, bins);
      },
      py::arg("values"), py::arg("labels"), py::arg("bins") = 20);

  m.def("default_config",
        [] { return config_to_json(FullConfig{}); });

  m.def("train", &train_py, py::arg("config_json"), py::arg("images"), py::arg("labels"),
        py::arg("out_dir") = std::string(), py::arg("on_step") = py::none(),
        "Train a model and return it");

  py::class_<PyModel>(m, "Model")
      .def_static("from_config", &PyModel::from_config, py::arg("config_json"))
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def("predict", &PyModel::predict, py::arg("images"))
      .def("encode_concepts", &PyModel::encode_concepts, py::arg("images"))
      .def("encode_residual", &PyModel::encode_residual, py::arg("images"))
      .def("generate", &PyModel::generate, py::arg("c"), py::arg("r"))
      .def("accuracy", &PyModel::accuracy, py::arg("images"), py::arg("labels"))
      .def("residual_probe_accuracy", &PyModel::residual_probe_accuracy,
           py::arg("train_images"), py::arg("train_labels"), py::arg("test_images"),
           py::arg("test_labels"), py::arg("seed") = 7)
      .def("mi_report", &PyModel::mi_report, py::arg("images"), py::arg("labels"),
           py::arg("bins") = 20)
      .def("traversal", &PyModel::traversal, py::arg("image"), py::arg("steps") = 8)
      .def("explain", &PyModel::explain, py::arg("image"), py::arg("names") = py::none())
      .def("config_json", &PyModel::config_json);
}
