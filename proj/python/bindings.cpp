#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cainn/data_io.hpp"
#include "cainn/eval.hpp"
#include "cainn/flow.hpp"
#include "cainn/trainer.hpp"

namespace py = pybind11;
using namespace cainn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Model = FlowModel<double>;

Tensor<double> to_tensor(const Array& a) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d (N, C, H, W) array, got " + std::to_string(a.ndim()) + "-d");
  const Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  return Tensor<double>(s, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor<double>& t) {
  const Shape& s = t.shape();
  Array out({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Array map_array(const AnomalyMap& m) {
  Array out({m.height, m.width});
  std::copy(m.scores.begin(), m.scores.end(), out.mutable_data());
  return out;
}

TrainConfig config_of(const Model& m, std::size_t epochs, double lr, std::size_t batch) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = lr;
  cfg.batch_size = batch;
  cfg.steps = m.config.steps;
  cfg.variant = m.config.variant;
  cfg.seed = m.config.seed;
  cfg.clamp_alpha = m.config.clamp_alpha;
  cfg.hidden_channels = m.config.hidden_channels;
  cfg.reduction = m.config.reduction;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Coupling flow with attention subnets for feature-map anomaly detection";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<IoError>(m, "IoError", base);

  py::class_<Model>(m, "Flow")
      .def(py::init([](std::size_t channels, std::size_t height, std::size_t width, std::size_t steps,
                       const std::string& variant, std::uint64_t seed, std::optional<double> clamp_alpha,
                       std::size_t hidden_channels, std::size_t reduction, bool random_init) {
             FlowConfig cfg;
             cfg.channels = channels;
             cfg.height = height;
             cfg.width = width;
             cfg.steps = steps;
             cfg.variant = parse_variant(variant);
             cfg.seed = seed;
             cfg.clamp_alpha = clamp_alpha;
             cfg.hidden_channels = hidden_channels;
             cfg.reduction = reduction;
             return Model::create(cfg, random_init ? InitMode::Random : InitMode::IdentityStart);
           }),
           py::arg("channels"), py::arg("height"), py::arg("width"), py::arg("steps") = 2,
           py::arg("variant") = "CAC", py::arg("seed") = 0, py::arg("clamp_alpha") = kDefaultClampAlpha,
           py::arg("hidden_channels") = 0, py::arg("reduction") = 16, py::arg("random_init") = false)
      .def_property_readonly("channels", [](const Model& f) { return f.config.channels; })
      .def_property_readonly("height", [](const Model& f) { return f.config.height; })
      .def_property_readonly("width", [](const Model& f) { return f.config.width; })
      .def_property_readonly("steps", [](const Model& f) { return f.config.steps; })
      .def_property_readonly("variant", [](const Model& f) { return std::string(variant_name(f.config.variant)); })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("parameter_names", &Model::parameter_names)
      .def_property_readonly("norm_mean", [](const Model& f) { return f.norm.mean; })
      .def_property_readonly("norm_std", [](const Model& f) { return f.norm.stddev; })
      .def("fit_norm", [](Model& f, const Array& x) { f.norm = compute_feature_norm(to_tensor(x)); }, py::arg("x"))
      .def(
          "forward",
          [](const Model& f, const Array& x) {
            FlowOutput<double> out = flow_forward(to_tensor(x), f);
            return py::make_tuple(to_array(out.z), out.logdet);
          },
          py::arg("x"), "Returns (z, logdet) for a batch of feature maps.")
      .def("inverse", [](const Model& f, const Array& z) { return to_array(flow_inverse(to_tensor(z), f)); },
           py::arg("z"))
      .def("nll", [](const Model& f, const Array& x) { return nll_loss(flow_forward(to_tensor(x), f)); },
           py::arg("x"), "Mean negative log-likelihood per dimension.");

  m.def(
      "train",
      [](const Array& data, std::size_t epochs, double lr, std::size_t batch_size, std::size_t steps,
         const std::string& variant, std::uint64_t seed, std::optional<double> clamp_alpha) {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.batch_size = batch_size;
        cfg.steps = steps;
        cfg.variant = parse_variant(variant);
        cfg.seed = seed;
        cfg.clamp_alpha = clamp_alpha;
        const Tensor<double> x = to_tensor(data);
        TrainResult<double> r;
        {
          py::gil_scoped_release release;
          r = train(x, cfg);
        }
        return py::make_tuple(std::move(r.model), r.history);
      },
      py::arg("data"), py::arg("epochs") = 750, py::arg("lr") = 5e-4, py::arg("batch_size") = 32,
      py::arg("steps") = 2, py::arg("variant") = "CAC", py::arg("seed") = 0,
      py::arg("clamp_alpha") = kDefaultClampAlpha, "Returns (flow, per-epoch mean loss).");

  m.def(
      "evaluate_json",
      [](const Model& f, const std::filesystem::path& manifest) {
        const std::vector<TestSample<double>> test = load_test_set<double>(read_manifest(manifest));
        return eval_result_json(evaluate(f, test));
      },
      py::arg("flow"), py::arg("manifest"));

  m.def(
      "anomaly_map", [](const Array& z, std::size_t sample) { return map_array(anomaly_map(to_tensor(z), sample)); },
      py::arg("z"), py::arg("sample") = 0);

  m.def(
      "auroc",
      [](const std::vector<double>& pos, const std::vector<double>& neg) { return auroc(pos, neg); },
      py::arg("positives"), py::arg("negatives"));

  m.def(
      "synth_generate",
      [](const std::filesystem::path& out_dir, std::size_t n_train, std::size_t n_test_normal,
         std::size_t n_test_anomalous, std::size_t image_size, std::uint64_t texture_seed,
         std::uint64_t extractor_seed) {
        SynthConfig cfg;
        cfg.n_train = n_train;
        cfg.n_test_normal = n_test_normal;
        cfg.n_test_anomalous = n_test_anomalous;
        cfg.image_size = image_size;
        cfg.texture_seed = texture_seed;
        cfg.extractor_seed = extractor_seed;
        cfg.anomaly_min = std::min(cfg.anomaly_min, image_size / 2);
        cfg.anomaly_max = std::min(cfg.anomaly_max, image_size / 2);
        const SynthManifests p = synth_generate(cfg, out_dir, Dtype::F64);
        return py::make_tuple(p.train, p.test);
      },
      py::arg("out_dir"), py::arg("n_train") = 200, py::arg("n_test_normal") = 40, py::arg("n_test_anomalous") = 40,
      py::arg("image_size") = 32, py::arg("texture_seed") = 1, py::arg("extractor_seed") = 2,
      "Writes a synthetic dataset and returns (train manifest, test manifest).");

  m.def(
      "load_features", [](const std::filesystem::path& manifest) {
        return to_array(load_feature_set<double>(read_manifest(manifest)));
      },
      py::arg("manifest"));
  m.def(
      "read_features", [](const std::filesystem::path& p) { return to_array(read_features<double>(p)); },
      py::arg("path"));
  m.def(
      "write_features",
      [](const Array& a, const std::filesystem::path& p, bool f32) {
        const Tensor<double> t = to_tensor(a);
        if (f32) {
          write_features(tensor_cast<float>(t), p);
        } else {
          write_features(t, p);
        }
      },
      py::arg("array"), py::arg("path"), py::arg("f32") = false);

  m.def(
      "save_checkpoint",
      [](const Model& f, const std::filesystem::path& p, const std::vector<double>& history, double lr,
         std::size_t batch_size) {
        save_checkpoint(Checkpoint<double>{config_of(f, history.size(), lr, batch_size), f, history}, p);
      },
      py::arg("flow"), py::arg("path"), py::arg("history") = std::vector<double>{}, py::arg("lr") = 5e-4,
      py::arg("batch_size") = 32);
  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& p) {
        Checkpoint<double> c = load_checkpoint<double>(p);
        return py::make_tuple(std::move(c.model), c.history);
      },
      py::arg("path"), "Returns (flow, history); f32 checkpoints are widened to f64.");
}
