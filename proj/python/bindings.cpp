#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

#include "bevuda/adaptation/objectives.hpp"
#include "bevuda/errors.hpp"
#include "bevuda/geometry/pipeline.hpp"
#include "bevuda/harness/config.hpp"
#include "bevuda/harness/experiments.hpp"
#include "bevuda/harness/metrics.hpp"
#include "bevuda/numerics/checkpoint.hpp"
#include "bevuda/synth/scene.hpp"
#include "bevuda/uncertainty/uncertainty.hpp"

namespace py = pybind11;
using namespace bevuda;
using numerics::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  numerics::Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict scene_dict(const synth::SceneSample& s) {
  py::list images, depth, labels;
  for (const Tensor& t : s.images) images.append(to_array(t));
  for (const Tensor& t : s.depth_gt) depth.append(to_array(t));
  for (const auto& l : s.labels) labels.append(py::make_tuple(l.cell_d, l.cell_w, l.offset_d, l.offset_w, l.category));
  py::dict d;
  d["images"] = images;
  d["depth"] = depth;
  d["labels"] = labels;
  return d;
}

}  // namespace

PYBIND11_MODULE(_bevuda, m) {
  m.doc() = "Teacher-student domain adaptation for toy BEV detection";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  py::class_<harness::ExperimentConfig>(m, "Config")
      .def(py::init<>())
      .def_static("from_text",
                  [](const std::string& text) {
                    std::istringstream in(text);
                    return harness::parse_config(in, "<text>");
                  })
      .def_static("from_file", [](const std::string& path) { return harness::load_config(path); })
      .def("__getitem__", &harness::get_config_value)
      .def("__setitem__", &harness::set_config_value)
      .def_static("keys",
                  [] {
                    std::vector<std::string> out;
                    for (const auto& k : harness::config_keys()) out.push_back(k.key);
                    return out;
                  })
      .def("validate", &harness::ExperimentConfig::validate)
      .def("dump", &harness::dump_config)
      .def_readwrite("seed", &harness::ExperimentConfig::seed);

  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::size_t n_objects, const std::string& layout, double lidar_density) {
        synth::SceneSpec spec;
        spec.seed = seed;
        spec.n_objects = n_objects;
        spec.layout = synth::parse_layout(layout);
        spec.lidar_density = lidar_density;
        return scene_dict(synth::generate_scene(spec));
      },
      py::arg("seed"), py::arg("n_objects") = 4, py::arg("layout") = "grid-city", py::arg("lidar_density") = 0.3);

  m.def(
      "apply_fog",
      [](const Array& image, const Array& depth, double beta, double airlight) {
        return to_array(synth::apply_fog(to_tensor(image), to_tensor(depth), beta, airlight));
      },
      py::arg("image"), py::arg("depth"), py::arg("beta"), py::arg("airlight") = 0.8);

  m.def(
      "uncertainty_map",
      [](const std::vector<Array>& samples) {
        std::vector<geometry::DepthDistribution> d;
        for (const Array& a : samples) d.push_back({to_tensor(a), {}});
        return to_array(uncertainty::uncertainty_map(d).tensor);
      },
      py::arg("samples"), "Per-entry population std over (C_D, H, W) depth distributions.");

  m.def(
      "pool_to_bev",
      [](const Array& voxel, std::array<std::size_t, 3> kernel, std::array<std::size_t, 3> stride) {
        numerics::Pool3d p;
        p.kernel = kernel;
        p.stride = stride;
        return to_array(geometry::pool_to_bev(geometry::VoxelFeature{to_tensor(voxel)}, p).tensor);
      },
      py::arg("voxel"), py::arg("kernel"), py::arg("stride"));

  m.def(
      "js_divergence",
      [](const std::vector<double>& p, const std::vector<double>& q) { return harness::js_divergence(p, q); },
      py::arg("p"), py::arg("q"));

  m.def(
      "transfer_loss",
      [](const std::vector<Array>& teacher, const std::vector<Array>& student) {
        std::vector<Tensor> t, s;
        for (const Array& a : teacher) t.push_back(to_tensor(a));
        for (const Array& a : student) s.push_back(to_tensor(a));
        return adaptation::transfer_loss(t, s);
      },
      py::arg("teacher"), py::arg("student"));

  m.def(
      "uema_blend",
      [](double teacher, double student, double u, double alpha, double sigma) {
        return adaptation::uema_blend(teacher, student, u, adaptation::UemaConfig{alpha, sigma});
      },
      py::arg("teacher"), py::arg("student"), py::arg("u"), py::arg("alpha") = 0.999, py::arg("sigma") = 0.001);

  m.def(
      "total_da_loss",
      [](double l_unc, double l_sup, double l_mkt, double l_ali, std::array<double, 4> w) {
        return adaptation::total_da_loss(l_unc, l_sup, l_mkt, l_ali, adaptation::LossWeights{w[0], w[1], w[2], w[3]});
      },
      py::arg("l_unc"), py::arg("l_sup"), py::arg("l_mkt"), py::arg("l_ali"),
      py::arg("weights") = std::array<double, 4>{1.0, 1.0, 0.1, 0.1});

  m.def(
      "average_precision",
      [](const std::vector<bool>& hits, std::size_t positives) {
        const std::unique_ptr<bool[]> buf(new bool[hits.size()]);
        std::copy(hits.begin(), hits.end(), buf.get());
        return harness::average_precision(std::span<const bool>(buf.get(), hits.size()), positives);
      },
      py::arg("ranked_hits"), py::arg("positives"));

  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        py::dict out;
        for (const auto& [name, t] : numerics::load_checkpoint(path)) out[py::str(name)] = to_array(t);
        return out;
      },
      py::arg("path"));

  m.def(
      "run_variant",
      [](const harness::ExperimentConfig& cfg, const std::string& variant) {
        harness::ExperimentConfig c = cfg;
        c.validate();
        for (const auto& v : harness::ablation_variants()) {
          if (v.name != variant) continue;
          harness::RunResult r;
          {
            py::gil_scoped_release release;
            const harness::CorpusSet corpora = harness::generate_corpora(c, c.target_domain_shift());
            const auto source = harness::pretrain(c, corpora.source).params;
            r = harness::adapt_and_evaluate(c, source, corpora, v.switches);
          }
          py::dict d;
          d["map"] = r.metrics.simplified_map;
          d["translation_error"] = r.metrics.mean_translation_error;
          d["per_class_ap"] = r.metrics.per_class_ap;
          d["js"] = r.divergence.js;
          d["h_proxy"] = r.divergence.h_proxy;
          return d;
        }
        throw ConfigError("unknown variant '" + variant + "'");
      },
      py::arg("config"), py::arg("variant") = "full",
      "Generates corpora, pretrains on the source and adapts with one ablation variant "
      "(source-only, RDT, GCS or full).");
}
