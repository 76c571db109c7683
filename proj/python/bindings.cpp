#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "dood/datamodel.hpp"
#include "dood/error.hpp"
#include "dood/eval.hpp"
#include "dood/net.hpp"
#include "dood/pipeline.hpp"
#include "dood/schema.hpp"
#include "dood/scoring.hpp"
#include "dood/synth.hpp"
#include "dood/worldgen.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

dood::Tensor3<float> to_tensor(const FloatArray& a) {
  if (a.ndim() != 3) throw py::value_error("expected a (C, H, W) array");
  dood::Tensor3<float> t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

template <typename T, typename A>
dood::Grid2<T> to_grid(const A& a) {
  if (a.ndim() != 2) throw py::value_error("expected an (H, W) array");
  dood::Grid2<T> g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), g.data.begin());
  return g;
}

py::array_t<float> from_tensor(const dood::Tensor3<float>& t) {
  py::array_t<float> a({t.channels, t.height, t.width});
  std::copy(t.data.begin(), t.data.end(), a.mutable_data());
  return a;
}

template <typename T>
py::array_t<T> from_grid(const dood::Grid2<T>& g) {
  py::array_t<T> a({g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), a.mutable_data());
  return a;
}

py::dict sample_dict(const dood::Sample& s) {
  py::dict d;
  d["id"] = s.id;
  d["image"] = from_tensor(s.image);
  d["semantic"] = s.semantic ? py::object(from_grid(*s.semantic)) : py::none();
  d["ood"] = s.ood ? py::object(from_grid(*s.ood)) : py::none();
  return d;
}

dood::WorldConfig world(const std::string& config_json, std::uint64_t seed) {
  json j = config_json.empty() ? json::object() : json::parse(config_json);
  j["seed"] = seed;
  return dood::world_config_from_json(j);
}

std::pair<std::vector<dood::ScoreMap>, std::vector<dood::OodMask>> pooled(const std::vector<FloatArray>& scores,
                                                                          const std::vector<ByteArray>& truths) {
  std::vector<dood::ScoreMap> s;
  std::vector<dood::OodMask> t;
  for (const auto& a : scores) s.push_back(to_grid<float>(a));
  for (const auto& a : truths) t.push_back(to_grid<std::uint8_t>(a));
  return {std::move(s), std::move(t)};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dense out-of-distribution detection core";

  static py::exception<dood::Error> error(m, "DoodError", PyExc_RuntimeError);
  static py::exception<dood::ConfigError> config_error(m, "ConfigError", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const dood::ConfigError& e) {
      py::set_error(config_error, (e.module() + ":" + e.code() + ": " + e.what()).c_str());
    } catch (const dood::Error& e) {
      py::set_error(error, (e.module() + ":" + e.code() + ": " + e.what()).c_str());
    }
  });

  m.attr("IGNORE") = dood::kIgnoreLabel;
  m.attr("INLIER") = dood::kInlierLabel;
  m.attr("OUTLIER") = dood::kOutlierLabel;

  // worldgen
  m.def("inlier_scene", [](std::uint64_t seed, std::uint64_t index, const std::string& config) {
    return sample_dict(dood::gen_inlier_scene(world(config, seed), index));
  }, py::arg("seed"), py::arg("index"), py::arg("config") = "");
  m.def("background_image", [](std::uint64_t seed, std::uint64_t index, const std::string& config) {
    const auto b = dood::gen_background_image(world(config, seed), index);
    py::dict d = sample_dict(b.sample);
    d["bbox"] = py::make_tuple(b.bbox.x, b.bbox.y, b.bbox.width, b.bbox.height);
    d["object_mask"] = from_grid(b.object_mask);
    return d;
  }, py::arg("seed"), py::arg("index"), py::arg("config") = "");
  m.def("foreign_scene", [](std::uint64_t seed, std::uint64_t index, const std::string& config) {
    return sample_dict(dood::gen_foreign_scene(world(config, seed), index));
  }, py::arg("seed"), py::arg("index"), py::arg("config") = "");

  // scoring on logits
  m.def("score_max_softmax", [](const FloatArray& logits) {
    return from_grid(dood::score_max_softmax(to_tensor(logits)));
  }, py::arg("logits"));
  m.def("score_tempered_softmax", [](const FloatArray& logits, double t) {
    return from_grid(dood::score_tempered_softmax(to_tensor(logits), t));
  }, py::arg("logits"), py::arg("temperature"));
  m.def("score_discriminative", [](const FloatArray& logits) {
    return from_grid(dood::score_discriminative(to_tensor(logits)));
  }, py::arg("ood_logits"));
  m.def("score_foreign_class", [](const FloatArray& logits, const std::set<int>& foreign, bool winner) {
    return from_grid(dood::score_foreign_class(to_tensor(logits), foreign,
                                               winner ? dood::ForeignVariant::kWinner : dood::ForeignVariant::kSum));
  }, py::arg("logits"), py::arg("foreign_set"), py::arg("winner") = false);
  m.def("mutual_information", [](const std::vector<FloatArray>& samples) {
    std::vector<dood::LogitMap> s;
    for (const auto& a : samples) s.push_back(to_tensor(a));
    return from_grid(dood::mutual_information(s));
  }, py::arg("samples"));

  // evaluation
  m.def("average_precision", [](const std::vector<FloatArray>& scores, const std::vector<ByteArray>& truths) {
    const auto [s, t] = pooled(scores, truths);
    return dood::average_precision(s, t);
  }, py::arg("scores"), py::arg("truths"));
  m.def("pr_curve", [](const std::vector<FloatArray>& scores, const std::vector<ByteArray>& truths) {
    const auto [s, t] = pooled(scores, truths);
    const auto c = dood::pr_curve(s, t);
    std::vector<double> th, p, r;
    for (const auto& pt : c.points) {
      th.push_back(pt.threshold);
      p.push_back(pt.precision);
      r.push_back(pt.recall);
    }
    return py::make_tuple(py::array(py::cast(p)), py::array(py::cast(r)), py::array(py::cast(th)));
  }, py::arg("scores"), py::arg("truths"));

  // score maps on disk
  m.def("write_scoremap", [](const std::filesystem::path& path, const FloatArray& map) {
    dood::write_scoremap(path, to_grid<float>(map));
  }, py::arg("path"), py::arg("map"));
  m.def("read_scoremap", [](const std::filesystem::path& path) { return from_grid(dood::read_scoremap(path)); },
        py::arg("path"));

  // models
  py::class_<dood::ModelCheckpoint>(m, "Checkpoint")
      .def_static("load", &dood::load_checkpoint, py::arg("path"))
      .def("save", [](const dood::ModelCheckpoint& c, const std::filesystem::path& p) { dood::save_checkpoint(p, c); })
      .def_property_readonly("config", [](const dood::ModelCheckpoint& c) { return dood::to_json(c.config).dump(); })
      .def_property_readonly("metadata", [](const dood::ModelCheckpoint& c) { return c.metadata.dump(); })
      .def("segment", [](const dood::ModelCheckpoint& c, const FloatArray& image) {
        return from_tensor(dood::forward_segmentation(c, to_tensor(image)));
      }, py::arg("image"))
      .def("ood_logits", [](const dood::ModelCheckpoint& c, const FloatArray& image) {
        return from_tensor(dood::forward_ood(c, to_tensor(image)));
      }, py::arg("image"))
      .def("score_odin", [](const dood::ModelCheckpoint& c, const FloatArray& image, double eps, double t) {
        return from_grid(dood::score_odin(c, to_tensor(image), dood::OdinConfig{eps, t}));
      }, py::arg("image"), py::arg("epsilon"), py::arg("temperature"));
  m.def("init_checkpoint", [](const std::string& net_json, std::uint64_t seed) {
    dood::NormStats norm;
    return dood::init_checkpoint(dood::fcn_config_from_json(json::parse(net_json)), norm, seed);
  }, py::arg("net_config"), py::arg("seed"));

  // run configs
  m.def("validate_run_config", [](const std::string& doc) {
    return dood::to_json(dood::run_config_from_json(json::parse(doc))).dump();
  }, py::arg("config"), "Validates a run config and returns it with defaults filled in.");
  m.def("run_config_schema", [] { return dood::run_config_schema().dump(); });
}
