#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <nlohmann/json.hpp>
#include <optional>

#include "latentedit/config.hpp"
#include "latentedit/delta.hpp"
#include "latentedit/edit.hpp"
#include "latentedit/errors.hpp"

namespace py = pybind11;
using namespace latentedit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using BoolArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

LatentImage to_latent(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != kLatentChannels) throw py::value_error("expected an (H, W, 4) array");
  const auto rows = static_cast<int>(a.shape(0)), cols = static_cast<int>(a.shape(1));
  return LatentImage(rows, cols, std::vector<double>(a.data(), a.data() + a.size()));
}

Array from_map(const FeatureMap& m) {
  Array out({m.rows(), m.cols(), m.channels()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Mask to_mask(const BoolArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected an (H, W) mask");
  Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::transform(a.data(), a.data() + a.size(), m.values().begin(), [](bool b) { return b ? 1 : 0; });
  return m;
}

BoolArray from_mask(const Mask& m) {
  BoolArray out({m.rows(), m.cols()});
  std::transform(m.values().begin(), m.values().end(), out.mutable_data(), [](std::uint8_t v) { return v != 0; });
  return out;
}

// Python dicts travel as JSON text to reuse the config parser's checks.
RunConfig to_config(const py::dict& d) {
  const py::module_ json = py::module_::import("json");
  RunConfig cfg;
  apply_config_json(cfg, nlohmann::json::parse(json.attr("dumps")(d).cast<std::string>()));
  cfg.validate();
  return cfg;
}

py::dict from_config(const RunConfig& cfg) {
  const py::module_ json = py::module_::import("json");
  return json.attr("loads")(config_to_json(cfg).dump());
}

class Editor {
 public:
  Editor(SceneDataset scene, const py::dict& config)
      : scene_(std::move(scene)), cfg_(to_config(config)), train_cfg_(train_config(cfg_)) {
    scene_.validate();
    state_ = init_training(scene_, train_cfg_);
  }

  void initialize(std::optional<std::int64_t> steps) {
    RunConfig c = cfg_;
    if (steps) c.init_steps = *steps;
    c.validate();
    py::gil_scoped_release release;
    train(state_, scene_, init_schedule(c), train_cfg_);
  }

  Array render(int view) const {
    if (view < 0 || static_cast<std::size_t>(view) >= scene_.size()) throw py::index_error("view out of range");
    RenderConfig rc = train_cfg_.render;
    rc.stratified = false;
    const auto& st = session_ ? session_->training : state_;
    return from_map(render_view(st.field, &st.adapter, st.cameras[view], view_geometry(scene_), rc, view));
  }

  // Runs the edit with the configured backend; returns the number of
  // dataset updates made.
  std::int64_t edit(const std::string& prompt, std::optional<std::int64_t> iterations) {
    RunConfig c = cfg_;
    if (iterations) c.edit_iterations = *iterations;
    c.validate();
    const auto denoiser = make_denoiser(c, scene_);
    std::vector<EditPrompt> prompts;
    for (const auto& clause : split_prompt(prompt)) prompts.push_back({clause, denoiser.get()});
    if (!session_) session_ = start_session(state_, scene_);
    py::gil_scoped_release release;
    edit_scene(*session_, prompts, edit_config(c), make_schedule(c), train_cfg_, c.seed);
    return session_->dataset_updates;
  }

  std::vector<Array> dataset_latents() const {
    std::vector<Array> out;
    for (const auto& z : (session_ ? session_->dataset : scene_).latents) out.push_back(from_map(z));
    return out;
  }

  std::vector<BoolArray> masks() const {
    std::vector<BoolArray> out;
    if (session_)
      for (const auto& m : session_->masks) out.push_back(from_mask(m));
    return out;
  }

 private:
  SceneDataset scene_;
  RunConfig cfg_;
  TrainConfig train_cfg_;
  TrainingState state_;
  std::optional<EditSession> session_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Latent-space 3D scene editing";

  static py::exception<Error> base(m, "LatenteditError", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def("default_config", [] { return from_config(RunConfig{}); }, "Built-in defaults as a flat dict.");
  m.def(
      "load_config", [](const std::filesystem::path& p) { return from_config(load_config(p)); }, py::arg("path"));

  py::class_<SceneDataset>(m, "Scene")
      .def_static(
          "synthetic",
          [](int views, int rows, int cols, std::uint64_t seed, int downscale_factor, double camera_noise) {
            SceneSpec spec;
            spec.views = views;
            spec.rows = rows;
            spec.cols = cols;
            spec.downscale_factor = downscale_factor;
            spec.camera_noise = camera_noise;
            return synth_scene(spec, seed);
          },
          py::arg("views") = 8, py::arg("rows") = 48, py::arg("cols") = 48, py::arg("seed") = 0,
          py::arg("downscale_factor") = 1, py::arg("camera_noise") = 0.0)
      .def_static("load", &load_scene, py::arg("path"))
      .def("save", [](const SceneDataset& s, const std::filesystem::path& p) { write_scene(s, p); }, py::arg("path"))
      .def("__len__", &SceneDataset::size)
      .def_property_readonly("shape", [](const SceneDataset& s) { return py::make_tuple(s.rows(), s.cols()); })
      .def_property_readonly("latents",
                             [](const SceneDataset& s) {
                               std::vector<Array> out;
                               for (const auto& z : s.latents) out.push_back(from_map(z));
                               return out;
                             })
      .def_property_readonly("edit_regions", [](const SceneDataset& s) -> std::optional<std::vector<BoolArray>> {
        if (!s.ground_truth_edit_region) return std::nullopt;
        std::vector<BoolArray> out;
        for (const auto& r : *s.ground_truth_edit_region) out.push_back(from_mask(r));
        return out;
      });

  py::class_<Editor>(m, "Editor")
      .def(py::init<SceneDataset, const py::dict&>(), py::arg("scene"), py::arg("config"))
      .def("initialize", &Editor::initialize, py::arg("steps") = std::nullopt,
           "Fit the field, adapter and cameras to the scene.")
      .def("render", &Editor::render, py::arg("view"))
      .def("edit", &Editor::edit, py::arg("prompt"), py::arg("iterations") = std::nullopt)
      .def_property_readonly("dataset_latents", &Editor::dataset_latents)
      .def_property_readonly("masks", &Editor::masks);

  m.def(
      "threshold_mask",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& scores, double mu) {
        if (scores.ndim() != 3) throw py::value_error("expected (H, W, C) scores");
        DeltaScores s;
        s.data = FeatureMap(static_cast<int>(scores.shape(0)), static_cast<int>(scores.shape(1)),
                            static_cast<int>(scores.shape(2)),
                            std::vector<double>(scores.data(), scores.data() + scores.size()));
        return from_mask(threshold_mask(s, mu));
      },
      py::arg("scores"), py::arg("mu") = 0.45);
  m.def(
      "blend_masked",
      [](const Array& edited, const Array& original, const BoolArray& mask) {
        return from_map(blend_masked(to_latent(edited), to_latent(original), to_mask(mask)));
      },
      py::arg("edited"), py::arg("original"), py::arg("mask"));
  m.def("split_prompt", &split_prompt, py::arg("prompt"));
  m.def(
      "edit_psnr",
      [](const Array& a, const Array& b, std::optional<BoolArray> region, double peak) {
        std::optional<Mask> m;
        if (region) m = to_mask(*region);
        return edit_psnr(to_latent(a), to_latent(b), m ? &*m : nullptr, peak);
      },
      py::arg("a"), py::arg("b"), py::arg("region") = std::nullopt, py::arg("peak") = 1.0);
}
