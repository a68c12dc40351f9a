#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include "idmkit/cli.hpp"
#include "idmkit/coords.hpp"
#include "idmkit/corpus.hpp"
#include "idmkit/env.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/idm_core.hpp"
#include "idmkit/retrieval.hpp"

namespace py = pybind11;
using namespace idm;

namespace {

using Frame = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const Frame& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("frames must be H x W x 3 uint8 arrays");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(img.bytes().data(), a.data(), img.bytes().size());
  return img;
}

Frame to_array(const Image& img) {
  Frame a({img.height(), img.width(), 3});
  std::memcpy(a.mutable_data(), img.bytes().data(), img.bytes().size());
  return a;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Action action_from_py(const py::object& o) {
  const std::string s = py::str(py::module_::import("json").attr("dumps")(o));
  return action_from_json(nlohmann::json::parse(s));
}

class Model {
 public:
  explicit Model(const std::filesystem::path& path) : model_(load_checkpoint(path)) {}
  py::object predict(const Frame& before, const Frame& after) const {
    const Image b = to_image(before), a = to_image(after);
    Action action;
    {
      py::gil_scoped_release release;
      action = model_.predict_action(b, a);
    }
    return to_py(action_to_json(action));
  }
  py::object config() const { return to_py(model_config_to_json(model_.config())); }

 private:
  IdmModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(idmkit, m) {
  m.doc() = "Inverse dynamics labeling toolkit";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<TransportError>(m, "TransportError", PyExc_ConnectionError);

  m.def("discretize_coord", &discretize_coord, py::arg("pixel"), py::arg("extent"));
  m.def("undiscretize_coord", &undiscretize_coord, py::arg("bin"), py::arg("extent"));

  m.def("format_action", [](const py::object& action) { return format_action(action_from_py(action)); },
        py::arg("action"), "Compact text form of an action given as a dict.");

  m.def(
      "render_screen",
      [](std::uint64_t seed) {
        ScreenSpec spec;
        spec.rng_seed = seed;
        return to_array(render(new_env(spec)));
      },
      py::arg("seed") = 0, "Initial screen of a fresh environment as an H x W x 3 array.");

  m.def(
      "episode",
      [](std::uint64_t seed, std::size_t index) {
        const GeneratorConfig cfg;
        const Episode ep = run_episode(cfg, seed, index, cfg.episode_length);
        py::list frames, actions;
        for (const auto& f : ep.frames) frames.append(to_array(f.image()));
        for (const auto& a : ep.actions) actions.append(to_py(action_to_json(a)));
        return py::make_tuple(frames, actions);
      },
      py::arg("seed") = 0, py::arg("index") = 0, "(frames, actions) of one environment rollout.");

  m.def(
      "generate_corpus",
      [](std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir) {
        py::gil_scoped_release release;
        return write_corpus(generate_corpus(GeneratorConfig{}, n, seed), out_dir);
      },
      py::arg("n"), py::arg("seed"), py::arg("out_dir"), "Writes a corpus and returns its transitions digest.");

  m.def("corpus_size", [](const std::filesystem::path& dir) { return read_corpus(dir).size(); }, py::arg("dir"));

  m.def("make_query", [](const std::string& instruction, const std::string& app) { return make_query(instruction, app).query; },
        py::arg("instruction"), py::arg("app"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs an idmkit subcommand; returns (exit_code, stdout, stderr).");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("predict", &Model::predict, py::arg("before"), py::arg("after"))
      .def_property_readonly("config", &Model::config);
}
