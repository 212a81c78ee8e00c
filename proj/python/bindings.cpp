#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ccm/pipeline.hpp"

namespace py = pybind11;
using namespace ccm;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

RunConfig config_from(const py::object& cfg) {
  if (cfg.is_none()) return RunConfig{};
  const auto text = py::module_::import("json").attr("dumps")(cfg).cast<std::string>();
  return config_from_json(nlohmann::json::parse(text));
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict record(const MetricsRecord& m) {
  py::dict d;
  d["run_id"] = m.run_id;
  d["strategy"] = m.strategy;
  d["condition"] = m.condition;
  d["nfes"] = m.nfes;
  d["seed"] = m.seed;
  d["sw2"] = m.sw2;
  d["edge_iou"] = m.edge_iou;
  d["outside_mask_psnr"] = m.outside_mask_psnr;
  d["lowres_mse"] = m.lowres_mse;
  d["self_consistency"] = m.self_consistency;
  return d;
}

py::dict stage(const StageReport& r) {
  py::dict d;
  d["kind"] = r.kind;
  d["dir"] = r.dir.string();
  d["losses"] = r.losses;
  d["seconds"] = r.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Consistency models with ControlNet-style control on 16x16 shapes";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MissingArtifact>(m, "MissingArtifact", PyExc_FileNotFoundError);
  py::register_exception<StructuralError>(m, "StructuralError", PyExc_ValueError);
  py::register_exception<RangeError>(m, "RangeError", PyExc_IndexError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);

  py::class_<NoiseSchedule>(m, "Schedule")
      .def_property_readonly("T", &NoiseSchedule::T)
      .def_property_readonly("N", &NoiseSchedule::N)
      .def("alpha_bar", &NoiseSchedule::alpha_bar, py::arg("t"))
      .def("t", &NoiseSchedule::t, py::arg("n"))
      .def("descending", &NoiseSchedule::descending, py::arg("steps"))
      .def("with_grid", &NoiseSchedule::with_grid, py::arg("n"));

  m.def(
      "make_schedule",
      [](int T, double b0, double b1, int N, bool zero_terminal_snr) {
        auto s = make_schedule(T, b0, b1, N);
        return zero_terminal_snr ? enforce_zero_terminal_snr(s) : s;
      },
      py::arg("T") = 1000, py::arg("beta_start") = 1e-4, py::arg("beta_end") = 2e-2, py::arg("N") = 200,
      py::arg("zero_terminal_snr") = true);

  m.def(
      "cm_scalings",
      [](const NoiseSchedule& s, int t, double sd) {
        const auto c = cm_scalings(s, t, sd);
        return py::make_tuple(c.skip, c.out);
      },
      py::arg("schedule"), py::arg("t"), py::arg("sigma_data") = kSigmaData);

  m.def(
      "gen_shapes",
      [](uint64_t seed, int64_t n) {
        const auto ds = gen_shapes(seed, n);
        return py::make_tuple(to_array(ds.images), ds.labels);
      },
      py::arg("seed"), py::arg("n"), "Images [n, 1, 16, 16] in [-1, 1] and class labels.");

  m.def("edge_condition", [](const Array& a) { return to_array(edge_condition(to_tensor(a))); });
  m.def("lowres_condition", [](const Array& a) { return to_array(lowres_condition(to_tensor(a))); });
  m.def(
      "mask_condition", [](const Array& a, uint64_t seed) { return to_array(mask_condition(to_tensor(a), seed)); },
      py::arg("images"), py::arg("seed"));

  m.def(
      "sliced_w2",
      [](const Array& a, const Array& b, int n_proj, uint64_t seed) {
        Rng rng(seed);
        return sliced_w2(to_tensor(a), to_tensor(b), n_proj, rng);
      },
      py::arg("a"), py::arg("b"), py::arg("n_proj") = 64, py::arg("seed") = 0);
  m.def("w2_1d", &w2_1d, py::arg("a"), py::arg("b"));

  m.def("default_config", [] { return to_py(config_to_json(RunConfig{})); },
        "The fully-resolved default run config as a dict.");
  m.def("resolve_config", [](const py::object& cfg) { return to_py(config_to_json(config_from(cfg))); },
        py::arg("config"), "Fills defaults and validates; unknown keys raise ConfigError.");

  py::class_<Lab>(m, "Lab")
      .def(py::init([](const py::object& cfg) { return std::make_unique<Lab>(config_from(cfg)); }),
           py::arg("config") = py::none())
      .def_property_readonly("out", [](const Lab& l) { return l.paths().root.string(); })
      .def("train_dm", [](Lab& l) { return stage(l.train_dm()); })
      .def("train_cm_distill", [](Lab& l) { return stage(l.train_cm_distill()); })
      .def("train_cm_ct", [](Lab& l) { return stage(l.train_cm_ct()); })
      .def("train_controlnet_dm",
           [](Lab& l, const std::string& k) { return stage(l.train_controlnet_dm(parse_condition(k))); })
      .def("train_controlnet_ct",
           [](Lab& l, const std::string& k) { return stage(l.train_controlnet_ct(parse_condition(k))); })
      .def("train_adapter", [](Lab& l) { return stage(l.train_adapter()); })
      .def(
          "sample",
          [](const Lab& l, const std::string& model, int nfes, int n, std::optional<std::string> cond,
             uint64_t seed) {
            SampleRequest req{model, std::nullopt, nfes, n};
            if (cond) req.condition = parse_condition(*cond);
            const auto r = l.sample(req, seed);
            py::dict d;
            d["samples"] = to_array(r.samples);
            d["labels"] = r.labels;
            d["condition"] = r.condition.numel() > 0 ? py::object(to_array(r.condition)) : py::none();
            return d;
          },
          py::arg("model") = "cm", py::arg("nfes") = 4, py::arg("n") = 16, py::arg("condition") = py::none(),
          py::arg("seed") = 0)
      .def(
          "evaluate",
          [](const Lab& l, const std::string& strategy, std::optional<std::string> cond) {
            std::optional<ConditionKind> k;
            if (cond) k = parse_condition(*cond);
            return record(l.evaluate(parse_strategy(strategy), k));
          },
          py::arg("strategy"), py::arg("condition") = py::none())
      .def("compare", [](const Lab& l) {
        py::list rows;
        for (const auto& r : l.compare()) rows.append(record(r));
        return rows;
      });
}
