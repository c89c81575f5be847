// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <set>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ilcp/eval.hpp"
#include "ilcp/synthgen.hpp"

namespace py = pybind11;
using namespace ilcp;

namespace {

py::bytes to_bytes(std::span<const std::uint8_t> b) {
  return py::bytes(reinterpret_cast<const char *>(b.data()), b.size());
}

std::span<const std::uint8_t> as_span(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t *>(s.data()), s.size()};
}

py::dict scenario_summary(const std::string &dir) {
  const Trace trace = load_scenario(dir);
  std::set<std::uint32_t> ues;
  Step last = 0;
  for (const auto &r : trace.steps) {
    ues.insert(r.ue.value);
    last = std::max(last, r.t);
  }
  py::dict d;
  d["rows"] = trace.steps.size();
  d["ues"] = ues.size();
  d["cells"] = trace.topology.cells.size();
  d["steps"] = trace.steps.empty() ? 0 : last + 1;
  d["handovers"] = extract_handover_events(trace).size();
  return d;
}

class Checkpoint {
public:
  explicit Checkpoint(const std::string &path) : ck_(model::load_checkpoint(std::filesystem::path(path))) {}

  std::string mode() const { return ck_.info.mode; }
  bool robust() const { return ck_.info.robust; }
  int epoch() const { return ck_.info.epoch; }
  std::string model_config() const { return model::model_config_to_json(ck_.model.config()); }

  py::dict latency(int runs, std::uint64_t seed) const {
    py::gil_scoped_release release;
    const auto r = eval::latency_benchmark(ck_.model, runs, seed);
    py::gil_scoped_acquire acquire;
    py::dict d;
    d["n"] = r.stats.n;
    d["p50_ms"] = r.stats.p50_ms;
    d["p95_ms"] = r.stats.p95_ms;
    d["p99_ms"] = r.stats.p99_ms;
    d["over_budget"] = r.over_budget;
    return d;
  }

  const model::LoadedCheckpoint &get() const { return ck_; }

private:
  model::LoadedCheckpoint ck_;
};

std::string evaluate(const std::string &config, const std::string &trace_dir, const Checkpoint *main,
                     const Checkpoint *cold) {
  const auto c = eval::experiment_config_from_json(config);
  const Trace trace = load_scenario(trace_dir);
  eval::Predictor p;
  if (main != nullptr)
    p = {&main->get().model, &main->get().stats};
  std::optional<eval::Predictor> pc;
  if (cold != nullptr)
    pc = eval::Predictor{&cold->get().model, &cold->get().stats};
  py::gil_scoped_release release;
  return eval::report_to_json(eval::run_experiment(c, trace, p, pc), c);
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Latent context persistence for learned handover prediction";
  m.attr("PAYLOAD_BYTES") = xn::kPayloadBytes;
  m.attr("LATENT_DIM") = xn::kLatentDim;

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<xn::PayloadError>(m, "PayloadError", PyExc_ValueError);

  m.def(
      "serialize_latent", [](const xn::Latent &z) { return to_bytes(xn::serialize_latent(z)); }, py::arg("values"));
  m.def(
      "deserialize_latent", [](py::bytes b) { return xn::deserialize_latent(as_span(std::string_view(b))); },
      py::arg("payload"));

  m.def(
      "bootstrap_ci",
      [](const std::vector<double> &v, int resamples, double level, std::uint64_t seed) {
        const auto ci = eval::bootstrap_ci(v, resamples, level, seed);
        return py::make_tuple(ci.point, ci.lo, ci.hi);
      },
      py::arg("values"), py::arg("resamples") = 1000, py::arg("level") = 95.0, py::arg("seed") = 1);
  m.def("l3_coefficient", &rules::l3_coefficient, py::arg("k"));

  m.def("default_scenario_config", [] { return synth::config_to_json({}); });
  m.def("default_experiment_config", [] { return eval::experiment_config_to_json({}); });
  m.def(
      "generate",
      [](const std::string &config, const std::string &out) {
        const auto c = synth::config_from_json(config);
        c.validate();
        const Trace t = synth::generate(c);
        std::filesystem::create_directories(out);
        save_scenario(t, out);
      },
      py::arg("config"), py::arg("out_dir"));
  m.def("scenario_summary", &scenario_summary, py::arg("directory"));

  py::class_<Checkpoint>(m, "Checkpoint")
      .def(py::init<const std::string &>(), py::arg("path"))
      .def_property_readonly("mode", &Checkpoint::mode)
      .def_property_readonly("robust", &Checkpoint::robust)
      .def_property_readonly("epoch", &Checkpoint::epoch)
      .def_property_readonly("model_config", &Checkpoint::model_config)
      .def("latency", &Checkpoint::latency, py::arg("runs") = 1000, py::arg("seed") = 1);

  m.def("evaluate", &evaluate, py::arg("config"), py::arg("trace_dir"), py::arg("checkpoint") = nullptr,
        py::arg("cold_checkpoint") = nullptr);
}
