// SPDX-License-Identifier: Apache-2.0
//
// ilcp: scenario generation, training, evaluation and payload inspection.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ilcp/eval.hpp"
#include "ilcp/synthgen.hpp"
#include "ilcp/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ilcp;

#ifndef ILCP_VERSION
#define ILCP_VERSION "0.0.0"
#endif

namespace {

class UsageError : public Error {
public:
  using Error::Error;
};

std::string read_text(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A config file is either a bare config or a manifest written by an earlier
// run, whose "config" member is used.
json load_config(const std::string &path) {
  if (path.empty())
    return json::object();
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception &e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object())
    throw ConfigError(path + ": expected a JSON object");
  if (j.contains("command") && j.contains("config"))
    return j.at("config");
  return j;
}

std::string section(const json &j, const char *key) {
  return j.contains(key) ? j.at(key).dump() : std::string("{}");
}

std::optional<std::uint64_t> env_seed() {
  const char *s = std::getenv("ILCP_SEED");
  if (s == nullptr || *s == '\0')
    return std::nullopt;
  char *end = nullptr;
  const auto v = std::strtoull(s, &end, 10);
  if (*end != '\0')
    throw ConfigError(std::string("ILCP_SEED is not an unsigned integer: ") + s);
  return v;
}

json split_json(const SplitConfig &s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"segment_steps", s.segment_steps}, {"seed", s.seed}};
}

SplitConfig split_from(const json &j) {
  SplitConfig s;
  if (!j.contains("split"))
    return s;
  const auto &x = j.at("split");
  s.train = x.value("train", s.train);
  s.val = x.value("val", s.val);
  s.test = x.value("test", s.test);
  s.segment_steps = x.value("segment_steps", s.segment_steps);
  s.seed = x.value("seed", s.seed);
  return s;
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();
  json extra = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path &path) const {
    json j{{"command", command},
           {"config", config},
           {"seed", seed},
           {"inputs", inputs},
           {"outputs", outputs},
           {"tool_version", ILCP_VERSION}};
    for (const auto &[k, v] : extra.items())
      j[k] = v;
    j["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    diff::write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path ensure_dir(const std::string &dir) {
  const fs::path p(dir);
  fs::create_directories(p);
  return p;
}

// --- gen ------------------------------------------------------------------

struct GenArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> ues;
  std::optional<Step> steps;
};

int cmd_gen(const GenArgs &a) {
  Manifest m;
  m.command = "gen";
  auto c = synth::config_from_json(load_config(a.config).dump());
  if (a.seed)
    c.seed = *a.seed;
  if (a.ues)
    c.n_ues = *a.ues;
  if (a.steps)
    c.duration_steps = *a.steps;
  if (auto s = env_seed())
    c.seed = *s;
  c.validate();
  const Trace trace = synth::generate(c);
  const auto dir = ensure_dir(a.out);
  save_scenario(trace, dir);
  m.config = json::parse(synth::config_to_json(c));
  m.seed = c.seed;
  m.inputs["config"] = a.config;
  m.outputs = {{"trace", (dir / "trace.csv").string()}, {"topology", (dir / "topology.json").string()}};
  m.extra["handover_events"] = extract_handover_events(trace).size();
  m.write(dir / "manifest.json");
  std::cout << "wrote " << dir.string() << " (" << trace.steps.size() << " rows)\n";
  return 0;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string trace;
  std::string mode;
  bool robust = false;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool quiet = false;
};

json train_defaults() {
  return {{"model", json::parse(model::model_config_to_json({}))},
          {"train", json::parse(train::train_config_to_json({}))},
          {"split", split_json({})}};
}

int cmd_train(const TrainArgs &a) {
  Manifest m;
  m.command = "train";
  const json j = load_config(a.config);
  const auto mc = model::model_config_from_json(section(j, "model"));
  auto tc = train::train_config_from_json(section(j, "train"));
  const auto split = split_from(j);
  if (!a.mode.empty())
    tc.mode = train::train_mode_from_string(a.mode);
  if (a.robust)
    tc.robust = true;
  if (a.seed)
    tc.seed = *a.seed;
  if (a.epochs)
    tc.max_epochs = *a.epochs;
  if (auto s = env_seed())
    tc.seed = *s;
  tc.validate();
  mc.validate();

  const Trace trace = load_scenario(a.trace);
  const auto sp = split_trace(trace, split);
  train::Trainer trainer(sp.train, sp.val, fit_normalization(sp.train), tc, mc);
  auto fitted = train::fit(trainer, [&](const train::EpochStats &e) {
    if (!a.quiet)
      std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " val_acc " << e.val_acc << "\n"
                << std::flush;
  });
  const model::Model best(mc, std::move(fitted.best));

  model::CheckpointInfo info;
  info.mode = train::to_string(tc.mode);
  info.robust = tc.robust;
  info.epoch = fitted.best_epoch;
  info.seed = tc.seed;
  const fs::path ckpt(a.out);
  const fs::path dir = ckpt.has_parent_path() ? ckpt.parent_path() : fs::path(".");
  fs::create_directories(dir);
  diff::write_file_atomic(ckpt, model::save_checkpoint(best, trainer.stats(), info));
  diff::write_file_atomic(dir / "training_log.csv", train::training_log_csv(fitted.log, tc));

  m.config = {{"model", json::parse(model::model_config_to_json(mc))},
              {"train", json::parse(train::train_config_to_json(tc))},
              {"split", split_json(split)}};
  m.seed = tc.seed;
  m.inputs = {{"trace", a.trace}, {"config", a.config}};
  m.outputs = {{"checkpoint", ckpt.string()}, {"training_log", (dir / "training_log.csv").string()}};
  m.extra["checkpoint_mode"] = info.mode;
  m.extra["best_epoch"] = fitted.best_epoch;
  m.extra["epochs_run"] = fitted.log.size();
  if (tc.robust) {
    auto mix = json::parse(perturb::mixture_to_json(tc.mixture));
    std::ostringstream ratio;
    ratio << tc.mixture.clean_weight << ":" << 1.0 - tc.mixture.clean_weight;
    mix["ratio"] = ratio.str();
    m.extra["mixture"] = mix;
  }
  m.write(dir / "manifest.json");
  std::cout << "wrote " << ckpt.string() << " (best epoch " << fitted.best_epoch << ")\n";
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string config;
  std::string ckpt;
  std::string cold_ckpt;
  std::string trace;
  std::string modes;
  std::string perturb;
  std::string out = ".";
  std::string emit_payload;
  std::optional<std::uint64_t> seed;
  std::optional<int> bootstrap;
  std::optional<std::size_t> max_events;
  int latency_runs = 1000;
};

void emit_payload(const model::LoadedCheckpoint &ck, const Trace &trace, const eval::ExperimentConfig &c,
                  const fs::path &path) {
  const Trace test = split_trace(trace, c.split).test;
  const TraceIndex idx(test);
  auto ec = c.eval;
  ec.keep_payloads = true;
  ec.max_delta = 0;
  const auto all = extract_handover_events(idx);
  const auto events = eval::eligible_events(idx, all, ec);
  if (events.empty())
    throw Error("no handover event to emit a payload for");
  const std::vector<HandoverEvent> first{events.front()};
  const auto set = eval::run_learned(ck.model, ck.stats, idx, idx, first, model::StateMode::ilcp, ec);
  if (set.emitted.empty())
    throw Error("the replayed window emitted no payload");
  const auto &e = set.emitted.front();
  diff::write_file_atomic(path, std::span<const std::uint8_t>(e.payload));
  json values = json::array();
  for (float v : e.latent)
    values.push_back(v);
  diff::write_file_atomic(fs::path(path.string() + ".json"),
                          json{{"ue", e.ue.value}, {"t", e.t}, {"values", values}}.dump(2) + "\n");
}

int cmd_eval(const EvalArgs &a) {
  Manifest m;
  m.command = "eval";
  auto c = eval::experiment_config_from_json(load_config(a.config).dump());
  if (!a.modes.empty()) {
    try {
      c.modes = eval::modes_from_list(a.modes);
    } catch (const ConfigError &e) {
      throw UsageError(e.what());
    }
  }
  if (!a.perturb.empty()) {
    if (a.perturb == "all")
      c.sweeps = {"noise", "blockage", "ssb"};
    else if (a.perturb == "noise" || a.perturb == "blockage" || a.perturb == "ssb")
      c.sweeps = {a.perturb};
    else if (fs::exists(a.perturb))
      c.perturb = perturb::perturb_config_from_json(read_text(a.perturb));
    else
      throw UsageError("--perturb expects noise, blockage, ssb, all or a perturbation config file");
  }
  if (a.seed)
    c.eval.seed = *a.seed;
  if (a.bootstrap)
    c.eval.bootstrap = *a.bootstrap;
  if (a.max_events)
    c.max_events = *a.max_events;
  if (auto s = env_seed())
    c.eval.seed = *s;
  c.eval.validate();

  std::optional<model::LoadedCheckpoint> main, cold;
  if (!a.ckpt.empty())
    main.emplace(model::load_checkpoint(fs::path(a.ckpt)));
  if (!a.cold_ckpt.empty())
    cold.emplace(model::load_checkpoint(fs::path(a.cold_ckpt)));
  const bool learned = std::any_of(c.modes.begin(), c.modes.end(), [](eval::Mode x) { return x != eval::Mode::rule; });
  if (learned && !main)
    throw UsageError("learned modes need --ckpt");

  const Trace trace = load_scenario(a.trace);
  const auto dir = ensure_dir(a.out);
  eval::Predictor p;
  if (main)
    p = {&main->model, &main->stats};
  std::optional<eval::Predictor> pc;
  if (cold)
    pc = eval::Predictor{&cold->model, &cold->stats};
  const auto rep = eval::run_experiment(c, trace, p, pc);

  diff::write_file_atomic(dir / "report.json", eval::report_to_json(rep, c));
  diff::write_file_atomic(dir / "postho_curve.csv", eval::postho_curve_csv(rep));
  m.outputs = {{"report", (dir / "report.json").string()}, {"postho_curve", (dir / "postho_curve.csv").string()}};
  if (!rep.sweep.empty()) {
    diff::write_file_atomic(dir / "perturb_sweep.csv", eval::perturb_sweep_csv(rep));
    m.outputs["perturb_sweep"] = (dir / "perturb_sweep.csv").string();
  }
  if (main && a.latency_runs > 0) {
    const auto lat = eval::latency_benchmark(main->model, a.latency_runs, c.eval.seed);
    diff::write_file_atomic(dir / "latency.json", eval::latency_to_json(lat));
    m.outputs["latency"] = (dir / "latency.json").string();
  }
  if (!a.emit_payload.empty()) {
    if (!main)
      throw UsageError("--emit-payload needs --ckpt");
    emit_payload(*main, trace, c, a.emit_payload);
    m.outputs["payload"] = a.emit_payload;
  }

  m.config = json::parse(eval::experiment_config_to_json(c));
  m.seed = c.eval.seed;
  m.inputs = {{"trace", a.trace}, {"checkpoint", a.ckpt}, {"cold_checkpoint", a.cold_ckpt}, {"config", a.config}};
  m.extra["test_events"] = rep.test_events;
  m.extra["payloads"] = rep.payloads;
  m.extra["payload_size_violations"] = rep.payload_size_violations;
  m.write(dir / "manifest.json");
  for (const auto &mr : rep.modes)
    std::cout << eval::to_string(mr.mode) << ": Acc@0 " << mr.acc0.point << " HOF " << mr.hof.point << "\n";
  return rep.payload_size_violations == 0 ? 0 : 1;
}

// --- xn-inspect -----------------------------------------------------------

int cmd_inspect(const std::string &path) {
  const std::string bytes = read_text(path);
  if (bytes.size() != xn::kPayloadBytes)
    throw xn::PayloadError("payload must be " + std::to_string(xn::kPayloadBytes) + " bytes, got " +
                           std::to_string(bytes.size()));
  std::cout.precision(9);
  for (std::size_t i = 0; i < xn::kLatentDim; ++i) {
    float v = 0.0F;
    std::memcpy(&v, bytes.data() + i * sizeof(float), sizeof(float));
    std::cout << i << " " << v << "\n";
  }
  const auto *u = reinterpret_cast<const std::uint8_t *>(bytes.data());
  xn::deserialize_latent(std::span<const std::uint8_t>(u, bytes.size()));
  std::cout << "valid\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Latent context persistence for learned handover prediction"};
  app.set_version_flag("--version", ILCP_VERSION);
  app.require_subcommand(1);

  GenArgs ga;
  auto *gen = app.add_subcommand("gen", "Generate a synthetic scenario (trace.csv, topology.json)");
  gen->add_option("--config", ga.config, "Scenario config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", ga.out, "Output directory")->required();
  gen->add_option("--seed", ga.seed, "Scenario seed");
  gen->add_option("--ues", ga.ues, "Number of UEs");
  gen->add_option("--steps", ga.steps, "Trace length in 10 ms steps");
  gen->footer("Defaults:\n" + synth::config_to_json({}));

  TrainArgs ta;
  auto *trn = app.add_subcommand("train", "Train a handover predictor");
  trn->add_option("--config", ta.config, "Config with model, train and split sections (JSON)")
      ->check(CLI::ExistingFile);
  trn->add_option("--trace", ta.trace, "Scenario directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--mode", ta.mode, "ilcp or zk")->check(CLI::IsMember({"ilcp", "zk", "zero_knowledge"}));
  trn->add_flag("--robust", ta.robust, "Train on the clean/impaired mixture");
  trn->add_option("--out", ta.out, "Checkpoint path")->required();
  trn->add_option("--seed", ta.seed, "Training seed");
  trn->add_option("--epochs", ta.epochs, "Maximum epochs");
  trn->add_flag("--quiet", ta.quiet, "No per-epoch output");
  trn->footer("Defaults:\n" + train_defaults().dump(2));

  EvalArgs ea;
  auto *evl = app.add_subcommand("eval", "Evaluate checkpoints and the A3/A5 rule");
  evl->add_option("--config", ea.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  evl->add_option("--ckpt", ea.ckpt, "ILCP checkpoint")->check(CLI::ExistingFile);
  evl->add_option("--cold-ckpt", ea.cold_ckpt, "Checkpoint for the cold mode (zero-knowledge)")
      ->check(CLI::ExistingFile);
  evl->add_option("--trace", ea.trace, "Scenario directory")->required()->check(CLI::ExistingDirectory);
  evl->add_option("--modes", ea.modes, "Comma-separated subset of cold,warm,ilcp,rule");
  evl->add_option("--perturb", ea.perturb, "noise, blockage, ssb, all, or a perturbation config file");
  evl->add_option("--out", ea.out, "Output directory")->capture_default_str();
  evl->add_option("--emit-payload", ea.emit_payload, "Write the first test-split payload to this file");
  evl->add_option("--seed", ea.seed, "Bootstrap seed");
  evl->add_option("--bootstrap", ea.bootstrap, "Bootstrap resamples");
  evl->add_option("--max-events", ea.max_events, "Evenly spaced subset of test events (0 = all)");
  evl->add_option("--latency-runs", ea.latency_runs, "Latency benchmark runs (0 = skip)")->capture_default_str();
  evl->footer("Defaults:\n" + eval::experiment_config_to_json({}));

  std::string payload_path;
  auto *ins = app.add_subcommand("xn-inspect", "Decode a 128-byte latent payload");
  ins->add_option("payload", payload_path, "Payload file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e);
  }

  try {
    if (*gen)
      return cmd_gen(ga);
    if (*trn)
      return cmd_train(ta);
    if (*evl)
      return cmd_eval(ea);
    return cmd_inspect(payload_path);
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
