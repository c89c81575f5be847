// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// writes the experiment reports it relied on to the artifact directory
// (first argument, default ./acceptance_artifacts).
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include <sys/wait.h>

#include <json.hpp>

#include "ilcp/eval.hpp"
#include "ilcp/synthgen.hpp"
#include "ilcp/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ilcp;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

void log(const std::string &msg) { std::cerr << "[acceptance] " << msg << std::endl; }

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put(const fs::path &p, const std::string &text) { std::ofstream(p, std::ios::binary) << text; }

// --- shared scenario and checkpoints ----------------------------------------

synth::ScenarioConfig scenario_config() {
  synth::ScenarioConfig c; // 3x3 grid
  c.n_ues = 64;
  c.duration_steps = 30000;
  c.seed = 1;
  return c;
}

train::TrainConfig train_config(train::TrainMode mode, bool robust) {
  train::TrainConfig c;
  c.mode = mode;
  c.robust = robust;
  c.seed = 1;
  c.max_epochs = 40;
  return c;
}

struct World {
  Trace trace;
  TraceSplits splits;
  NormalizationStats stats;
  std::unique_ptr<model::Model> ilcp, zk, robust;
  double train_seconds = 0.0;
  std::map<std::string, int> best_epoch;
};

std::unique_ptr<model::Model> train_one(const World &w, train::TrainMode mode, bool robust, const std::string &tag,
                                        const fs::path &out, std::map<std::string, int> &best) {
  const auto tc = train_config(mode, robust);
  const model::ModelConfig mc;
  train::Trainer t(w.splits.train, w.splits.val, w.stats, tc, mc);
  auto r = train::fit(t, [&](const train::EpochStats &e) {
    log(tag + " epoch " + std::to_string(e.epoch) + " loss " + fmt(e.train_loss) + " val_acc " + fmt(e.val_acc, 2));
  });
  best[tag] = r.best_epoch;
  put(out / (tag + "_training_log.csv"), train::training_log_csv(r.log, tc));
  auto m = std::make_unique<model::Model>(mc, std::move(r.best));
  model::CheckpointInfo info{train::to_string(mode), robust, r.best_epoch, tc.seed};
  const auto bytes = model::save_checkpoint(*m, w.stats, info);
  std::ofstream(out / (tag + ".ckpt"), std::ios::binary)
      .write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return m;
}

// --- criterion 1 ----------------------------------------------------------

Outcome gradient_check() {
  const auto start = Clock::now();
  synth::ScenarioConfig sc;
  sc.n_ues = 12;
  sc.duration_steps = 6000;
  sc.seed = 5;
  const Trace tr = synth::generate(sc);
  SplitConfig split;
  split.segment_steps = 1000;
  const auto sp = split_trace(tr, split);
  const auto stats = fit_normalization(sp.train);
  const TraceIndex idx(sp.train);

  model::ModelConfig mc;
  mc.d = 16;
  mc.heads = 2;
  mc.layers = 2;
  mc.candidates = 4;
  mc.cell_rows = 16;

  std::vector<HandoverEvent> usable;
  for (const auto &e : extract_handover_events(idx)) {
    const auto run = idx.run_of(e.ue, e.t_star);
    if (run && e.t_star - run->t_begin >= 20 && run->t_end - e.t_star >= 40)
      usable.push_back(e);
  }
  if (usable.size() < 3)
    return {false, "too few handovers in the gradient-check scenario"};

  double worst = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  bool all = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 pick(seed);
    std::vector<train::StreamSpec> streams;
    for (int b = 0; b < 3; ++b) {
      const auto &e = usable[pick() % usable.size()];
      streams.push_back({e.ue, e.t_star - 4 - static_cast<Step>(pick() % 8), nullptr});
    }
    const auto w = train::make_window(idx, stats, streams, 0, 16, mc.horizon, mc.candidates);
    model::Model m(mc, seed);
    const diff::Mat h0 = diff::Mat::Zero(static_cast<Eigen::Index>(streams.size()), mc.d);
    diff::GradCheckOptions opt;
    opt.step = 1e-3;
    opt.tolerance = 1e-4;
    opt.max_entries_per_param = 8;
    opt.seed = seed;
    opt.freeze_branches = true;
    const auto rep = diff::check_gradients(
        m.params(),
        [&](diff::Tape &tape) {
          diff::Rng rng(seed);
          return train::window_loss(m, tape, w, h0, train::TrainMode::ilcp, true, rng).loss;
        },
        opt);
    std::size_t handovers = 0;
    for (auto f : w.handover)
      handovers += f ? 1 : 0;
    all = all && rep.passed && handovers > 0;
    worst = std::max(worst, rep.max_rel_error);
    for (const auto &e : rep.entries)
      checked += e.checked;
    kinks += rep.kinks;
  }
  const double secs = seconds_since(start);
  return {all && worst < 1e-4 && secs < 120.0,
          "5 seeds, " + std::to_string(checked) + " entries (" + std::to_string(kinks) +
              " with relu branches held at the base point), max rel error " + std::to_string(worst) + ", " +
              fmt(secs, 1) + " s"};
}

// --- criterion 2 ----------------------------------------------------------

Outcome codec(const model::Model &m, std::size_t experiment_payloads, std::size_t violations) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> normal(0.0F, 3.0F);
  std::size_t exact = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    xn::Latent z;
    for (auto &v : z) {
      if (i % 2 == 0) {
        v = normal(rng);
      } else {
        std::uint32_t bits = 0;
        do {
          bits = static_cast<std::uint32_t>(rng());
          std::memcpy(&v, &bits, sizeof v);
        } while (!std::isfinite(v));
      }
    }
    const auto p = xn::serialize_latent(z);
    const auto back = xn::deserialize_latent(p);
    exact += p.size() == 128 && std::memcmp(back.data(), z.data(), sizeof z) == 0 ? 1 : 0;
  }

  std::mt19937_64 r2(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  const int d = m.config().d;
  int identical = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    diff::Mat h(1, d), x(1, d), e(m.config().candidates, d);
    for (auto *mat : {&h, &x, &e})
      for (Eigen::Index k = 0; k < mat->size(); ++k)
        mat->data()[k] = nd(r2);
    diff::Mask mask = diff::Mask::Ones(1, m.config().candidates);
    mask(0, m.config().candidates - 1) = 0;
    const auto a = model::ilcp_handover_inference(m, h, x, e, mask, true);
    const auto b = model::ilcp_handover_inference(m, h, x, e, mask, false);
    identical += a.slot == b.slot && a.scores == b.scores && a.h_new == b.h_new ? 1 : 0;
  }
  const bool pass = exact == n && violations == 0 && experiment_payloads > 0 && identical == trials;
  return {pass, std::to_string(exact) + "/" + std::to_string(n) + " latents bit-exact; " +
                    std::to_string(experiment_payloads) + " experiment payloads, " + std::to_string(violations) +
                    " size violations; codec bypass identical in " + std::to_string(identical) + "/" +
                    std::to_string(trials)};
}

// --- criterion 3 ----------------------------------------------------------

Outcome rule_oracle(const World &w, double clean_rule_hof) {
  rules::RuleConfig cfg;
  cfg.hysteresis_db = 3.0;
  cfg.ttt_steps = 4;
  cfg.l3_k = 0.0;
  rules::RuleState s;
  std::optional<Step> fired;
  for (Step t = 0; t < 40 && !fired; ++t) {
    const rules::Measurement m[] = {{CellId(0), -90.0}, {CellId(1), -100.0 + static_cast<double>(t)}};
    if (s.step(cfg, m))
      fired = t;
  }

  double f = rules::l3_filter_step(std::nullopt, 0.0, 4.0);
  std::vector<double> resp;
  for (int i = 0; i < 3; ++i)
    resp.push_back(f = rules::l3_filter_step(f, 1.0, 4.0));
  const bool l3 = resp == std::vector<double>{0.5, 0.75, 0.875};

  Trace relabeled = w.trace;
  rules::relabel(relabeled, rules::run_rule(w.trace, scenario_config().rule));
  const bool labels = relabeled.steps == w.trace.steps;

  const bool pass = fired == 17 && l3 && labels && clean_rule_hof == 0.0;
  return {pass, "ramp fires at t=" + (fired ? std::to_string(*fired) : std::string("never")) + "; L3 step " +
                    fmt(resp[0]) + "/" + fmt(resp[1]) + "/" + fmt(resp[2]) + "; generator labels " +
                    (labels ? "reproduced" : "differ") + "; clean rule HOF " + fmt(clean_rule_hof, 2) + "%"};
}

// --- criterion 8 ----------------------------------------------------------

Outcome bootstrap() {
  const eval::EvalConfig defaults;
  const auto flat = eval::bootstrap_ci(std::vector<double>(40, 1.0), defaults.bootstrap, defaults.level, 1);
  const auto means = eval::bootstrap_means(std::vector<double>{0.0, 1.0}, 100000, 8);
  std::map<double, int> hist;
  for (double m : means)
    ++hist[m];
  const double p0 = hist[0.0] / 1e5, p5 = hist[0.5] / 1e5, p1 = hist[1.0] / 1e5;
  const bool pass = flat.lo == flat.hi && hist.size() == 3 && std::abs(p0 - 0.25) < 0.01 &&
                    std::abs(p5 - 0.5) < 0.01 && std::abs(p1 - 0.25) < 0.01 && defaults.bootstrap == 1000 &&
                    defaults.level == 95.0;
  return {pass, "constant CI width " + fmt(flat.hi - flat.lo, 6) + "; {0,1} resample mass " + fmt(p0) + "/" +
                    fmt(p5) + "/" + fmt(p1) + "; B=" + std::to_string(defaults.bootstrap) + " at " +
                    fmt(defaults.level, 0) + "%"};
}

// --- criterion 9 ----------------------------------------------------------

int run_cli(const fs::path &dir, const std::string &args) {
  const std::string cmd =
      "cd '" + dir.string() + "' && '" + ILCP_BIN + "' " + args + " >> '" + (dir / "cli.log").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Manifests agree once the wall clock, the config-file path and output paths are dropped.
bool same_manifest(const fs::path &a, const fs::path &b) {
  auto ja = json::parse(slurp(a)), jb = json::parse(slurp(b));
  for (auto *j : {&ja, &jb}) {
    j->erase("wall_clock_s");
    (*j)["inputs"].erase("config");
    j->erase("outputs");
  }
  return ja == jb;
}

Outcome determinism(const fs::path &root) {
  const fs::path dir = root / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  put(dir / "scenario.json", R"({"n_ues": 16, "duration_steps": 6000, "seed": 4})");
  put(dir / "train.json", R"({"model": {"d": 32, "heads": 2, "layers": 2, "candidates": 8, "cell_rows": 16},
    "train": {"streams": 8, "chunks_per_epoch": 2, "max_epochs": 2, "lr": 0.003},
    "split": {"segment_steps": 1000}})");
  put(dir / "eval.json", R"({"split": {"segment_steps": 1000}, "eval": {"bootstrap": 200}, "max_events": 40})");

  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string &what) {
    if (!ok)
      bad.push_back(what);
  };
  expect(run_cli(dir, "gen --config scenario.json --out g1") == 0, "gen");
  expect(run_cli(dir, "gen --config g1/manifest.json --out g2") == 0, "gen from manifest");
  for (const char *f : {"trace.csv", "topology.json"})
    expect(slurp(dir / "g1" / f) == slurp(dir / "g2" / f), std::string("gen ") + f);
  expect(same_manifest(dir / "g1/manifest.json", dir / "g2/manifest.json"), "gen manifest");

  for (const char *mode : {"ilcp", "zk"}) {
    const std::string a = std::string("t_") + mode + "1", b = std::string("t_") + mode + "2";
    expect(run_cli(dir, "train --config train.json --trace g1 --quiet --robust --mode " + std::string(mode) +
                            " --out " + a + "/m.ckpt") == 0,
           std::string("train ") + mode);
    expect(run_cli(dir, "train --config " + a + "/manifest.json --trace g1 --quiet --out " + b + "/m.ckpt") == 0,
           std::string("train from manifest ") + mode);
    for (const char *f : {"m.ckpt", "training_log.csv"})
      expect(slurp(dir / a / f) == slurp(dir / b / f), std::string("train ") + mode + " " + f);
    expect(same_manifest(dir / a / "manifest.json", dir / b / "manifest.json"), std::string("train manifest ") + mode);
  }

  const std::string ev = "eval --config eval.json --trace g1 --ckpt t_ilcp1/m.ckpt --cold-ckpt t_zk1/m.ckpt "
                         "--modes cold,warm,ilcp,rule --perturb all --latency-runs 0 --emit-payload e1/p.bin --out e1";
  expect(run_cli(dir, ev) == 0, "eval");
  expect(run_cli(dir, "eval --config e1/manifest.json --trace g1 --ckpt t_ilcp1/m.ckpt --cold-ckpt t_zk1/m.ckpt "
                      "--latency-runs 0 --emit-payload e2/p.bin --out e2") == 0,
         "eval from manifest");
  for (const char *f : {"report.json", "postho_curve.csv", "perturb_sweep.csv", "p.bin", "p.bin.json"})
    expect(!slurp(dir / "e1" / f).empty() && slurp(dir / "e1" / f) == slurp(dir / "e2" / f), std::string("eval ") + f);

  std::string detail = "gen, train (ilcp, zk) and eval rerun from their manifests";
  if (bad.empty())
    return {true, detail + ": all outputs byte-identical"};
  for (const auto &b : bad)
    detail += "; mismatch: " + b;
  return {false, detail};
}

Outcome guarded(const std::function<Outcome()> &f) {
  try {
    return f();
  } catch (const std::exception &e) {
    return {false, std::string("error: ") + e.what()};
  }
}

} // namespace

int main(int argc, char **argv) {
  const fs::path out = fs::absolute(argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts"));
  fs::create_directories(out);
  std::map<int, Outcome> res;
  std::map<int, std::string> title{{1, "gradient correctness"},   {2, "codec exactness"},
                                   {3, "rule-engine oracle"},     {4, "cold-start gap (ilcp - cold, delta 5..25)"},
                                   {5, "robustness under noise"}, {6, "ping-pong ordering"},
                                   {7, "handover inference latency"}, {8, "bootstrap correctness"},
                                   {9, "determinism from manifests"}};

  log("criterion 1");
  res[1] = guarded(gradient_check);
  log("criterion 8");
  res[8] = guarded(bootstrap);
  log("criterion 9");
  res[9] = guarded([&] { return determinism(out); });

  World w;
  std::optional<eval::MetricsReport> main_rep, robust_rep;
  std::size_t payloads = 0, violations = 0;
  const auto c4_start = Clock::now();
  try {
    log("generating scenario");
    w.trace = synth::generate(scenario_config());
    w.splits = split_trace(w.trace, SplitConfig{});
    w.stats = fit_normalization(w.splits.train);
    const auto t0 = Clock::now();
    w.ilcp = train_one(w, train::TrainMode::ilcp, false, "ilcp", out, w.best_epoch);
    w.zk = train_one(w, train::TrainMode::zero_knowledge, false, "zk", out, w.best_epoch);
    w.train_seconds = seconds_since(t0);

    log("main experiment");
    eval::ExperimentConfig ec;
    ec.modes = {eval::Mode::ilcp, eval::Mode::cold, eval::Mode::warm, eval::Mode::rule};
    main_rep = eval::run_experiment(ec, w.trace, {w.ilcp.get(), &w.stats}, eval::Predictor{w.zk.get(), &w.stats});
    put(out / "report_main.json", eval::report_to_json(*main_rep, ec));
    put(out / "postho_curve.csv", eval::postho_curve_csv(*main_rep));
    payloads += main_rep->payloads;
    violations += main_rep->payload_size_violations;
  } catch (const std::exception &e) {
    log(std::string("main experiment failed: ") + e.what());
    res[4] = res[6] = {false, std::string("error: ") + e.what()};
  }
  const double c4_secs = seconds_since(c4_start);

  if (main_rep) {
    const auto &r = *main_rep;
    res[4] = guarded([&]() -> Outcome {
      if (!r.ilcp_minus_cold)
        return {false, "no paired gap computed"};
      const auto &g = *r.ilcp_minus_cold;
      const bool pass = g.point > 0.0 && g.lo > 0.0 && r.test_events >= 200 && c4_secs <= 1800.0;
      return {pass, "gap " + fmt(g.point, 2) + " pp, 95% CI [" + fmt(g.lo, 2) + ", " + fmt(g.hi, 2) + "] over " +
                        std::to_string(r.test_events) + " test events; ilcp " + fmt(r.find(eval::Mode::ilcp)->acc_5_25.point, 2) +
                        "%, cold " + fmt(r.find(eval::Mode::cold)->acc_5_25.point, 2) + "%; " + fmt(c4_secs, 0) +
                        " s including training"};
    });
    res[6] = guarded([&]() -> Outcome {
      const auto il = r.find(eval::Mode::ilcp)->ping_pong, zk = r.find(eval::Mode::cold)->ping_pong;
      if (!il || !zk)
        return {false, "closed-loop rates missing"};
      return {*il <= *zk, "closed-loop ping-pong ilcp " + fmt(*il, 2) + "% vs zero-knowledge " + fmt(*zk, 2) +
                              "% (rule " + fmt(r.find(eval::Mode::rule)->ping_pong.value_or(NAN), 2) + "%)"};
    });
  }

  try {
    log("training robust checkpoint");
    w.robust = train_one(w, train::TrainMode::ilcp, true, "robust", out, w.best_epoch);
    log("robustness sweeps");
    eval::ExperimentConfig rc;
    rc.modes = {eval::Mode::ilcp, eval::Mode::rule};
    rc.closed_loop = false;
    rc.sweeps = {"noise", "blockage", "ssb"};
    robust_rep = eval::run_experiment(rc, w.trace, {w.robust.get(), &w.stats});
    put(out / "report_robust.json", eval::report_to_json(*robust_rep, rc));
    put(out / "perturb_sweep.csv", eval::perturb_sweep_csv(*robust_rep));
    payloads += robust_rep->payloads;
    violations += robust_rep->payload_size_violations;
  } catch (const std::exception &e) {
    log(std::string("robust experiment failed: ") + e.what());
    res[5] = {false, std::string("error: ") + e.what()};
  }
  if (robust_rep) {
    res[5] = guarded([&]() -> Outcome {
      const auto &r = *robust_rep;
      const auto cell = [&](double level, eval::Mode m) {
        const auto *c = r.sweep_cell("noise", level, m);
        if (c == nullptr)
          throw Error("sweep cell missing");
        return c->hof.point;
      };
      const auto clean = [&](eval::Mode m) {
        const auto *c = r.find(m);
        if (c == nullptr)
          throw Error("clean mode result missing");
        return c->hof.point;
      };
      const double rule_clean = clean(eval::Mode::rule), il_clean = clean(eval::Mode::ilcp);
      const double rule12 = cell(12, eval::Mode::rule), il12 = cell(12, eval::Mode::ilcp);
      const bool grids = r.sweep.size() == 3 * 5 * 2;
      const bool pass = grids && rule12 >= 5.0 * rule_clean && rule12 > rule_clean && il12 <= 1.5 * il_clean;
      return {pass, "rule HOF " + fmt(rule_clean, 2) + "% clean, " + fmt(cell(0, eval::Mode::rule), 2) +
                        "% at 0 dB, " + fmt(rule12, 2) + "% at 12 dB; robust ilcp HOF " + fmt(il_clean, 2) +
                        "% clean, " + fmt(cell(0, eval::Mode::ilcp), 2) + "% at 0 dB, " + fmt(il12, 2) +
                        "% at 12 dB; " + std::to_string(r.sweep.size()) + " sweep cells"};
    });
  }

  const model::Model fallback(model::ModelConfig{}, 7);
  const model::Model &latency_model = w.ilcp ? *w.ilcp : fallback;
  log("criterion 7");
  res[7] = guarded([&]() -> Outcome {
    const auto lat = eval::latency_benchmark(latency_model, 1000, 7);
    put(out / "latency.json", eval::latency_to_json(lat));
    return {lat.stats.n == 1000 && lat.stats.p99_ms < 10.0 && latency_model.config().d == 128,
            "p50 " + fmt(lat.stats.p50_ms) + " ms, p99 " + fmt(lat.stats.p99_ms) + " ms over " +
                std::to_string(lat.stats.n) + " runs at d=" + std::to_string(latency_model.config().d)};
  });
  res[2] = guarded([&] { return codec(latency_model, payloads, violations); });
  res[3] = guarded([&]() -> Outcome {
    if (!main_rep)
      return {false, "main experiment unavailable"};
    return rule_oracle(w, main_rep->find(eval::Mode::rule)->hof.point);
  });

  json summary = json::object();
  int passed = 0;
  for (int k = 1; k <= 9; ++k) {
    const auto &o = res[k];
    passed += o.pass ? 1 : 0;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " " << title[k] << ": " << o.detail << "\n";
    summary[std::to_string(k)] = {{"pass", o.pass}, {"detail", o.detail}};
  }
  summary["best_epoch"] = w.best_epoch;
  summary["training_seconds"] = w.train_seconds;
  put(out / "acceptance.json", summary.dump(2) + "\n");
  std::cout << passed << "/9 criteria passed" << std::endl;
  return 0;
}
