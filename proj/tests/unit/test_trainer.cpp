// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ilcp/eval.hpp"
#include "ilcp/synthgen.hpp"
#include "ilcp/trainer.hpp"

using namespace ilcp;
using namespace ilcp::train;

namespace {

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 1;
  c.latent = 32;
  c.candidates = 4;
  c.cell_rows = 16;
  return c;
}

struct Scenario {
  Trace full;
  TraceSplits splits;
  NormalizationStats stats;
};

const Scenario &two_cell() {
  static const Scenario s = [] {
    synth::ScenarioConfig c;
    c.grid_rows = 1;
    c.grid_cols = 2;
    c.n_ues = 8;
    c.duration_steps = 6000;
    c.seed = 3;
    Scenario out;
    out.full = synth::generate(c);
    SplitConfig sc;
    sc.segment_steps = 1000;
    out.splits = split_trace(out.full, sc);
    out.stats = fit_normalization(out.splits.train);
    return out;
  }();
  return s;
}

TrainConfig small_train(TrainMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.streams = 8;
  c.chunks_per_epoch = 3;
  c.optimizer.lr = 3e-3;
  c.seed = 21;
  return c;
}

// One parameter "w" holding a 1x1 value.
diff::ParamStore scalar_store(double w) {
  diff::ParamStore p;
  p.add("w", 1, 1).value(0, 0) = w;
  return p;
}

// A window for one UE around its first handover in the training split.
Window handover_window(const TraceIndex &index, const NormalizationStats &stats, bool with_handover) {
  const auto events = extract_handover_events(index);
  for (const auto &e : events) {
    const auto run = index.run_of(e.ue, e.t_star);
    if (!run || e.t_star - run->t_begin < 40 || run->t_end - e.t_star < 60)
      continue;
    const Step begin = with_handover ? e.t_star - 5 : e.t_star - 30;
    const StreamSpec s{e.ue, begin, nullptr};
    return make_window(index, stats, std::span(&s, 1), 0, 16, 10, tiny_model().candidates);
  }
  throw Error("no usable handover");
}

double grad_norm(const Model &m, const std::string &name) { return m.params().get(name).grad.norm(); }

} // namespace

TEST(AdamW, ZeroGradientAndDecayLeavesParameters) {
  auto p = scalar_store(0.7);
  p[0].grad = diff::Mat::Zero(1, 1);
  OptimizerState st;
  AdamWConfig c;
  c.weight_decay = 0.0;
  adamw_step(p, st, c);
  EXPECT_EQ(p[0].value(0, 0), 0.7);
}

TEST(AdamW, SingleStepOnSquare) {
  auto p = scalar_store(1.0);
  p[0].grad = diff::Mat::Constant(1, 1, 2.0); // d(w^2)/dw at w = 1
  OptimizerState st;
  AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.0;
  adamw_step(p, st, c);
  const double m_hat = (0.1 * 2.0) / 0.1;
  const double v_hat = (0.001 * 4.0) / 0.001;
  EXPECT_NEAR(p[0].value(0, 0), 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-9);
}

TEST(AdamW, SecondStepUsesBiasCorrection) {
  auto p = scalar_store(1.0);
  OptimizerState st;
  AdamWConfig c;
  c.lr = 0.01;
  c.weight_decay = 0.0;
  double w = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = 2.0 * w;
    p[0].grad = diff::Mat::Constant(1, 1, g);
    adamw_step(p, st, c);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.01 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p[0].value(0, 0), w, 1e-12);
  EXPECT_EQ(st.step, 2u);
}

TEST(AdamW, DecoupledDecayOnly) {
  auto p = scalar_store(1.0);
  p[0].grad = diff::Mat::Zero(1, 1);
  OptimizerState st;
  AdamWConfig c; // lr 3e-4, wd 1e-4
  adamw_step(p, st, c);
  EXPECT_NEAR(1.0 - p[0].value(0, 0), 3e-8, 1e-15);
  EXPECT_EQ(st.m[0](0, 0), 0.0);
  EXPECT_EQ(st.v[0](0, 0), 0.0);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  diff::ParamStore p;
  p.add("ok", 1, 1);
  p.add("gru.wz", 2, 2).grad = diff::Mat::Constant(2, 2, std::nan(""));
  OptimizerState st;
  try {
    adamw_step(p, st, AdamWConfig{});
    FAIL() << "expected an error";
  } catch (const Error &e) {
    EXPECT_NE(std::string(e.what()).find("gru.wz"), std::string::npos);
  }
}

TEST(Window, LabelsComeFromTheReference) {
  const auto &sc = two_cell();
  const TraceIndex clean(sc.splits.train);
  perturb::PerturbConfig pc;
  pc.shadow = perturb::ShadowConfig{.sigma_db = 12.0};
  pc.blockage.count = 8;
  const Trace noisy = perturb::apply(sc.splits.train, pc);
  const TraceIndex noisy_index(noisy);
  const auto runs = clean.runs();
  std::vector<StreamSpec> a, b;
  for (std::size_t i = 0; i < 4; ++i) {
    a.push_back({runs[i].ue, runs[i].t_begin + 100, nullptr});
    b.push_back({runs[i].ue, runs[i].t_begin + 100, &noisy_index});
  }
  const auto wa = make_window(clean, sc.stats, a, 0, 16, 10, 4);
  const auto wb = make_window(clean, sc.stats, b, 0, 16, 10, 4);
  EXPECT_EQ(wa.handover, wb.handover);
  ASSERT_EQ(wa.label.size(), wb.label.size());
  for (std::size_t i = 0; i < wa.label.size(); ++i) {
    if (wa.label[i] >= 0 && wb.label[i] >= 0) {
      EXPECT_EQ(wa.candidates[i].cells[static_cast<std::size_t>(wa.label[i])],
                wb.candidates[i].cells[static_cast<std::size_t>(wb.label[i])]);
    }
  }
  bool differs = false;
  for (std::size_t e = 0; e < wa.snapshot.meas.size(); ++e)
    differs |= wa.snapshot.meas[e].features[0] != wb.snapshot.meas[e].features[0];
  EXPECT_TRUE(differs);
}

TEST(WindowLoss, VaeEncoderGradientOnlyWithHandover) {
  const auto &sc = two_cell();
  const TraceIndex idx(sc.splits.train);
  Model m(tiny_model(), 5);
  Rng rng(1);
  for (bool with : {true, false}) {
    const auto w = handover_window(idx, sc.stats, with);
    m.params().zero_grad();
    Tape tape;
    const auto wl = window_loss(m, tape, w, diff::Mat::Zero(1, m.config().d), TrainMode::ilcp, true, rng);
    tape.backward(wl.loss);
    EXPECT_EQ(wl.handovers, with ? 1u : 0u);
    if (with) {
      EXPECT_GT(grad_norm(m, "vae.mu.w"), 0.0);
      EXPECT_GT(grad_norm(m, "vae.logvar.w"), 0.0);
      EXPECT_GT(grad_norm(m, "proj.gate1.w"), 0.0);
    } else {
      EXPECT_EQ(grad_norm(m, "vae.mu.w"), 0.0);
      EXPECT_EQ(grad_norm(m, "vae.logvar.w"), 0.0);
    }
    EXPECT_GT(grad_norm(m, "gru.wz"), 0.0);
    EXPECT_GT(grad_norm(m, "enc.l0.edge.w"), 0.0);
  }
}

TEST(WindowLoss, ZeroKnowledgeNeverCompresses) {
  const auto &sc = two_cell();
  const TraceIndex idx(sc.splits.train);
  Model m(tiny_model(), 5);
  Rng rng(1);
  Tape tape;
  const auto w = handover_window(idx, sc.stats, true);
  const auto wl = window_loss(m, tape, w, diff::Mat::Zero(1, m.config().d), TrainMode::zero_knowledge, true, rng);
  tape.backward(wl.loss);
  EXPECT_EQ(m.compress_calls(), 0u);
  EXPECT_EQ(grad_norm(m, "vae.mu.w"), 0.0);
}

TEST(WindowLoss, GradientCheckAcrossHandover) {
  const auto &sc = two_cell();
  const TraceIndex idx(sc.splits.train);
  const auto w = handover_window(idx, sc.stats, true);
  for (auto mode : {TrainMode::ilcp, TrainMode::zero_knowledge}) {
    Model m(tiny_model(), 9);
    diff::GradCheckOptions opt;
    opt.max_entries_per_param = 6;
    const auto rep = diff::check_gradients(
        m.params(),
        [&](Tape &tape) {
          Rng rng(4);
          return window_loss(m, tape, w, diff::Mat::Zero(1, m.config().d), mode, true, rng).loss;
        },
        opt);
    EXPECT_TRUE(rep.passed) << to_string(mode) << " max rel error " << rep.max_rel_error;
  }
}

TEST(Trainer, EpochZeroParametersMatchAcrossModes) {
  const auto &sc = two_cell();
  Trainer a(sc.splits.train, sc.splits.val, sc.stats, small_train(TrainMode::ilcp), tiny_model());
  Trainer b(sc.splits.train, sc.splits.val, sc.stats, small_train(TrainMode::zero_knowledge), tiny_model());
  ASSERT_EQ(a.model().params().size(), b.model().params().size());
  for (std::size_t i = 0; i < a.model().params().size(); ++i)
    EXPECT_EQ(a.model().params()[i].value, b.model().params()[i].value) << a.model().params()[i].name;
}

TEST(Trainer, LossFallsOverFiveEpochs) {
  const auto &sc = two_cell();
  Trainer t(sc.splits.train, sc.splits.val, sc.stats, small_train(TrainMode::ilcp), tiny_model());
  std::vector<double> loss;
  for (int e = 0; e < 5; ++e)
    loss.push_back(t.train_epoch().train_loss);
  for (std::size_t i = 1; i < loss.size(); ++i)
    EXPECT_LT(loss[i], loss[i - 1]) << "epoch " << i + 1;
  EXPECT_GT(t.vae_calls(), 0u);
}

TEST(Trainer, TrainedToyModelBeatsChance) {
  const auto &sc = two_cell();
  Trainer t(sc.splits.train, sc.splits.val, sc.stats, small_train(TrainMode::ilcp), tiny_model());
  for (int e = 0; e < 25; ++e)
    t.train_epoch();
  // Two visible cells, so chance is one half.
  EXPECT_GT(t.validate().acc, 50.0);
}

TEST(Trainer, ZeroKnowledgeNeverCallsTheVae) {
  const auto &sc = two_cell();
  Trainer t(sc.splits.train, sc.splits.val, sc.stats, small_train(TrainMode::zero_knowledge), tiny_model());
  const auto st = t.train_epoch();
  EXPECT_GT(st.handovers, 0u);
  EXPECT_EQ(t.vae_calls(), 0u);
  EXPECT_EQ(t.model().compress_calls(), 0u);
}

TEST(Trainer, SameSeedGivesIdenticalCheckpoint) {
  const auto &sc = two_cell();
  std::vector<std::vector<std::uint8_t>> ckpt;
  for (int i = 0; i < 2; ++i) {
    auto cfg = small_train(TrainMode::ilcp);
    cfg.robust = true;
    Trainer t(sc.splits.train, sc.splits.val, sc.stats, cfg, tiny_model());
    t.train_epoch();
    ckpt.push_back(model::save_checkpoint(t.model(), t.stats(), {}));
  }
  EXPECT_EQ(ckpt[0], ckpt[1]);
}

TEST(Trainer, RejectsEmptySplit) {
  const auto &sc = two_cell();
  EXPECT_THROW(Trainer(Trace{}, sc.splits.val, sc.stats, small_train(TrainMode::ilcp), tiny_model()), Error);
}

TEST(Fit, StopsWithinPatienceAndRepeats) {
  const auto &sc = two_cell();
  std::vector<FitResult> runs;
  for (int i = 0; i < 2; ++i) {
    auto cfg = small_train(TrainMode::ilcp);
    cfg.chunks_per_epoch = 1;
    cfg.streams = 4;
    cfg.patience = 3;
    cfg.max_epochs = 25;
    Trainer t(sc.splits.train, sc.splits.val, sc.stats, cfg, tiny_model());
    runs.push_back(fit(t));
  }
  const auto &r = runs[0];
  ASSERT_FALSE(r.log.empty());
  EXPECT_LE(r.log.back().epoch - r.best_epoch, 3);
  if (r.log.size() < 25u) {
    EXPECT_EQ(r.log.back().epoch - r.best_epoch, 3);
  }
  for (const auto &e : r.log) {
    if (e.epoch != r.best_epoch) {
      EXPECT_TRUE(e.val_acc <= r.log[static_cast<std::size_t>(r.best_epoch - 1)].val_acc);
    }
  }
  EXPECT_EQ(runs[1].best_epoch, r.best_epoch);
  EXPECT_EQ(runs[1].log.size(), r.log.size());
  const auto csv = training_log_csv(r.log, TrainConfig{});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_acc,lr,mode,robust");
}

TEST(Vae, TrainingCutsReconstructionError) {
  auto mc = tiny_model();
  mc.d = 32;
  mc.latent = 8;
  Model m(mc, 2);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n01(0.0, 1.0);
  diff::Mat basis(4, mc.d);
  for (Eigen::Index i = 0; i < basis.size(); ++i)
    basis.data()[i] = n01(rng);
  auto sample = [&](int n) {
    diff::Mat s(n, 4);
    for (Eigen::Index i = 0; i < s.size(); ++i)
      s.data()[i] = n01(rng);
    return diff::Mat(s * basis * 0.3);
  };
  const diff::Mat held = sample(256);
  auto mse = [&] {
    const auto out = model::vae_decode(m, model::vae_compress(m, held).mu);
    return (out - held).squaredNorm() / static_cast<double>(held.size());
  };
  const double before = mse();
  OptimizerState st;
  AdamWConfig c;
  c.lr = 3e-3;
  diff::Rng noise(1);
  for (int step = 0; step < 1500; ++step) {
    Tape tape;
    const auto h = tape.constant(sample(64));
    const auto comp = m.compress(tape, h, true, &noise);
    const auto loss = model::vae_loss(h, m.decode(tape, comp.z), comp.mu, comp.logvar, mc.beta);
    m.params().zero_grad();
    tape.backward(loss);
    adamw_step(m.params(), st, c);
  }
  EXPECT_LT(mse() * 10.0, before);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.mode = TrainMode::zero_knowledge;
  c.robust = true;
  c.patience = 5;
  const auto back = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(back.mode, TrainMode::zero_knowledge);
  EXPECT_TRUE(back.robust);
  EXPECT_EQ(back.patience, 5);
  EXPECT_THROW(train_config_from_json(R"({"lr": -1})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"mode": "bogus"})"), ConfigError);
  EXPECT_THROW(train_config_from_json(R"({"stop_metric": "f1"})"), ConfigError);
}
