// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ilcp/perturb.hpp"
#include "ilcp/rules.hpp"
#include "ilcp/synthgen.hpp"

using namespace ilcp;
using namespace ilcp::perturb;

namespace {

// One UE, one cell, RSRP given per step.
template <class F>
Trace single_link(Step n, F rsrp) {
  Trace tr;
  for (Step t = 0; t < n; ++t) {
    TraceStep s;
    s.t = t;
    s.ue = UeId(0);
    s.cell = CellId(0);
    s.rsrp = static_cast<float>(rsrp(t));
    s.is_serving = true;
    tr.steps.push_back(s);
  }
  return tr;
}

const Trace &scenario() {
  static const Trace tr = [] {
    synth::ScenarioConfig c;
    c.n_ues = 6;
    c.duration_steps = 3000;
    c.seed = 5;
    return synth::generate(c);
  }();
  return tr;
}

std::vector<bool> serving_flags(const Trace &tr) {
  std::vector<bool> out;
  for (const auto &s : tr.steps)
    out.push_back(s.is_serving);
  return out;
}

} // namespace

TEST(Quantize, RoundsHalfUp) {
  EXPECT_DOUBLE_EQ(quantize(-80.5, 1.0), -80.0);
  EXPECT_DOUBLE_EQ(quantize(-80.51, 1.0), -81.0);
  EXPECT_DOUBLE_EQ(quantize(2.5, 1.0), 3.0);
  EXPECT_DOUBLE_EQ(quantize(0.74, 0.5), 0.5);
}

TEST(Shadow, ZeroSigmaLeavesOnlyThePipeline) {
  const auto tr = single_link(40, [](Step t) { return -90.0 + 0.3 * static_cast<double>(t); });
  ShadowConfig cfg;
  const auto out = shadow_fading(tr, cfg, 1);
  std::vector<double> q;
  for (const auto &s : tr.steps)
    q.push_back(quantize(s.rsrp, 1.0));
  std::optional<double> f;
  for (std::size_t i = 0; i < q.size(); ++i) {
    f = rules::l3_filter_step(f, q[i >= 4 ? i - 4 : 0], 4.0);
    EXPECT_FLOAT_EQ(out.steps[i].rsrp, static_cast<float>(*f)) << i;
  }
}

TEST(Shadow, Ar1MarginalStdMatchesSigma) {
  std::mt19937_64 rng(3);
  for (double sigma : {3.0, 12.0}) {
    const auto s = ar1_sequence(100000, sigma, 0.95, rng);
    double m = 0.0, v = 0.0;
    for (double x : s)
      m += x;
    m /= static_cast<double>(s.size());
    for (double x : s)
      v += (x - m) * (x - m);
    const double sd = std::sqrt(v / static_cast<double>(s.size()));
    EXPECT_NEAR(sd / sigma, 1.0, 0.05);
  }
}

TEST(Shadow, SameSeedSameTrace) {
  ShadowConfig cfg;
  cfg.sigma_db = 9.0;
  EXPECT_EQ(shadow_fading(scenario(), cfg, 4), shadow_fading(scenario(), cfg, 4));
  EXPECT_NE(shadow_fading(scenario(), cfg, 4), shadow_fading(scenario(), cfg, 5));
}

TEST(Shadow, OnlyRsrpChanges) {
  ShadowConfig cfg;
  cfg.sigma_db = 12.0;
  const auto out = shadow_fading(scenario(), cfg, 2);
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    EXPECT_EQ(out.steps[i].rsrq, scenario().steps[i].rsrq);
    EXPECT_EQ(out.steps[i].sinr, scenario().steps[i].sinr);
  }
}

TEST(Blockage, ZeroCountIsIdentity) { EXPECT_EQ(blockage(scenario(), {}, 1), scenario()); }

TEST(Blockage, SingleEventIsOneContiguousInterval) {
  BlockageConfig cfg;
  cfg.count = 1;
  PerturbLog log;
  const auto out = blockage(scenario(), cfg, 8, &log);
  ASSERT_EQ(log.entries.size(), 1u);
  const auto &e = log.entries[0];
  EXPECT_GE(e.duration, 50);
  EXPECT_LE(e.duration, 200);
  std::vector<Step> hit;
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    const double diff = static_cast<double>(scenario().steps[i].rsrp) - out.steps[i].rsrp;
    if (diff == 0.0)
      continue;
    EXPECT_NEAR(diff, 20.0, 1e-4);
    EXPECT_EQ(out.steps[i].ue, e.ue);
    EXPECT_EQ(out.steps[i].cell, e.cell);
    hit.push_back(out.steps[i].t);
  }
  ASSERT_FALSE(hit.empty());
  EXPECT_EQ(hit.front(), e.onset);
  EXPECT_EQ(hit.back() - hit.front() + 1, static_cast<Step>(hit.size()));
  EXPECT_LE(static_cast<Step>(hit.size()), e.duration);
}

TEST(Blockage, ThirtyTwoEventsAreLogged) {
  BlockageConfig cfg;
  cfg.count = 32;
  PerturbLog log;
  blockage(scenario(), cfg, 9, &log);
  EXPECT_EQ(log.count("blockage"), 32u);
  EXPECT_NE(log.to_json().find("\"blockage\""), std::string::npos);
}

TEST(Ssb, PeriodOneIsIdentity) { EXPECT_EQ(ssb_subsample(scenario(), 1), scenario()); }

TEST(Ssb, RampBecomesStaircase) {
  const auto tr = single_link(16, [](Step t) { return -100.0 + static_cast<double>(t); });
  const auto out = ssb_subsample(tr, 4);
  for (Step t = 0; t < 16; ++t) {
    EXPECT_FLOAT_EQ(out.steps[static_cast<std::size_t>(t)].rsrp, static_cast<float>(-100 + (t / 4) * 4));
    EXPECT_EQ(out.steps[static_cast<std::size_t>(t)].stale, t % 4 != 0);
  }
}

TEST(Ssb, StaleFractionFollowsPeriod) {
  for (int p : {2, 4, 8, 16}) {
    const auto out = ssb_subsample(scenario(), p);
    std::size_t stale = 0;
    for (const auto &s : out.steps)
      stale += s.stale ? 1 : 0;
    EXPECT_NEAR(static_cast<double>(stale) / static_cast<double>(out.steps.size()), 1.0 - 1.0 / p, 1e-3) << p;
  }
}

TEST(Apply, LabelsAndEventsAreUntouched) {
  const auto events = extract_handover_events(scenario());
  PerturbConfig cfg;
  cfg.shadow = ShadowConfig{.sigma_db = 12.0};
  cfg.blockage.count = 16;
  cfg.ssb_period = 8;
  cfg.seed = 3;
  PerturbLog log;
  const auto out = apply(scenario(), cfg, &log);
  EXPECT_EQ(serving_flags(out), serving_flags(scenario()));
  EXPECT_EQ(extract_handover_events(out), events);
  EXPECT_EQ(log.count("blockage"), 16u);
  EXPECT_EQ(log.count("ssb"), 1u);
  EXPECT_GT(log.count("shadow"), 0u);
  EXPECT_EQ(apply(scenario(), cfg), out);
}

TEST(Apply, CommutesWithReparsing) {
  PerturbConfig cfg;
  cfg.shadow = ShadowConfig{.sigma_db = 6.0};
  cfg.blockage.count = 4;
  std::stringstream buf;
  write_trace_csv(scenario(), buf);
  auto reparsed = parse_trace(buf);
  reparsed.topology = scenario().topology;
  EXPECT_EQ(apply(reparsed, cfg), apply(scenario(), cfg));
}

TEST(Apply, NoisyRuleHandsOverMore) {
  synth::ScenarioConfig sc;
  sc.grid_rows = 1;
  sc.grid_cols = 2;
  sc.n_ues = 4;
  sc.duration_steps = 6000;
  const auto clean = synth::generate(sc);
  PerturbConfig cfg;
  cfg.shadow = ShadowConfig{.sigma_db = 12.0};
  const auto noisy = apply(clean, cfg);
  const auto n_clean = rules::events_of(rules::run_rule(clean, sc.rule)).size();
  const auto n_noisy = rules::events_of(rules::run_rule(noisy, sc.rule)).size();
  EXPECT_GT(n_noisy, n_clean);
}

TEST(Config, JsonRoundTripAndValidation) {
  PerturbConfig cfg;
  cfg.shadow = ShadowConfig{.sigma_db = 3.0, .rho = 0.9};
  cfg.blockage.count = 8;
  cfg.ssb_period = 4;
  cfg.seed = 77;
  const auto back = perturb_config_from_json(perturb_config_to_json(cfg));
  ASSERT_TRUE(back.shadow.has_value());
  EXPECT_DOUBLE_EQ(back.shadow->rho, 0.9);
  EXPECT_EQ(back.blockage.count, 8);
  EXPECT_EQ(back.ssb_period, 4);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_THROW(perturb_config_from_json(R"({"ssb_period": 0})"), ConfigError);
  EXPECT_THROW(perturb_config_from_json(R"({"shadow": {"rho": 1.0}})"), ConfigError);
}

TEST(Mixture, CleanFractionIsHalf) {
  MixedSampler s({}, 11);
  int clean = 0;
  std::map<double, int> sigma;
  for (int i = 0; i < 10000; ++i) {
    const auto d = s.next();
    if (d.clean) {
      ++clean;
      EXPECT_TRUE(d.config.is_identity());
    } else {
      ASSERT_TRUE(d.config.shadow.has_value());
      ++sigma[d.config.shadow->sigma_db];
    }
  }
  EXPECT_NEAR(clean / 10000.0, 0.5, 0.02);
  ASSERT_EQ(sigma.size(), 7u);
  for (int v = 6; v <= 12; ++v) {
    EXPECT_TRUE(sigma.contains(v));
    EXPECT_NEAR(sigma[v] / static_cast<double>(10000 - clean), 1.0 / 7.0, 0.03) << v;
  }
}

TEST(Mixture, EndpointReadingDrawsOnlySixOrTwelve) {
  MixtureConfig mc;
  mc.sigma_set = SigmaSet::endpoints;
  MixedSampler s(mc, 12);
  std::set<double> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto d = s.next();
    if (!d.clean)
      seen.insert(d.config.shadow->sigma_db);
  }
  EXPECT_EQ(seen, (std::set<double>{6.0, 12.0}));
}

TEST(Mixture, ImpairedDrawsKeepCleanLabels) {
  MixedSampler s({}, 13);
  int checked = 0;
  while (checked < 5) {
    const auto d = s.next();
    if (d.clean)
      continue;
    EXPECT_EQ(serving_flags(apply(scenario(), d.config)), serving_flags(scenario()));
    ++checked;
  }
}
