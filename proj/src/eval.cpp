// SPDX-License-Identifier: Apache-2.0
#include "ilcp/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

namespace ilcp::eval {

namespace {

using json = nlohmann::json;
using diff::Mat;
using diff::Mask;
using diff::Tape;
using diff::Var;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Cell states do not depend on the UEs in a snapshot, so one encoding per
// topology serves every step.
struct FrozenCells {
  std::vector<Mat> layers, keys, values;
};

FrozenCells freeze(const Model &model, const GraphSnapshot &g) {
  Tape tape(false);
  const auto cs = model.encode_cells(tape, g);
  FrozenCells out;
  for (const auto &v : cs.layers)
    out.layers.push_back(v.value());
  for (const auto &v : cs.meas_keys)
    out.keys.push_back(v.value());
  for (const auto &v : cs.meas_values)
    out.values.push_back(v.value());
  return out;
}

Model::CellStates thaw(Tape &tape, const FrozenCells &f) {
  Model::CellStates cs;
  for (const auto &m : f.layers)
    cs.layers.push_back(tape.constant(m));
  for (const auto &m : f.keys)
    cs.meas_keys.push_back(tape.constant(m));
  for (const auto &m : f.values)
    cs.meas_values.push_back(tape.constant(m));
  return cs;
}

struct StepItem {
  UeId ue;
  Step t = 0;
  std::span<const TraceStep> rows;
  std::optional<CellId> serving;
};

struct StepOut {
  Mat h;
  Mat scores; // masked slots -inf
  Mask mask;
  std::vector<CandidateSet> candidates;
  std::vector<int> slot;
};

class Stepper {
public:
  Stepper(const Model &model, const Topology &topology, const NormalizationStats &stats)
      : model_(model), builder_(topology, stats), cells_(freeze(model, builder_.empty(0))) {}

  // h_prev rows must already be zero where a run starts. Rows flagged in
  // `transition` take the handover path of `mode` instead of the GRU update.
  StepOut step(std::span<const StepItem> items, const Mat &h_prev, std::span<const std::uint8_t> transition,
               StateMode mode, bool score, EventSet *counters,
               std::vector<std::pair<xn::Latent, xn::Payload>> *emitted = nullptr) const {
    auto g = builder_.empty(-1);
    for (const auto &it : items)
      builder_.add_ue(g, {it.ue, it.t}, it.rows, it.serving);
    Tape tape(false);
    const auto cs = thaw(tape, cells_);
    const Var x = model_.encode_ues(tape, g, cs);
    const Var hp = tape.constant(h_prev);
    Var h = model_.gru(tape, hp, x);

    std::vector<int> rows;
    for (std::size_t i = 0; i < transition.size(); ++i)
      if (transition[i] != 0)
        rows.push_back(static_cast<int>(i));
    if (!rows.empty() && mode != StateMode::warm) {
      const Var xr = diff::gather_rows(x, rows);
      Var hn;
      if (mode == StateMode::cold) {
        hn = model_.gru(tape, tape.constant(Mat::Zero(static_cast<Eigen::Index>(rows.size()), h_prev.cols())), xr);
      } else {
        const Mat mu = model_.compress(tape, diff::gather_rows(hp, rows), false, nullptr).mu.value();
        Mat z(mu.rows(), mu.cols());
        for (Eigen::Index r = 0; r < mu.rows(); ++r) {
          const auto latent = model::to_latent(mu.row(r));
          const auto payload = xn::serialize_latent(latent);
          if (emitted != nullptr)
            emitted->emplace_back(latent, payload);
          if (counters != nullptr) {
            ++counters->payloads;
            counters->payload_bytes += payload.size();
          }
          try {
            z.row(r) = model::from_latent(xn::deserialize_latent(payload));
          } catch (const xn::PayloadError &) {
            if (counters != nullptr)
              ++counters->corrupt_payloads;
            z.row(r).setZero();
          }
        }
        diff::Rng unused(0);
        hn = model_.project(tape, model_.decode(tape, tape.constant(z)), xr, false, unused);
      }
      h = diff::scatter_rows(h, rows, hn);
    }

    StepOut out;
    out.h = h.value();
    if (score) {
      for (int i = 0; i < static_cast<int>(items.size()); ++i)
        out.candidates.push_back(build_candidates(g, i, model_.config().candidates));
      out.mask = model::mask_of(out.candidates);
      const Var cell_final = tape.constant(cells_.layers.back());
      out.scores = model::masked_scores(model_.score(tape, h, cell_final, out.candidates).value(), out.mask);
      out.slot = model::argmax_slots(out.scores, out.mask);
    }
    return out;
  }

private:
  const Model &model_;
  SnapshotBuilder builder_;
  FrozenCells cells_;
};

bool event_less(const HandoverEvent &a, const HandoverEvent &b) {
  return std::tie(a.t_star, a.ue.value, a.source.value, a.target.value) <
         std::tie(b.t_star, b.ue.value, b.source.value, b.target.value);
}

CellId reference_at(const TraceIndex &ref, UeId ue, Step t) {
  const auto c = ref.serving(ue, t);
  if (!c || !c->valid())
    throw Error("no reference serving cell for UE " + std::to_string(ue.value) + " at t=" + std::to_string(t));
  return *c;
}

// Serving sequence masked to the (ue, t) pairs present in `index`.
rules::ServingSequence restrict_to(const rules::ServingSequence &seq, const TraceIndex &index) {
  rules::ServingSequence out;
  for (const auto &tr : seq.tracks) {
    const auto *it = index.track(tr.ue);
    if (it == nullptr)
      continue;
    rules::ServingSequence::Track t{tr.ue, tr.t_first, tr.serving};
    for (std::size_t k = 0; k < t.serving.size(); ++k)
      if (!it->has(t.t_first + static_cast<Step>(k)))
        t.serving[k] = CellId{};
    out.tracks.push_back(std::move(t));
  }
  return out;
}

json interval_json(const Interval &i) { return json{{"point", i.point}, {"lo", i.lo}, {"hi", i.hi}}; }

std::vector<double> scaled(const std::vector<double> &v, double s, double offset = 0.0) {
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v)
    out.push_back(offset + s * x);
  return out;
}

std::vector<double> correct_at(const EventSet &set, int delta) {
  std::vector<double> out;
  for (const auto &r : set.records)
    out.push_back(r.correct.at(static_cast<std::size_t>(delta)) != 0 ? 1.0 : 0.0);
  return out;
}

std::string format_level(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

} // namespace

const char *to_string(Mode mode) {
  switch (mode) {
  case Mode::cold:
    return "cold";
  case Mode::warm:
    return "warm";
  case Mode::ilcp:
    return "ilcp";
  case Mode::rule:
    return "rule";
  }
  return "?";
}

Mode mode_from_string(const std::string &text) {
  if (text == "cold" || text == "zk")
    return Mode::cold;
  if (text == "warm")
    return Mode::warm;
  if (text == "ilcp")
    return Mode::ilcp;
  if (text == "rule")
    return Mode::rule;
  throw ConfigError("unknown evaluation mode '" + text + "'");
}

std::vector<Mode> modes_from_list(const std::string &text) {
  std::vector<Mode> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(mode_from_string(item));
  if (out.empty())
    throw ConfigError("no evaluation modes given");
  return out;
}

void EvalConfig::validate() const {
  if (horizon < 0 || max_delta < 0 || history < 1)
    throw ConfigError("horizon and max_delta must be >= 0 and history >= 1");
  if (bootstrap < 1)
    throw ConfigError("bootstrap needs at least one resample");
  if (!(level > 0.0 && level < 100.0))
    throw ConfigError("confidence level must be in (0, 100)");
  if (ping_pong_window < 1 || batch < 1)
    throw ConfigError("ping-pong window and batch size must be positive");
}

std::vector<HandoverEvent> eligible_events(const TraceIndex &ref, std::span<const HandoverEvent> events,
                                           const EvalConfig &config, std::size_t *skipped) {
  std::vector<HandoverEvent> out;
  std::size_t dropped = 0;
  for (const auto &e : events) {
    const auto run = ref.run_of(e.ue, e.t_star);
    const Step last = e.t_star + config.max_delta + config.horizon;
    if (run && run->t_begin < e.t_star && last <= run->t_end)
      out.push_back(e);
    else
      ++dropped;
  }
  std::sort(out.begin(), out.end(), event_less);
  if (skipped != nullptr)
    *skipped = dropped;
  return out;
}

EventSet run_learned(const Model &model, const NormalizationStats &stats, const TraceIndex &input,
                     const TraceIndex &reference, std::span<const HandoverEvent> events, StateMode mode,
                     const EvalConfig &config) {
  config.validate();
  EventSet out;
  const auto evs = eligible_events(reference, events, config, &out.skipped);
  const Stepper stepper(model, input.trace().topology, stats);
  const auto d = static_cast<Eigen::Index>(model.config().d);
  const std::size_t n_delta = static_cast<std::size_t>(config.max_delta) + 1;

  for (std::size_t b0 = 0; b0 < evs.size(); b0 += config.batch) {
    const std::size_t nb = std::min(config.batch, evs.size() - b0);
    std::vector<Step> start(nb);
    for (std::size_t i = 0; i < nb; ++i) {
      const auto &e = evs[b0 + i];
      const auto run = input.run_of(e.ue, e.t_star);
      const auto ref_run = reference.run_of(e.ue, e.t_star);
      if (!run || run->t_begin >= e.t_star || run->t_end < e.t_star + config.max_delta)
        throw Error("input trace lacks measurements around the handover of UE " + std::to_string(e.ue.value));
      start[i] = std::max({run->t_begin, ref_run->t_begin, e.t_star - config.history});
      EventRecord rec;
      rec.event = e;
      rec.correct.assign(n_delta, 0);
      rec.predicted.assign(n_delta, CellId{});
      rec.nll.assign(n_delta, kNaN);
      out.records.push_back(std::move(rec));
    }
    Mat h = Mat::Zero(static_cast<Eigen::Index>(nb), d);
    for (Step r = -config.history; r <= config.max_delta; ++r) {
      std::vector<StepItem> items;
      std::vector<int> slot_of_item;
      std::vector<std::uint8_t> trans;
      for (std::size_t i = 0; i < nb; ++i) {
        const auto &e = evs[b0 + i];
        const Step t = e.t_star + r;
        if (t < start[i])
          continue;
        items.push_back({e.ue, t, input.rows(e.ue, t), std::nullopt});
        slot_of_item.push_back(static_cast<int>(i));
        trans.push_back(t > start[i] && reference_at(reference, e.ue, t) != reference_at(reference, e.ue, t - 1));
      }
      if (items.empty())
        continue;
      Mat hp(static_cast<Eigen::Index>(items.size()), d);
      for (std::size_t j = 0; j < items.size(); ++j)
        hp.row(static_cast<Eigen::Index>(j)) = h.row(slot_of_item[j]);
      std::vector<std::pair<xn::Latent, xn::Payload>> sent;
      auto so = stepper.step(items, hp, trans, mode, r >= 0, &out, config.keep_payloads ? &sent : nullptr);
      for (std::size_t j = 0, k = 0; j < items.size() && k < sent.size(); ++j)
        if (trans[j] != 0) {
          out.emitted.push_back({items[j].ue, items[j].t, sent[k].first, sent[k].second});
          ++k;
        }
      for (std::size_t j = 0; j < items.size(); ++j)
        h.row(slot_of_item[j]) = so.h.row(static_cast<Eigen::Index>(j));
      if (r < 0)
        continue;
      const Mat probs = model::candidate_probs(so.scores, so.mask);
      for (std::size_t j = 0; j < items.size(); ++j) {
        auto &rec = out.records[b0 + static_cast<std::size_t>(slot_of_item[j])];
        const auto &cand = so.candidates[j];
        const CellId label = reference_at(reference, rec.event.ue, items[j].t + config.horizon);
        const CellId pred = cand.cells[static_cast<std::size_t>(so.slot[j])];
        const auto k = static_cast<std::size_t>(r);
        rec.predicted[k] = pred;
        rec.correct[k] = pred == label ? 1 : 0;
        const int ls = cand.slot_of(label);
        if (ls < 0)
          ++out.label_outside;
        else
          rec.nll[k] = -std::log(std::max(probs(static_cast<Eigen::Index>(j), ls), 1e-300));
      }
    }
  }
  return out;
}

EventSet run_rule(const rules::ServingSequence &rule, const TraceIndex &reference,
                  std::span<const HandoverEvent> events, const EvalConfig &config) {
  config.validate();
  EventSet out;
  const auto evs = eligible_events(reference, events, config, &out.skipped);
  const std::size_t n_delta = static_cast<std::size_t>(config.max_delta) + 1;
  for (const auto &e : evs) {
    EventRecord rec;
    rec.event = e;
    rec.correct.assign(n_delta, 0);
    rec.predicted.assign(n_delta, CellId{});
    rec.nll.assign(n_delta, kNaN);
    for (std::size_t k = 0; k < n_delta; ++k) {
      const Step t = e.t_star + static_cast<Step>(k) + config.horizon;
      const auto s = rule.at(e.ue, t);
      rec.predicted[k] = s.value_or(CellId{});
      rec.correct[k] = s && *s == reference_at(reference, e.ue, t) ? 1 : 0;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

// --- metrics --------------------------------------------------------------

double acc_at_delta(const EventSet &set, int delta) {
  if (set.records.empty())
    throw Error("accuracy over an empty event set");
  std::size_t hits = 0;
  for (const auto &r : set.records)
    hits += r.correct.at(static_cast<std::size_t>(delta)) != 0 ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(set.records.size());
}

double hof(const EventSet &set) { return 100.0 - acc_at_delta(set, 0); }

std::vector<double> per_event_accuracy(const EventSet &set, int lo, int hi) {
  if (lo < 0 || hi < lo)
    throw ConfigError("bad delta range");
  std::vector<double> out;
  for (const auto &r : set.records) {
    double s = 0.0;
    for (int k = lo; k <= hi; ++k)
      s += r.correct.at(static_cast<std::size_t>(k));
    out.push_back(s / static_cast<double>(hi - lo + 1));
  }
  return out;
}

double ping_pong_rate(std::span<const HandoverEvent> events, int window) {
  if (events.empty())
    return 0.0;
  std::vector<HandoverEvent> ev(events.begin(), events.end());
  std::sort(ev.begin(), ev.end(), [](const auto &a, const auto &b) {
    return std::tie(a.ue, a.t_star) < std::tie(b.ue, b.t_star);
  });
  std::size_t pp = 0;
  for (std::size_t i = 0; i + 1 < ev.size(); ++i) {
    const auto &a = ev[i], &b = ev[i + 1];
    if (a.ue == b.ue && b.source == a.target && b.target == a.source && b.t_star - a.t_star <= window)
      ++pp;
  }
  return 100.0 * static_cast<double>(pp) / static_cast<double>(ev.size());
}

double ping_pong_rate(const rules::ServingSequence &sequence, int window) {
  const auto ev = rules::events_of(sequence);
  return ping_pong_rate(ev, window);
}

ColdStartGap cold_start_gap(const EventSet &cold, const EventSet &warm) {
  if (cold.records.size() != warm.records.size())
    throw Error("cold-start gap needs the same event set for both modes");
  ColdStartGap g;
  for (std::size_t i = 0; i < cold.records.size(); ++i) {
    if (!(cold.records[i].event == warm.records[i].event))
      throw Error("cold-start gap needs the same event set for both modes");
    g.sum += static_cast<double>(warm.records[i].correct.at(0)) - static_cast<double>(cold.records[i].correct.at(0));
  }
  g.events = cold.records.size();
  g.per_event = g.events == 0 ? 0.0 : 100.0 * g.sum / static_cast<double>(g.events);
  return g;
}

std::vector<double> bootstrap_means(std::span<const double> values, int resamples, std::uint64_t seed) {
  if (values.empty())
    throw Error("bootstrap over an empty event set");
  if (resamples < 1)
    throw ConfigError("bootstrap needs at least one resample");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto &m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  return means;
}

Interval bootstrap_ci(std::span<const double> values, int resamples, double level, std::uint64_t seed) {
  if (!(level > 0.0 && level < 100.0))
    throw ConfigError("confidence level must be in (0, 100)");
  auto means = bootstrap_means(values, resamples, seed);
  Interval out;
  double s = 0.0;
  for (double m : means)
    s += m;
  out.point = s / static_cast<double>(means.size());
  const double tail = (100.0 - level) / 2.0;
  out.lo = xn::percentile(means, tail);
  out.hi = xn::percentile(std::move(means), 100.0 - tail);
  return out;
}

// --- closed loop ----------------------------------------------------------

rules::ServingSequence closed_loop(const Model &model, const NormalizationStats &stats, const TraceIndex &input,
                                   StateMode mode, std::size_t *payloads) {
  const Stepper stepper(model, input.trace().topology, stats);
  const auto d = static_cast<Eigen::Index>(model.config().d);
  const auto &tracks = input.tracks();
  rules::ServingSequence seq;
  std::vector<Mat> h(tracks.size(), Mat::Zero(1, d));
  std::vector<CellId> next(tracks.size());
  for (const auto &tr : tracks)
    seq.tracks.push_back({tr.ue, tr.t_first, std::vector<CellId>(tr.serving.size())});
  EventSet counters;

  for (Step t = input.t_min(); t <= input.t_max(); ++t) {
    std::vector<StepItem> items;
    std::vector<std::size_t> who;
    std::vector<std::uint8_t> trans;
    for (std::size_t u = 0; u < tracks.size(); ++u) {
      const auto &tr = tracks[u];
      if (!tr.has(t))
        continue;
      const auto k = static_cast<std::size_t>(t - tr.t_first);
      const auto rows = input.rows(tr.ue, t);
      auto &served = seq.tracks[u].serving;
      bool transition = false;
      if (!tr.has(t - 1)) {
        h[u].setZero();
        CellId start = tr.serving[k];
        if (!start.valid())
          start = std::max_element(rows.begin(), rows.end(), [](const auto &a, const auto &b) {
                    return a.rsrp < b.rsrp || (a.rsrp == b.rsrp && a.cell > b.cell);
                  })->cell;
        served[k] = start;
      } else {
        served[k] = next[u];
        transition = served[k] != served[k - 1];
      }
      items.push_back({tr.ue, t, rows, served[k]});
      who.push_back(u);
      trans.push_back(transition ? 1 : 0);
    }
    if (items.empty())
      continue;
    Mat hp(static_cast<Eigen::Index>(items.size()), d);
    for (std::size_t j = 0; j < who.size(); ++j)
      hp.row(static_cast<Eigen::Index>(j)) = h[who[j]];
    const auto so = stepper.step(items, hp, trans, mode, true, &counters);
    for (std::size_t j = 0; j < who.size(); ++j) {
      h[who[j]] = so.h.row(static_cast<Eigen::Index>(j));
      next[who[j]] = so.candidates[j].cells[static_cast<std::size_t>(so.slot[j])];
    }
  }
  if (payloads != nullptr)
    *payloads += counters.payloads;
  return seq;
}

// --- latency --------------------------------------------------------------

LatencyReport latency_benchmark(const Model &model, int runs, std::uint64_t seed, double budget_ms,
                                xn::LoopbackChannel *channel) {
  if (runs < 1)
    throw ConfigError("latency benchmark needs at least one run");
  const auto &cfg = model.config();
  diff::Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto random = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = n01(rng);
    return m;
  };
  const Mat cand = random(cfg.candidates, cfg.d);
  const Mask mask = Mask::Ones(1, cfg.candidates);
  LatencyReport out;
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < runs; ++i) {
    const Mat h = random(1, cfg.d), x = random(1, cfg.d);
    const auto t0 = clock::now();
    const auto z = model::to_latent(model::vae_compress(model, h).mu);
    xn::XnHandoverRequest req{UeId(0), CellId(0), CellId(1), 0, xn::serialize_latent(z)};
    const auto tr = xn::transfer(req, budget_ms, channel);
    const Mat zr = model::from_latent(xn::deserialize_latent(*tr.delivered.latent));
    const Mat hn = model::project(model, model::vae_decode(model, zr), x);
    const Mat s = model::score_candidates(model, hn, cand, mask);
    const int slot = model::argmax_slots(s, mask).front();
    const auto t1 = clock::now();
    if (slot < 0)
      throw Error("latency benchmark produced no decision");
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.samples_ms.push_back(ms);
    out.over_budget += ms > budget_ms ? 1 : 0;
  }
  out.stats = xn::summarize_latency(out.samples_ms);
  return out;
}

std::string latency_to_json(const LatencyReport &r) {
  return json{{"n", r.stats.n},
              {"mean_ms", r.stats.mean_ms},
              {"p50_ms", r.stats.p50_ms},
              {"p95_ms", r.stats.p95_ms},
              {"p99_ms", r.stats.p99_ms},
              {"max_ms", r.stats.max_ms},
              {"over_budget", r.over_budget}}
      .dump(2);
}

// --- experiments ----------------------------------------------------------

namespace {

json modes_json(const std::vector<Mode> &modes) {
  json a = json::array();
  for (auto m : modes)
    a.push_back(to_string(m));
  return a;
}

} // namespace

std::string experiment_config_to_json(const ExperimentConfig &c) {
  json j{{"horizon", c.eval.horizon},
         {"max_delta", c.eval.max_delta},
         {"history", c.eval.history},
         {"ping_pong_window", c.eval.ping_pong_window},
         {"bootstrap", c.eval.bootstrap},
         {"level", c.eval.level},
         {"seed", c.eval.seed},
         {"batch", c.eval.batch},
         {"modes", modes_json(c.modes)},
         {"split",
          {{"train", c.split.train},
           {"val", c.split.val},
           {"test", c.split.test},
           {"segment_steps", c.split.segment_steps},
           {"seed", c.split.seed}}},
         {"rule",
          {{"hysteresis_db", c.rule.hysteresis_db},
           {"ttt_steps", c.rule.ttt_steps},
           {"l3_k", c.rule.l3_k},
           {"ping_pong_window", c.rule.ping_pong_window}}},
         {"closed_loop", c.closed_loop},
         {"max_events", c.max_events},
         {"sweeps", c.sweeps},
         {"sigma_levels", c.sigma_levels},
         {"blockage_levels", c.blockage_levels},
         {"ssb_levels", c.ssb_levels},
         {"sweep_modes", modes_json(c.sweep_modes)},
         {"perturb_seed", c.perturb_seed}};
  if (c.rule.a5_serving_below_dbm)
    j["rule"]["a5_serving_below_dbm"] = *c.rule.a5_serving_below_dbm;
  if (c.rule.a5_neighbor_above_dbm)
    j["rule"]["a5_neighbor_above_dbm"] = *c.rule.a5_neighbor_above_dbm;
  j["perturb"] = c.perturb ? json::parse(perturb::perturb_config_to_json(*c.perturb)) : json(nullptr);
  return j.dump(2);
}

ExperimentConfig experiment_config_from_json(const std::string &text) {
  ExperimentConfig c;
  try {
    const auto j = json::parse(text);
    auto get = [](const json &o, const char *key, auto &field) {
      if (o.contains(key))
        field = o.at(key).get<std::decay_t<decltype(field)>>();
    };
    get(j, "horizon", c.eval.horizon);
    get(j, "max_delta", c.eval.max_delta);
    get(j, "history", c.eval.history);
    get(j, "ping_pong_window", c.eval.ping_pong_window);
    get(j, "bootstrap", c.eval.bootstrap);
    get(j, "level", c.eval.level);
    get(j, "seed", c.eval.seed);
    get(j, "batch", c.eval.batch);
    auto get_modes = [&](const char *key, std::vector<Mode> &field) {
      if (!j.contains(key))
        return;
      field.clear();
      for (const auto &m : j.at(key))
        field.push_back(mode_from_string(m.get<std::string>()));
    };
    get_modes("modes", c.modes);
    get_modes("sweep_modes", c.sweep_modes);
    if (j.contains("split")) {
      const auto &s = j.at("split");
      get(s, "train", c.split.train);
      get(s, "val", c.split.val);
      get(s, "test", c.split.test);
      get(s, "segment_steps", c.split.segment_steps);
      get(s, "seed", c.split.seed);
    }
    if (j.contains("rule")) {
      const auto &r = j.at("rule");
      get(r, "hysteresis_db", c.rule.hysteresis_db);
      get(r, "ttt_steps", c.rule.ttt_steps);
      get(r, "l3_k", c.rule.l3_k);
      get(r, "ping_pong_window", c.rule.ping_pong_window);
      if (r.contains("a5_serving_below_dbm"))
        c.rule.a5_serving_below_dbm = r.at("a5_serving_below_dbm").get<double>();
      if (r.contains("a5_neighbor_above_dbm"))
        c.rule.a5_neighbor_above_dbm = r.at("a5_neighbor_above_dbm").get<double>();
    }
    get(j, "closed_loop", c.closed_loop);
    get(j, "max_events", c.max_events);
    get(j, "sweeps", c.sweeps);
    get(j, "sigma_levels", c.sigma_levels);
    get(j, "blockage_levels", c.blockage_levels);
    get(j, "ssb_levels", c.ssb_levels);
    get(j, "perturb_seed", c.perturb_seed);
    if (j.contains("perturb") && !j.at("perturb").is_null())
      c.perturb = perturb::perturb_config_from_json(j.at("perturb").dump());
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad evaluation config: ") + ex.what());
  }
  c.eval.validate();
  c.rule.validate();
  for (const auto &s : c.sweeps)
    if (s != "noise" && s != "blockage" && s != "ssb")
      throw ConfigError("unknown sweep axis '" + s + "'");
  return c;
}

const ModeReport *MetricsReport::find(Mode mode) const {
  for (const auto &m : modes)
    if (m.mode == mode)
      return &m;
  return nullptr;
}

const SweepRow *MetricsReport::sweep_cell(const std::string &axis, double level, Mode mode) const {
  for (const auto &r : sweep)
    if (r.axis == axis && r.level == level && r.mode == mode)
      return &r;
  return nullptr;
}

namespace {

struct Scene {
  Trace full;
  Trace test;
};

// Perturbs the full trace (so the rule and the measurement pipeline run
// continuously) and cuts out the test split.
Scene make_scene(const Trace &clean, const SplitConfig &split, const std::optional<perturb::PerturbConfig> &p) {
  Scene s;
  s.full = p ? perturb::apply(clean, *p) : clean;
  s.test = split_trace(s.full, split).test;
  return s;
}

EventSet run_mode(Mode mode, const Scene &scene, const TraceIndex &input, const TraceIndex &reference,
                  std::span<const HandoverEvent> events, const ExperimentConfig &config, Predictor main,
                  const std::optional<Predictor> &cold, rules::ServingSequence *rule_seq) {
  if (mode == Mode::rule) {
    auto seq = rules::run_rule(scene.full, config.rule);
    auto set = run_rule(seq, reference, events, config.eval);
    if (rule_seq != nullptr)
      *rule_seq = restrict_to(seq, reference);
    return set;
  }
  const Predictor p = mode == Mode::cold && cold ? *cold : main;
  const StateMode sm = mode == Mode::cold ? StateMode::cold : mode == Mode::warm ? StateMode::warm : StateMode::ilcp;
  return run_learned(*p.model, *p.stats, input, reference, events, sm, config.eval);
}

} // namespace

MetricsReport run_experiment(const ExperimentConfig &config, const Trace &trace, Predictor main,
                             std::optional<Predictor> cold) {
  config.eval.validate();
  const auto learned = [](const std::vector<Mode> &ms) {
    return std::any_of(ms.begin(), ms.end(), [](Mode m) { return m != Mode::rule; });
  };
  if ((learned(config.modes) || learned(config.sweep_modes)) && (main.model == nullptr || main.stats == nullptr))
    throw Error("learned modes need a model");
  MetricsReport rep;
  const auto &ev = config.eval;

  const Trace ref_test = split_trace(trace, config.split).test;
  const TraceIndex ref(ref_test);
  const auto all_events = extract_handover_events(ref);
  auto events = eligible_events(ref, all_events, ev, &rep.skipped_events);
  if (config.max_events > 0 && events.size() > config.max_events) {
    std::vector<HandoverEvent> kept;
    for (std::size_t i = 0; i < config.max_events; ++i)
      kept.push_back(events[i * events.size() / config.max_events]);
    rep.skipped_events += events.size() - kept.size();
    events = std::move(kept);
  }
  if (events.empty())
    throw Error("no eligible handover events in the test split");
  rep.test_events = events.size();

  const Scene scene = make_scene(trace, config.split, config.perturb);
  const TraceIndex input(scene.test);
  std::uint64_t stream = 0;
  for (Mode mode : config.modes) {
    ModeReport mr;
    mr.mode = mode;
    rules::ServingSequence rule_seq;
    mr.events = run_mode(mode, scene, input, ref, events, config, main, cold, &rule_seq);
    rep.payloads += mr.events.payloads;
    if (mr.events.payload_bytes != mr.events.payloads * xn::kPayloadBytes)
      ++rep.payload_size_violations;
    const auto seed = config.eval.seed + 1000 * (++stream);
    const auto c0 = correct_at(mr.events, 0);
    mr.acc0 = bootstrap_ci(scaled(c0, 100.0), ev.bootstrap, ev.level, seed);
    mr.hof = bootstrap_ci(scaled(c0, -100.0, 100.0), ev.bootstrap, ev.level, seed);
    if (ev.max_delta >= 25)
      mr.acc_5_25 = bootstrap_ci(scaled(per_event_accuracy(mr.events, 5, 25), 100.0), ev.bootstrap, ev.level, seed);
    for (int k = 0; k <= ev.max_delta; ++k)
      mr.curve.push_back(bootstrap_ci(scaled(correct_at(mr.events, k), 100.0), ev.bootstrap, ev.level,
                                      seed + static_cast<std::uint64_t>(k) + 1));
    if (config.closed_loop) {
      if (mode == Mode::rule) {
        mr.ping_pong = ping_pong_rate(rule_seq, ev.ping_pong_window);
      } else {
        const Predictor p = mode == Mode::cold && cold ? *cold : main;
        const StateMode sm =
            mode == Mode::cold ? StateMode::cold : mode == Mode::warm ? StateMode::warm : StateMode::ilcp;
        std::size_t n = 0;
        mr.ping_pong = ping_pong_rate(closed_loop(*p.model, *p.stats, input, sm, &n), ev.ping_pong_window);
        rep.payloads += n;
      }
    }
    rep.modes.push_back(std::move(mr));
  }

  const auto *il = rep.find(Mode::ilcp);
  const auto *co = rep.find(Mode::cold);
  const auto *wa = rep.find(Mode::warm);
  if (il != nullptr && co != nullptr && ev.max_delta >= 25) {
    const auto a = per_event_accuracy(il->events, 5, 25);
    const auto b = per_event_accuracy(co->events, 5, 25);
    std::vector<double> diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      diff[i] = 100.0 * (a[i] - b[i]);
    rep.ilcp_minus_cold = bootstrap_ci(diff, ev.bootstrap, ev.level, config.eval.seed + 7);
  }
  if (co != nullptr && wa != nullptr)
    rep.cold_start = cold_start_gap(co->events, wa->events);

  const auto sweep_modes = config.sweep_modes.empty() ? config.modes : config.sweep_modes;
  for (const auto &axis : config.sweeps) {
    std::vector<double> levels;
    if (axis == "noise")
      levels = config.sigma_levels;
    else if (axis == "blockage")
      levels.assign(config.blockage_levels.begin(), config.blockage_levels.end());
    else if (axis == "ssb")
      levels.assign(config.ssb_levels.begin(), config.ssb_levels.end());
    else
      throw ConfigError("unknown sweep axis '" + axis + "'");
    for (double level : levels) {
      perturb::PerturbConfig pc;
      pc.seed = config.perturb_seed;
      if (axis == "noise")
        pc.shadow = perturb::ShadowConfig{.sigma_db = level};
      else if (axis == "blockage")
        pc.blockage.count = static_cast<int>(level);
      else
        pc.ssb_period = static_cast<int>(level);
      const Scene s = make_scene(trace, config.split, pc);
      const TraceIndex in(s.test);
      for (Mode mode : sweep_modes) {
        const auto set = run_mode(mode, s, in, ref, events, config, main, cold, nullptr);
        rep.payloads += set.payloads;
        if (set.payload_bytes != set.payloads * xn::kPayloadBytes)
          ++rep.payload_size_violations;
        SweepRow row{axis, level, mode, {}};
        row.hof = bootstrap_ci(scaled(correct_at(set, 0), -100.0, 100.0), ev.bootstrap, ev.level,
                               config.eval.seed + 1000 * (++stream));
        rep.sweep.push_back(row);
      }
    }
  }
  return rep;
}

std::string report_to_json(const MetricsReport &rep, const ExperimentConfig &config) {
  json modes = json::object();
  for (const auto &m : rep.modes) {
    json curve = json::array();
    for (const auto &c : m.curve)
      curve.push_back(interval_json(c));
    json records = json::array();
    for (const auto &r : m.events.records) {
      std::string flags;
      for (auto c : r.correct)
        flags.push_back(c != 0 ? '1' : '0');
      records.push_back({{"t_star", r.event.t_star},
                         {"ue", r.event.ue.value},
                         {"source", r.event.source.value},
                         {"target", r.event.target.value},
                         {"correct", flags}});
    }
    json jm{{"acc_at_0", interval_json(m.acc0)},
            {"hof", interval_json(m.hof)},
            {"acc_at_0_plugin", acc_at_delta(m.events, 0)},
            {"hof_plugin", hof(m.events)},
            {"acc_delta_5_25", interval_json(m.acc_5_25)},
            {"acc_at_delta", curve},
            {"events", m.events.records.size()},
            {"label_outside_candidates", m.events.label_outside},
            {"corrupt_payloads", m.events.corrupt_payloads},
            {"records", records}};
    jm["ping_pong"] = m.ping_pong ? json(*m.ping_pong) : json(nullptr);
    modes[to_string(m.mode)] = jm;
  }
  json j{{"config", json::parse(experiment_config_to_json(config))},
         {"ping_pong_protocol", "closed loop: learned predictions pick the next serving cell; the rule runs on its "
                                "own decisions"},
         {"test_events", rep.test_events},
         {"skipped_events", rep.skipped_events},
         {"payloads", rep.payloads},
         {"payload_size_violations", rep.payload_size_violations},
         {"modes", modes}};
  j["ilcp_minus_cold_delta_5_25"] = rep.ilcp_minus_cold ? interval_json(*rep.ilcp_minus_cold) : json(nullptr);
  if (rep.cold_start)
    j["cold_start_gap"] = {{"sum", rep.cold_start->sum},
                           {"per_event_pp", rep.cold_start->per_event},
                           {"events", rep.cold_start->events}};
  else
    j["cold_start_gap"] = nullptr;
  json sweep = json::array();
  for (const auto &r : rep.sweep)
    sweep.push_back({{"axis", r.axis}, {"level", r.level}, {"mode", to_string(r.mode)}, {"hof", interval_json(r.hof)}});
  j["sweep"] = sweep;
  return j.dump(2);
}

std::string postho_curve_csv(const MetricsReport &rep) {
  std::ostringstream os;
  os.precision(10);
  os << "delta,mode,acc,lo,hi\n";
  for (const auto &m : rep.modes)
    for (std::size_t k = 0; k < m.curve.size(); ++k)
      os << k << ',' << to_string(m.mode) << ',' << m.curve[k].point << ',' << m.curve[k].lo << ','
         << m.curve[k].hi << '\n';
  return os.str();
}

std::string perturb_sweep_csv(const MetricsReport &rep) {
  std::ostringstream os;
  os.precision(10);
  os << "axis,level,mode,hof,lo,hi\n";
  for (const auto &r : rep.sweep)
    os << r.axis << ',' << format_level(r.level) << ',' << to_string(r.mode) << ',' << r.hof.point << ','
       << r.hof.lo << ',' << r.hof.hi << '\n';
  return os.str();
}

} // namespace ilcp::eval
