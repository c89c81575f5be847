// SPDX-License-Identifier: Apache-2.0
#include "ilcp/rules.hpp"

#include <algorithm>
#include <cmath>

namespace ilcp::rules {

void RuleConfig::validate() const {
  if (!(hysteresis_db >= 0.0))
    throw ConfigError("hysteresis must be >= 0 dB");
  if (ttt_steps < 1)
    throw ConfigError("time-to-trigger must be >= 1 step");
  if (!(l3_k >= 0.0))
    throw ConfigError("L3 filter coefficient k must be >= 0");
  if (ping_pong_window < 1)
    throw ConfigError("ping-pong window must be >= 1 step");
}

double l3_coefficient(double k) { return std::pow(0.5, k / 4.0); }

double l3_filter_step(std::optional<double> previous, double measurement, double k) {
  if (!previous)
    return measurement;
  const double a = l3_coefficient(k);
  return (1.0 - a) * *previous + a * measurement;
}

int RuleState::counter(CellId cell) const {
  auto it = counter_.find(cell);
  return it == counter_.end() ? 0 : it->second;
}

std::optional<Decision> RuleState::step(const RuleConfig &config, std::span<const Measurement> meas) {
  if (meas.empty())
    return std::nullopt;

  // Cells that dropped out of visibility lose their filter state.
  for (auto it = filtered_.begin(); it != filtered_.end();) {
    const bool seen = std::any_of(meas.begin(), meas.end(), [&](const auto &m) { return m.cell == it->first; });
    if (!seen) {
      counter_.erase(it->first);
      it = filtered_.erase(it);
    } else {
      ++it;
    }
  }
  for (const auto &m : meas) {
    auto it = filtered_.find(m.cell);
    const auto prev = it == filtered_.end() ? std::nullopt : std::optional<double>(it->second);
    filtered_[m.cell] = l3_filter_step(prev, m.rsrp_dbm, config.l3_k);
  }

  auto strongest = [&]() {
    CellId best;
    double best_f = -INFINITY;
    for (const auto &[cell, f] : filtered_)
      if (f > best_f) { // map order gives lowest id on ties
        best = cell;
        best_f = f;
      }
    return best;
  };

  if (!serving_) {
    serving_ = strongest();
    return std::nullopt;
  }
  if (!filtered_.contains(*serving_)) {
    // Serving cell no longer visible: forced move to the strongest cell.
    const Decision d{*serving_, strongest()};
    serving_ = d.target;
    counter_.clear();
    return d;
  }

  const double f_serving = filtered_.at(*serving_);
  std::optional<CellId> fire;
  double fire_f = -INFINITY;
  for (const auto &[cell, f] : filtered_) {
    if (cell == *serving_)
      continue;
    bool entering = f > f_serving + config.hysteresis_db;
    if (config.a5_serving_below_dbm && config.a5_neighbor_above_dbm)
      entering = entering && f_serving < *config.a5_serving_below_dbm && f > *config.a5_neighbor_above_dbm;
    int &c = counter_[cell];
    c = entering ? std::min(c + 1, config.ttt_steps) : 0;
    if (c >= config.ttt_steps && f > fire_f) {
      fire = cell;
      fire_f = f;
    }
  }
  if (!fire)
    return std::nullopt;
  const Decision d{*serving_, *fire};
  serving_ = *fire;
  counter_.clear();
  return d;
}

const ServingSequence::Track *ServingSequence::find(UeId ue) const {
  auto it = std::lower_bound(tracks.begin(), tracks.end(), ue,
                             [](const Track &t, UeId u) { return t.ue < u; });
  return (it != tracks.end() && it->ue == ue) ? &*it : nullptr;
}

std::optional<CellId> ServingSequence::at(UeId ue, Step t) const {
  const auto *tr = find(ue);
  if (tr == nullptr || t < tr->t_first || t >= tr->t_first + static_cast<Step>(tr->serving.size()))
    return std::nullopt;
  const auto c = tr->serving[static_cast<std::size_t>(t - tr->t_first)];
  return c.valid() ? std::optional(c) : std::nullopt;
}

ServingSequence run_rule(const Trace &trace, const RuleConfig &config) {
  config.validate();
  ServingSequence out;
  if (trace.steps.empty())
    return out;
  TraceIndex index(trace);
  std::vector<Measurement> meas;
  for (const auto &tr : index.tracks()) {
    ServingSequence::Track seq;
    seq.ue = tr.ue;
    seq.t_first = tr.t_first;
    seq.serving.assign(tr.serving.size(), CellId{});
    RuleState state;
    for (std::size_t k = 0; k < tr.serving.size(); ++k) {
      const Step t = tr.t_first + static_cast<Step>(k);
      meas.clear();
      for (const auto &row : index.rows(tr.ue, t))
        meas.push_back({row.cell, row.rsrp});
      if (meas.empty()) {
        // A gap in visibility restarts the state machine.
        state = RuleState{};
        continue;
      }
      state.step(config, meas);
      seq.serving[k] = *state.serving();
    }
    out.tracks.push_back(std::move(seq));
  }
  return out;
}

std::vector<HandoverEvent> events_of(const ServingSequence &sequence) {
  std::vector<HandoverEvent> events;
  for (const auto &tr : sequence.tracks)
    for (std::size_t k = 1; k < tr.serving.size(); ++k)
      if (tr.serving[k - 1].valid() && tr.serving[k].valid() && tr.serving[k - 1] != tr.serving[k])
        events.push_back({tr.t_first + static_cast<Step>(k), tr.ue, tr.serving[k - 1], tr.serving[k]});
  std::sort(events.begin(), events.end(), [](const auto &a, const auto &b) {
    return std::tie(a.t_star, a.ue) < std::tie(b.t_star, b.ue);
  });
  return events;
}

void relabel(Trace &trace, const ServingSequence &sequence) {
  for (auto &row : trace.steps) {
    const auto s = sequence.at(row.ue, row.t);
    row.is_serving = s && *s == row.cell;
  }
}

} // namespace ilcp::rules
