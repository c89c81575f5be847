// SPDX-License-Identifier: Apache-2.0
#include "ilcp/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <json.hpp>

namespace ilcp::synth {

namespace {

using json = nlohmann::json;

double db_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }

struct Walker {
  Point pos;
  Point goal;
  double speed = 0.0;
};

} // namespace

void ScenarioConfig::validate() const {
  if (n_cells() < 2 || grid_rows < 1 || grid_cols < 1)
    throw ConfigError("scenario needs at least 2 cells");
  if (!(spacing_m > 0.0))
    throw ConfigError("grid spacing must be positive");
  if (n_ues < 1)
    throw ConfigError("scenario needs at least one UE");
  if (duration_steps < 1)
    throw ConfigError("duration must be >= 1 step");
  if (speed_min_mps < 0.0 || speed_max_mps < speed_min_mps)
    throw ConfigError("speed range must satisfy 0 <= min <= max");
  if (!(d0_m > 0.0))
    throw ConfigError("reference distance d0 must be positive");
  if (!(step_seconds > 0.0))
    throw ConfigError("step length must be positive");
  rule.validate();
}

std::string config_to_json(const ScenarioConfig &c) {
  json j = {
      {"grid_rows", c.grid_rows},
      {"grid_cols", c.grid_cols},
      {"spacing_m", c.spacing_m},
      {"n_ues", c.n_ues},
      {"duration_steps", c.duration_steps},
      {"speed_min_mps", c.speed_min_mps},
      {"speed_max_mps", c.speed_max_mps},
      {"pathloss_exponent", c.pathloss_exponent},
      {"pl0_db", c.pl0_db},
      {"d0_m", c.d0_m},
      {"tx_power_dbm", c.tx_power_dbm},
      {"visibility_floor_dbm", c.visibility_floor_dbm},
      {"noise_dbm", c.noise_dbm},
      {"xn_threshold_factor", c.xn_threshold_factor},
      {"step_seconds", c.step_seconds},
      {"seed", c.seed},
      {"rule", {{"hysteresis_db", c.rule.hysteresis_db}, {"ttt_steps", c.rule.ttt_steps}, {"l3_k", c.rule.l3_k}}},
  };
  return j.dump(2);
}

ScenarioConfig config_from_json(const std::string &text) {
  ScenarioConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad scenario config: ") + ex.what());
  }
  auto get = [&](const char *key, auto &field) {
    if (j.contains(key))
      field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("grid_rows", c.grid_rows);
    get("grid_cols", c.grid_cols);
    get("spacing_m", c.spacing_m);
    get("n_ues", c.n_ues);
    get("duration_steps", c.duration_steps);
    get("speed_min_mps", c.speed_min_mps);
    get("speed_max_mps", c.speed_max_mps);
    get("pathloss_exponent", c.pathloss_exponent);
    get("pl0_db", c.pl0_db);
    get("d0_m", c.d0_m);
    get("tx_power_dbm", c.tx_power_dbm);
    get("visibility_floor_dbm", c.visibility_floor_dbm);
    get("noise_dbm", c.noise_dbm);
    get("xn_threshold_factor", c.xn_threshold_factor);
    get("step_seconds", c.step_seconds);
    get("seed", c.seed);
    if (j.contains("rule")) {
      const auto &r = j.at("rule");
      if (r.contains("hysteresis_db"))
        c.rule.hysteresis_db = r.at("hysteresis_db").get<double>();
      if (r.contains("ttt_steps"))
        c.rule.ttt_steps = r.at("ttt_steps").get<int>();
      if (r.contains("l3_k"))
        c.rule.l3_k = r.at("l3_k").get<double>();
    }
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad scenario config: ") + ex.what());
  }
  c.validate();
  return c;
}

double pathloss_db(double distance_m, const ScenarioConfig &config) {
  const double d = std::max(distance_m, config.d0_m);
  return config.pl0_db + 10.0 * config.pathloss_exponent * std::log10(d / config.d0_m);
}

double rsrp_at(Point cell, Point ue, const ScenarioConfig &config) {
  const double d = std::hypot(ue.x - cell.x, ue.y - cell.y);
  return config.tx_power_dbm - pathloss_db(d, config);
}

Topology make_topology(const ScenarioConfig &config) {
  Topology topo;
  for (int r = 0; r < config.grid_rows; ++r)
    for (int c = 0; c < config.grid_cols; ++c)
      topo.cells.push_back({CellId(static_cast<std::uint32_t>(r * config.grid_cols + c)),
                            c * config.spacing_m, r * config.spacing_m});
  const double limit = config.xn_threshold_factor * config.spacing_m + 1e-9;
  for (std::size_t i = 0; i < topo.cells.size(); ++i)
    for (std::size_t j = i + 1; j < topo.cells.size(); ++j) {
      const auto &a = topo.cells[i];
      const auto &b = topo.cells[j];
      if (std::hypot(a.x_m - b.x_m, a.y_m - b.y_m) <= limit)
        topo.xn_edges.emplace_back(a.id, b.id);
    }
  return topo;
}

Trace generate(const ScenarioConfig &config) {
  config.validate();
  Trace trace;
  trace.topology = make_topology(config);
  const auto &cells = trace.topology.cells;

  // UEs roam the grid's bounding box extended by half a spacing.
  const double half = 0.5 * config.spacing_m;
  const double x_lo = -half, x_hi = (config.grid_cols - 1) * config.spacing_m + half;
  const double y_lo = -half, y_hi = (config.grid_rows - 1) * config.spacing_m + half;

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> ux(x_lo, x_hi), uy(y_lo, y_hi);
  std::uniform_real_distribution<double> uspeed(config.speed_min_mps, config.speed_max_mps);

  std::vector<Walker> walkers(static_cast<std::size_t>(config.n_ues));
  for (auto &w : walkers) {
    w.pos = {ux(rng), uy(rng)};
    w.goal = {ux(rng), uy(rng)};
    w.speed = uspeed(rng);
  }
  std::vector<rules::RuleState> rule_state(walkers.size());

  const double noise_mw = db_to_mw(config.noise_dbm);
  std::vector<double> rsrp(cells.size()), power(cells.size());
  std::vector<rules::Measurement> meas;
  std::vector<TraceStep> rows;

  trace.steps.reserve(static_cast<std::size_t>(config.duration_steps) * walkers.size() * cells.size());
  for (Step t = 0; t < config.duration_steps; ++t) {
    for (std::size_t u = 0; u < walkers.size(); ++u) {
      auto &w = walkers[u];
      double total_mw = noise_mw;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        // Stored as binary32 so the labels below see exactly what the CSV holds.
        rsrp[c] = static_cast<float>(rsrp_at({cells[c].x_m, cells[c].y_m}, w.pos, config));
        power[c] = db_to_mw(rsrp[c]);
        total_mw += power[c];
      }
      rows.clear();
      meas.clear();
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (rsrp[c] < config.visibility_floor_dbm)
          continue;
        TraceStep s;
        s.t = t;
        s.ue = UeId(static_cast<std::uint32_t>(u));
        s.cell = cells[c].id;
        s.rsrp = static_cast<float>(rsrp[c]);
        s.rsrq = static_cast<float>(10.0 * std::log10(power[c] / total_mw));
        s.sinr = static_cast<float>(10.0 * std::log10(power[c] / (total_mw - power[c])));
        rows.push_back(s);
        meas.push_back({s.cell, s.rsrp});
      }
      if (!rows.empty()) {
        rule_state[u].step(config.rule, meas);
        const auto serving = *rule_state[u].serving();
        std::sort(rows.begin(), rows.end(), [](const auto &a, const auto &b) { return a.cell < b.cell; });
        for (auto &s : rows) {
          s.is_serving = s.cell == serving;
          trace.steps.push_back(s);
        }
      } else {
        rule_state[u] = rules::RuleState{};
      }

      // Random waypoint, no pause.
      double budget = w.speed * config.step_seconds;
      while (budget > 0.0) {
        const double dx = w.goal.x - w.pos.x, dy = w.goal.y - w.pos.y;
        const double dist = std::hypot(dx, dy);
        if (dist > budget) {
          w.pos.x += dx / dist * budget;
          w.pos.y += dy / dist * budget;
          break;
        }
        w.pos = w.goal;
        budget -= dist;
        w.goal = {ux(rng), uy(rng)};
        w.speed = uspeed(rng);
        if (w.speed <= 0.0)
          break;
      }
    }
  }
  return trace;
}

} // namespace ilcp::synth
