// SPDX-License-Identifier: Apache-2.0
//
// Synthetic scenario generator: a square grid of cells, random-waypoint UEs,
// log-distance pathloss, and reference serving labels from the noise-free A3
// rule.
#pragma once

#include <cstdint>
#include <string>

#include "ilcp/rules.hpp"
#include "ilcp/trace.hpp"

namespace ilcp::synth {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct ScenarioConfig {
  int grid_rows = 3;
  int grid_cols = 3;
  double spacing_m = 100.0;
  int n_ues = 48;
  Step duration_steps = 12000;
  double speed_min_mps = 5.0;
  double speed_max_mps = 15.0;
  double pathloss_exponent = 3.5;
  double pl0_db = 40.0;
  double d0_m = 10.0;
  double tx_power_dbm = 43.0;
  double visibility_floor_dbm = -110.0;
  double noise_dbm = -95.0;
  double xn_threshold_factor = 1.5; // Xn edge if distance <= factor * spacing
  double step_seconds = 0.01;
  std::uint64_t seed = 1;
  rules::RuleConfig rule;

  int n_cells() const { return grid_rows * grid_cols; }
  void validate() const;
};

std::string config_to_json(const ScenarioConfig &config);
/// Missing keys keep their defaults.
ScenarioConfig config_from_json(const std::string &text);

double pathloss_db(double distance_m, const ScenarioConfig &config);
double rsrp_at(Point cell, Point ue, const ScenarioConfig &config);

Topology make_topology(const ScenarioConfig &config);

/// Trace with reference serving labels plus its topology. Deterministic in
/// the config (including the seed).
Trace generate(const ScenarioConfig &config);

} // namespace ilcp::synth
