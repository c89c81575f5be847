// SPDX-License-Identifier: Apache-2.0
//
// Event-triggered A3/A5 handover rule with hysteresis, time-to-trigger and
// the layer-3 IIR measurement filter.
#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "ilcp/trace.hpp"

namespace ilcp::rules {

struct RuleConfig {
  double hysteresis_db = 3.0;
  int ttt_steps = 16; // 160 ms
  double l3_k = 4.0;
  int ping_pong_window = 50; // 500 ms
  // A5 thresholds; both must be set to enable the A5 conditions.
  std::optional<double> a5_serving_below_dbm;
  std::optional<double> a5_neighbor_above_dbm;

  void validate() const;
};

/// Filter weight a = (1/2)^(k/4).
double l3_coefficient(double k);

/// One IIR update. An empty previous value means this is the first sample.
double l3_filter_step(std::optional<double> previous, double measurement, double k);

struct Measurement {
  CellId cell;
  double rsrp_dbm = 0.0;
};

struct Decision {
  CellId source;
  CellId target;
};

/// Per-UE rule state machine.
class RuleState {
public:
  std::optional<CellId> serving() const { return serving_; }
  double filtered(CellId cell) const { return filtered_.at(cell); }
  int counter(CellId cell) const;

  /// Feeds the measurements of one step. The first call attaches to the
  /// strongest cell. Returns a decision when a handover fires.
  std::optional<Decision> step(const RuleConfig &config, std::span<const Measurement> meas);

private:
  std::optional<CellId> serving_;
  std::map<CellId, double> filtered_;
  std::map<CellId, int> counter_;
};

/// Closed-loop serving cell per UE and step, dense over each UE's active
/// interval (invalid CellId where the UE has no rows).
struct ServingSequence {
  struct Track {
    UeId ue;
    Step t_first = 0;
    std::vector<CellId> serving;
  };
  std::vector<Track> tracks;

  const Track *find(UeId ue) const;
  std::optional<CellId> at(UeId ue, Step t) const;
};

ServingSequence run_rule(const Trace &trace, const RuleConfig &config);

/// Handover events implied by a serving sequence.
std::vector<HandoverEvent> events_of(const ServingSequence &sequence);

/// Rewrites the is_serving flags of `trace` from a serving sequence.
void relabel(Trace &trace, const ServingSequence &sequence);

} // namespace ilcp::rules
