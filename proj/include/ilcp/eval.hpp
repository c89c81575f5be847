// SPDX-License-Identifier: Apache-2.0
//
// Evaluation: event-window runs for the learned state modes and the rule
// baseline, the metric suite (Acc@delta, HOF, ping-pong, cold-start gap),
// percentile-bootstrap intervals, the handover latency benchmark and the
// experiment driver that writes reports and sweep tables.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilcp/model.hpp"
#include "ilcp/perturb.hpp"
#include "ilcp/rules.hpp"
#include "ilcp/trace.hpp"
#include "ilcp/xn.hpp"

namespace ilcp::eval {

using model::Model;
using model::StateMode;

enum class Mode { cold, warm, ilcp, rule };
const char *to_string(Mode mode);
Mode mode_from_string(const std::string &text);
std::vector<Mode> modes_from_list(const std::string &comma_separated);

struct EvalConfig {
  int horizon = 10;   // Delta
  int max_delta = 30; // post-handover range [0, max_delta]
  int history = 64;   // steps replayed before t*
  int ping_pong_window = 50;
  int bootstrap = 1000;
  double level = 95.0;
  std::uint64_t seed = 1;
  std::size_t batch = 256;
  bool keep_payloads = false; // ilcp mode: retain every emitted payload

  void validate() const;
};

struct EventRecord {
  HandoverEvent event;
  std::vector<std::uint8_t> correct; // per delta
  std::vector<CellId> predicted;     // per delta
  std::vector<double> nll;           // per delta; NaN for the rule or an unreachable label
};

struct EmittedPayload {
  UeId ue;
  Step t = 0;
  xn::Latent latent; // source-side values before serialization
  xn::Payload payload;
};

struct EventSet {
  std::vector<EventRecord> records; // ordered by (t*, ue)
  std::size_t skipped = 0;          // no pre-handover step or labels past the end of the run
  std::size_t label_outside = 0;    // predictions whose label was not a candidate
  std::size_t payloads = 0;
  std::size_t payload_bytes = 0;
  std::size_t corrupt_payloads = 0;
  std::vector<EmittedPayload> emitted;
};

/// Events with at least one step of history and labels up to
/// t* + max_delta + horizon inside the same run, sorted by (t*, ue).
std::vector<HandoverEvent> eligible_events(const TraceIndex &reference, std::span<const HandoverEvent> events,
                                           const EvalConfig &config, std::size_t *skipped = nullptr);

/// Replays each event window on `input` (measurements) and scores against
/// the serving labels of `reference`. The state at every reference handover
/// inside a window follows `mode`.
EventSet run_learned(const Model &model, const NormalizationStats &stats, const TraceIndex &input,
                     const TraceIndex &reference, std::span<const HandoverEvent> events, StateMode mode,
                     const EvalConfig &config);

/// The rule's serving cell at t + horizon stands in for its prediction at t.
EventSet run_rule(const rules::ServingSequence &rule, const TraceIndex &reference,
                  std::span<const HandoverEvent> events, const EvalConfig &config);

// --- metrics --------------------------------------------------------------

double acc_at_delta(const EventSet &set, int delta);
double hof(const EventSet &set);
/// Per-event mean of the 0/1 accuracy over delta in [lo, hi].
std::vector<double> per_event_accuracy(const EventSet &set, int lo, int hi);

/// Share of events A -> B that the same UE reverses (B -> A) within
/// `window` steps, in percent of all events.
double ping_pong_rate(std::span<const HandoverEvent> events, int window);
double ping_pong_rate(const rules::ServingSequence &sequence, int window);

struct ColdStartGap {
  double sum = 0.0;       // sum of l(cold) - l(warm), 0/1 loss at delta = 0
  double per_event = 0.0; // sum / |events| in percentage points
  std::size_t events = 0;
};
ColdStartGap cold_start_gap(const EventSet &cold, const EventSet &warm);

struct Interval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Means of `resamples` resamples of `values` drawn with replacement.
std::vector<double> bootstrap_means(std::span<const double> values, int resamples, std::uint64_t seed);
/// Percentile interval; the point estimate is the mean of the resample means.
Interval bootstrap_ci(std::span<const double> values, int resamples, double level, std::uint64_t seed);

// --- closed loop ----------------------------------------------------------

/// Lets the predictor's argmax pick the serving cell for the next step on
/// every run of `input`; each run starts on its labelled serving cell.
rules::ServingSequence closed_loop(const Model &model, const NormalizationStats &stats, const TraceIndex &input,
                                   StateMode mode, std::size_t *payloads = nullptr);

// --- latency --------------------------------------------------------------

struct LatencyReport {
  xn::LatencyStats stats;
  std::size_t over_budget = 0;
  std::vector<double> samples_ms;
};

/// Times compress -> serialize -> transfer -> deserialize -> decode ->
/// project -> score per call on random inputs.
LatencyReport latency_benchmark(const Model &model, int runs, std::uint64_t seed, double budget_ms = 10.0,
                                xn::LoopbackChannel *channel = nullptr);
std::string latency_to_json(const LatencyReport &report);

// --- experiments ----------------------------------------------------------

struct ExperimentConfig {
  EvalConfig eval;
  std::vector<Mode> modes{Mode::cold, Mode::warm, Mode::ilcp, Mode::rule};
  SplitConfig split;
  rules::RuleConfig rule;
  bool closed_loop = true;
  std::size_t max_events = 0; // 0 keeps every eligible test event
  std::optional<perturb::PerturbConfig> perturb;
  std::vector<std::string> sweeps; // any of "noise", "blockage", "ssb"
  std::vector<double> sigma_levels{0, 3, 6, 9, 12};
  std::vector<int> blockage_levels{0, 4, 8, 16, 32};
  std::vector<int> ssb_levels{1, 2, 4, 8, 16};
  std::vector<Mode> sweep_modes; // empty: same as `modes`
  std::uint64_t perturb_seed = 1;
};

std::string experiment_config_to_json(const ExperimentConfig &config);
ExperimentConfig experiment_config_from_json(const std::string &text);

struct Predictor {
  const Model *model = nullptr;
  const NormalizationStats *stats = nullptr;
};

struct ModeReport {
  Mode mode = Mode::cold;
  Interval acc0;
  Interval hof;
  Interval acc_5_25;
  std::vector<Interval> curve; // per delta
  std::optional<double> ping_pong;
  EventSet events;
};

struct SweepRow {
  std::string axis;
  double level = 0.0;
  Mode mode = Mode::cold;
  Interval hof;
};

struct MetricsReport {
  std::vector<ModeReport> modes;
  std::optional<Interval> ilcp_minus_cold; // paired, mean over delta in [5, 25]
  std::optional<ColdStartGap> cold_start;
  std::vector<SweepRow> sweep;
  std::size_t test_events = 0;
  std::size_t skipped_events = 0;
  std::size_t payloads = 0;
  std::size_t payload_size_violations = 0;

  const ModeReport *find(Mode mode) const;
  /// HOF of `mode` on `axis` at `level`, if that cell was run.
  const SweepRow *sweep_cell(const std::string &axis, double level, Mode mode) const;
};

/// `main` serves warm and ilcp; `cold` (a zero-knowledge checkpoint) serves
/// cold when given, `main` otherwise. Evaluates on the test split of `trace`.
MetricsReport run_experiment(const ExperimentConfig &config, const Trace &trace, Predictor main,
                             std::optional<Predictor> cold = std::nullopt);

std::string report_to_json(const MetricsReport &report, const ExperimentConfig &config);
std::string postho_curve_csv(const MetricsReport &report);
std::string perturb_sweep_csv(const MetricsReport &report);

} // namespace ilcp::eval
