// SPDX-License-Identifier: Apache-2.0
//
// Measurement traces: rows of per-(t, ue, cell) radio measurements with the
// serving-cell label, the topology they were recorded on, and the indexing,
// splitting and normalization helpers the rest of the toolkit builds on.
#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilcp/common.hpp"

namespace ilcp {

enum class SplitTag { train, val, test };

const char *to_string(SplitTag tag);

struct TraceStep {
  Step t = 0;
  UeId ue;
  CellId cell;
  float rsrp = 0.0f; // dBm
  float rsrq = 0.0f; // dB
  float sinr = 0.0f; // dB
  bool is_serving = false;
  // Set by SSB sub-sampling; not part of the CSV schema.
  bool stale = false;

  bool operator==(const TraceStep &) const = default;
};

struct CellSite {
  CellId id;
  double x_m = 0.0;
  double y_m = 0.0;

  bool operator==(const CellSite &) const = default;
};

struct Topology {
  std::vector<CellSite> cells;
  std::vector<std::pair<CellId, CellId>> xn_edges;

  const CellSite *find(CellId id) const;
  bool operator==(const Topology &) const = default;
};

struct Trace {
  std::vector<TraceStep> steps; // sorted by (t, ue, cell)
  Topology topology;
  std::optional<SplitTag> split_tag;

  bool operator==(const Trace &) const = default;
};

struct HandoverEvent {
  Step t_star = 0;
  UeId ue;
  CellId source;
  CellId target;

  bool operator==(const HandoverEvent &) const = default;
};

/// Dense per-UE view over a trace. Rows for one (t, ue) are contiguous in
/// `Trace::steps`; a UE may have gaps (e.g. after splitting), which show up
/// as an invalid serving cell and an empty row range.
class TraceIndex {
public:
  struct UeTrack {
    UeId ue;
    Step t_first = 0;
    std::vector<std::uint32_t> row_begin; // indexed by t - t_first
    std::vector<std::uint16_t> row_count;
    std::vector<CellId> serving;

    Step t_last() const { return t_first + static_cast<Step>(serving.size()) - 1; }
    bool has(Step t) const {
      return t >= t_first && t <= t_last() && row_count[t - t_first] > 0;
    }
  };

  /// Contiguous interval [t_begin, t_end] on which a UE has rows every step.
  struct Run {
    UeId ue;
    Step t_begin = 0;
    Step t_end = 0; // inclusive
  };

  explicit TraceIndex(const Trace &trace);

  const Trace &trace() const { return *trace_; }
  const std::vector<UeTrack> &tracks() const { return tracks_; }
  const UeTrack *track(UeId ue) const;

  std::span<const TraceStep> rows(UeId ue, Step t) const;
  std::optional<CellId> serving(UeId ue, Step t) const;
  /// Rows at t for every UE.
  std::span<const TraceStep> rows_at(Step t) const;

  Step t_min() const { return t_min_; }
  Step t_max() const { return t_max_; }

  std::vector<Run> runs() const;
  /// Run containing (ue, t), if any.
  std::optional<Run> run_of(UeId ue, Step t) const;

private:
  const Trace *trace_;
  std::vector<UeTrack> tracks_;
  std::map<UeId, std::size_t> by_ue_;
  std::map<Step, std::pair<std::uint32_t, std::uint32_t>> by_t_;
  Step t_min_ = 0;
  Step t_max_ = -1;
};

// --- text formats ---------------------------------------------------------

inline constexpr const char *kTraceCsvHeader =
    "t,ue_id,cell_id,rsrp_dbm,rsrq_db,sinr_db,is_serving";

Trace parse_trace(const std::filesystem::path &path);
Trace parse_trace(std::istream &in);
/// Validates ordering, uniqueness and the one-serving-cell rule.
void validate_trace(const Trace &trace);

void write_trace_csv(const Trace &trace, std::ostream &out);
void write_trace_csv(const Trace &trace, const std::filesystem::path &path);

Topology parse_topology(const std::filesystem::path &path);
Topology parse_topology_json(const std::string &text);
std::string topology_to_json(const Topology &topology);

/// Reads `trace.csv` and `topology.json` from a scenario directory.
Trace load_scenario(const std::filesystem::path &dir);
void save_scenario(const Trace &trace, const std::filesystem::path &dir);

// --- splitting ------------------------------------------------------------

struct SplitConfig {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  Step segment_steps = 3000;
  std::uint64_t seed = 7;
};

struct TraceSplits {
  Trace train;
  Trace val;
  Trace test;
};

/// Cuts every UE trajectory into contiguous segments and deals the segments
/// out to train/val/test in the configured proportions.
TraceSplits split_trace(const Trace &trace, const SplitConfig &config);

// --- normalization --------------------------------------------------------

inline constexpr double kStdFloor = 1e-6;
inline constexpr std::size_t kNumMeasFeatures = 3; // rsrp, rsrq, sinr

using MeasFeatures = std::array<double, kNumMeasFeatures>;

struct FeatureStats {
  MeasFeatures mean{};
  MeasFeatures std{1.0, 1.0, 1.0};
};

struct NormalizationStats {
  std::map<CellId, FeatureStats> per_cell;
  FeatureStats global;

  const FeatureStats &for_cell(CellId cell) const;
};

NormalizationStats fit_normalization(const Trace &train);
MeasFeatures apply_normalization(const MeasFeatures &x, CellId cell,
                                 const NormalizationStats &stats);
inline MeasFeatures features_of(const TraceStep &row) {
  return {row.rsrp, row.rsrq, row.sinr};
}

std::string normalization_to_json(const NormalizationStats &stats);
NormalizationStats normalization_from_json(const std::string &text);

// --- events ---------------------------------------------------------------

std::vector<HandoverEvent> extract_handover_events(const Trace &trace);
std::vector<HandoverEvent> extract_handover_events(const TraceIndex &index);

} // namespace ilcp
