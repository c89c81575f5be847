// SPDX-License-Identifier: Apache-2.0
//
// Heterogeneous graph snapshots (UE nodes, cell nodes, measurement and Xn
// edges) and the per-UE candidate sets the scorer ranks.
#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "ilcp/trace.hpp"

namespace ilcp {

inline constexpr int kEdgeFeatures = 4; // rsrp, rsrq, sinr (normalized), is_serving
inline constexpr int kDefaultCandidates = 8;

struct MeasEdge {
  int ue = 0;   // index into GraphSnapshot::ues
  int cell = 0; // index into GraphSnapshot::cells
  float rsrp_dbm = 0.0f;
  std::array<double, kEdgeFeatures> features{};
};

struct UeNode {
  UeId ue;
  Step t = 0;
};

struct GraphSnapshot {
  Step t = 0; // -1 when the UE nodes were taken at different steps
  std::vector<UeNode> ues;
  std::vector<CellId> cells;
  std::vector<std::array<double, 2>> cell_positions; // normalized x, y
  std::vector<MeasEdge> meas;                        // grouped by UE, in UE order
  std::vector<std::pair<int, int>> xn;               // directed (src, dst), both directions present
  std::vector<std::pair<int, int>> ue_edge_range;    // [begin, end) into meas per UE

  int cell_index(CellId id) const;
};

struct CandidateSet {
  UeId ue;
  std::vector<CellId> cells; // exactly K slots; padded slots hold an invalid id
  std::vector<int> cell_index;
  std::vector<std::uint8_t> mask;

  int size() const { return static_cast<int>(cells.size()); }
  int visible() const;
  /// Slot holding `cell`, or -1.
  int slot_of(CellId cell) const;
};

class SnapshotBuilder {
public:
  SnapshotBuilder(const Topology &topology, const NormalizationStats &stats);

  /// Cell nodes and Xn edges only.
  GraphSnapshot empty(Step t) const;
  /// Appends one UE node with its measurement edges. When `serving` is set it
  /// replaces the trace's is_serving flag (closed-loop evaluation).
  void add_ue(GraphSnapshot &snapshot, UeNode node, std::span<const TraceStep> rows,
              std::optional<CellId> serving = std::nullopt) const;

  const Topology &topology() const { return *topology_; }

private:
  const Topology *topology_;
  const NormalizationStats *stats_;
  std::vector<std::array<double, 2>> positions_;
  std::vector<std::pair<int, int>> xn_;
};

/// Snapshot of every UE with measurements at t.
GraphSnapshot build_snapshot(const TraceIndex &index, Step t, const NormalizationStats &stats);

/// Top-K visible cells by current RSRP, ties to the lower CellId. A flagged
/// serving cell outside the top K replaces the K-th slot.
CandidateSet build_candidates(const GraphSnapshot &snapshot, int ue_index, int k = kDefaultCandidates);

} // namespace ilcp
