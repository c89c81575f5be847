// SPDX-License-Identifier: Apache-2.0
#include "ilcp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ilcp {

int GraphSnapshot::cell_index(CellId id) const {
  auto it = std::find(cells.begin(), cells.end(), id);
  return it == cells.end() ? -1 : static_cast<int>(it - cells.begin());
}

int CandidateSet::visible() const { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }

int CandidateSet::slot_of(CellId cell) const {
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (mask[i] && cells[i] == cell)
      return static_cast<int>(i);
  return -1;
}

SnapshotBuilder::SnapshotBuilder(const Topology &topology, const NormalizationStats &stats)
    : topology_(&topology), stats_(&stats) {
  const auto n = topology.cells.size();
  if (n == 0)
    throw Error("topology has no cells");
  double mx = 0.0, my = 0.0;
  for (const auto &c : topology.cells) {
    mx += c.x_m;
    my += c.y_m;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sx = 0.0, sy = 0.0;
  for (const auto &c : topology.cells) {
    sx += (c.x_m - mx) * (c.x_m - mx);
    sy += (c.y_m - my) * (c.y_m - my);
  }
  sx = std::max(std::sqrt(sx / static_cast<double>(n)), kStdFloor);
  sy = std::max(std::sqrt(sy / static_cast<double>(n)), kStdFloor);
  for (const auto &c : topology.cells)
    positions_.push_back({(c.x_m - mx) / sx, (c.y_m - my) / sy});

  auto index_of = [&](CellId id) {
    for (std::size_t i = 0; i < n; ++i)
      if (topology.cells[i].id == id)
        return static_cast<int>(i);
    throw Error("Xn edge references unknown cell " + std::to_string(id.value));
  };
  for (const auto &[a, b] : topology.xn_edges) {
    const int ia = index_of(a), ib = index_of(b);
    xn_.emplace_back(ia, ib);
    xn_.emplace_back(ib, ia);
  }
}

GraphSnapshot SnapshotBuilder::empty(Step t) const {
  GraphSnapshot g;
  g.t = t;
  for (const auto &c : topology_->cells)
    g.cells.push_back(c.id);
  g.cell_positions = positions_;
  g.xn = xn_;
  return g;
}

void SnapshotBuilder::add_ue(GraphSnapshot &g, UeNode node, std::span<const TraceStep> rows,
                             std::optional<CellId> serving) const {
  const int ue_index = static_cast<int>(g.ues.size());
  g.ues.push_back(node);
  const int begin = static_cast<int>(g.meas.size());
  for (const auto &row : rows) {
    MeasEdge e;
    e.ue = ue_index;
    e.cell = g.cell_index(row.cell);
    if (e.cell < 0)
      throw Error("measurement references cell " + std::to_string(row.cell.value) + " missing from topology");
    e.rsrp_dbm = row.rsrp;
    const auto f = apply_normalization(features_of(row), row.cell, *stats_);
    e.features = {f[0], f[1], f[2], (serving ? row.cell == *serving : row.is_serving) ? 1.0 : 0.0};
    g.meas.push_back(e);
  }
  g.ue_edge_range.emplace_back(begin, static_cast<int>(g.meas.size()));
}

GraphSnapshot build_snapshot(const TraceIndex &index, Step t, const NormalizationStats &stats) {
  if (t < index.t_min() || t > index.t_max())
    throw Error("time " + std::to_string(t) + " outside trace range [" + std::to_string(index.t_min()) + ", " +
                std::to_string(index.t_max()) + "]");
  SnapshotBuilder builder(index.trace().topology, stats);
  auto g = builder.empty(t);
  const auto rows = index.rows_at(t);
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    while (j < rows.size() && rows[j].ue == rows[i].ue)
      ++j;
    builder.add_ue(g, {rows[i].ue, t}, rows.subspan(i, j - i));
    i = j;
  }
  return g;
}

CandidateSet build_candidates(const GraphSnapshot &g, int ue_index, int k) {
  if (ue_index < 0 || ue_index >= static_cast<int>(g.ues.size()))
    throw Error("UE index " + std::to_string(ue_index) + " not in snapshot");
  if (k < 1)
    throw ConfigError("candidate set size must be >= 1");
  const auto [begin, end] = g.ue_edge_range[static_cast<std::size_t>(ue_index)];
  if (begin == end)
    throw Error("UE " + std::to_string(g.ues[static_cast<std::size_t>(ue_index)].ue.value) +
                " has no visible cells");
  std::vector<int> order(static_cast<std::size_t>(end - begin));
  std::iota(order.begin(), order.end(), begin);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto &ea = g.meas[static_cast<std::size_t>(a)];
    const auto &eb = g.meas[static_cast<std::size_t>(b)];
    if (ea.rsrp_dbm != eb.rsrp_dbm)
      return ea.rsrp_dbm > eb.rsrp_dbm;
    return g.cells[static_cast<std::size_t>(ea.cell)] < g.cells[static_cast<std::size_t>(eb.cell)];
  });
  // The flagged serving cell always keeps a slot, displacing the weakest.
  if (order.size() > static_cast<std::size_t>(k)) {
    auto serving = std::find_if(order.begin() + k, order.end(),
                                [&](int e) { return g.meas[static_cast<std::size_t>(e)].features[3] > 0.5; });
    if (serving != order.end())
      order[static_cast<std::size_t>(k - 1)] = *serving;
  }
  CandidateSet out;
  out.ue = g.ues[static_cast<std::size_t>(ue_index)].ue;
  out.cells.assign(static_cast<std::size_t>(k), CellId{});
  out.cell_index.assign(static_cast<std::size_t>(k), 0);
  out.mask.assign(static_cast<std::size_t>(k), 0);
  for (std::size_t s = 0; s < order.size() && s < static_cast<std::size_t>(k); ++s) {
    const auto &e = g.meas[static_cast<std::size_t>(order[s])];
    out.cells[s] = g.cells[static_cast<std::size_t>(e.cell)];
    out.cell_index[s] = e.cell;
    out.mask[s] = 1;
  }
  return out;
}

} // namespace ilcp
