// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "ilcp/graph.hpp"

using namespace ilcp;

namespace {

Topology line_topology(int n) {
  Topology topo;
  for (int i = 0; i < n; ++i)
    topo.cells.push_back({CellId(static_cast<std::uint32_t>(i)), 100.0 * i, 0.0});
  for (int i = 0; i + 1 < n; ++i)
    topo.xn_edges.emplace_back(CellId(static_cast<std::uint32_t>(i)), CellId(static_cast<std::uint32_t>(i + 1)));
  return topo;
}

TraceStep row(Step t, std::uint32_t ue, std::uint32_t cell, float rsrp, bool serving) {
  TraceStep s;
  s.t = t;
  s.ue = UeId(ue);
  s.cell = CellId(cell);
  s.rsrp = rsrp;
  s.rsrq = -10.0f;
  s.sinr = 5.0f;
  s.is_serving = serving;
  return s;
}

// One UE at t = 0 seeing `rsrp.size()` cells; the strongest is serving.
Trace single_ue(const std::vector<float> &rsrp) {
  Trace tr;
  tr.topology = line_topology(static_cast<int>(rsrp.size()));
  const auto best = std::max_element(rsrp.begin(), rsrp.end()) - rsrp.begin();
  for (std::size_t c = 0; c < rsrp.size(); ++c)
    tr.steps.push_back(row(0, 0, static_cast<std::uint32_t>(c), rsrp[c], static_cast<long>(c) == best));
  return tr;
}

} // namespace

TEST(Snapshot, OneUeOneCell) {
  const auto tr = single_ue({-80.0f});
  TraceIndex idx(tr);
  const auto stats = fit_normalization(tr);
  const auto g = build_snapshot(idx, 0, stats);
  EXPECT_EQ(g.ues.size() + g.cells.size(), 2u);
  ASSERT_EQ(g.meas.size(), 1u);
  EXPECT_EQ(g.meas[0].features[3], 1.0);
}

TEST(Snapshot, TwelveVisibleCellsGiveTwelveEdges) {
  std::vector<float> rsrp;
  for (int c = 0; c < 12; ++c)
    rsrp.push_back(-70.0f - 3.0f * c);
  const auto tr = single_ue(rsrp);
  TraceIndex idx(tr);
  const auto g = build_snapshot(idx, 0, fit_normalization(tr));
  EXPECT_EQ(g.meas.size(), 12u);
  EXPECT_EQ(g.ue_edge_range[0], std::make_pair(0, 12));
}

TEST(Snapshot, XnEdgesMatchTopologyAtEveryStep) {
  Trace tr;
  tr.topology = line_topology(4);
  for (Step t = 0; t < 5; ++t)
    tr.steps.push_back(row(t, 0, 1, -80.0f, true));
  TraceIndex idx(tr);
  const auto stats = fit_normalization(tr);
  for (Step t = 0; t < 5; ++t) {
    const auto g = build_snapshot(idx, t, stats);
    ASSERT_EQ(g.xn.size(), 2 * tr.topology.xn_edges.size());
    for (std::size_t i = 0; i < tr.topology.xn_edges.size(); ++i) {
      const auto [a, b] = tr.topology.xn_edges[i];
      EXPECT_EQ(g.cells[static_cast<std::size_t>(g.xn[2 * i].first)], a);
      EXPECT_EQ(g.cells[static_cast<std::size_t>(g.xn[2 * i].second)], b);
      EXPECT_EQ(g.xn[2 * i + 1], std::make_pair(g.xn[2 * i].second, g.xn[2 * i].first));
    }
  }
}

TEST(Snapshot, TimeOutOfRangeIsAnError) {
  const auto tr = single_ue({-80.0f, -90.0f});
  TraceIndex idx(tr);
  EXPECT_THROW(build_snapshot(idx, 5, fit_normalization(tr)), Error);
}

TEST(Snapshot, EdgeFeaturesAreNormalized) {
  Trace tr;
  tr.topology = line_topology(1);
  tr.steps.push_back(row(0, 0, 0, -80.0f, true));
  tr.steps.push_back(row(1, 0, 0, -100.0f, true));
  TraceIndex idx(tr);
  const auto stats = fit_normalization(tr);
  EXPECT_NEAR(build_snapshot(idx, 0, stats).meas[0].features[0], 1.0, 1e-12);
  EXPECT_NEAR(build_snapshot(idx, 1, stats).meas[0].features[0], -1.0, 1e-12);
}

TEST(Candidates, FewerVisibleThanKArePadded) {
  const auto tr = single_ue({-80.0f, -70.0f, -90.0f});
  TraceIndex idx(tr);
  const auto c = build_candidates(build_snapshot(idx, 0, fit_normalization(tr)), 0);
  ASSERT_EQ(c.size(), 8);
  EXPECT_EQ(c.visible(), 3);
  EXPECT_EQ(c.cells[0], CellId(1));
  EXPECT_EQ(c.cells[1], CellId(0));
  EXPECT_EQ(c.cells[2], CellId(2));
  for (int s = 3; s < 8; ++s)
    EXPECT_EQ(c.mask[static_cast<std::size_t>(s)], 0);
}

TEST(Candidates, TenVisibleKeepsTheEightStrongest) {
  std::mt19937 rng(4);
  std::vector<float> rsrp(10);
  for (int c = 0; c < 10; ++c)
    rsrp[static_cast<std::size_t>(c)] = -60.0f - static_cast<float>(c) * 2.5f;
  std::shuffle(rsrp.begin(), rsrp.end(), rng);
  const auto tr = single_ue(rsrp);
  TraceIndex idx(tr);
  const auto c = build_candidates(build_snapshot(idx, 0, fit_normalization(tr)), 0);
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return rsrp[a] > rsrp[b]; });
  EXPECT_EQ(c.visible(), 8);
  for (int s = 0; s < 8; ++s)
    EXPECT_EQ(c.cells[static_cast<std::size_t>(s)].value, order[static_cast<std::size_t>(s)]);
}

TEST(Candidates, EqualRsrpBreaksTieTowardsLowerId) {
  const auto tr = single_ue({-85.0f, -80.0f, -80.0f});
  TraceIndex idx(tr);
  const auto c = build_candidates(build_snapshot(idx, 0, fit_normalization(tr)), 0);
  EXPECT_EQ(c.cells[0], CellId(1));
  EXPECT_EQ(c.cells[1], CellId(2));
  EXPECT_EQ(c.cells[2], CellId(0));
}

TEST(Candidates, ServingCellKeepsASlot) {
  std::vector<float> rsrp;
  for (int c = 0; c < 10; ++c)
    rsrp.push_back(-60.0f - 2.0f * c);
  auto tr = single_ue(rsrp);
  for (auto &s : tr.steps)
    s.is_serving = s.cell == CellId(9);
  TraceIndex idx(tr);
  const auto c = build_candidates(build_snapshot(idx, 0, fit_normalization(tr)), 0);
  EXPECT_GE(c.slot_of(CellId(9)), 0);
  EXPECT_EQ(c.visible(), 8);
}

TEST(Candidates, RelabelingKeepsRanks) {
  const std::vector<float> rsrp{-72.0f, -64.0f, -90.0f, -64.0f, -81.0f};
  const auto tr = single_ue(rsrp);
  const std::vector<std::uint32_t> perm{3, 0, 4, 1, 2};
  Trace relabeled = tr;
  for (auto &s : relabeled.steps)
    s.cell = CellId(perm[s.cell.value]);
  for (auto &c : relabeled.topology.cells)
    c.id = CellId(perm[c.id.value]);
  for (auto &[a, b] : relabeled.topology.xn_edges) {
    a = CellId(perm[a.value]);
    b = CellId(perm[b.value]);
  }
  std::sort(relabeled.steps.begin(), relabeled.steps.end(),
            [](const auto &a, const auto &b) { return a.cell < b.cell; });
  TraceIndex i1(tr), i2(relabeled);
  const auto c1 = build_candidates(build_snapshot(i1, 0, fit_normalization(tr)), 0);
  const auto c2 = build_candidates(build_snapshot(i2, 0, fit_normalization(relabeled)), 0);
  // Cells 1 and 3 tie at -64; after relabeling they become 0 and 1, which
  // preserves their relative order, so ranks map one to one.
  for (int s = 0; s < 5; ++s)
    EXPECT_EQ(perm[c1.cells[static_cast<std::size_t>(s)].value], c2.cells[static_cast<std::size_t>(s)].value);
}

TEST(Candidates, UnknownUeIsAnError) {
  const auto tr = single_ue({-80.0f});
  TraceIndex idx(tr);
  EXPECT_THROW(build_candidates(build_snapshot(idx, 0, fit_normalization(tr)), 3), Error);
}
