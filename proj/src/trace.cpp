// SPDX-License-Identifier: Apache-2.0
#include "ilcp/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace ilcp {

namespace {

using json = nlohmann::json;

auto row_key(const TraceStep &s) { return std::tuple(s.t, s.ue, s.cell); }

template <class T>
bool parse_number(std::string_view field, T &out) {
  while (!field.empty() && field.front() == ' ')
    field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\r'))
    field.remove_suffix(1);
  if (field.empty())
    return false;
  if (field.front() == '+')
    field.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc() && ptr == field.data() + field.size();
}

void append_float(std::string &out, float v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

void append_int(std::string &out, std::int64_t v) {
  char buf[24];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

// Checks the (t, ue) groups of a sorted row range. `line_of` maps a row index
// to the number reported in errors.
template <class LineOf>
void check_groups(const std::vector<TraceStep> &steps, LineOf line_of) {
  std::size_t i = 0;
  while (i < steps.size()) {
    std::size_t j = i;
    int serving = 0;
    while (j < steps.size() && steps[j].t == steps[i].t && steps[j].ue == steps[i].ue) {
      if (j > i && steps[j].cell == steps[j - 1].cell)
        throw ParseError(line_of(j), "duplicate row for (t=" + std::to_string(steps[j].t) +
                                         ", ue=" + std::to_string(steps[j].ue.value) +
                                         ", cell=" + std::to_string(steps[j].cell.value) + ")");
      serving += steps[j].is_serving ? 1 : 0;
      ++j;
    }
    if (serving == 0)
      throw ParseError(line_of(i), "missing serving flag at t=" + std::to_string(steps[i].t) +
                                       " for ue " + std::to_string(steps[i].ue.value));
    if (serving > 1)
      throw ParseError(line_of(i), "more than one serving cell at t=" +
                                       std::to_string(steps[i].t) + " for ue " +
                                       std::to_string(steps[i].ue.value));
    i = j;
  }
}

} // namespace

const char *to_string(SplitTag tag) {
  switch (tag) {
  case SplitTag::train:
    return "train";
  case SplitTag::val:
    return "val";
  case SplitTag::test:
    return "test";
  }
  return "?";
}

const CellSite *Topology::find(CellId id) const {
  for (const auto &c : cells)
    if (c.id == id)
      return &c;
  return nullptr;
}

// --- TraceIndex -----------------------------------------------------------

TraceIndex::TraceIndex(const Trace &trace) : trace_(&trace) {
  const auto &steps = trace.steps;
  std::map<UeId, std::pair<Step, Step>> extent;
  for (const auto &s : steps) {
    auto [it, inserted] = extent.try_emplace(s.ue, s.t, s.t);
    if (!inserted) {
      it->second.first = std::min(it->second.first, s.t);
      it->second.second = std::max(it->second.second, s.t);
    }
  }
  tracks_.reserve(extent.size());
  for (const auto &[ue, range] : extent) {
    UeTrack track;
    track.ue = ue;
    track.t_first = range.first;
    const auto n = static_cast<std::size_t>(range.second - range.first + 1);
    track.row_begin.assign(n, 0);
    track.row_count.assign(n, 0);
    track.serving.assign(n, CellId{});
    by_ue_[ue] = tracks_.size();
    tracks_.push_back(std::move(track));
  }
  for (std::uint32_t i = 0; i < steps.size(); ++i) {
    const auto &s = steps[i];
    auto &track = tracks_[by_ue_[s.ue]];
    const auto k = static_cast<std::size_t>(s.t - track.t_first);
    if (track.row_count[k] == 0)
      track.row_begin[k] = i;
    ++track.row_count[k];
    if (s.is_serving)
      track.serving[k] = s.cell;
  }
  std::uint32_t i = 0;
  while (i < steps.size()) {
    std::uint32_t j = i;
    while (j < steps.size() && steps[j].t == steps[i].t)
      ++j;
    by_t_[steps[i].t] = {i, j};
    i = j;
  }
  if (!steps.empty()) {
    t_min_ = steps.front().t;
    t_max_ = steps.back().t;
  }
}

const TraceIndex::UeTrack *TraceIndex::track(UeId ue) const {
  auto it = by_ue_.find(ue);
  return it == by_ue_.end() ? nullptr : &tracks_[it->second];
}

std::span<const TraceStep> TraceIndex::rows(UeId ue, Step t) const {
  const auto *tr = track(ue);
  if (tr == nullptr || !tr->has(t))
    return {};
  const auto k = static_cast<std::size_t>(t - tr->t_first);
  return {trace_->steps.data() + tr->row_begin[k], tr->row_count[k]};
}

std::optional<CellId> TraceIndex::serving(UeId ue, Step t) const {
  const auto *tr = track(ue);
  if (tr == nullptr || t < tr->t_first || t > tr->t_last())
    return std::nullopt;
  const auto c = tr->serving[static_cast<std::size_t>(t - tr->t_first)];
  if (!c.valid())
    return std::nullopt;
  return c;
}

std::span<const TraceStep> TraceIndex::rows_at(Step t) const {
  auto it = by_t_.find(t);
  if (it == by_t_.end())
    return {};
  return {trace_->steps.data() + it->second.first, it->second.second - it->second.first};
}

std::vector<TraceIndex::Run> TraceIndex::runs() const {
  std::vector<Run> out;
  for (const auto &tr : tracks_) {
    std::optional<Step> begin;
    for (std::size_t k = 0; k <= tr.serving.size(); ++k) {
      const bool present = k < tr.serving.size() && tr.row_count[k] > 0;
      const Step t = tr.t_first + static_cast<Step>(k);
      if (present && !begin)
        begin = t;
      if (!present && begin) {
        out.push_back({tr.ue, *begin, t - 1});
        begin.reset();
      }
    }
  }
  return out;
}

std::optional<TraceIndex::Run> TraceIndex::run_of(UeId ue, Step t) const {
  const auto *tr = track(ue);
  if (tr == nullptr || !tr->has(t))
    return std::nullopt;
  Step b = t;
  while (tr->has(b - 1))
    --b;
  Step e = t;
  while (tr->has(e + 1))
    ++e;
  return Run{ue, b, e};
}

// --- CSV ------------------------------------------------------------------

Trace parse_trace(std::istream &in) {
  Trace trace;
  std::vector<std::size_t> lines;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty())
      continue;
    if (!header_seen) {
      if (line != kTraceCsvHeader)
        throw ParseError(lineno, "expected header '" + std::string(kTraceCsvHeader) + "'");
      header_seen = true;
      continue;
    }
    fields.clear();
    std::string_view rest(line);
    while (true) {
      auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos)
        break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 7)
      throw ParseError(lineno, "expected 7 fields, got " + std::to_string(fields.size()));
    TraceStep s;
    std::int64_t t = 0;
    std::uint32_t ue = 0, cell = 0;
    int serving = 0;
    if (!parse_number(fields[0], t) || t < 0)
      throw ParseError(lineno, "bad time index '" + std::string(fields[0]) + "'");
    if (!parse_number(fields[1], ue) || !UeId(ue).valid())
      throw ParseError(lineno, "bad ue_id '" + std::string(fields[1]) + "'");
    if (!parse_number(fields[2], cell) || !CellId(cell).valid())
      throw ParseError(lineno, "bad cell_id '" + std::string(fields[2]) + "'");
    if (!parse_number(fields[3], s.rsrp) || !std::isfinite(s.rsrp))
      throw ParseError(lineno, "bad rsrp_dbm '" + std::string(fields[3]) + "'");
    if (!parse_number(fields[4], s.rsrq) || !std::isfinite(s.rsrq))
      throw ParseError(lineno, "bad rsrq_db '" + std::string(fields[4]) + "'");
    if (!parse_number(fields[5], s.sinr) || !std::isfinite(s.sinr))
      throw ParseError(lineno, "bad sinr_db '" + std::string(fields[5]) + "'");
    if (!parse_number(fields[6], serving) || (serving != 0 && serving != 1))
      throw ParseError(lineno, "is_serving must be 0 or 1");
    s.t = t;
    s.ue = UeId(ue);
    s.cell = CellId(cell);
    s.is_serving = serving == 1;
    trace.steps.push_back(s);
    lines.push_back(lineno);
  }
  if (!header_seen)
    throw ParseError(lineno, "empty trace file");

  std::vector<std::uint32_t> order(trace.steps.size());
  std::iota(order.begin(), order.end(), 0u);
  if (!std::is_sorted(trace.steps.begin(), trace.steps.end(),
                      [](const auto &a, const auto &b) { return row_key(a) < row_key(b); })) {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return row_key(trace.steps[a]) < row_key(trace.steps[b]);
    });
    std::vector<TraceStep> sorted;
    sorted.reserve(order.size());
    for (auto i : order)
      sorted.push_back(trace.steps[i]);
    trace.steps = std::move(sorted);
  }
  check_groups(trace.steps, [&](std::size_t row) { return lines[order[row]]; });
  return trace;
}

Trace parse_trace(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open trace file " + path.string());
  return parse_trace(in);
}

void validate_trace(const Trace &trace) {
  const auto &steps = trace.steps;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i].t < 0)
      throw ParseError(i + 1, "negative time index");
    if (!std::isfinite(steps[i].rsrp))
      throw ParseError(i + 1, "non-finite rsrp");
    if (i > 0 && row_key(steps[i]) < row_key(steps[i - 1]))
      throw ParseError(i + 1, "rows not sorted by (t, ue, cell)");
  }
  check_groups(steps, [](std::size_t row) { return row + 1; });
}

void write_trace_csv(const Trace &trace, std::ostream &out) {
  std::string buf;
  buf.reserve(1 << 16);
  buf += kTraceCsvHeader;
  buf += '\n';
  for (const auto &s : trace.steps) {
    append_int(buf, s.t);
    buf += ',';
    append_int(buf, s.ue.value);
    buf += ',';
    append_int(buf, s.cell.value);
    buf += ',';
    append_float(buf, s.rsrp);
    buf += ',';
    append_float(buf, s.rsrq);
    buf += ',';
    append_float(buf, s.sinr);
    buf += s.is_serving ? ",1\n" : ",0\n";
    if (buf.size() > (1 << 16) - 128) {
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void write_trace_csv(const Trace &trace, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write " + path.string());
  write_trace_csv(trace, out);
}

// --- topology -------------------------------------------------------------

Topology parse_topology_json(const std::string &text) {
  Topology topo;
  json j;
  try {
    j = json::parse(text);
    for (const auto &c : j.at("cells"))
      topo.cells.push_back(
          {CellId(c.at("id").get<std::uint32_t>()), c.at("x_m").get<double>(), c.at("y_m").get<double>()});
    for (const auto &e : j.at("xn_edges")) {
      if (e.size() != 2)
        throw Error("xn edge must have two endpoints");
      topo.xn_edges.emplace_back(CellId(e[0].get<std::uint32_t>()), CellId(e[1].get<std::uint32_t>()));
    }
  } catch (const json::exception &ex) {
    throw Error(std::string("bad topology json: ") + ex.what());
  }
  for (const auto &[a, b] : topo.xn_edges)
    if (topo.find(a) == nullptr || topo.find(b) == nullptr)
      throw Error("xn edge references unknown cell");
  return topo;
}

Topology parse_topology(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error("cannot open topology file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_topology_json(ss.str());
}

std::string topology_to_json(const Topology &topology) {
  json j;
  j["cells"] = json::array();
  for (const auto &c : topology.cells)
    j["cells"].push_back({{"id", c.id.value}, {"x_m", c.x_m}, {"y_m", c.y_m}});
  j["xn_edges"] = json::array();
  for (const auto &[a, b] : topology.xn_edges)
    j["xn_edges"].push_back({a.value, b.value});
  return j.dump(2) + "\n";
}

Trace load_scenario(const std::filesystem::path &dir) {
  Trace trace = parse_trace(dir / "trace.csv");
  trace.topology = parse_topology(dir / "topology.json");
  return trace;
}

void save_scenario(const Trace &trace, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  write_trace_csv(trace, dir / "trace.csv");
  std::ofstream(dir / "topology.json", std::ios::binary) << topology_to_json(trace.topology);
}

// --- splitting ------------------------------------------------------------

TraceSplits split_trace(const Trace &trace, const SplitConfig &config) {
  if (config.segment_steps < 1)
    throw ConfigError("segment_steps must be >= 1");
  const double total = config.train + config.val + config.test;
  if (!(total > 0.0) || config.train < 0 || config.val < 0 || config.test < 0)
    throw ConfigError("split ratios must be non-negative with a positive sum");

  TraceIndex index(trace);
  struct Segment {
    std::size_t track;
    std::size_t k;
  };
  std::vector<Segment> segments;
  std::vector<std::vector<SplitTag>> tag_of(index.tracks().size());
  for (std::size_t i = 0; i < index.tracks().size(); ++i) {
    const auto n = index.tracks()[i].serving.size();
    const auto nseg = (n + config.segment_steps - 1) / config.segment_steps;
    tag_of[i].assign(nseg, SplitTag::train);
    for (std::size_t k = 0; k < nseg; ++k)
      segments.push_back({i, k});
  }
  std::mt19937_64 rng(config.seed);
  std::shuffle(segments.begin(), segments.end(), rng);
  const auto n = segments.size();
  const auto n_train = static_cast<std::size_t>(std::llround(n * config.train / total));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(n * config.val / total)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto tag = i < n_train ? SplitTag::train : (i < n_train + n_val ? SplitTag::val : SplitTag::test);
    tag_of[segments[i].track][segments[i].k] = tag;
  }

  TraceSplits out;
  out.train.split_tag = SplitTag::train;
  out.val.split_tag = SplitTag::val;
  out.test.split_tag = SplitTag::test;
  for (auto *t : {&out.train, &out.val, &out.test})
    t->topology = trace.topology;
  std::map<UeId, std::size_t> track_of;
  for (std::size_t i = 0; i < index.tracks().size(); ++i)
    track_of[index.tracks()[i].ue] = i;
  for (const auto &s : trace.steps) {
    const auto i = track_of[s.ue];
    const auto k = static_cast<std::size_t>(s.t - index.tracks()[i].t_first) / config.segment_steps;
    switch (tag_of[i][k]) {
    case SplitTag::train:
      out.train.steps.push_back(s);
      break;
    case SplitTag::val:
      out.val.steps.push_back(s);
      break;
    case SplitTag::test:
      out.test.steps.push_back(s);
      break;
    }
  }
  return out;
}

// --- normalization --------------------------------------------------------

const FeatureStats &NormalizationStats::for_cell(CellId cell) const {
  auto it = per_cell.find(cell);
  return it == per_cell.end() ? global : it->second;
}

NormalizationStats fit_normalization(const Trace &train) {
  if (train.steps.empty())
    throw Error("cannot fit normalization on an empty train split");
  struct Acc {
    std::size_t n = 0;
    MeasFeatures sum{};
    MeasFeatures sq{};
  };
  // Two-pass: means first, then centered sums of squares.
  std::map<CellId, Acc> acc;
  Acc all;
  for (const auto &s : train.steps) {
    const auto f = features_of(s);
    auto &a = acc[s.cell];
    ++a.n;
    ++all.n;
    for (std::size_t k = 0; k < kNumMeasFeatures; ++k) {
      a.sum[k] += f[k];
      all.sum[k] += f[k];
    }
  }
  NormalizationStats stats;
  for (auto &[cell, a] : acc)
    for (std::size_t k = 0; k < kNumMeasFeatures; ++k)
      stats.per_cell[cell].mean[k] = a.sum[k] / static_cast<double>(a.n);
  for (std::size_t k = 0; k < kNumMeasFeatures; ++k)
    stats.global.mean[k] = all.sum[k] / static_cast<double>(all.n);
  for (const auto &s : train.steps) {
    const auto f = features_of(s);
    auto &a = acc[s.cell];
    const auto &m = stats.per_cell[s.cell].mean;
    for (std::size_t k = 0; k < kNumMeasFeatures; ++k) {
      a.sq[k] += (f[k] - m[k]) * (f[k] - m[k]);
      all.sq[k] += (f[k] - stats.global.mean[k]) * (f[k] - stats.global.mean[k]);
    }
  }
  for (auto &[cell, a] : acc)
    for (std::size_t k = 0; k < kNumMeasFeatures; ++k)
      stats.per_cell[cell].std[k] = std::max(kStdFloor, std::sqrt(a.sq[k] / static_cast<double>(a.n)));
  for (std::size_t k = 0; k < kNumMeasFeatures; ++k)
    stats.global.std[k] = std::max(kStdFloor, std::sqrt(all.sq[k] / static_cast<double>(all.n)));
  return stats;
}

MeasFeatures apply_normalization(const MeasFeatures &x, CellId cell, const NormalizationStats &stats) {
  const auto &fs = stats.for_cell(cell);
  MeasFeatures out;
  for (std::size_t k = 0; k < kNumMeasFeatures; ++k)
    out[k] = (x[k] - fs.mean[k]) / fs.std[k];
  return out;
}

std::string normalization_to_json(const NormalizationStats &stats) {
  auto fs_json = [](const FeatureStats &fs) { return json{{"mean", fs.mean}, {"std", fs.std}}; };
  json j;
  j["global"] = fs_json(stats.global);
  j["per_cell"] = json::array();
  for (const auto &[cell, fs] : stats.per_cell) {
    auto e = fs_json(fs);
    e["cell"] = cell.value;
    j["per_cell"].push_back(e);
  }
  return j.dump();
}

NormalizationStats normalization_from_json(const std::string &text) {
  auto j = json::parse(text);
  auto read = [](const json &e) {
    FeatureStats fs;
    fs.mean = e.at("mean").get<MeasFeatures>();
    fs.std = e.at("std").get<MeasFeatures>();
    return fs;
  };
  NormalizationStats stats;
  stats.global = read(j.at("global"));
  for (const auto &e : j.at("per_cell"))
    stats.per_cell[CellId(e.at("cell").get<std::uint32_t>())] = read(e);
  return stats;
}

// --- events ---------------------------------------------------------------

std::vector<HandoverEvent> extract_handover_events(const TraceIndex &index) {
  std::vector<HandoverEvent> events;
  for (const auto &tr : index.tracks()) {
    for (std::size_t k = 1; k < tr.serving.size(); ++k) {
      const auto prev = tr.serving[k - 1];
      const auto cur = tr.serving[k];
      if (prev.valid() && cur.valid() && prev != cur)
        events.push_back({tr.t_first + static_cast<Step>(k), tr.ue, prev, cur});
    }
  }
  std::sort(events.begin(), events.end(), [](const auto &a, const auto &b) {
    return std::tie(a.t_star, a.ue) < std::tie(b.t_star, b.ue);
  });
  return events;
}

std::vector<HandoverEvent> extract_handover_events(const Trace &trace) {
  return extract_handover_events(TraceIndex(trace));
}

} // namespace ilcp
