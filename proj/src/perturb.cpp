// SPDX-License-Identifier: Apache-2.0
#include "ilcp/perturb.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include <json.hpp>

#include "ilcp/rules.hpp"

namespace ilcp::perturb {

using json = nlohmann::json;

namespace {

using LinkKey = std::pair<std::uint32_t, std::uint32_t>;

// Row indices per (ue, cell) link in time order.
std::map<LinkKey, std::vector<std::size_t>> links_of(const Trace &trace) {
  std::map<LinkKey, std::vector<std::size_t>> links;
  for (std::size_t i = 0; i < trace.steps.size(); ++i)
    links[{trace.steps[i].ue.value, trace.steps[i].cell.value}].push_back(i);
  return links;
}

// Independent stream per stage so toggling one stage does not shift another.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stage)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

json shadow_json(const ShadowConfig &s) {
  return {{"sigma_db", s.sigma_db},
          {"rho", s.rho},
          {"quant_db", s.quant_db},
          {"delay_steps", s.delay_steps},
          {"l3_k", s.l3_k}};
}

ShadowConfig shadow_from(const json &j) {
  ShadowConfig s;
  s.sigma_db = j.value("sigma_db", s.sigma_db);
  s.rho = j.value("rho", s.rho);
  s.quant_db = j.value("quant_db", s.quant_db);
  s.delay_steps = j.value("delay_steps", s.delay_steps);
  s.l3_k = j.value("l3_k", s.l3_k);
  return s;
}

} // namespace

int BlockageConfig::min_steps() const { return static_cast<int>(std::lround(min_s / step_seconds)); }
int BlockageConfig::max_steps() const { return static_cast<int>(std::lround(max_s / step_seconds)); }

void PerturbConfig::validate() const {
  if (shadow) {
    if (!(shadow->sigma_db >= 0.0))
      throw ConfigError("sigma_s must be >= 0");
    if (!(shadow->rho >= 0.0 && shadow->rho < 1.0))
      throw ConfigError("rho must lie in [0, 1)");
    if (!(shadow->quant_db >= 0.0))
      throw ConfigError("quantization step must be >= 0");
    if (shadow->delay_steps < 0)
      throw ConfigError("reporting delay must be >= 0");
    if (!(shadow->l3_k >= 0.0))
      throw ConfigError("L3 coefficient must be >= 0");
  }
  if (blockage.count < 0)
    throw ConfigError("blockage count must be >= 0");
  if (blockage.count > 0 && (blockage.min_steps() < 1 || blockage.max_steps() < blockage.min_steps()))
    throw ConfigError("blockage duration range is empty");
  if (ssb_period < 1)
    throw ConfigError("SSB period must be >= 1");
}

std::string perturb_config_to_json(const PerturbConfig &c) {
  json j = {{"blockage",
             {{"count", c.blockage.count},
              {"attenuation_db", c.blockage.attenuation_db},
              {"min_s", c.blockage.min_s},
              {"max_s", c.blockage.max_s},
              {"step_seconds", c.blockage.step_seconds}}},
            {"ssb_period", c.ssb_period},
            {"seed", c.seed}};
  j["shadow"] = c.shadow ? shadow_json(*c.shadow) : json(nullptr);
  return j.dump(2);
}

PerturbConfig perturb_config_from_json(const std::string &text) {
  PerturbConfig c;
  try {
    const auto j = json::parse(text);
    if (j.contains("shadow") && !j["shadow"].is_null())
      c.shadow = shadow_from(j["shadow"]);
    if (j.contains("blockage")) {
      const auto &b = j["blockage"];
      c.blockage.count = b.value("count", c.blockage.count);
      c.blockage.attenuation_db = b.value("attenuation_db", c.blockage.attenuation_db);
      c.blockage.min_s = b.value("min_s", c.blockage.min_s);
      c.blockage.max_s = b.value("max_s", c.blockage.max_s);
      c.blockage.step_seconds = b.value("step_seconds", c.blockage.step_seconds);
    }
    c.ssb_period = j.value("ssb_period", c.ssb_period);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad perturbation config: ") + ex.what());
  }
  c.validate();
  return c;
}

std::string PerturbLog::to_json() const {
  json arr = json::array();
  for (const auto &e : entries)
    arr.push_back({{"type", e.type},
                   {"ue", e.ue.valid() ? json(e.ue.value) : json(nullptr)},
                   {"cell", e.cell.valid() ? json(e.cell.value) : json(nullptr)},
                   {"onset", e.onset},
                   {"duration", e.duration},
                   {"magnitude", e.magnitude}});
  return json{{"events", arr}}.dump(2);
}

std::size_t PerturbLog::count(const std::string &type) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const auto &e) { return e.type == type; }));
}

std::vector<double> ar1_sequence(std::size_t n, double sigma, double rho, std::mt19937_64 &rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> s(n);
  const double innovation = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < n; ++i)
    s[i] = i == 0 ? sigma * n01(rng) : rho * s[i - 1] + innovation * sigma * n01(rng);
  return s;
}

double quantize(double value, double step) {
  if (step <= 0.0)
    return value;
  return std::floor(value / step + 0.5) * step;
}

Trace shadow_fading(const Trace &trace, const ShadowConfig &config, std::uint64_t seed, PerturbLog *log) {
  Trace out = trace;
  std::mt19937_64 rng(seed);
  std::vector<double> reported;
  for (const auto &[key, rows] : links_of(trace)) {
    const auto fading = ar1_sequence(rows.size(), config.sigma_db, config.rho, rng);
    reported.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      reported[i] = quantize(trace.steps[rows[i]].rsrp + fading[i], config.quant_db);
    std::optional<double> filtered;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto lagged = i >= static_cast<std::size_t>(config.delay_steps) ? i - config.delay_steps : 0;
      filtered = rules::l3_filter_step(filtered, reported[lagged], config.l3_k);
      out.steps[rows[i]].rsrp = static_cast<float>(*filtered);
    }
    if (log != nullptr)
      log->entries.push_back({"shadow", UeId(key.first), CellId(key.second), trace.steps[rows.front()].t,
                              trace.steps[rows.back()].t - trace.steps[rows.front()].t + 1, config.sigma_db});
  }
  return out;
}

Trace blockage(const Trace &trace, const BlockageConfig &config, std::uint64_t seed, PerturbLog *log) {
  Trace out = trace;
  if (config.count == 0 || trace.steps.empty())
    return out;
  const auto links = links_of(trace);
  std::vector<const std::pair<const LinkKey, std::vector<std::size_t>> *> flat;
  for (const auto &l : links)
    flat.push_back(&l);
  Step t_lo = trace.steps.front().t, t_hi = trace.steps.front().t;
  for (const auto &s : trace.steps) {
    t_lo = std::min(t_lo, s.t);
    t_hi = std::max(t_hi, s.t);
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, flat.size() - 1);
  std::uniform_int_distribution<Step> onset(t_lo, t_hi);
  std::uniform_int_distribution<Step> duration(config.min_steps(), config.max_steps());
  for (int e = 0; e < config.count; ++e) {
    const auto &[key, rows] = *flat[pick(rng)];
    const Step t0 = onset(rng), len = duration(rng);
    for (auto r : rows)
      if (trace.steps[r].t >= t0 && trace.steps[r].t < t0 + len)
        out.steps[r].rsrp -= static_cast<float>(config.attenuation_db);
    if (log != nullptr)
      log->entries.push_back({"blockage", UeId(key.first), CellId(key.second), t0, len, config.attenuation_db});
  }
  return out;
}

Trace ssb_subsample(const Trace &trace, int period, PerturbLog *log) {
  if (period < 1)
    throw ConfigError("SSB period must be >= 1");
  Trace out = trace;
  if (log != nullptr)
    log->entries.push_back({"ssb", UeId{}, CellId{}, 0, 0, static_cast<double>(period)});
  if (period == 1)
    return out;
  for (const auto &[key, rows] : links_of(trace)) {
    std::optional<std::size_t> held;
    for (auto r : rows) {
      const auto &s = trace.steps[r];
      if (s.t % period == 0 || !held) {
        held = r;
        continue;
      }
      auto &o = out.steps[r];
      o.rsrp = trace.steps[*held].rsrp;
      o.rsrq = trace.steps[*held].rsrq;
      o.sinr = trace.steps[*held].sinr;
      o.stale = true;
    }
  }
  return out;
}

Trace apply(const Trace &trace, const PerturbConfig &config, PerturbLog *log) {
  config.validate();
  Trace out = blockage(trace, config.blockage, stage_seed(config.seed, 1), log);
  if (config.shadow)
    out = shadow_fading(out, *config.shadow, stage_seed(config.seed, 2), log);
  if (config.ssb_period != 1)
    out = ssb_subsample(out, config.ssb_period, log);
  return out;
}

std::string mixture_to_json(const MixtureConfig &c) {
  json j = {{"clean_weight", c.clean_weight},
            {"impaired_weight", 1.0 - c.clean_weight},
            {"sigma_lo", c.sigma_lo},
            {"sigma_hi", c.sigma_hi},
            {"sigma_set", c.sigma_set == SigmaSet::integer_range ? "integer_range" : "endpoints"},
            {"blockage_probability", c.blockage_probability},
            {"blockage_max_count", c.blockage_max_count},
            {"ssb_probability", c.ssb_probability},
            {"ssb_periods", c.ssb_periods},
            {"shadow", shadow_json(c.shadow)}};
  return j.dump(2);
}

MixedSampler::MixedSampler(MixtureConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
  if (!(config_.clean_weight >= 0.0 && config_.clean_weight <= 1.0))
    throw ConfigError("clean weight must lie in [0, 1]");
  if (config_.sigma_lo > config_.sigma_hi || config_.sigma_lo < 0)
    throw ConfigError("sigma range is empty");
  if (config_.ssb_periods.empty() || config_.blockage_max_count < 1)
    throw ConfigError("mixture needs SSB periods and a positive blockage count");
}

MixedSampler::Draw MixedSampler::next() {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Draw d;
  // Every draw consumes the same number of variates.
  const double coin = u01(rng_);
  const int sigma_pick = std::uniform_int_distribution<int>(config_.sigma_lo, config_.sigma_hi)(rng_);
  const bool endpoint_hi = u01(rng_) < 0.5;
  const bool block = u01(rng_) < config_.blockage_probability;
  const int block_count = std::uniform_int_distribution<int>(1, config_.blockage_max_count)(rng_);
  const bool ssb = u01(rng_) < config_.ssb_probability;
  const auto period = config_.ssb_periods[std::uniform_int_distribution<std::size_t>(
      0, config_.ssb_periods.size() - 1)(rng_)];
  const std::uint64_t seed = rng_();

  d.clean = coin < config_.clean_weight;
  if (d.clean)
    return d;
  ShadowConfig s = config_.shadow;
  s.sigma_db = config_.sigma_set == SigmaSet::integer_range ? sigma_pick
                                                             : (endpoint_hi ? config_.sigma_hi : config_.sigma_lo);
  d.config.shadow = s;
  d.config.blockage.count = block ? block_count : 0;
  d.config.ssb_period = ssb ? period : 1;
  d.config.seed = seed;
  return d;
}

} // namespace ilcp::perturb
