// SPDX-License-Identifier: Apache-2.0
//
// Measurement impairments: correlated shadow fading pushed through the
// reporting pipeline (quantization, delay, L3 filter), NLOS blockage events
// and SSB-burst sub-sampling. All of them touch measurements only; serving
// labels and the handover-event list are left as they were.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ilcp/trace.hpp"

namespace ilcp::perturb {

struct ShadowConfig {
  double sigma_db = 0.0;
  double rho = 0.95;
  double quant_db = 1.0;
  int delay_steps = 4; // 40 ms
  double l3_k = 4.0;
};

struct BlockageConfig {
  int count = 0;
  double attenuation_db = 20.0;
  double min_s = 0.5;
  double max_s = 2.0;
  double step_seconds = 0.01;

  int min_steps() const;
  int max_steps() const;
};

struct PerturbConfig {
  std::optional<ShadowConfig> shadow; // unset: no fading and no pipeline
  BlockageConfig blockage;
  int ssb_period = 1;
  std::uint64_t seed = 0;

  bool is_identity() const { return !shadow && blockage.count == 0 && ssb_period == 1; }
  void validate() const;
};

std::string perturb_config_to_json(const PerturbConfig &config);
PerturbConfig perturb_config_from_json(const std::string &text);

struct LogEntry {
  std::string type; // "shadow", "blockage", "ssb"
  UeId ue;
  CellId cell;
  Step onset = 0;
  Step duration = 0;
  double magnitude = 0.0;
};

struct PerturbLog {
  std::vector<LogEntry> entries;
  std::string to_json() const;
  std::size_t count(const std::string &type) const;
};

Trace shadow_fading(const Trace &trace, const ShadowConfig &config, std::uint64_t seed, PerturbLog *log = nullptr);
Trace blockage(const Trace &trace, const BlockageConfig &config, std::uint64_t seed, PerturbLog *log = nullptr);
Trace ssb_subsample(const Trace &trace, int period, PerturbLog *log = nullptr);

/// blockage -> shadow pipeline -> SSB hold. Each stage draws from its own
/// stream derived from `config.seed`.
Trace apply(const Trace &trace, const PerturbConfig &config, PerturbLog *log = nullptr);

/// The AR(1) fading sequence used per link: stationary start, s_0 ~ N(0, s^2).
std::vector<double> ar1_sequence(std::size_t n, double sigma, double rho, std::mt19937_64 &rng);

/// Round half up to the quantization grid.
double quantize(double value, double step);

// --- robust-training mixture ----------------------------------------------

enum class SigmaSet { integer_range, endpoints };

struct MixtureConfig {
  double clean_weight = 0.5;
  int sigma_lo = 6;
  int sigma_hi = 12;
  SigmaSet sigma_set = SigmaSet::integer_range;
  double blockage_probability = 0.5;
  int blockage_max_count = 4;
  double ssb_probability = 0.5;
  std::vector<int> ssb_periods{2, 4, 8, 16};
  ShadowConfig shadow;
};

std::string mixture_to_json(const MixtureConfig &config);

class MixedSampler {
public:
  struct Draw {
    bool clean = true;
    PerturbConfig config;
  };

  MixedSampler(MixtureConfig config, std::uint64_t seed);
  Draw next();
  const MixtureConfig &config() const { return config_; }

private:
  MixtureConfig config_;
  std::mt19937_64 rng_;
};

} // namespace ilcp::perturb
