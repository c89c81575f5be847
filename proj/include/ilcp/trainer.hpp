// SPDX-License-Identifier: Apache-2.0
//
// Joint training of the full stack: truncated-unroll windows over UE
// sequences, the handover-boundary state path (ILCP transfer or reset), AdamW
// and early stopping on validation Acc@0.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ilcp/diffcore.hpp"
#include "ilcp/graph.hpp"
#include "ilcp/model.hpp"
#include "ilcp/perturb.hpp"
#include "ilcp/trace.hpp"

namespace ilcp::train {

using diff::Mat;
using diff::ParamStore;
using diff::Rng;
using diff::Tape;
using diff::Var;
using model::Model;
using model::ModelConfig;

enum class TrainMode { ilcp, zero_knowledge };
const char *to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string &text);

// --- optimizer ------------------------------------------------------------

struct AdamWConfig {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::uint64_t step = 0;
};

/// Applies one update from the gradients held in `params`. Throws naming the
/// parameter when a gradient is not finite.
void adamw_step(ParamStore &params, OptimizerState &state, const AdamWConfig &config);

// --- configuration ----------------------------------------------------------

struct TrainConfig {
  AdamWConfig optimizer;
  int streams = 32;          // UE sequences per batch
  int window = 16;           // steps per unrolled window
  int windows_per_chunk = 4; // each sequence runs this many windows from h = 0
  int chunks_per_epoch = 8;
  double handover_fraction = 0.5; // sequences placed around a handover
  int max_epochs = 80;
  int patience = 8;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::ilcp;
  bool robust = false;
  perturb::MixtureConfig mixture;
  std::string stop_metric = "val_acc"; // or "val_loss"
  std::size_t val_max_events = 512;
  int val_history = 64;

  int chunk_steps() const { return window * windows_per_chunk; }
  void validate() const;
};

std::string train_config_to_json(const TrainConfig &config);
TrainConfig train_config_from_json(const std::string &text);

// --- windows --------------------------------------------------------------

/// One sequence: UE `ue` from `chunk_begin`, measurements read from `input`
/// (null: the reference trace).
struct StreamSpec {
  UeId ue;
  Step chunk_begin = 0;
  const TraceIndex *input = nullptr;
};

/// One unrolled window over B sequences. UE node s * B + b of the snapshot
/// is sequence b at step s.
struct Window {
  GraphSnapshot snapshot;
  std::vector<CandidateSet> candidates;
  std::vector<int> label;              // slot of c(t + horizon); -1 when not a candidate
  std::vector<std::uint8_t> handover;  // reference serving cell changes at this step
  int streams = 0;
  int steps = 0;
  std::size_t labels_outside = 0;
};

/// Steps chunk_begin + offset .. + steps - 1 of every stream. Labels and
/// handover flags come from `reference`.
Window make_window(const TraceIndex &reference, const NormalizationStats &stats, std::span<const StreamSpec> streams,
                   Step offset, int steps, int horizon, int candidates);

struct WindowLoss {
  Var loss;
  Var h_last; // [B x d]
  double nll = 0.0;
  std::size_t nll_rows = 0;
  double vae = 0.0;
  std::size_t handovers = 0;
};

/// Mean prediction NLL over labelled rows plus the mean VAE loss over the
/// handovers of the window. `h0` enters as a constant.
WindowLoss window_loss(const Model &model, Tape &tape, const Window &window, const Mat &h0, TrainMode mode, bool train,
                       Rng &rng);

// --- training -------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_loss = 0.0;
  std::size_t handovers = 0;
  std::size_t labels_outside = 0;
};

struct ValidationResult {
  double acc = 0.0;
  double loss = 0.0;
  std::size_t events = 0;
};

class Trainer {
public:
  /// `train` and `val` are split traces; both must outlive the trainer.
  Trainer(const Trace &train, const Trace &val, NormalizationStats stats, TrainConfig config,
          const ModelConfig &model_config);

  EpochStats train_epoch();
  ValidationResult validate() const;

  Model &model() { return model_; }
  const Model &model() const { return model_; }
  const NormalizationStats &stats() const { return stats_; }
  const TrainConfig &config() const { return config_; }
  int epochs_done() const { return epoch_; }
  std::size_t vae_calls() const { return vae_calls_; }

private:
  struct Stream {
    StreamSpec spec;
    std::unique_ptr<Trace> perturbed;
    std::unique_ptr<TraceIndex> index;
  };
  std::vector<Stream> sample_streams();
  Stream sample_one();

  TrainConfig config_;
  NormalizationStats stats_;
  Model model_;
  TraceIndex train_;
  TraceIndex val_;
  std::vector<HandoverEvent> train_events_;
  std::vector<HandoverEvent> val_events_;
  std::vector<TraceIndex::Run> runs_;
  std::vector<std::size_t> run_weight_; // cumulative count of valid chunk starts
  OptimizerState opt_;
  Rng sample_rng_;
  Rng model_rng_;
  std::unique_ptr<perturb::MixedSampler> mixture_;
  int epoch_ = 0;
  std::size_t vae_calls_ = 0;
};

struct FitResult {
  ParamStore best;
  int best_epoch = 0;
  std::vector<EpochStats> log;
};

/// Trains until max_epochs or until the stop metric has not improved for
/// `patience` epochs; `best` holds the parameters of the best epoch.
FitResult fit(Trainer &trainer, const std::function<void(const EpochStats &)> &on_epoch = {});

std::string training_log_csv(const std::vector<EpochStats> &log, const TrainConfig &config);

} // namespace ilcp::train
