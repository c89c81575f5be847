// SPDX-License-Identifier: Apache-2.0
//
// The ILCP network: heterogeneous-attention encoder, GRU, candidate scorer,
// beta-VAE compressor and the gated projection used at handover.
//
// Encoder layout. Cells start from concat(embedding row, normalized x, y)
// through a linear map; UEs start from a learned bias row (their raw input is
// the zero vector). Each layer lets cells attend to Xn neighbours and UEs
// attend to the cells they measure:
//
//   k = (h_src K_type) A_rel,  v = (h_src V_type) M_rel,  q = h_dst Q_type
//   meas edges add (edge_features W_e + b_e) to both k and v
//   h_dst <- LN_type(h_dst + W_out GELU(attention(q, k, v)) + b_out)
//
// Messages only flow cell -> UE and cell <-> cell, so cell states do not
// depend on which UEs are in the snapshot and every UE's x_u depends only on
// its own edges.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ilcp/diffcore.hpp"
#include "ilcp/graph.hpp"
#include "ilcp/xn.hpp"

namespace ilcp::model {

using diff::Mask;
using diff::Mat;
using diff::ParamStore;
using diff::Rng;
using diff::Tape;
using diff::Var;

struct ModelConfig {
  int d = 128;
  int heads = 4;
  int layers = 3;
  int latent = 32;
  int candidates = 8;
  int cell_rows = 64; // embedding table size; CellId values must be below it
  int horizon = 10;   // Delta, steps
  double beta = 1e-3;
  double inbound_dropout = 0.2;

  void validate() const;
};

std::string model_config_to_json(const ModelConfig &config);
ModelConfig model_config_from_json(const std::string &text);

enum class StateMode { ilcp, cold, warm };
const char *to_string(StateMode mode);
StateMode state_mode_from_string(const std::string &text);

class Model {
public:
  /// Fresh parameters; identical seeds give identical parameters.
  Model(const ModelConfig &config, std::uint64_t seed);
  /// Adopts existing parameters (e.g. from a checkpoint); names and shapes
  /// must match the layout for `config`.
  Model(const ModelConfig &config, ParamStore params);

  Model(const Model &) = delete;
  Model &operator=(const Model &) = delete;
  Model(Model &&) = default;

  const ModelConfig &config() const { return config_; }
  ParamStore &params() { return params_; }
  const ParamStore &params() const { return params_; }

  struct CellStates {
    std::vector<Var> layers; // layers[0] is the input projection
    // Per layer, cell-side keys and messages for the meas relation.
    std::vector<Var> meas_keys;
    std::vector<Var> meas_values;
    Var final() const { return layers.back(); }
  };

  CellStates encode_cells(Tape &tape, const GraphSnapshot &snapshot) const;
  /// [n_ues x d]; `cells` must come from a snapshot with the same cells.
  Var encode_ues(Tape &tape, const GraphSnapshot &snapshot, const CellStates &cells) const;

  Var gru(Tape &tape, Var h, Var x) const;

  /// Raw scores [B x K]; masked slots carry arbitrary finite values.
  Var score(Tape &tape, Var h, Var cell_embeddings, std::span<const CandidateSet> candidates) const;
  /// `candidate_embeddings` holds B*K rows, K consecutive rows per item.
  Var score_rows(Tape &tape, Var h, Var candidate_embeddings) const;

  struct Compressed {
    Var z;
    Var mu;
    Var logvar;
  };
  /// Reparameterized sample when `train`, otherwise z = mu.
  Compressed compress(Tape &tape, Var h, bool train, Rng *rng) const;
  Var decode(Tape &tape, Var z) const;
  /// h_new = LN(h~ + gate * MLP([h~, x])), gate = sigmoid(g([h~, x])); h~ gets
  /// inbound dropout when `train`.
  Var project(Tape &tape, Var h_tilde, Var x_new, bool train, Rng &rng) const;

  /// Number of compress() calls since construction.
  std::size_t compress_calls() const { return compress_calls_; }

private:
  void build_layout(Rng *init);
  Var p(Tape &tape, const char *name) const;
  Var p(Tape &tape, const std::string &name) const;
  Var linear(Tape &tape, Var x, const std::string &prefix) const;

  ModelConfig config_;
  ParamStore params_;
  mutable std::size_t compress_calls_ = 0;
};

// --- losses and read-outs -------------------------------------------------

Mask mask_of(std::span<const CandidateSet> candidates);

/// Per-row negative log-likelihood [n x 1] of `label_slots` (all >= 0).
Var prediction_nll(Var scores, const Mask &mask, std::span<const int> label_slots);

/// Mean over rows of MSE(h, recon) + beta * KL(N(mu, exp(logvar)) || N(0, I)).
Var vae_loss(Var h, Var recon, Var mu, Var logvar, double beta);

/// Masked slots become -inf.
Mat masked_scores(const Mat &scores, const Mask &mask);
/// Softmax over unmasked entries of each row.
Mat candidate_probs(const Mat &scores, const Mask &mask);
/// Highest unmasked score per row, lowest slot on ties.
std::vector<int> argmax_slots(const Mat &scores, const Mask &mask);

// --- single-vector conveniences (no gradients) ----------------------------

Mat gru_step(const Model &model, const Mat &h, const Mat &x);
Mat score_candidates(const Model &model, const Mat &h, const Mat &candidate_embeddings, const Mask &mask);
struct VaeOutput {
  Mat z;
  Mat mu;
  Mat logvar;
};
/// Inference-mode compression: z = mu.
VaeOutput vae_compress(const Model &model, const Mat &h);
Mat vae_decode(const Model &model, const Mat &z);
Mat project(const Model &model, const Mat &h_tilde, const Mat &x_new);

/// Latent row -> binary32 payload values, and back.
xn::Latent to_latent(const Mat &z);
Mat from_latent(const xn::Latent &z);

struct HandoverDecision {
  int slot = -1;
  Mat scores; // [1 x K], masked slots -inf
  Mat h_new;  // [1 x d]
  xn::Payload payload{};
};

/// compress (z = mu) -> serialize -> deserialize -> decode -> project ->
/// score -> argmax. With `use_codec` false the byte round trip is skipped
/// and z is only rounded to binary32.
HandoverDecision ilcp_handover_inference(const Model &model, const Mat &h_src, const Mat &x_new,
                                         const Mat &candidate_embeddings, const Mask &mask, bool use_codec = true);

/// Final cell embeddings for the snapshot's topology, [n_cells x d].
Mat cell_embeddings(const Model &model, const GraphSnapshot &snapshot);

// --- checkpoints ----------------------------------------------------------

struct CheckpointInfo {
  std::string mode = "ilcp"; // "ilcp" or "zero_knowledge"
  bool robust = false;
  int epoch = 0;
  std::uint64_t seed = 0;
};

/// Parameters plus model config, normalization stats and `info` as metadata.
std::vector<std::uint8_t> save_checkpoint(const Model &model, const NormalizationStats &stats,
                                          const CheckpointInfo &info);

struct LoadedCheckpoint {
  Model model;
  NormalizationStats stats;
  CheckpointInfo info;
};

LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes);
LoadedCheckpoint load_checkpoint(const std::filesystem::path &path);

} // namespace ilcp::model
