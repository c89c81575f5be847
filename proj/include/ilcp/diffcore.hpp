// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Values are binary64 on the tape; parameters are persisted as binary32 in
// checkpoints. Every op records a closure that pushes the node's gradient to
// its parents; Tape::backward runs them in reverse topological order.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ilcp/common.hpp"

namespace ilcp::diff {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

struct Param {
  std::string name;
  Mat value;
  Mat grad;
};

/// Named parameters in insertion order. Addresses are stable.
class ParamStore {
public:
  Param &add(const std::string &name, Eigen::Index rows, Eigen::Index cols);
  Param &get(const std::string &name);
  const Param &get(const std::string &name) const;
  Param *find(const std::string &name);
  bool contains(const std::string &name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const;
  Param &operator[](std::size_t i) { return *params_[i]; }
  const Param &operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  /// Rounds every value to binary32, the checkpoint storage precision.
  void round_to_float();

  ParamStore clone() const;

private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t> index_;
};

// --- checkpoint file ------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Layout: "ILCP", u16 version, u32 metadata length, metadata (UTF-8 JSON),
/// u32 block count, then per block: u32 name length, name, u32 rank,
/// u32 dims[rank], little-endian binary32 values in row-major order.
std::vector<std::uint8_t> encode_checkpoint(const ParamStore &params, const std::string &metadata);
/// Replaces the values of `params` (which must already hold every block
/// with matching shape); returns the metadata string.
std::string decode_checkpoint(std::span<const std::uint8_t> bytes, ParamStore &params);
/// Builds a fresh store from the blocks in the file.
std::string decode_checkpoint(std::span<const std::uint8_t> bytes, ParamStore *fresh);

void write_file_atomic(const std::filesystem::path &path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path &path, const std::string &text);
std::vector<std::uint8_t> read_file(const std::filesystem::path &path);

// --- tape -----------------------------------------------------------------

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape *tape = nullptr;
  int id = -1;

  const Mat &value() const;
  const Mat &grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

enum class BackwardOrder {
  reverse_recorded, // exact reverse of execution order
  depth_first,      // reverse post-order DFS from the loss
};

class Tape {
public:
  struct Node {
    Mat value;
    Mat grad;
    Param *param = nullptr;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape &)> backward;
  };

  /// With gradients disabled no backward closures are kept; used for inference.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Var constant(Mat value);
  /// Parameter nodes reference Param::value directly; the value must not
  /// change while the tape is alive.
  Var param(Param &p);

  /// Records a node. `backward` may be empty when no parent needs a gradient.
  Var record(Mat value, std::vector<int> parents, std::function<void(Tape &)> backward);

  /// Seeds d(loss)/d(loss) = 1 and accumulates parameter gradients into
  /// Param::grad (which is added to, not overwritten).
  void backward(Var loss, BackwardOrder order = BackwardOrder::reverse_recorded);

  const Mat &value(int id) const {
    const auto &n = node(id);
    return n.param != nullptr ? n.param->value : n.value;
  }
  bool grad_enabled() const { return grad_enabled_; }

  Node &node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node &node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool requires_grad(int id) const { return node(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Branch masks of piecewise primitives (relu, clamp) in execution order.
  /// While recording, each mask is appended; while replaying, the stored
  /// masks are used instead of the input's own. Replay and compare both count
  /// disagreements with the stored masks.
  enum class BranchMode { free, record, replay, compare };
  void set_branches(BranchMode mode, std::vector<Mat> *masks) {
    branch_mode_ = mode;
    branch_masks_ = masks;
    branch_next_ = 0;
  }
  Mat branch_mask(Mat own);
  std::size_t branch_flips() const { return branch_flips_; }

  template <class Expr>
  void accumulate(int id, const Expr &g) {
    auto &n = node(id);
    if (!n.requires_grad)
      return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

private:
  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::map<const Param *, int> param_nodes_;
  BranchMode branch_mode_ = BranchMode::free;
  std::vector<Mat> *branch_masks_ = nullptr;
  std::size_t branch_next_ = 0;
  std::size_t branch_flips_ = 0;
};

// --- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b); // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a[n x m] + bias[1 x m] broadcast over rows.
Var add_row(Var a, Var bias);
/// Repeats a [1 x m] row n times.
Var broadcast_rows(Var row, Eigen::Index n);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var gelu(Var a);
Var exp(Var a);
Var clamp(Var a, double lo, double hi);

/// Row-wise layer normalization with learned gain/shift [1 x m].
inline constexpr double kLayerNormEps = 1e-5;
Var layer_norm(Var x, Var gain, Var shift, double eps = kLayerNormEps);

/// Inverted dropout; identity when `train` is false.
Var dropout(Var a, double rate, bool train, Rng &rng);

/// z = mu + exp(logvar / 2) * noise, logvar clamped to [-30, 30].
inline constexpr double kLogvarClamp = 30.0;
Var gaussian_sample(Var mu, Var logvar, const Mat &noise);

Var gather_rows(Var a, std::span<const int> rows);
/// base with rows[i] replaced by values.row(i).
Var scatter_rows(Var base, std::span<const int> rows, Var values);

Var sum(Var a);
Var mean(Var a);
/// Per-row sums, [n x 1].
Var row_sum(Var a);

/// Row-wise softmax over entries with mask != 0; masked entries get 0.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Var masked_softmax(Var scores, const Mask &mask);
/// Row-wise log-softmax; masked entries are set to -inf and carry no gradient.
Var masked_log_softmax(Var scores, const Mask &mask);
/// out[i] = a(i, cols[i]), shape [n x 1].
Var pick(Var a, std::span<const int> cols);

/// Multi-head attention aggregated per destination node. Edge e connects a
/// source (already folded into k/v rows) to destination dst[e]. Scores are
/// q[dst]·k[e] / sqrt(d/heads) per head, softmax-normalized over each
/// destination's incoming edges; destinations without edges get zeros.
Var segment_attention(Var q, Var k, Var v, std::span<const int> dst, int heads);

// --- gradient checking ----------------------------------------------------

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  // Error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1.0;
  // 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
  // Hold relu/clamp branches at their base-point choice while perturbing,
  // so the difference quotient stays on one smooth piece.
  bool freeze_branches = false;
};

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t kinks = 0; // entries whose perturbation crossed a branch
  };
  std::vector<Entry> entries;
  double max_rel_error = 0.0;
  std::size_t kinks = 0;
  bool passed = false;
};

/// `loss_fn` must build a deterministic scalar loss on the given tape.
GradCheckReport check_gradients(ParamStore &params, const std::function<Var(Tape &)> &loss_fn,
                                const GradCheckOptions &options = {});

} // namespace ilcp::diff
