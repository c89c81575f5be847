// SPDX-License-Identifier: Apache-2.0
#include "ilcp/diffcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ilcp::diff {

namespace {

std::string shape_of(const Mat &m) {
  return "[" + std::to_string(m.rows()) + " x " + std::to_string(m.cols()) + "]";
}

void require_same_shape(const char *op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a.value()) + " vs " +
                     shape_of(b.value()));
}

Tape &tape_of(Var a) {
  if (a.tape == nullptr)
    throw Error("variable is not attached to a tape");
  return *a.tape;
}

// --- little-endian helpers ---

void put_u16(std::vector<std::uint8_t> &out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t> &out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw Error("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Block {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Mat value;
};

std::string decode_blocks(std::span<const std::uint8_t> bytes, std::vector<Block> &blocks) {
  Reader r(bytes);
  if (r.str(4) != "ILCP")
    throw Error("not a checkpoint file (bad magic)");
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = r.u32();
  std::string meta = r.str(meta_len);
  const auto n = r.u32();
  for (std::uint32_t b = 0; b < n; ++b) {
    Block blk;
    blk.name = r.str(r.u32());
    const auto rank = r.u32();
    if (rank == 0 || rank > 2)
      throw Error("checkpoint block '" + blk.name + "' has unsupported rank " + std::to_string(rank));
    blk.rows = rank == 2 ? r.u32() : 1;
    blk.cols = r.u32();
    blk.value.resize(blk.rows, blk.cols);
    for (Eigen::Index i = 0; i < blk.value.size(); ++i)
      blk.value.data()[i] = static_cast<double>(r.f32());
    blocks.push_back(std::move(blk));
  }
  if (!r.done())
    throw Error("trailing bytes after checkpoint blocks");
  return meta;
}

} // namespace

// --- ParamStore -----------------------------------------------------------

Param &ParamStore::add(const std::string &name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.contains(name))
    throw Error("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Param &ParamStore::get(const std::string &name) {
  auto *p = find(name);
  if (p == nullptr)
    throw Error("unknown parameter '" + name + "'");
  return *p;
}

const Param &ParamStore::get(const std::string &name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw Error("unknown parameter '" + name + "'");
  return *params_[it->second];
}

Param *ParamStore::find(const std::string &name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto &p : params_)
    n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto &p : params_)
    p->grad.setZero();
}

void ParamStore::round_to_float() {
  for (auto &p : params_)
    p->value = p->value.cast<float>().cast<double>();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto &p : params_) {
    auto &q = out.add(p->name, p->value.rows(), p->value.cols());
    q.value = p->value;
    q.grad = p->grad;
  }
  return out;
}

// --- checkpoint -----------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const ParamStore &params, const std::string &metadata) {
  std::vector<std::uint8_t> out{'I', 'L', 'C', 'P'};
  put_u16(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(metadata.size()));
  out.insert(out.end(), metadata.begin(), metadata.end());
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto &p = params[i];
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index k = 0; k < p.value.size(); ++k)
      put_f32(out, static_cast<float>(p.value.data()[k]));
  }
  return out;
}

std::string decode_checkpoint(std::span<const std::uint8_t> bytes, ParamStore &params) {
  std::vector<Block> blocks;
  auto meta = decode_blocks(bytes, blocks);
  if (blocks.size() != params.size())
    throw Error("checkpoint has " + std::to_string(blocks.size()) + " blocks, model expects " +
                std::to_string(params.size()));
  for (auto &blk : blocks) {
    auto *p = params.find(blk.name);
    if (p == nullptr)
      throw Error("checkpoint block '" + blk.name + "' has no matching parameter");
    if (p->value.rows() != blk.rows || p->value.cols() != blk.cols)
      throw ShapeError("checkpoint block '" + blk.name + "' shape " + shape_of(blk.value) +
                       " does not match parameter shape " + shape_of(p->value));
    p->value = std::move(blk.value);
  }
  return meta;
}

std::string decode_checkpoint(std::span<const std::uint8_t> bytes, ParamStore *fresh) {
  std::vector<Block> blocks;
  auto meta = decode_blocks(bytes, blocks);
  for (auto &blk : blocks)
    fresh->add(blk.name, blk.rows, blk.cols).value = std::move(blk.value);
  return meta;
}

void write_file_atomic(const std::filesystem::path &path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
      throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path &path, const std::string &text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// --- Tape -----------------------------------------------------------------

const Mat &Var::value() const { return tape->value(id); }
const Mat &Var::grad() const { return tape->node(id).grad; }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Param &p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end())
    return {this, it->second};
  Node n;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_[&p] = id;
  return {this, id};
}

Mat Tape::branch_mask(Mat own) {
  switch (branch_mode_) {
  case BranchMode::free:
    return own;
  case BranchMode::record:
    branch_masks_->push_back(own);
    return own;
  case BranchMode::replay:
  case BranchMode::compare: {
    if (branch_next_ >= branch_masks_->size())
      throw std::logic_error("branch replay: more piecewise ops than recorded");
    const Mat &stored = (*branch_masks_)[branch_next_++];
    if (stored.rows() != own.rows() || stored.cols() != own.cols())
      throw std::logic_error("branch replay: shape mismatch");
    branch_flips_ += static_cast<std::size_t>((stored.array() != own.array()).count());
    return branch_mode_ == BranchMode::replay ? stored : own;
  }
  }
  return own;
}

Var Tape::record(Mat value, std::vector<int> parents, std::function<void(Tape &)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(), [&](int p) { return node(p).requires_grad; });
  if (n.requires_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss, BackwardOrder order) {
  if (loss.tape != this)
    throw Error("loss belongs to another tape");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ShapeError("backward needs a scalar loss, got " + shape_of(loss.value()));
  for (auto &n : nodes_)
    n.grad.resize(0, 0);
  if (!node(loss.id).requires_grad)
    return;
  node(loss.id).grad = Mat::Ones(1, 1);

  std::vector<int> sequence;
  if (order == BackwardOrder::reverse_recorded) {
    for (int i = loss.id; i >= 0; --i)
      sequence.push_back(i);
  } else {
    // Iterative DFS post-order; parents are visited in reverse listing order
    // so the result differs from the recorded order in general.
    std::vector<char> state(nodes_.size(), 0);
    std::vector<std::pair<int, std::size_t>> stack{{loss.id, 0}};
    std::vector<int> post;
    state[static_cast<std::size_t>(loss.id)] = 1;
    while (!stack.empty()) {
      auto &[id, next] = stack.back();
      const auto &parents = node(id).parents;
      if (next < parents.size()) {
        const int p = parents[parents.size() - 1 - next];
        ++next;
        if (state[static_cast<std::size_t>(p)] == 0 && node(p).requires_grad) {
          state[static_cast<std::size_t>(p)] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        post.push_back(id);
        stack.pop_back();
      }
    }
    sequence.assign(post.rbegin(), post.rend());
  }

  for (int id : sequence) {
    auto &n = node(id);
    if (!n.requires_grad || n.grad.size() == 0)
      continue;
    if (n.param != nullptr)
      n.param->grad += n.grad;
    else if (n.backward)
      n.backward(*this);
  }
}

// --- primitives -----------------------------------------------------------

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch " + shape_of(a.value()) + " vs " + shape_of(b.value()));
  auto &t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Mat out = a.value() * b.value();
  return t.record(std::move(out), {ia, ib}, [ia, ib, self = static_cast<int>(t.size())](Tape &t) {
    const Mat &g = t.node(self).grad;
    if (t.requires_grad(ia))
      t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib))
      t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  auto &t = tape_of(a);
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.record(a.value() + b.value(), {ia, ib}, [=](Tape &t) {
    const Mat &g = t.node(self).grad;
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  auto &t = tape_of(a);
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  return t.record(a.value() - b.value(), {ia, ib}, [=](Tape &t) {
    const Mat &g = t.node(self).grad;
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  auto &t = tape_of(a);
  const int ia = a.id, ib = b.id, self = static_cast<int>(t.size());
  Mat out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {ia, ib}, [=](Tape &t) {
    const Mat &g = t.node(self).grad;
    if (t.requires_grad(ia))
      t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib))
      t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.record(a.value() * s, {ia}, [=](Tape &t) { t.accumulate(ia, t.node(self).grad * s); });
}

Var add_scalar(Var a, double s) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().array() + s;
  return t.record(std::move(out), {ia}, [=](Tape &t) { t.accumulate(ia, t.node(self).grad); });
}

Var add_row(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ShapeError("add_row: shape mismatch " + shape_of(a.value()) + " vs " + shape_of(bias.value()));
  auto &t = tape_of(a);
  const int ia = a.id, ib = bias.id, self = static_cast<int>(t.size());
  Mat out = a.value().rowwise() + bias.value().row(0);
  return t.record(std::move(out), {ia, ib}, [=](Tape &t) {
    const Mat &g = t.node(self).grad;
    t.accumulate(ia, g);
    if (t.requires_grad(ib))
      t.accumulate(ib, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index n) {
  if (row.rows() != 1)
    throw ShapeError("broadcast_rows: expected a single row, got " + shape_of(row.value()));
  auto &t = tape_of(row);
  const int ir = row.id, self = static_cast<int>(t.size());
  Mat out = row.value().replicate(n, 1);
  return t.record(std::move(out), {ir}, [=](Tape &t) { t.accumulate(ir, t.node(self).grad.colwise().sum()); });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty())
    throw ShapeError("concat_cols: no inputs");
  auto &t = tape_of(parts[0]);
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const auto &p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat_cols: shape mismatch " + shape_of(parts[0].value()) + " vs " + shape_of(p.value()));
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id);
  }
  Mat out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i)
    out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), ids, [=](Tape &t) {
    const Mat &g = t.node(self).grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (t.requires_grad(ids[i]))
        t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_of(a.value()));
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().middleCols(begin, count);
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    const auto &v = t.value(ia);
    Mat g = Mat::Zero(v.rows(), v.cols());
    g.middleCols(begin, count) = t.node(self).grad;
    t.accumulate(ia, g);
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size())
    throw ShapeError("reshape: cannot view " + shape_of(a.value()) + " as [" + std::to_string(rows) + " x " +
                     std::to_string(cols) + "]");
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  const auto r0 = a.rows(), c0 = a.cols();
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    t.accumulate(ia, Eigen::Map<const Mat>(t.node(self).grad.data(), r0, c0));
  });
}

Var sigmoid(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    const auto &y = t.value(self).array();
    t.accumulate(ia, (t.node(self).grad.array() * y * (1.0 - y)).matrix());
  });
}

Var tanh(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().array().tanh().matrix();
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    const auto &y = t.value(self).array();
    t.accumulate(ia, (t.node(self).grad.array() * (1.0 - y.square())).matrix());
  });
}

Var relu(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat mask = t.branch_mask((a.value().array() > 0.0).cast<double>().matrix());
  Mat out = a.value().cwiseProduct(mask);
  return t.record(std::move(out), {ia}, [=, mask = std::move(mask)](Tape &t) {
    t.accumulate(ia, t.node(self).grad.cwiseProduct(mask));
  });
}

Var gelu(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    Mat d = t.value(ia).unaryExpr([](double x) {
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
      return cdf + x * pdf;
    });
    t.accumulate(ia, t.node(self).grad.cwiseProduct(d));
  });
}

Var exp(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().array().exp().matrix();
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    t.accumulate(ia, t.node(self).grad.cwiseProduct(t.value(self)));
  });
}

Var clamp(Var a, double lo, double hi) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  const auto &x = a.value().array();
  Mat mask = t.branch_mask(((x >= lo) && (x <= hi)).cast<double>().matrix());
  const Mat bound = (x < 0.5 * (lo + hi)).select(Mat::Constant(x.rows(), x.cols(), lo), Mat::Constant(x.rows(), x.cols(), hi));
  Mat out = (mask.array() > 0.0).select(a.value(), bound);
  return t.record(std::move(out), {ia}, [=, mask = std::move(mask)](Tape &t) {
    t.accumulate(ia, t.node(self).grad.cwiseProduct(mask));
  });
}

Var layer_norm(Var x, Var gain, Var shift, double eps) {
  const auto m = x.cols();
  if (gain.rows() != 1 || gain.cols() != m || shift.rows() != 1 || shift.cols() != m)
    throw ShapeError("layer_norm: gain/shift " + shape_of(gain.value()) + " do not match input " +
                     shape_of(x.value()));
  auto &t = tape_of(x);
  const auto n = x.rows();
  Mat xhat(n, m);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (row.array() - mu) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + shift.value().row(0).array();
  const int ix = x.id, ig = gain.id, ib = shift.id, self = static_cast<int>(t.size());
  return t.record(std::move(out), {ix, ig, ib}, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape &t) {
    const Mat &g = t.node(self).grad;
    if (t.requires_grad(ig))
      t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
    if (t.requires_grad(ib))
      t.accumulate(ib, g.colwise().sum());
    if (t.requires_grad(ix)) {
      Mat dxhat = g.array().rowwise() * t.value(ig).row(0).array();
      Mat dx(dxhat.rows(), dxhat.cols());
      const double inv_m = 1.0 / static_cast<double>(dxhat.cols());
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(xhat.row(i));
        dx.row(i) = inv_std(i) * (dxhat.row(i).array() - inv_m * s1 - xhat.row(i).array() * (inv_m * s2));
      }
      t.accumulate(ix, dx);
    }
  });
}

Var dropout(Var a, double rate, bool train, Rng &rng) {
  if (!train || rate <= 0.0)
    return a;
  if (rate >= 1.0)
    throw Error("dropout rate must be < 1");
  auto &t = tape_of(a);
  std::bernoulli_distribution keep(1.0 - rate);
  Mat mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  Mat out = a.value().cwiseProduct(mask);
  const int ia = a.id, self = static_cast<int>(t.size());
  return t.record(std::move(out), {ia}, [=, mask = std::move(mask)](Tape &t) {
    t.accumulate(ia, t.node(self).grad.cwiseProduct(mask));
  });
}

Var gaussian_sample(Var mu, Var logvar, const Mat &noise) {
  require_same_shape("gaussian_sample", mu, logvar);
  if (noise.rows() != mu.rows() || noise.cols() != mu.cols())
    throw ShapeError("gaussian_sample: noise " + shape_of(noise) + " does not match " + shape_of(mu.value()));
  auto &t = tape_of(mu);
  auto lv = clamp(logvar, -kLogvarClamp, kLogvarClamp);
  auto sd = exp(scale(lv, 0.5));
  return add(mu, mul(sd, t.constant(noise)));
}

Var gather_rows(Var a, std::span<const int> rows) {
  auto &t = tape_of(a);
  Mat out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_of(a.value()));
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {ia}, [=, idx = std::move(idx)](Tape &t) {
    const Mat &g = t.node(self).grad;
    Mat ga = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, ga);
  });
}

Var scatter_rows(Var base, std::span<const int> rows, Var values) {
  if (values.rows() != static_cast<Eigen::Index>(rows.size()) || values.cols() != base.cols())
    throw ShapeError("scatter_rows: values " + shape_of(values.value()) + " do not fit " + shape_of(base.value()));
  auto &t = tape_of(base);
  Mat out = base.value();
  std::vector<char> replaced(static_cast<std::size_t>(base.rows()), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= base.rows())
      throw ShapeError("scatter_rows: row " + std::to_string(rows[i]) + " outside " + shape_of(base.value()));
    if (replaced[static_cast<std::size_t>(rows[i])])
      throw Error("scatter_rows: duplicate target row " + std::to_string(rows[i]));
    replaced[static_cast<std::size_t>(rows[i])] = 1;
    out.row(rows[i]) = values.value().row(static_cast<Eigen::Index>(i));
  }
  const int ib = base.id, iv = values.id, self = static_cast<int>(t.size());
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {ib, iv}, [=, idx = std::move(idx)](Tape &t) {
    const Mat &g = t.node(self).grad;
    if (t.requires_grad(ib)) {
      Mat gb = g;
      for (int r : idx)
        gb.row(r).setZero();
      t.accumulate(ib, gb);
    }
    if (t.requires_grad(iv)) {
      Mat gv(static_cast<Eigen::Index>(idx.size()), g.cols());
      for (std::size_t i = 0; i < idx.size(); ++i)
        gv.row(static_cast<Eigen::Index>(i)) = g.row(idx[i]);
      t.accumulate(iv, gv);
    }
  });
}

Var sum(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    const auto &v = t.value(ia);
    t.accumulate(ia, Mat::Constant(v.rows(), v.cols(), t.node(self).grad(0, 0)));
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0)
    throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
  auto &t = tape_of(a);
  const int ia = a.id, self = static_cast<int>(t.size());
  Mat out = a.value().rowwise().sum();
  return t.record(std::move(out), {ia}, [=](Tape &t) {
    const auto cols = t.value(ia).cols();
    t.accumulate(ia, t.node(self).grad.replicate(1, cols));
  });
}

namespace {

void check_mask(const char *op, Var scores, const Mask &mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols())
    throw ShapeError(std::string(op) + ": mask [" + std::to_string(mask.rows()) + " x " + std::to_string(mask.cols()) +
                     "] does not match scores " + shape_of(scores.value()));
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    if ((mask.row(i).array() != 0).count() == 0)
      throw Error(std::string(op) + ": row " + std::to_string(i) + " has every slot masked");
}

} // namespace

Var masked_softmax(Var scores, const Mask &mask) {
  check_mask("masked_softmax", scores, mask);
  auto &t = tape_of(scores);
  Mat p = Mat::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double mx = -INFINITY;
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (mask(i, j))
        mx = std::max(mx, scores.value()(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      if (mask(i, j)) {
        p(i, j) = std::exp(scores.value()(i, j) - mx);
        z += p(i, j);
      }
    p.row(i) /= z;
  }
  const int is = scores.id, self = static_cast<int>(t.size());
  return t.record(std::move(p), {is}, [=](Tape &t) {
    const Mat &y = t.value(self);
    const Mat &g = t.node(self).grad;
    Mat d(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = y.row(i).dot(g.row(i));
      d.row(i) = y.row(i).array() * (g.row(i).array() - dot);
    }
    t.accumulate(is, d);
  });
}

Var masked_log_softmax(Var scores, const Mask &mask) {
  check_mask("masked_log_softmax", scores, mask);
  auto &t = tape_of(scores);
  Mat out = Mat::Constant(scores.rows(), scores.cols(), -INFINITY);
  Mat p = Mat::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double mx = -INFINITY;
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (mask(i, j))
        mx = std::max(mx, scores.value()(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (mask(i, j))
        z += std::exp(scores.value()(i, j) - mx);
    const double lse = mx + std::log(z);
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (mask(i, j)) {
        out(i, j) = scores.value()(i, j) - lse;
        p(i, j) = std::exp(out(i, j));
      }
  }
  const int is = scores.id, self = static_cast<int>(t.size());
  return t.record(std::move(out), {is}, [=, p = std::move(p), mask = mask](Tape &t) {
    const Mat &g = t.node(self).grad;
    Mat d = Mat::Zero(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      double gs = 0.0;
      for (Eigen::Index j = 0; j < g.cols(); ++j)
        if (mask(i, j))
          gs += g(i, j);
      for (Eigen::Index j = 0; j < g.cols(); ++j)
        if (mask(i, j))
          d(i, j) = g(i, j) - p(i, j) * gs;
    }
    t.accumulate(is, d);
  });
}

Var pick(Var a, std::span<const int> cols) {
  if (static_cast<Eigen::Index>(cols.size()) != a.rows())
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + shape_of(a.value()));
  auto &t = tape_of(a);
  Mat out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= a.cols())
      throw ShapeError("pick: column " + std::to_string(c) + " outside " + shape_of(a.value()));
    out(i, 0) = a.value()(i, c);
  }
  const int ia = a.id, self = static_cast<int>(t.size());
  std::vector<int> idx(cols.begin(), cols.end());
  return t.record(std::move(out), {ia}, [=, idx = std::move(idx)](Tape &t) {
    const auto &v = t.value(ia);
    Mat g = Mat::Zero(v.rows(), v.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      g(static_cast<Eigen::Index>(i), idx[i]) = t.node(self).grad(static_cast<Eigen::Index>(i), 0);
    t.accumulate(ia, g);
  });
}

Var segment_attention(Var q, Var k, Var v, std::span<const int> dst, int heads) {
  require_same_shape("segment_attention(k, v)", k, v);
  if (q.cols() != k.cols())
    throw ShapeError("segment_attention: query " + shape_of(q.value()) + " vs key " + shape_of(k.value()));
  if (k.rows() != static_cast<Eigen::Index>(dst.size()))
    throw ShapeError("segment_attention: " + std::to_string(dst.size()) + " destinations for " +
                     std::to_string(k.rows()) + " edges");
  if (heads < 1 || q.cols() % heads != 0)
    throw ShapeError("segment_attention: width " + std::to_string(q.cols()) + " not divisible into " +
                     std::to_string(heads) + " heads");
  auto &t = tape_of(q);
  const auto n_dst = q.rows();
  const auto n_edges = k.rows();
  const auto dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat &Q = q.value();
  const Mat &K = k.value();
  const Mat &V = v.value();

  Mat alpha(n_edges, heads);
  Mat mx = Mat::Constant(n_dst, heads, -INFINITY);
  for (Eigen::Index e = 0; e < n_edges; ++e) {
    const int d = dst[static_cast<std::size_t>(e)];
    if (d < 0 || d >= n_dst)
      throw ShapeError("segment_attention: destination " + std::to_string(d) + " outside " + std::to_string(n_dst));
    for (int h = 0; h < heads; ++h) {
      alpha(e, h) = inv_sqrt * Q.row(d).segment(h * dh, dh).dot(K.row(e).segment(h * dh, dh));
      mx(d, h) = std::max(mx(d, h), alpha(e, h));
    }
  }
  Mat z = Mat::Zero(n_dst, heads);
  for (Eigen::Index e = 0; e < n_edges; ++e) {
    const int d = dst[static_cast<std::size_t>(e)];
    for (int h = 0; h < heads; ++h) {
      alpha(e, h) = std::exp(alpha(e, h) - mx(d, h));
      z(d, h) += alpha(e, h);
    }
  }
  Mat out = Mat::Zero(n_dst, q.cols());
  for (Eigen::Index e = 0; e < n_edges; ++e) {
    const int d = dst[static_cast<std::size_t>(e)];
    for (int h = 0; h < heads; ++h) {
      alpha(e, h) /= z(d, h);
      out.row(d).segment(h * dh, dh) += alpha(e, h) * V.row(e).segment(h * dh, dh);
    }
  }

  const int iq = q.id, ik = k.id, iv = v.id, self = static_cast<int>(t.size());
  std::vector<int> dsts(dst.begin(), dst.end());
  return t.record(std::move(out), {iq, ik, iv},
                  [=, alpha = std::move(alpha), dsts = std::move(dsts)](Tape &t) {
                    const Mat &g = t.node(self).grad;
                    const Mat &Q = t.value(iq);
                    const Mat &K = t.value(ik);
                    const Mat &V = t.value(iv);
                    Mat dQ = Mat::Zero(Q.rows(), Q.cols());
                    Mat dK = Mat::Zero(K.rows(), K.cols());
                    Mat dV = Mat::Zero(V.rows(), V.cols());
                    Mat dalpha(alpha.rows(), alpha.cols());
                    Mat wsum = Mat::Zero(Q.rows(), heads);
                    for (Eigen::Index e = 0; e < alpha.rows(); ++e) {
                      const int d = dsts[static_cast<std::size_t>(e)];
                      for (int h = 0; h < heads; ++h) {
                        const auto gseg = g.row(d).segment(h * dh, dh);
                        dV.row(e).segment(h * dh, dh) = alpha(e, h) * gseg;
                        dalpha(e, h) = gseg.dot(V.row(e).segment(h * dh, dh));
                        wsum(d, h) += alpha(e, h) * dalpha(e, h);
                      }
                    }
                    for (Eigen::Index e = 0; e < alpha.rows(); ++e) {
                      const int d = dsts[static_cast<std::size_t>(e)];
                      for (int h = 0; h < heads; ++h) {
                        const double ds = inv_sqrt * alpha(e, h) * (dalpha(e, h) - wsum(d, h));
                        dQ.row(d).segment(h * dh, dh) += ds * K.row(e).segment(h * dh, dh);
                        dK.row(e).segment(h * dh, dh) += ds * Q.row(d).segment(h * dh, dh);
                      }
                    }
                    t.accumulate(iq, dQ);
                    t.accumulate(ik, dK);
                    t.accumulate(iv, dV);
                  });
}

// --- gradient checking ----------------------------------------------------

GradCheckReport check_gradients(ParamStore &params, const std::function<Var(Tape &)> &loss_fn,
                                const GradCheckOptions &options) {
  params.zero_grad();
  std::vector<Mat> masks;
  {
    Tape tape;
    tape.set_branches(Tape::BranchMode::record, &masks);
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }
  bool same_branches = true;
  auto eval = [&]() {
    Tape tape;
    tape.set_branches(options.freeze_branches ? Tape::BranchMode::replay : Tape::BranchMode::compare, &masks);
    const double v = loss_fn(tape).scalar();
    same_branches = same_branches && tape.branch_flips() == 0;
    return v;
  };

  GradCheckReport report;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto &p = params[pi];
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> entries(n);
    for (std::size_t i = 0; i < n; ++i)
      entries[i] = i;
    if (options.max_entries_per_param > 0 && n > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_param);
    }
    GradCheckReport::Entry entry{p.name, 0.0, 0, 0};
    for (auto i : entries) {
      double &x = p.value.data()[i];
      const double saved = x;
      same_branches = true;
      x = saved + options.step;
      const double up = eval();
      x = saved - options.step;
      const double down = eval();
      x = saved;
      if (!same_branches)
        ++entry.kinks;
      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = p.grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(analytic - numeric) / denom);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.kinks += entry.kinks;
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

} // namespace ilcp::diff
