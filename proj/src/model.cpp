// SPDX-License-Identifier: Apache-2.0
#include "ilcp/model.hpp"

#include <cmath>

#include <json.hpp>

namespace ilcp::model {

namespace {

using json = nlohmann::json;

std::string layer_name(int l, const char *what) { return "enc.l" + std::to_string(l) + "." + what; }

std::vector<int> iota_repeat(Eigen::Index rows, Eigen::Index times) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(rows * times));
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index k = 0; k < times; ++k)
      out.push_back(static_cast<int>(i));
  return out;
}

} // namespace

void ModelConfig::validate() const {
  if (d < 1 || heads < 1 || d % heads != 0)
    throw ConfigError("model width must be a positive multiple of the head count");
  if (layers < 1)
    throw ConfigError("encoder needs at least one layer");
  if (latent < 1)
    throw ConfigError("latent size must be positive");
  if (candidates < 1)
    throw ConfigError("candidate set size must be positive");
  if (cell_rows < 1)
    throw ConfigError("cell embedding table needs at least one row");
  if (horizon < 0)
    throw ConfigError("prediction horizon must be >= 0");
  if (!(beta >= 0.0))
    throw ConfigError("beta must be >= 0");
  if (!(inbound_dropout >= 0.0 && inbound_dropout < 1.0))
    throw ConfigError("inbound dropout must be in [0, 1)");
}

std::string model_config_to_json(const ModelConfig &c) {
  return json{{"d", c.d},
              {"heads", c.heads},
              {"layers", c.layers},
              {"latent", c.latent},
              {"candidates", c.candidates},
              {"cell_rows", c.cell_rows},
              {"horizon", c.horizon},
              {"beta", c.beta},
              {"inbound_dropout", c.inbound_dropout}}
      .dump();
}

ModelConfig model_config_from_json(const std::string &text) {
  ModelConfig c;
  try {
    const auto j = json::parse(text);
    auto get = [&](const char *key, auto &field) {
      if (j.contains(key))
        field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("d", c.d);
    get("heads", c.heads);
    get("layers", c.layers);
    get("latent", c.latent);
    get("candidates", c.candidates);
    get("cell_rows", c.cell_rows);
    get("horizon", c.horizon);
    get("beta", c.beta);
    get("inbound_dropout", c.inbound_dropout);
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad model config: ") + ex.what());
  }
  c.validate();
  return c;
}

const char *to_string(StateMode mode) {
  switch (mode) {
  case StateMode::ilcp:
    return "ilcp";
  case StateMode::cold:
    return "cold";
  case StateMode::warm:
    return "warm";
  }
  return "?";
}

StateMode state_mode_from_string(const std::string &text) {
  if (text == "ilcp")
    return StateMode::ilcp;
  if (text == "cold" || text == "zk" || text == "zero_knowledge")
    return StateMode::cold;
  if (text == "warm")
    return StateMode::warm;
  throw ConfigError("unknown state mode '" + text + "'");
}

// --- construction ---------------------------------------------------------

Model::Model(const ModelConfig &config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  build_layout(&rng);
}

Model::Model(const ModelConfig &config, ParamStore params) : config_(config) {
  config_.validate();
  build_layout(nullptr);
  if (params.size() != params_.size())
    throw Error("parameter set has " + std::to_string(params.size()) + " blocks, model expects " +
                std::to_string(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto &dst = params_[i];
    auto *src = params.find(dst.name);
    if (src == nullptr)
      throw Error("missing parameter '" + dst.name + "'");
    if (src->value.rows() != dst.value.rows() || src->value.cols() != dst.value.cols())
      throw ShapeError("parameter '" + dst.name + "' has shape [" + std::to_string(src->value.rows()) + " x " +
                       std::to_string(src->value.cols()) + "], expected [" + std::to_string(dst.value.rows()) +
                       " x " + std::to_string(dst.value.cols()) + "]");
    dst.value = src->value;
  }
}

void Model::build_layout(Rng *init) {
  const auto d = static_cast<Eigen::Index>(config_.d);
  const auto z = static_cast<Eigen::Index>(config_.latent);

  auto weight = [&](const std::string &name, Eigen::Index in, Eigen::Index out) {
    auto &w = params_.add(name, in, out);
    if (init != nullptr) {
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index i = 0; i < w.value.size(); ++i)
        w.value.data()[i] = u(*init);
    }
  };
  auto bias = [&](const std::string &name, Eigen::Index n) { params_.add(name, 1, n); };
  auto linear = [&](const std::string &prefix, Eigen::Index in, Eigen::Index out) {
    weight(prefix + ".w", in, out);
    bias(prefix + ".b", out);
  };
  auto norm = [&](const std::string &prefix) {
    params_.add(prefix + ".g", 1, d).value.setOnes();
    bias(prefix + ".b", d);
  };

  auto &emb = params_.add("enc.emb", config_.cell_rows, d);
  if (init != nullptr) {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index i = 0; i < emb.value.size(); ++i)
      emb.value.data()[i] = n01(*init);
  }
  linear("enc.cell_in", d + 2, d);
  bias("enc.ue_in.b", d);
  for (int l = 0; l < config_.layers; ++l) {
    for (const char *m : {"q_ue", "q_cell", "k_cell", "v_cell", "att_meas", "msg_meas", "att_xn", "msg_xn"})
      weight(layer_name(l, m), d, d);
    linear(layer_name(l, "edge"), kEdgeFeatures, d);
    linear(layer_name(l, "out_ue"), d, d);
    linear(layer_name(l, "out_cell"), d, d);
    norm(layer_name(l, "ln_ue"));
    norm(layer_name(l, "ln_cell"));
  }
  for (const char *g : {"z", "r", "n"}) {
    weight(std::string("gru.w") + g, d, d);
    weight(std::string("gru.u") + g, d, d);
    bias(std::string("gru.b") + g, d);
  }
  linear("score.l1", 3 * d, d);
  linear("score.l2", d, 1);
  linear("vae.mu", d, z);
  linear("vae.logvar", d, z);
  linear("vae.dec", z, d);
  linear("proj.gate1", 2 * d, d);
  linear("proj.gate2", d, d);
  linear("proj.mlp1", 2 * d, d);
  linear("proj.mlp2", d, d);
  norm("proj.ln");
}

Var Model::p(Tape &tape, const char *name) const { return tape.param(const_cast<ParamStore &>(params_).get(name)); }
Var Model::p(Tape &tape, const std::string &name) const { return p(tape, name.c_str()); }

Var Model::linear(Tape &tape, Var x, const std::string &prefix) const {
  return diff::add_row(diff::matmul(x, p(tape, prefix + ".w")), p(tape, prefix + ".b"));
}

// --- encoder --------------------------------------------------------------

Model::CellStates Model::encode_cells(Tape &tape, const GraphSnapshot &g) const {
  const auto n = static_cast<Eigen::Index>(g.cells.size());
  std::vector<int> rows;
  for (auto id : g.cells) {
    if (id.value >= static_cast<std::uint32_t>(config_.cell_rows))
      throw ConfigError("cell id " + std::to_string(id.value) + " exceeds the embedding table (" +
                        std::to_string(config_.cell_rows) + " rows)");
    rows.push_back(static_cast<int>(id.value));
  }
  Mat pos(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    pos(i, 0) = g.cell_positions[static_cast<std::size_t>(i)][0];
    pos(i, 1) = g.cell_positions[static_cast<std::size_t>(i)][1];
  }
  const std::array<Var, 2> in{diff::gather_rows(p(tape, "enc.emb"), rows), tape.constant(pos)};
  CellStates out;
  out.layers.push_back(linear(tape, diff::concat_cols(in), "enc.cell_in"));

  std::vector<int> src, dst;
  for (const auto &[a, b] : g.xn) {
    src.push_back(a);
    dst.push_back(b);
  }
  for (int l = 0; l < config_.layers; ++l) {
    const Var h = out.layers.back();
    const Var kc = diff::matmul(h, p(tape, layer_name(l, "k_cell")));
    const Var vc = diff::matmul(h, p(tape, layer_name(l, "v_cell")));
    out.meas_keys.push_back(diff::matmul(kc, p(tape, layer_name(l, "att_meas"))));
    out.meas_values.push_back(diff::matmul(vc, p(tape, layer_name(l, "msg_meas"))));

    Var agg;
    if (src.empty()) {
      agg = tape.constant(Mat::Zero(n, config_.d));
    } else {
      const Var k = diff::gather_rows(diff::matmul(kc, p(tape, layer_name(l, "att_xn"))), src);
      const Var v = diff::gather_rows(diff::matmul(vc, p(tape, layer_name(l, "msg_xn"))), src);
      const Var q = diff::matmul(h, p(tape, layer_name(l, "q_cell")));
      agg = diff::segment_attention(q, k, v, dst, config_.heads);
    }
    const Var upd = linear(tape, diff::gelu(agg), layer_name(l, "out_cell"));
    out.layers.push_back(diff::layer_norm(diff::add(h, upd), p(tape, layer_name(l, "ln_cell.g")),
                                          p(tape, layer_name(l, "ln_cell.b"))));
  }
  return out;
}

Var Model::encode_ues(Tape &tape, const GraphSnapshot &g, const CellStates &cells) const {
  const auto n_ue = static_cast<Eigen::Index>(g.ues.size());
  if (n_ue == 0)
    throw Error("snapshot has no UE nodes");
  const auto n_e = static_cast<Eigen::Index>(g.meas.size());
  Mat feats(n_e, kEdgeFeatures);
  std::vector<int> src, dst;
  src.reserve(static_cast<std::size_t>(n_e));
  dst.reserve(static_cast<std::size_t>(n_e));
  for (Eigen::Index e = 0; e < n_e; ++e) {
    const auto &edge = g.meas[static_cast<std::size_t>(e)];
    for (int f = 0; f < kEdgeFeatures; ++f)
      feats(e, f) = edge.features[static_cast<std::size_t>(f)];
    src.push_back(edge.cell);
    dst.push_back(edge.ue);
  }
  const Var f = tape.constant(std::move(feats));
  Var h = diff::broadcast_rows(p(tape, "enc.ue_in.b"), n_ue);
  for (int l = 0; l < config_.layers; ++l) {
    const Var ef = linear(tape, f, layer_name(l, "edge"));
    const Var k = diff::add(diff::gather_rows(cells.meas_keys[static_cast<std::size_t>(l)], src), ef);
    const Var v = diff::add(diff::gather_rows(cells.meas_values[static_cast<std::size_t>(l)], src), ef);
    const Var q = diff::matmul(h, p(tape, layer_name(l, "q_ue")));
    const Var agg = diff::segment_attention(q, k, v, dst, config_.heads);
    const Var upd = linear(tape, diff::gelu(agg), layer_name(l, "out_ue"));
    h = diff::layer_norm(diff::add(h, upd), p(tape, layer_name(l, "ln_ue.g")), p(tape, layer_name(l, "ln_ue.b")));
  }
  return h;
}

// --- recurrent core, scorer, compressor, projection -------------------------

Var Model::gru(Tape &tape, Var h, Var x) const {
  using namespace diff;
  auto gate = [&](const char *g) {
    return add_row(add(matmul(x, p(tape, std::string("gru.w") + g)), matmul(h, p(tape, std::string("gru.u") + g))),
                   p(tape, std::string("gru.b") + g));
  };
  const Var z = sigmoid(gate("z"));
  const Var r = sigmoid(gate("r"));
  const Var n = tanh(add_row(add(matmul(x, p(tape, "gru.wn")), matmul(mul(r, h), p(tape, "gru.un"))),
                             p(tape, "gru.bn")));
  return add(n, mul(z, sub(h, n)));
}

Var Model::score(Tape &tape, Var h, Var cell_embeddings, std::span<const CandidateSet> candidates) const {
  std::vector<int> rows;
  for (const auto &c : candidates) {
    if (c.size() != config_.candidates)
      throw ShapeError("candidate set has " + std::to_string(c.size()) + " slots, model expects " +
                       std::to_string(config_.candidates));
    rows.insert(rows.end(), c.cell_index.begin(), c.cell_index.end());
  }
  return score_rows(tape, h, diff::gather_rows(cell_embeddings, rows));
}

Var Model::score_rows(Tape &tape, Var h, Var cand) const {
  using namespace diff;
  const auto b = h.rows();
  if (b == 0 || cand.rows() % b != 0)
    throw ShapeError("score: " + std::to_string(cand.rows()) + " candidate rows for " + std::to_string(b) + " items");
  const auto k = cand.rows() / b;
  const auto rep = iota_repeat(b, k);
  const Var hr = gather_rows(h, rep);
  const std::array<Var, 3> in{hr, cand, mul(hr, cand)};
  const Var s = linear(tape, relu(linear(tape, concat_cols(in), "score.l1")), "score.l2");
  return reshape(s, b, k);
}

Model::Compressed Model::compress(Tape &tape, Var h, bool train, Rng *rng) const {
  ++compress_calls_;
  Compressed out;
  out.mu = linear(tape, h, "vae.mu");
  out.logvar = linear(tape, h, "vae.logvar");
  if (train) {
    if (rng == nullptr)
      throw Error("training-mode compression needs a random source");
    Mat noise(out.mu.rows(), out.mu.cols());
    std::normal_distribution<double> n01(0.0, 1.0);
    for (Eigen::Index i = 0; i < noise.size(); ++i)
      noise.data()[i] = n01(*rng);
    out.z = diff::gaussian_sample(out.mu, out.logvar, noise);
  } else {
    out.z = out.mu;
  }
  return out;
}

Var Model::decode(Tape &tape, Var z) const { return linear(tape, z, "vae.dec"); }

Var Model::project(Tape &tape, Var h_tilde, Var x_new, bool train, Rng &rng) const {
  using namespace diff;
  const Var ht = dropout(h_tilde, config_.inbound_dropout, train, rng);
  const std::array<Var, 2> parts{ht, x_new};
  const Var u = concat_cols(parts);
  const Var gate = sigmoid(linear(tape, relu(linear(tape, u, "proj.gate1")), "proj.gate2"));
  const Var m = linear(tape, relu(linear(tape, u, "proj.mlp1")), "proj.mlp2");
  return layer_norm(add(ht, mul(gate, m)), p(tape, "proj.ln.g"), p(tape, "proj.ln.b"));
}

// --- losses and read-outs -------------------------------------------------

Mask mask_of(std::span<const CandidateSet> candidates) {
  if (candidates.empty())
    return Mask(0, 0);
  Mask m(static_cast<Eigen::Index>(candidates.size()), candidates[0].size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    for (int k = 0; k < candidates[i].size(); ++k)
      m(static_cast<Eigen::Index>(i), k) = candidates[i].mask[static_cast<std::size_t>(k)];
  return m;
}

Var prediction_nll(Var scores, const Mask &mask, std::span<const int> label_slots) {
  for (std::size_t i = 0; i < label_slots.size(); ++i) {
    const int s = label_slots[i];
    if (s < 0 || s >= mask.cols() || !mask(static_cast<Eigen::Index>(i), s))
      throw Error("label slot " + std::to_string(s) + " of row " + std::to_string(i) + " is not a visible candidate");
  }
  return diff::scale(diff::pick(diff::masked_log_softmax(scores, mask), label_slots), -1.0);
}

Var vae_loss(Var h, Var recon, Var mu, Var logvar, double beta) {
  using namespace diff;
  const Var err = sub(recon, h);
  const Var mse = scale(row_sum(mul(err, err)), 1.0 / static_cast<double>(h.cols()));
  const Var lv = clamp(logvar, -kLogvarClamp, kLogvarClamp);
  const Var kl_terms = sub(add_scalar(add(mul(mu, mu), exp(lv)), -1.0), lv);
  const Var kl = scale(row_sum(kl_terms), 0.5);
  return mean(add(mse, scale(kl, beta)));
}

Mat masked_scores(const Mat &scores, const Mask &mask) {
  Mat out = scores;
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      if (!mask(i, j))
        out(i, j) = -INFINITY;
  return out;
}

Mat candidate_probs(const Mat &scores, const Mask &mask) {
  Tape tape(false);
  return diff::masked_softmax(tape.constant(scores), mask).value();
}

std::vector<int> argmax_slots(const Mat &scores, const Mask &mask) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()), -1);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double best = -INFINITY;
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      if (mask(i, j) && (out[static_cast<std::size_t>(i)] < 0 || scores(i, j) > best)) {
        best = scores(i, j);
        out[static_cast<std::size_t>(i)] = static_cast<int>(j);
      }
  }
  return out;
}

// --- conveniences ---------------------------------------------------------

Mat gru_step(const Model &model, const Mat &h, const Mat &x) {
  Tape tape(false);
  return model.gru(tape, tape.constant(h), tape.constant(x)).value();
}

Mat score_candidates(const Model &model, const Mat &h, const Mat &candidate_embeddings, const Mask &mask) {
  if (mask.rows() != h.rows() || mask.cols() * h.rows() != candidate_embeddings.rows())
    throw ShapeError("score_candidates: mask does not match the candidate rows");
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    if ((mask.row(i).array() != 0).count() == 0)
      throw Error("score_candidates: every candidate slot of row " + std::to_string(i) + " is masked");
  Tape tape(false);
  const Mat s = model.score_rows(tape, tape.constant(h), tape.constant(candidate_embeddings)).value();
  return masked_scores(s, mask);
}

VaeOutput vae_compress(const Model &model, const Mat &h) {
  Tape tape(false);
  const auto c = model.compress(tape, tape.constant(h), false, nullptr);
  return {c.z.value(), c.mu.value(), c.logvar.value()};
}

Mat vae_decode(const Model &model, const Mat &z) {
  Tape tape(false);
  return model.decode(tape, tape.constant(z)).value();
}

Mat project(const Model &model, const Mat &h_tilde, const Mat &x_new) {
  Tape tape(false);
  Rng unused(0);
  return model.project(tape, tape.constant(h_tilde), tape.constant(x_new), false, unused).value();
}

xn::Latent to_latent(const Mat &z) {
  if (z.size() != static_cast<Eigen::Index>(xn::kLatentDim))
    throw ShapeError("latent has " + std::to_string(z.size()) + " components, payload carries " +
                     std::to_string(xn::kLatentDim));
  xn::Latent out{};
  for (std::size_t i = 0; i < xn::kLatentDim; ++i)
    out[i] = static_cast<float>(z.data()[i]);
  return out;
}

Mat from_latent(const xn::Latent &z) {
  Mat out(1, static_cast<Eigen::Index>(xn::kLatentDim));
  for (std::size_t i = 0; i < xn::kLatentDim; ++i)
    out(0, static_cast<Eigen::Index>(i)) = z[i];
  return out;
}

HandoverDecision ilcp_handover_inference(const Model &model, const Mat &h_src, const Mat &x_new,
                                         const Mat &candidate_embeddings, const Mask &mask, bool use_codec) {
  HandoverDecision out;
  const auto z = to_latent(vae_compress(model, h_src).mu);
  xn::Latent received = z;
  if (use_codec) {
    out.payload = xn::serialize_latent(z);
    received = xn::deserialize_latent(out.payload);
  }
  const Mat h_tilde = vae_decode(model, from_latent(received));
  out.h_new = project(model, h_tilde, x_new);
  out.scores = score_candidates(model, out.h_new, candidate_embeddings, mask);
  out.slot = argmax_slots(out.scores, mask).front();
  return out;
}

Mat cell_embeddings(const Model &model, const GraphSnapshot &snapshot) {
  Tape tape(false);
  return model.encode_cells(tape, snapshot).final().value();
}

// --- checkpoints ----------------------------------------------------------

std::vector<std::uint8_t> save_checkpoint(const Model &model, const NormalizationStats &stats,
                                          const CheckpointInfo &info) {
  const json meta{{"format", "ilcp-checkpoint"},
                  {"model", json::parse(model_config_to_json(model.config()))},
                  {"normalization", json::parse(normalization_to_json(stats))},
                  {"mode", info.mode},
                  {"robust", info.robust},
                  {"epoch", info.epoch},
                  {"seed", info.seed}};
  return diff::encode_checkpoint(model.params(), meta.dump());
}

LoadedCheckpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  ParamStore params;
  const auto text = diff::decode_checkpoint(bytes, &params);
  json meta;
  try {
    meta = json::parse(text);
  } catch (const json::exception &ex) {
    throw Error(std::string("checkpoint metadata is not JSON: ") + ex.what());
  }
  if (!meta.contains("model") || !meta.contains("normalization"))
    throw Error("checkpoint metadata lacks the model config or normalization stats");
  CheckpointInfo info;
  info.mode = meta.value("mode", std::string("ilcp"));
  info.robust = meta.value("robust", false);
  info.epoch = meta.value("epoch", 0);
  info.seed = meta.value("seed", std::uint64_t{0});
  Model m(model_config_from_json(meta.at("model").dump()), std::move(params));
  return {std::move(m), normalization_from_json(meta.at("normalization").dump()), info};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path &path) {
  const auto bytes = diff::read_file(path);
  return load_checkpoint(std::span<const std::uint8_t>(bytes));
}

} // namespace ilcp::model
