// SPDX-License-Identifier: Apache-2.0
#include "ilcp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ilcp/eval.hpp"

namespace ilcp::train {

namespace {

using json = nlohmann::json;

Rng derived_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

CellId reference_at(const TraceIndex &ref, UeId ue, Step t) {
  const auto c = ref.serving(ue, t);
  if (!c || !c->valid())
    throw Error("no reference serving cell for UE " + std::to_string(ue.value) + " at t=" + std::to_string(t));
  return *c;
}

// Rows of one UE over [t0, t1] as a standalone trace.
Trace sub_trace(const TraceIndex &index, UeId ue, Step t0, Step t1) {
  Trace out;
  out.topology = index.trace().topology;
  for (Step t = t0; t <= t1; ++t) {
    const auto rows = index.rows(ue, t);
    out.steps.insert(out.steps.end(), rows.begin(), rows.end());
  }
  return out;
}

} // namespace

const char *to_string(TrainMode mode) { return mode == TrainMode::ilcp ? "ilcp" : "zero_knowledge"; }

TrainMode train_mode_from_string(const std::string &text) {
  if (text == "ilcp")
    return TrainMode::ilcp;
  if (text == "zk" || text == "zero_knowledge")
    return TrainMode::zero_knowledge;
  throw ConfigError("unknown training mode '" + text + "'");
}

// --- optimizer ------------------------------------------------------------

void adamw_step(ParamStore &params, OptimizerState &state, const AdamWConfig &c) {
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.push_back(Mat::Zero(params[i].value.rows(), params[i].value.cols()));
      state.v.push_back(Mat::Zero(params[i].value.rows(), params[i].value.cols()));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("optimizer state does not match the parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto &p = params[i];
    if (p.grad.size() != 0 && !p.grad.allFinite())
      throw Error("non-finite gradient in parameter '" + p.name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &p = params[i];
    auto &m = state.m[i];
    auto &v = state.v[i];
    if (p.grad.size() == 0)
      p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    m = c.beta1 * m + (1.0 - c.beta1) * p.grad;
    v = c.beta2 * v + (1.0 - c.beta2) * p.grad.cwiseProduct(p.grad);
    p.value -= c.lr * c.weight_decay * p.value;
    p.value.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

// --- configuration ----------------------------------------------------------

void TrainConfig::validate() const {
  if (!(optimizer.lr > 0.0) || optimizer.weight_decay < 0.0)
    throw ConfigError("learning rate must be positive and weight decay >= 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
    throw ConfigError("Adam betas must be in [0, 1)");
  if (streams < 1 || window < 1 || windows_per_chunk < 1 || chunks_per_epoch < 1)
    throw ConfigError("batch geometry must be positive");
  if (max_epochs < 1 || patience < 1)
    throw ConfigError("max_epochs and patience must be positive");
  if (!(handover_fraction >= 0.0 && handover_fraction <= 1.0))
    throw ConfigError("handover fraction must be in [0, 1]");
  if (stop_metric != "val_acc" && stop_metric != "val_loss")
    throw ConfigError("stop metric must be val_acc or val_loss");
  if (val_history < 1 || val_max_events < 1)
    throw ConfigError("validation history and event cap must be positive");
}

std::string train_config_to_json(const TrainConfig &c) {
  return json{{"lr", c.optimizer.lr},
              {"weight_decay", c.optimizer.weight_decay},
              {"beta1", c.optimizer.beta1},
              {"beta2", c.optimizer.beta2},
              {"eps", c.optimizer.eps},
              {"streams", c.streams},
              {"window", c.window},
              {"windows_per_chunk", c.windows_per_chunk},
              {"chunks_per_epoch", c.chunks_per_epoch},
              {"handover_fraction", c.handover_fraction},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"robust", c.robust},
              {"mixture", json::parse(perturb::mixture_to_json(c.mixture))},
              {"stop_metric", c.stop_metric},
              {"val_max_events", c.val_max_events},
              {"val_history", c.val_history}}
      .dump(2);
}

TrainConfig train_config_from_json(const std::string &text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    auto get = [&](const char *key, auto &field) {
      if (j.contains(key))
        field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr", c.optimizer.lr);
    get("weight_decay", c.optimizer.weight_decay);
    get("beta1", c.optimizer.beta1);
    get("beta2", c.optimizer.beta2);
    get("eps", c.optimizer.eps);
    get("streams", c.streams);
    get("window", c.window);
    get("windows_per_chunk", c.windows_per_chunk);
    get("chunks_per_epoch", c.chunks_per_epoch);
    get("handover_fraction", c.handover_fraction);
    get("max_epochs", c.max_epochs);
    get("patience", c.patience);
    get("seed", c.seed);
    if (j.contains("mode"))
      c.mode = train_mode_from_string(j.at("mode").get<std::string>());
    get("robust", c.robust);
    get("stop_metric", c.stop_metric);
    get("val_max_events", c.val_max_events);
    get("val_history", c.val_history);
    if (j.contains("mixture")) {
      const auto &m = j.at("mixture");
      auto &x = c.mixture;
      auto mget = [&](const char *key, auto &field) {
        if (m.contains(key))
          field = m.at(key).get<std::decay_t<decltype(field)>>();
      };
      mget("clean_weight", x.clean_weight);
      mget("sigma_lo", x.sigma_lo);
      mget("sigma_hi", x.sigma_hi);
      mget("blockage_probability", x.blockage_probability);
      mget("blockage_max_count", x.blockage_max_count);
      mget("ssb_probability", x.ssb_probability);
      mget("ssb_periods", x.ssb_periods);
      if (m.contains("sigma_set")) {
        const auto s = m.at("sigma_set").get<std::string>();
        if (s == "integer_range")
          x.sigma_set = perturb::SigmaSet::integer_range;
        else if (s == "endpoints")
          x.sigma_set = perturb::SigmaSet::endpoints;
        else
          throw ConfigError("unknown sigma set '" + s + "'");
      }
    }
  } catch (const json::exception &ex) {
    throw ConfigError(std::string("bad training config: ") + ex.what());
  }
  c.validate();
  return c;
}

// --- windows --------------------------------------------------------------

Window make_window(const TraceIndex &reference, const NormalizationStats &stats, std::span<const StreamSpec> streams,
                   Step offset, int steps, int horizon, int candidates) {
  if (streams.empty() || steps < 1)
    throw Error("a window needs at least one stream and one step");
  SnapshotBuilder builder(reference.trace().topology, stats);
  Window w;
  w.snapshot = builder.empty(-1);
  w.streams = static_cast<int>(streams.size());
  w.steps = steps;
  for (int s = 0; s < steps; ++s) {
    for (const auto &st : streams) {
      const Step t = st.chunk_begin + offset + s;
      const auto &input = st.input != nullptr ? *st.input : reference;
      const auto rows = input.rows(st.ue, t);
      if (rows.empty())
        throw Error("UE " + std::to_string(st.ue.value) + " has no measurements at t=" + std::to_string(t));
      builder.add_ue(w.snapshot, {st.ue, t}, rows);
      const int i = static_cast<int>(w.snapshot.ues.size()) - 1;
      w.candidates.push_back(build_candidates(w.snapshot, i, candidates));
      const int slot = w.candidates.back().slot_of(reference_at(reference, st.ue, t + horizon));
      w.labels_outside += slot < 0 ? 1 : 0;
      w.label.push_back(slot);
      w.handover.push_back(t > st.chunk_begin &&
                           reference_at(reference, st.ue, t) != reference_at(reference, st.ue, t - 1));
    }
  }
  return w;
}

WindowLoss window_loss(const Model &model, Tape &tape, const Window &w, const Mat &h0, TrainMode mode, bool train,
                       Rng &rng) {
  using namespace diff;
  const int b = w.streams;
  if (h0.rows() != b || h0.cols() != model.config().d)
    throw ShapeError("initial state does not match the window");
  const auto cells = model.encode_cells(tape, w.snapshot);
  const Var x_all = model.encode_ues(tape, w.snapshot, cells);
  const Var cell_final = cells.final();
  Var h = tape.constant(h0);

  WindowLoss out;
  std::vector<Var> nll_terms, vae_terms;
  for (int s = 0; s < w.steps; ++s) {
    std::vector<int> rows(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i)
      rows[static_cast<std::size_t>(i)] = s * b + i;
    const Var x = gather_rows(x_all, rows);
    Var hn = model.gru(tape, h, x);

    std::vector<int> ho;
    for (int i = 0; i < b; ++i)
      if (w.handover[static_cast<std::size_t>(s * b + i)] != 0)
        ho.push_back(i);
    if (!ho.empty()) {
      const Var xr = gather_rows(x, ho);
      Var hp;
      if (mode == TrainMode::ilcp) {
        const Var src = gather_rows(h, ho);
        const auto c = model.compress(tape, src, train, &rng);
        const Var rec = model.decode(tape, c.z);
        hp = model.project(tape, rec, xr, train, rng);
        const Var vl = model::vae_loss(src, rec, c.mu, c.logvar, model.config().beta);
        out.vae += vl.scalar() * static_cast<double>(ho.size());
        vae_terms.push_back(scale(vl, static_cast<double>(ho.size())));
      } else {
        hp = model.gru(tape, tape.constant(Mat::Zero(static_cast<Eigen::Index>(ho.size()), h0.cols())), xr);
      }
      out.handovers += ho.size();
      hn = scatter_rows(hn, ho, hp);
    }
    h = hn;

    std::vector<int> valid, labels;
    std::vector<CandidateSet> cand;
    for (int i = 0; i < b; ++i) {
      const auto k = static_cast<std::size_t>(s * b + i);
      if (w.label[k] < 0)
        continue;
      valid.push_back(i);
      labels.push_back(w.label[k]);
      cand.push_back(w.candidates[k]);
    }
    if (valid.empty())
      continue;
    const Var scores = model.score(tape, gather_rows(h, valid), cell_final, cand);
    const Var nll = sum(model::prediction_nll(scores, model::mask_of(cand), labels));
    out.nll += nll.scalar();
    out.nll_rows += valid.size();
    nll_terms.push_back(nll);
  }
  out.h_last = h;

  auto total = [&](const std::vector<Var> &terms, std::size_t n) {
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i)
      acc = add(acc, terms[i]);
    return scale(acc, 1.0 / static_cast<double>(n));
  };
  if (nll_terms.empty() && vae_terms.empty())
    throw Error("window has neither labelled rows nor handovers");
  if (!nll_terms.empty() && !vae_terms.empty())
    out.loss = add(total(nll_terms, out.nll_rows), total(vae_terms, out.handovers));
  else if (!nll_terms.empty())
    out.loss = total(nll_terms, out.nll_rows);
  else
    out.loss = total(vae_terms, out.handovers);
  if (out.nll_rows > 0)
    out.nll /= static_cast<double>(out.nll_rows);
  if (out.handovers > 0)
    out.vae /= static_cast<double>(out.handovers);
  return out;
}

// --- trainer --------------------------------------------------------------

Trainer::Trainer(const Trace &train, const Trace &val, NormalizationStats stats, TrainConfig config,
                 const ModelConfig &model_config)
    : config_(std::move(config)), stats_(std::move(stats)), model_(model_config, config_.seed), train_(train),
      val_(val), sample_rng_(derived_rng(config_.seed, 1)), model_rng_(derived_rng(config_.seed, 2)) {
  config_.validate();
  if (train.steps.empty())
    throw Error("training split is empty");
  if (val.steps.empty())
    throw Error("validation split is empty");
  if (config_.robust)
    mixture_ = std::make_unique<perturb::MixedSampler>(config_.mixture, derived_rng(config_.seed, 3)());
  const Step need = config_.chunk_steps() + model_config.horizon;
  for (const auto &r : train_.runs()) {
    if (r.t_end - r.t_begin + 1 < need)
      continue;
    runs_.push_back(r);
    const auto starts = static_cast<std::size_t>(r.t_end - r.t_begin + 2 - need);
    run_weight_.push_back((run_weight_.empty() ? 0 : run_weight_.back()) + starts);
  }
  if (runs_.empty())
    throw Error("no training run is long enough for one " + std::to_string(need) + "-step chunk");
  train_events_ = extract_handover_events(train_);
  eval::EvalConfig ec;
  ec.horizon = model_config.horizon;
  ec.max_delta = 0;
  ec.history = config_.val_history;
  auto ev = eval::eligible_events(val_, extract_handover_events(val_), ec);
  if (ev.size() > config_.val_max_events) {
    std::vector<HandoverEvent> kept;
    for (std::size_t i = 0; i < config_.val_max_events; ++i)
      kept.push_back(ev[i * ev.size() / config_.val_max_events]);
    ev = std::move(kept);
  }
  val_events_ = std::move(ev);
  if (val_events_.empty())
    throw Error("validation split has no usable handover events");
}

Trainer::Stream Trainer::sample_one() {
  const Step len = config_.chunk_steps();
  const Step need = len + model_.config().horizon;
  Stream s;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  bool placed = false;
  if (!train_events_.empty() && u01(sample_rng_) < config_.handover_fraction) {
    std::uniform_int_distribution<std::size_t> pick(0, train_events_.size() - 1);
    const auto &e = train_events_[pick(sample_rng_)];
    const Step lo_off = std::min<Step>(config_.window, len - 1);
    std::uniform_int_distribution<Step> off(lo_off, len - 1);
    const Step begin = e.t_star - off(sample_rng_);
    const auto run = train_.run_of(e.ue, e.t_star);
    if (run && begin >= run->t_begin && begin + need - 1 <= run->t_end) {
      s.spec = {e.ue, begin, nullptr};
      placed = true;
    }
  }
  if (!placed) {
    std::uniform_int_distribution<std::size_t> pick(0, run_weight_.back() - 1);
    const std::size_t k = pick(sample_rng_);
    const auto it = std::upper_bound(run_weight_.begin(), run_weight_.end(), k);
    const auto r = static_cast<std::size_t>(it - run_weight_.begin());
    const std::size_t before = r == 0 ? 0 : run_weight_[r - 1];
    s.spec = {runs_[r].ue, runs_[r].t_begin + static_cast<Step>(k - before), nullptr};
  }
  if (mixture_) {
    const auto draw = mixture_->next();
    if (!draw.clean) {
      s.perturbed = std::make_unique<Trace>(
          perturb::apply(sub_trace(train_, s.spec.ue, s.spec.chunk_begin, s.spec.chunk_begin + len - 1), draw.config));
      s.index = std::make_unique<TraceIndex>(*s.perturbed);
      s.spec.input = s.index.get();
    }
  }
  return s;
}

std::vector<Trainer::Stream> Trainer::sample_streams() {
  std::vector<Stream> out;
  for (int i = 0; i < config_.streams; ++i)
    out.push_back(sample_one());
  return out;
}

EpochStats Trainer::train_epoch() {
  ++epoch_;
  EpochStats st;
  st.epoch = epoch_;
  double loss_sum = 0.0;
  std::size_t windows = 0;
  const auto &mc = model_.config();
  for (int c = 0; c < config_.chunks_per_epoch; ++c) {
    const auto streams = sample_streams();
    std::vector<StreamSpec> specs;
    for (const auto &s : streams)
      specs.push_back(s.spec);
    Mat h = Mat::Zero(config_.streams, mc.d);
    for (int k = 0; k < config_.windows_per_chunk; ++k) {
      const auto w = make_window(train_, stats_, specs, static_cast<Step>(k) * config_.window, config_.window,
                                 mc.horizon, mc.candidates);
      st.labels_outside += w.labels_outside;
      Tape tape;
      const std::size_t before = model_.compress_calls();
      const auto wl = window_loss(model_, tape, w, h, config_.mode, true, model_rng_);
      vae_calls_ += model_.compress_calls() - before;
      const double loss = wl.loss.scalar();
      if (!std::isfinite(loss))
        throw Error("non-finite training loss at epoch " + std::to_string(epoch_));
      model_.params().zero_grad();
      tape.backward(wl.loss);
      adamw_step(model_.params(), opt_, config_.optimizer);
      h = wl.h_last.value();
      loss_sum += loss;
      st.handovers += wl.handovers;
      ++windows;
    }
  }
  st.train_loss = loss_sum / static_cast<double>(windows);
  const auto v = validate();
  st.val_acc = v.acc;
  st.val_loss = v.loss;
  return st;
}

ValidationResult Trainer::validate() const {
  eval::EvalConfig ec;
  ec.horizon = model_.config().horizon;
  ec.max_delta = 0;
  ec.history = config_.val_history;
  const auto mode = config_.mode == TrainMode::ilcp ? model::StateMode::ilcp : model::StateMode::cold;
  const auto set = eval::run_learned(model_, stats_, val_, val_, val_events_, mode, ec);
  ValidationResult r;
  r.events = set.records.size();
  r.acc = eval::acc_at_delta(set, 0);
  double s = 0.0;
  std::size_t n = 0;
  for (const auto &rec : set.records)
    if (std::isfinite(rec.nll[0])) {
      s += rec.nll[0];
      ++n;
    }
  r.loss = n > 0 ? s / static_cast<double>(n) : std::numeric_limits<double>::infinity();
  return r;
}

FitResult fit(Trainer &trainer, const std::function<void(const EpochStats &)> &on_epoch) {
  const auto &cfg = trainer.config();
  FitResult out;
  out.best = trainer.model().params().clone();
  double best = -std::numeric_limits<double>::infinity();
  for (int e = 0; e < cfg.max_epochs; ++e) {
    const auto st = trainer.train_epoch();
    out.log.push_back(st);
    if (on_epoch)
      on_epoch(st);
    const double score = cfg.stop_metric == "val_loss" ? -st.val_loss : st.val_acc;
    if (score > best) {
      best = score;
      out.best_epoch = st.epoch;
      out.best = trainer.model().params().clone();
    } else if (st.epoch - out.best_epoch >= cfg.patience) {
      break;
    }
  }
  return out;
}

std::string training_log_csv(const std::vector<EpochStats> &log, const TrainConfig &config) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,train_loss,val_acc,lr,mode,robust\n";
  for (const auto &e : log)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_acc << ',' << config.optimizer.lr << ','
       << to_string(config.mode) << ',' << (config.robust ? 1 : 0) << '\n';
  return os.str();
}

} // namespace ilcp::train
