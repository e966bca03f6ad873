#pragma once

// AdamW training loop with two learning-rate groups, EMA weights and
// validation-based model selection.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajground/dataset.hpp"
#include "trajground/error.hpp"
#include "trajground/evalcorrect.hpp"
#include "trajground/loss.hpp"
#include "trajground/model.hpp"
#include "trajground/rng.hpp"
#include "trajground/synthworld.hpp"

namespace trajground {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t iterations = 5000;
  double lr_backbone = 1e-4;
  double lr_text = 1e-5;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-2;
  double ema_decay = 0.9998;
  bool ema_warmup = true;  // decay_k = min(ema_decay, (1+k)/(10+k))
  std::uint64_t seed = 7;
  std::size_t eval_every = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clipping; 0 disables it

  void validate() const {
    if (!(lr_backbone > 0) || !(lr_text > 0)) fail(ErrorCode::ConfigError, "learning rates must be positive");
    if (!(ema_decay >= 0 && ema_decay < 1)) fail(ErrorCode::ConfigError, "ema_decay must lie in [0,1)");
    if (iterations == 0) fail(ErrorCode::ConfigError, "iterations must be positive");
    if (batch_size == 0) fail(ErrorCode::ConfigError, "batch_size must be positive");
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail(ErrorCode::ConfigError, "warmup_fraction must lie in [0,1)");
    if (weight_decay < 0 || grad_clip < 0) fail(ErrorCode::ConfigError, "weight_decay and grad_clip must be nonnegative");
  }
};

enum class LrGroup { Text, Backbone };

/// Parameters that read the instruction embedding form the text group.
inline LrGroup group_of(std::string_view name) { return name.rfind("fuse.w_t", 0) == 0 ? LrGroup::Text : LrGroup::Backbone; }

/// Text group: linear ramp from 0 over the warmup, then linear decay to 0 at
/// the final iteration. Backbone group: constant.
inline double lr_at(const TrainConfig& cfg, LrGroup group, std::size_t iteration) {
  if (group == LrGroup::Backbone) return cfg.lr_backbone;
  const double total = static_cast<double>(cfg.iterations);
  const double warm = std::floor(cfg.warmup_fraction * total);
  const double it = static_cast<double>(iteration);
  if (it < warm) return cfg.lr_text * it / warm;
  if (it >= total) return 0.0;
  return cfg.lr_text * (total - it) / (total - warm);
}

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;

  static AdamState zeros(const ParamStore<T>& ps) {
    AdamState s;
    for (const auto& p : ps) {
      s.m.emplace_back(p.value.shape());
      s.v.emplace_back(p.value.shape());
    }
    return s;
  }
};

/// One AdamW step with bias correction. The weight decay p <- p - lr*wd*p is
/// applied separately from the adaptive gradient term. `lr_of(i)` gives the
/// learning rate of parameter i.
template <class T>
void optimizer_step(ParamStore<T>& ps, AdamState<T>& st, const TrainConfig& cfg, const std::function<double(std::size_t)>& lr_of) {
  if (st.m.size() != ps.size() || st.v.size() != ps.size()) fail(ErrorCode::ShapeMismatch, "optimizer state does not match parameters");
  for (const auto& p : ps)
    for (auto g : p.grad.values())
      if (!std::isfinite(static_cast<double>(g))) fail(ErrorCode::NonFiniteGradient, "non-finite gradient in '" + p.name + "'");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) fail(ErrorCode::ShapeMismatch, "moment shape for '" + p.name + "'");
    const double lr = lr_of(i);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = static_cast<double>(p.grad[k]);
      const double mk = cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * g;
      const double vk = cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double w = static_cast<double>(p.value[k]);
      w -= lr * cfg.weight_decay * w;
      w -= lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.eps);
      p.value[k] = static_cast<T>(w);
    }
  }
}

/// ema <- decay*ema + (1-decay)*params.
template <class T>
void ema_update(ParamStore<T>& ema, const ParamStore<T>& params, double decay) {
  if (ema.size() != params.size()) fail(ErrorCode::ShapeMismatch, "EMA and parameters differ in count");
  for (std::size_t i = 0; i < ema.size(); ++i) {
    auto& e = ema[i].value;
    const auto& p = params[i].value;
    if (e.shape() != p.shape()) fail(ErrorCode::ShapeMismatch, "EMA shape for '" + ema[i].name + "'");
    for (std::size_t k = 0; k < e.size(); ++k)
      e[k] = static_cast<T>(decay * static_cast<double>(e[k]) + (1.0 - decay) * static_cast<double>(p[k]));
  }
}

inline double ema_decay_at(const TrainConfig& cfg, std::size_t step) {
  if (!cfg.ema_warmup) return cfg.ema_decay;
  const double k = static_cast<double>(step);
  return std::min(cfg.ema_decay, (1.0 + k) / (10.0 + k));
}

/// Model input for an episode: its panoramas and synthesized instruction.
template <class T>
TrajectorySample<T> episode_sample(const SynthWorld& w, const Episode& e) {
  const auto lm = w.landmark_at(e.target);
  if (!lm) fail(ErrorCode::BadLandmarkIndex, "episode '" + e.episode_id + "' targets a node without a landmark");
  const auto instruction = synth_instruction(w, *lm, e.instruction_seed);
  return make_sample<T>(w, e.path, instruction, e.positive_steps);
}

template <class T>
std::vector<TrajectorySample<T>> episode_samples(const SynthWorld& w, std::span<const Episode> eps) {
  std::vector<TrajectorySample<T>> out;
  out.reserve(eps.size());
  for (const auto& e : eps) out.push_back(episode_sample<T>(w, e));
  return out;
}

/// Predicted step (argmax probability) for every sample.
template <class T>
std::vector<std::size_t> predict_steps(ParamStore<T>& params, std::span<const TrajectorySample<T>> samples, const ModelConfig& cfg,
                                       std::vector<std::vector<double>>* probabilities = nullptr) {
  std::vector<std::size_t> out;
  for (const auto& s : samples) {
    const auto p = predict_probabilities(params, s, cfg);
    out.push_back(infer<T>(p));
    if (probabilities) probabilities->emplace_back(p.begin(), p.end());
  }
  return out;
}

/// Return-corrected SR of the model's predictions.
template <class T>
double corrected_sr(ParamStore<T>& params, const SynthWorld& w, std::span<const Episode> eps,
                    std::span<const TrajectorySample<T>> samples, const ModelConfig& cfg) {
  const auto steps = predict_steps(params, samples, cfg);
  return gap_report(w.graph, w.geodesics, eps, steps).returned.metrics.SR;
}

template <class T>
struct TrainResult {
  ParamStore<T> best;  // EMA weights at the best validation point
  ParamStore<T> last;  // raw weights after the final iteration
  double best_metric = -1.0;
  std::size_t best_iteration = 0;
  std::vector<nlohmann::json> log;
};

/// The training loop. Deterministic for a given seed. `on_log` receives each
/// log record as it is produced.
template <class T>
TrainResult<T> train(const SynthWorld& world, std::span<const Episode> train_set, std::span<const Episode> val_set,
                     const ModelConfig& mcfg, const LossConfig& lcfg, const TrainConfig& tcfg,
                     const std::function<void(const nlohmann::json&)>& on_log = {}) {
  mcfg.validate();
  lcfg.validate();
  tcfg.validate();
  if (train_set.empty()) fail(ErrorCode::EmptyDataset, "training set is empty");
  const auto train_samples = episode_samples<T>(world, train_set);
  const auto val_samples = episode_samples<T>(world, val_set);

  ParamStore<T> params = init_params<T>(mcfg, tcfg.seed);
  ParamStore<T> ema = params.template cast<T>();
  AdamState<T> adam = AdamState<T>::zeros(params);
  std::vector<double> lr_now(params.size());
  std::vector<LrGroup> groups;
  for (const auto& p : params) groups.push_back(group_of(p.name));

  TrainResult<T> result;
  auto emit = [&](nlohmann::json rec) {
    if (on_log) on_log(rec);
    result.log.push_back(std::move(rec));
  };
  auto evaluate = [&](std::size_t iteration, nlohmann::json& rec) {
    if (val_set.empty()) return;
    const double metric = corrected_sr<T>(ema, world, val_set, val_samples, mcfg);
    rec["val_metric"] = metric;
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_iteration = iteration;
      result.best = ema.template cast<T>();
    }
  };

  CounterRng order_rng(tcfg.seed, derive_stream({0x7261696e, 1}));
  std::vector<std::size_t> order(train_samples.size());
  std::size_t cursor = order.size();

  for (std::size_t it = 0; it < tcfg.iterations; ++it) {
    params.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < tcfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        order_rng.shuffle(order);
        cursor = 0;
      }
      const auto& sample = train_samples[order[cursor++]];
      CounterRng drop_rng(tcfg.seed, derive_stream({0x64726f70, it, b}));
      Graph<T> g(&params);
      Var p = forward(g, sample, mcfg, RunMode{&drop_rng});
      Var loss = total_loss(g, p, sample.labels, lcfg);
      const double lv = static_cast<double>(g.value(loss)[0]);
      if (!std::isfinite(lv)) fail(ErrorCode::DivergedLoss, "loss became " + std::to_string(lv) + " at iteration " + std::to_string(it));
      loss_sum += lv;
      g.backward(loss, T(1.0 / static_cast<double>(tcfg.batch_size)));
    }
    if (tcfg.grad_clip > 0) {
      double sq = 0;
      for (const auto& p : params)
        for (auto g : p.grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > tcfg.grad_clip)
        for (auto& p : params)
          for (auto& g : p.grad.values()) g = static_cast<T>(static_cast<double>(g) * tcfg.grad_clip / norm);
    }
    const double lr_t = lr_at(tcfg, LrGroup::Text, it), lr_b = lr_at(tcfg, LrGroup::Backbone, it);
    optimizer_step<T>(params, adam, tcfg, [&](std::size_t i) { return groups[i] == LrGroup::Text ? lr_t : lr_b; });
    ema_update(ema, params, ema_decay_at(tcfg, it));

    nlohmann::json rec{{"iteration", it + 1},
                       {"loss", loss_sum / static_cast<double>(tcfg.batch_size)},
                       {"lr_text", lr_t},
                       {"lr_backbone", lr_b}};
    if (tcfg.grad_clip > 0) rec["grad_clip"] = tcfg.grad_clip;
    const bool last = it + 1 == tcfg.iterations;
    if ((tcfg.eval_every > 0 && (it + 1) % tcfg.eval_every == 0) || last) evaluate(it + 1, rec);
    emit(std::move(rec));
  }
  if (result.best_metric < 0) {
    // No validation data: the final EMA weights are the selection.
    result.best = ema.template cast<T>();
    result.best_iteration = tcfg.iterations;
  }
  result.last = std::move(params);
  return result;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"iterations", c.iterations},   {"lr_backbone", c.lr_backbone},
          {"lr_text", c.lr_text},         {"warmup_fraction", c.warmup_fraction}, {"weight_decay", c.weight_decay},
          {"ema_decay", c.ema_decay},     {"ema_warmup", c.ema_warmup},   {"seed", c.seed},
          {"eval_every", c.eval_every},   {"beta1", c.beta1},             {"beta2", c.beta2},
          {"eps", c.eps},                 {"grad_clip", c.grad_clip}};
}

}  // namespace trajground
