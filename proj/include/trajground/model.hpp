#pragma once

// Trajectory-grounding network. Tokens are kept as row matrices:
//   embedded / fused views   [T*36, d]  row t*36 + view, view = elev*12 + heading
//   elevation-pooled tokens  [T*12, d]  row t*12 + heading
//   step summaries           [T, d]
// and the head emits one destination probability per step.

#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajground/error.hpp"
#include "trajground/numerics/graph.hpp"
#include "trajground/numerics/layers.hpp"
#include "trajground/numerics/param_store.hpp"
#include "trajground/rng.hpp"
#include "trajground/synthworld.hpp"

namespace trajground {

using num::Graph;
using num::ParamStore;
using num::Shape;
using num::Tensor;
using num::Var;

struct ModelConfig {
  std::size_t d = 32;
  std::size_t feature_dim = 32;  // d_v of the view features and the instruction embedding
  std::size_t heads = 4;
  std::size_t layers_elevation = 2;
  std::size_t layers_spatial_temporal = 2;
  std::size_t layers_selection = 2;
  double dropout_transformer = 0.1;
  double dropout_head = 0.5;
  double dropout_features = 0.4;
  std::size_t max_T = 15;
  bool elevation_on = true;
  bool st_on = true;
  bool st_global_on = true;  // the flattened all-step attention inside the spatial-temporal stage
  bool selection_on = true;
  bool encodings_on = true;

  std::size_t ffn() const { return 4 * d; }
  bool needs_projection() const { return feature_dim != d; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) fail(ErrorCode::BadHeadCount, "d must be a positive multiple of heads");
    if (feature_dim == 0) fail(ErrorCode::ConfigError, "feature_dim must be positive");
    if (layers_elevation == 0 || layers_spatial_temporal == 0 || layers_selection == 0)
      fail(ErrorCode::ConfigError, "every stage needs at least one layer");
    for (double p : {dropout_transformer, dropout_head, dropout_features})
      if (!(p >= 0.0 && p < 1.0)) fail(ErrorCode::ConfigError, "dropout rates must lie in [0,1)");
    if (max_T == 0) fail(ErrorCode::ConfigError, "max_T must be positive");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"feature_dim", c.feature_dim},
          {"heads", c.heads},
          {"layers_elevation", c.layers_elevation},
          {"layers_spatial_temporal", c.layers_spatial_temporal},
          {"layers_selection", c.layers_selection},
          {"dropout_transformer", c.dropout_transformer},
          {"dropout_head", c.dropout_head},
          {"dropout_features", c.dropout_features},
          {"max_T", c.max_T},
          {"elevation_on", c.elevation_on},
          {"st_on", c.st_on},
          {"st_global_on", c.st_global_on},
          {"selection_on", c.selection_on},
          {"encodings_on", c.encodings_on}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.value("d", c.d);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.heads = j.value("heads", c.heads);
  c.layers_elevation = j.value("layers_elevation", c.layers_elevation);
  c.layers_spatial_temporal = j.value("layers_spatial_temporal", c.layers_spatial_temporal);
  c.layers_selection = j.value("layers_selection", c.layers_selection);
  c.dropout_transformer = j.value("dropout_transformer", c.dropout_transformer);
  c.dropout_head = j.value("dropout_head", c.dropout_head);
  c.dropout_features = j.value("dropout_features", c.dropout_features);
  c.max_T = j.value("max_T", c.max_T);
  c.elevation_on = j.value("elevation_on", c.elevation_on);
  c.st_on = j.value("st_on", c.st_on);
  c.st_global_on = j.value("st_global_on", c.st_global_on);
  c.selection_on = j.value("selection_on", c.selection_on);
  c.encodings_on = j.value("encodings_on", c.encodings_on);
  return c;
}

/// One episode's model input.
template <class T>
struct TrajectorySample {
  Tensor<T> features;    // [T, 36, d_v]
  Tensor<T> t_cls;       // [d_v]
  std::vector<T> labels;  // {0,1}^T, may be empty at inference

  std::size_t steps() const { return features.rank() == 3 ? features.dim(0) : 0; }
};

/// Gathers the panoramas along `path` and the instruction embedding.
template <class T>
TrajectorySample<T> make_sample(const SynthWorld& w, std::span<const NodeIndex> path, std::span<const double> instruction,
                                std::span<const std::size_t> positive_steps = {}) {
  const std::size_t d = w.dim();
  TrajectorySample<T> s;
  s.features = Tensor<T>(Shape{path.size(), kViews, d});
  for (std::size_t t = 0; t < path.size(); ++t) {
    auto pano = w.panorama(path[t]);
    for (std::size_t i = 0; i < pano.size(); ++i) s.features[t * kViews * d + i] = static_cast<T>(pano[i]);
  }
  s.t_cls = Tensor<T>(Shape{instruction.size()});
  for (std::size_t i = 0; i < instruction.size(); ++i) s.t_cls[i] = static_cast<T>(instruction[i]);
  s.labels.assign(path.size(), T(0));
  for (auto k : positive_steps)
    if (k < path.size()) s.labels[k] = T(1);
  return s;
}

/// Standard sinusoidal table: channel 2i holds sin(pos / 10000^(2i/d)) and
/// channel 2i+1 the matching cosine.
inline std::vector<double> sinusoid(std::size_t pos, std::size_t d) {
  std::vector<double> out(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double expo = static_cast<double>(c - c % 2) / static_cast<double>(d);
    const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
    out[c] = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  return out;
}

/// Step encoding plus view encoding for every token row: [T*36, d].
template <class T>
Tensor<T> position_encodings(std::size_t steps, std::size_t d) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, Tensor<T>> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({steps, d});
  if (it != cache.end()) return it->second;
  Tensor<T> e(Shape{steps * kViews, d});
  for (std::size_t t = 0; t < steps; ++t) {
    const auto st = sinusoid(t, d);
    for (std::size_t v = 0; v < kViews; ++v) {
      const auto sv = sinusoid(v, d);
      for (std::size_t c = 0; c < d; ++c) e[(t * kViews + v) * d + c] = static_cast<T>(st[c] + sv[c]);
    }
  }
  return cache.emplace(std::pair{steps, d}, std::move(e)).first->second;
}

template <class T>
Tensor<T> step_encodings(std::size_t steps, std::size_t d) {
  Tensor<T> e(Shape{steps, d});
  for (std::size_t t = 0; t < steps; ++t) {
    const auto st = sinusoid(t, d);
    for (std::size_t c = 0; c < d; ++c) e[t * d + c] = static_cast<T>(st[c]);
  }
  return e;
}

/// Creates every learnable tensor. All stage weights exist regardless of the
/// ablation flags so checkpoints share one layout.
template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng(seed, derive_stream({0x6d6f64656cULL}));
  ParamStore<T> ps;
  const std::size_t d = cfg.d, ffn = cfg.ffn();
  if (cfg.needs_projection()) num::add_linear_params(ps, "proj", cfg.feature_dim, d, rng);
  ps.add("fuse.w_o", num::xavier_uniform<T>(Shape{d, d}, rng));
  ps.add("fuse.w_t", num::xavier_uniform<T>(Shape{cfg.feature_dim, d}, rng));
  num::add_linear_params(ps, "fuse.fc", 2 * d, d, rng);
  for (std::size_t k = 0; k < cfg.layers_elevation; ++k)
    num::add_transformer_layer_params(ps, "elev." + std::to_string(k), d, ffn, rng);
  for (std::size_t k = 0; k < cfg.layers_spatial_temporal; ++k) {
    num::add_transformer_layer_params(ps, "st.spatial." + std::to_string(k), d, ffn, rng);
    num::add_transformer_layer_params(ps, "st.temporal." + std::to_string(k), d, ffn, rng);
  }
  ps.add("sel.queries", num::normal_tensor<T>(Shape{cfg.max_T, d}, 0.02, rng));
  for (std::size_t k = 0; k < cfg.layers_selection; ++k) {
    num::add_transformer_layer_params(ps, "sel.self." + std::to_string(k), d, ffn, rng);
    num::add_transformer_layer_params(ps, "sel.cross." + std::to_string(k), d, ffn, rng, true);
  }
  num::add_linear_params(ps, "head.mlp1", d, d, rng);
  num::add_linear_params(ps, "head.mlp2", d, 1, rng);
  return ps;
}

/// Train-mode randomness; a null rng means eval mode.
struct RunMode {
  CounterRng* rng = nullptr;
  bool train() const { return rng != nullptr; }
};

/// features [T,36,d_v] -> O' [T*36, d].
template <class T>
Var embed_trajectory(Graph<T>& g, Var features, const ModelConfig& cfg, RunMode mode = {}) {
  const auto& F = g.value(features);
  if (F.rank() != 3 || F.dim(1) != kViews || F.dim(2) != cfg.feature_dim)
    fail(ErrorCode::ShapeMismatch, "features must be [T,36," + std::to_string(cfg.feature_dim) + "], got " + num::shape_string(F.shape()));
  const std::size_t steps = F.dim(0);
  if (steps == 0) fail(ErrorCode::ShapeMismatch, "trajectory has no steps");
  if (steps > cfg.max_T) fail(ErrorCode::TooManySteps, std::to_string(steps) + " steps exceed max_T " + std::to_string(cfg.max_T));
  Var x = num::reshape(g, features, Shape{steps * kViews, cfg.feature_dim});
  x = num::dropout(g, x, cfg.dropout_features, mode.rng);
  if (cfg.needs_projection()) x = num::dense(g, "proj", x);
  if (cfg.encodings_on) {
    // Unit-norm features would be drowned by encodings whose entries are
    // O(1), so the features are scaled by sqrt(d) first, as is usual for
    // transformer input embeddings.
    x = num::scale(g, x, static_cast<T>(std::sqrt(static_cast<double>(cfg.d))));
    x = num::add(g, x, g.constant(position_encodings<T>(steps, cfg.d)));
  }
  return x;
}

/// FC([GELU(o W_o), GELU(t_cls W_t)]) per view row.
template <class T>
Var fuse_text_vision(Graph<T>& g, Var views, Var t_cls, const ModelConfig& cfg) {
  if (g.value(views).cols() != cfg.d) fail(ErrorCode::ShapeMismatch, "fuse: view width must equal d");
  if (g.value(t_cls).size() != cfg.feature_dim) fail(ErrorCode::ShapeMismatch, "fuse: t_cls width must equal feature_dim");
  Var o = num::gelu(g, num::matmul(g, views, g.param("fuse.w_o")));
  Var t = num::gelu(g, num::matmul(g, num::reshape(g, t_cls, Shape{1, cfg.feature_dim}), g.param("fuse.w_t")));
  return num::dense(g, "fuse.fc", num::concat_broadcast(g, o, t));
}

inline std::vector<std::size_t> elevation_order(std::size_t steps) {
  std::vector<std::size_t> idx;
  idx.reserve(steps * kViews);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t h = 0; h < kHeadings; ++h)
      for (std::size_t e = 0; e < kElevations; ++e) idx.push_back(t * kViews + e * kHeadings + h);
  return idx;
}

/// [T*36, d] -> [T*12, d]: attention among the 3 elevations of each heading,
/// then their mean.
template <class T>
Var elevation_fuse(Graph<T>& g, Var fused, const ModelConfig& cfg, RunMode mode = {}) {
  const auto& X = g.value(fused);
  if (X.cols() != cfg.d || X.rows() % kViews != 0 || X.rows() == 0)
    fail(ErrorCode::ShapeMismatch, "elevation_fuse expects [T*36, d], got " + num::shape_string(X.shape()));
  const std::size_t steps = X.rows() / kViews;
  Var x = num::gather_rows(g, fused, elevation_order(steps));
  if (cfg.elevation_on) {
    const num::LayerOptions opt{cfg.heads, cfg.dropout_transformer, mode.rng};
    for (std::size_t k = 0; k < cfg.layers_elevation; ++k)
      x = num::transformer_layer(g, "elev." + std::to_string(k), x, kElevations, opt);
  }
  return num::group_mean(g, x, kElevations);
}

/// [T*12, d] -> [T*12, d]: per-step attention over headings, then attention
/// over all T*12 tokens.
template <class T>
Var spatial_temporal(Graph<T>& g, Var tokens, const ModelConfig& cfg, RunMode mode = {}) {
  const auto& X = g.value(tokens);
  if (X.cols() != cfg.d || X.rows() % kHeadings != 0 || X.rows() == 0)
    fail(ErrorCode::ShapeMismatch, "spatial_temporal expects [T*12, d], got " + num::shape_string(X.shape()));
  if (!cfg.st_on) return tokens;
  const num::LayerOptions opt{cfg.heads, cfg.dropout_transformer, mode.rng};
  Var x = tokens;
  for (std::size_t k = 0; k < cfg.layers_spatial_temporal; ++k)
    x = num::transformer_layer(g, "st.spatial." + std::to_string(k), x, kHeadings, opt);
  if (cfg.st_global_on)
    for (std::size_t k = 0; k < cfg.layers_spatial_temporal; ++k)
      x = num::transformer_layer(g, "st.temporal." + std::to_string(k), x, 0, opt);
  return x;
}

/// [T*12, d] -> Q-hat [T, d]. Queries first attend to each other, then query t
/// cross-attends to the 12 tokens of step t only.
template <class T>
Var target_select(Graph<T>& g, Var tokens, const ModelConfig& cfg, RunMode mode = {}) {
  const auto& X = g.value(tokens);
  if (X.cols() != cfg.d || X.rows() % kHeadings != 0 || X.rows() == 0)
    fail(ErrorCode::ShapeMismatch, "target_select expects [T*12, d], got " + num::shape_string(X.shape()));
  const std::size_t steps = X.rows() / kHeadings;
  if (steps > cfg.max_T) fail(ErrorCode::TooManySteps, "more steps than queries");
  if (!cfg.selection_on) return num::group_mean(g, tokens, kHeadings);
  const num::LayerOptions opt{cfg.heads, cfg.dropout_transformer, mode.rng};
  Var q = num::slice_rows(g, g.param("sel.queries"), 0, steps);
  if (cfg.encodings_on) q = num::add(g, q, g.constant(step_encodings<T>(steps, cfg.d)));
  for (std::size_t k = 0; k < cfg.layers_selection; ++k) q = num::transformer_layer(g, "sel.self." + std::to_string(k), q, 0, opt);
  for (std::size_t k = 0; k < cfg.layers_selection; ++k)
    q = num::cross_attention_layer(g, "sel.cross." + std::to_string(k), q, tokens, 1, kHeadings, opt);
  return q;
}

/// [T, d] -> p [T] = sigmoid(MLP(Q-hat)).
template <class T>
Var predict(Graph<T>& g, Var qhat, const ModelConfig& cfg, RunMode mode = {}) {
  const auto& Q = g.value(qhat);
  if (Q.cols() != cfg.d) fail(ErrorCode::ShapeMismatch, "predict expects [T, d]");
  const std::size_t steps = Q.rows();
  Var h = num::gelu(g, num::dense(g, "head.mlp1", qhat));
  h = num::dropout(g, h, cfg.dropout_head, mode.rng);
  Var logits = num::dense(g, "head.mlp2", h);
  return num::sigmoid(g, num::reshape(g, logits, Shape{steps}));
}

/// Index of the largest probability; ties go to the earliest step.
template <class T>
std::size_t infer(std::span<const T> p) {
  if (p.empty()) fail(ErrorCode::EmptyPrediction, "no step probabilities");
  std::size_t best = 0;
  for (std::size_t t = 1; t < p.size(); ++t)
    if (p[t] > p[best]) best = t;
  return best;
}

template <class T>
Var forward(Graph<T>& g, const TrajectorySample<T>& sample, const ModelConfig& cfg, RunMode mode = {}) {
  Var o = embed_trajectory(g, g.constant(sample.features), cfg, mode);
  Var fused = fuse_text_vision(g, o, g.constant(sample.t_cls), cfg);
  Var he = elevation_fuse(g, fused, cfg, mode);
  Var hst = spatial_temporal(g, he, cfg, mode);
  Var qhat = target_select(g, hst, cfg, mode);
  return predict(g, qhat, cfg, mode);
}

/// Eval-mode probabilities for one sample.
template <class T>
std::vector<T> predict_probabilities(ParamStore<T>& params, const TrajectorySample<T>& sample, const ModelConfig& cfg) {
  Graph<T> g(&params);
  Var p = forward(g, sample, cfg);
  const auto vals = g.value(p).values();
  return {vals.begin(), vals.end()};
}

}  // namespace trajground
