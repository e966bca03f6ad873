#pragma once

// Run configuration: one JSON document with sections world, data, model,
// loss, train, eval and paths plus a global seed. User files are merged into
// the defaults; unknown keys and type mismatches are rejected with their
// dotted path.

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "trajground/dataset.hpp"
#include "trajground/error.hpp"
#include "trajground/loss.hpp"
#include "trajground/model.hpp"
#include "trajground/synthworld.hpp"
#include "trajground/trainer.hpp"

namespace trajground {

struct EvalOptions {
  std::string split = "test";  // which evaluation split eval/correct/report/render use
  double radius = kSuccessRadius;
  std::size_t render_episodes = 3;
};

struct RunConfig {
  std::uint64_t seed = 7;
  WorldSpec world;
  DatasetOptions data;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalOptions eval;
  std::string out_dir = "run";

  /// Fills fields derived from other sections.
  void sync() {
    model.feature_dim = world.feature_dim;
    train.seed = seed;
  }
  void validate() const {
    world.validate();
    model.validate();
    loss.validate();
    train.validate();
    if (eval.split != "val" && eval.split != "test") fail(ErrorCode::ConfigError, "eval.split must be 'val' or 'test'");
    if (!(eval.radius > 0)) fail(ErrorCode::ConfigError, "eval.radius must be positive");
    if (data.max_steps > model.max_T) fail(ErrorCode::ConfigError, "data.max_steps exceeds model.max_T");
  }
};

inline std::string to_string(AlphaMode m) { return m == AlphaMode::Fixed ? "fixed" : "frequency"; }
inline std::string to_string(DistanceMode m) { return m == DistanceMode::Geodesic ? "geodesic" : "euclidean"; }

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json model = model_config_to_json(c.model);
  model.erase("feature_dim");
  nlohmann::json train = train_config_to_json(c.train);
  train.erase("seed");
  const auto& d = c.data;
  return {{"seed", c.seed},
          {"world", spec_to_json(c.world)},
          {"data",
           {{"train_episodes", d.train_episodes},
            {"val_episodes", d.val_episodes},
            {"test_episodes", d.test_episodes},
            {"max_steps", d.max_steps},
            {"min_start_distance", d.min_start_distance},
            {"positive_radius", d.positive_radius},
            {"expansion_budget", d.expansion_budget},
            {"distance_mode", to_string(d.distance_mode)},
            {"p_overshoot", d.rollout.p_overshoot},
            {"p_undershoot", d.rollout.p_undershoot},
            {"k_extra", d.rollout.k_extra}}},
          {"model", std::move(model)},
          {"loss",
           {{"variant", to_string(c.loss.variant)},
            {"lambda_focal", c.loss.lambda_focal},
            {"lambda_dice", c.loss.lambda_dice},
            {"alpha", c.loss.alpha},
            {"gamma", c.loss.gamma},
            {"eps_dice", c.loss.eps_dice},
            {"alpha_mode", to_string(c.loss.alpha_mode)}}},
          {"train", std::move(train)},
          {"eval", {{"split", c.eval.split}, {"radius", c.eval.radius}, {"render_episodes", c.eval.render_episodes}}},
          {"paths", {{"out_dir", c.out_dir}}}};
}

namespace detail {
inline bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number_unsigned()) return b.is_number_unsigned() || (b.is_number_integer() && b.get<std::int64_t>() >= 0);
  if (a.is_number()) return b.is_number();
  return a.type() == b.type();
}

/// Overlays `user` onto `base` in place, requiring every key of `user` to
/// exist in `base` with a compatible type.
inline void strict_merge(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) fail(ErrorCode::ConfigError, (path.empty() ? std::string("config") : path) + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) fail(ErrorCode::ConfigError, "unknown config key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      strict_merge(slot, value, here);
    } else {
      if (!same_kind(slot, value)) fail(ErrorCode::ConfigError, "config key '" + here + "' has the wrong type");
      slot = value;
    }
  }
}

template <class F>
auto config_field(const std::string& key, F&& get) {
  try {
    return get();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, "config key '" + key + "': " + e.what());
  }
}
}  // namespace detail

/// Parses a complete configuration (as produced by config_to_json, possibly
/// overlaid) into a validated RunConfig.
inline RunConfig config_from_json(const nlohmann::json& user) {
  nlohmann::json j = config_to_json(RunConfig{});
  detail::strict_merge(j, user, "");
  RunConfig c;
  detail::config_field("world", [&] {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.world = spec_from_json(j.at("world"));
    const auto& d = j.at("data");
    c.data.train_episodes = d.at("train_episodes").get<std::size_t>();
    c.data.val_episodes = d.at("val_episodes").get<std::size_t>();
    c.data.test_episodes = d.at("test_episodes").get<std::size_t>();
    c.data.max_steps = d.at("max_steps").get<std::size_t>();
    c.data.min_start_distance = d.at("min_start_distance").get<double>();
    c.data.positive_radius = d.at("positive_radius").get<double>();
    c.data.expansion_budget = d.at("expansion_budget").get<double>();
    c.data.rollout.p_overshoot = d.at("p_overshoot").get<double>();
    c.data.rollout.p_undershoot = d.at("p_undershoot").get<double>();
    c.data.rollout.k_extra = d.at("k_extra").get<std::size_t>();
    const auto mode = d.at("distance_mode").get<std::string>();
    if (mode != "geodesic" && mode != "euclidean") fail(ErrorCode::ConfigError, "data.distance_mode must be geodesic or euclidean");
    c.data.distance_mode = mode == "geodesic" ? DistanceMode::Geodesic : DistanceMode::Euclidean;
    c.model = model_config_from_json(j.at("model"));
    const auto& l = j.at("loss");
    const auto variant = parse_loss_variant(l.at("variant").get<std::string>());
    if (!variant) fail(ErrorCode::ConfigError, "loss.variant must be one of bce, focal, bce_dice, focal_dice");
    c.loss.variant = *variant;
    c.loss.lambda_focal = l.at("lambda_focal").get<double>();
    c.loss.lambda_dice = l.at("lambda_dice").get<double>();
    c.loss.alpha = l.at("alpha").get<double>();
    c.loss.gamma = l.at("gamma").get<double>();
    c.loss.eps_dice = l.at("eps_dice").get<double>();
    const auto am = l.at("alpha_mode").get<std::string>();
    if (am != "fixed" && am != "frequency") fail(ErrorCode::ConfigError, "loss.alpha_mode must be fixed or frequency");
    c.loss.alpha_mode = am == "fixed" ? AlphaMode::Fixed : AlphaMode::Frequency;
    const auto& t = j.at("train");
    c.train.batch_size = t.at("batch_size").get<std::size_t>();
    c.train.iterations = t.at("iterations").get<std::size_t>();
    c.train.lr_backbone = t.at("lr_backbone").get<double>();
    c.train.lr_text = t.at("lr_text").get<double>();
    c.train.warmup_fraction = t.at("warmup_fraction").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.ema_decay = t.at("ema_decay").get<double>();
    c.train.ema_warmup = t.at("ema_warmup").get<bool>();
    c.train.eval_every = t.at("eval_every").get<std::size_t>();
    c.train.beta1 = t.at("beta1").get<double>();
    c.train.beta2 = t.at("beta2").get<double>();
    c.train.eps = t.at("eps").get<double>();
    c.train.grad_clip = t.at("grad_clip").get<double>();
    const auto& e = j.at("eval");
    c.eval.split = e.at("split").get<std::string>();
    c.eval.radius = e.at("radius").get<double>();
    c.eval.render_episodes = e.at("render_episodes").get<std::size_t>();
    c.out_dir = j.at("paths").at("out_dir").get<std::string>();
    return 0;
  });
  c.sync();
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    throw Error(ErrorCode::ConfigError, e.what());
  }
  return c;
}

inline nlohmann::json load_config_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::ConfigError, "cannot open config '" + file.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, "config '" + file.string() + "' is not valid JSON: " + e.what());
  }
}

/// Applies "a.b.c=value" to `j`. The value is parsed as JSON when possible
/// (numbers, booleans, quoted strings) and taken as a bare string otherwise.
inline void apply_override(nlohmann::json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) fail(ErrorCode::ConfigError, "override '" + std::string(assignment) + "' is not key=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::ConfigError, "override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_null() && !node->is_object()) fail(ErrorCode::ConfigError, "override key '" + key + "' descends into a scalar");
    start = dot + 1;
  }
}

}  // namespace trajground
