#pragma once

// Per-step binary focal loss, trajectory-level dice loss and their weighted
// sum, with analytic gradients with respect to the step probabilities.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "trajground/error.hpp"
#include "trajground/numerics/graph.hpp"

namespace trajground {

enum class LossVariant { Bce, Focal, BceDice, FocalDice };
enum class AlphaMode { Fixed, Frequency };

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::Bce: return "bce";
    case LossVariant::Focal: return "focal";
    case LossVariant::BceDice: return "bce_dice";
    case LossVariant::FocalDice: return "focal_dice";
  }
  return "focal_dice";
}

inline std::optional<LossVariant> parse_loss_variant(std::string_view s) {
  if (s == "bce") return LossVariant::Bce;
  if (s == "focal") return LossVariant::Focal;
  if (s == "bce_dice") return LossVariant::BceDice;
  if (s == "focal_dice") return LossVariant::FocalDice;
  return std::nullopt;
}

struct LossConfig {
  LossVariant variant = LossVariant::FocalDice;
  double lambda_focal = 1.0;  // also weights the BCE term in the BCE variants
  double lambda_dice = 0.1;
  double alpha = 0.25;
  double gamma = 2.0;
  double eps_dice = 1e-6;
  AlphaMode alpha_mode = AlphaMode::Fixed;

  void validate() const {
    if (lambda_focal < 0 || lambda_dice < 0) fail(ErrorCode::ConfigError, "loss weights must be nonnegative");
    if (!(alpha > 0 && alpha < 1)) fail(ErrorCode::ConfigError, "alpha must lie in (0,1)");
    if (gamma < 0) fail(ErrorCode::ConfigError, "gamma must be nonnegative");
    if (!(eps_dice > 0)) fail(ErrorCode::ConfigError, "eps_dice must be positive");
  }
};

inline constexpr double kLogClamp = 1e-12;

namespace detail {
template <class T>
void check_inputs(std::span<const T> p, std::span<const T> y) {
  if (p.size() != y.size())
    fail(ErrorCode::LengthMismatch, "p has " + std::to_string(p.size()) + " steps, y has " + std::to_string(y.size()));
  if (p.empty()) fail(ErrorCode::LengthMismatch, "empty trajectory");
  for (auto v : p)
    if (!(v >= T(0) && v <= T(1))) fail(ErrorCode::ProbOutOfRange, "probability " + std::to_string(static_cast<double>(v)));
}

/// Weight of the positive class: fixed alpha, or the negative-class share
/// of this trajectory (rarer positives get more weight).
template <class T>
double positive_alpha(std::span<const T> y, const LossConfig& cfg) {
  if (cfg.alpha_mode == AlphaMode::Fixed) return cfg.alpha;
  double pos = 0;
  for (auto v : y) pos += static_cast<double>(v);
  return std::clamp(1.0 - pos / static_cast<double>(y.size()), 0.01, 0.99);
}
}  // namespace detail

/// mean_t of -alpha_t (1 - p_t)^gamma log(p_t), with p_t = p for positives
/// and 1 - p for negatives.
template <class T>
T focal_loss(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  detail::check_inputs(p, y);
  const double a = detail::positive_alpha(y, cfg);
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pos = y[i] > T(0.5);
    const double q = pos ? static_cast<double>(p[i]) : 1.0 - static_cast<double>(p[i]);
    const double at = pos ? a : 1.0 - a;
    total += -at * std::pow(1.0 - q, cfg.gamma) * std::log(std::max(q, kLogClamp));
  }
  return static_cast<T>(total / static_cast<double>(p.size()));
}

template <class T>
std::vector<T> focal_loss_grad(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  detail::check_inputs(p, y);
  const double a = detail::positive_alpha(y, cfg);
  const double n = static_cast<double>(p.size());
  std::vector<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pos = y[i] > T(0.5);
    const double q = pos ? static_cast<double>(p[i]) : 1.0 - static_cast<double>(p[i]);
    const double at = pos ? a : 1.0 - a;
    const bool clamped = q < kLogClamp;
    const double logq = std::log(std::max(q, kLogClamp));
    double dq = 0;
    if (cfg.gamma != 0.0) dq += cfg.gamma * std::pow(1.0 - q, cfg.gamma - 1.0) * logq;
    if (!clamped) dq -= std::pow(1.0 - q, cfg.gamma) / q;
    dq *= at;
    out[i] = static_cast<T>((pos ? dq : -dq) / n);
  }
  return out;
}

template <class T>
T bce_loss(std::span<const T> p, std::span<const T> y) {
  detail::check_inputs(p, y);
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]), yi = static_cast<double>(y[i]);
    total -= yi * std::log(std::max(pi, kLogClamp)) + (1.0 - yi) * std::log(std::max(1.0 - pi, kLogClamp));
  }
  return static_cast<T>(total / static_cast<double>(p.size()));
}

template <class T>
std::vector<T> bce_loss_grad(std::span<const T> p, std::span<const T> y) {
  detail::check_inputs(p, y);
  const double n = static_cast<double>(p.size());
  std::vector<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]), yi = static_cast<double>(y[i]);
    double d = 0;
    if (pi >= kLogClamp) d -= yi / pi;
    if (1.0 - pi >= kLogClamp) d += (1.0 - yi) / (1.0 - pi);
    out[i] = static_cast<T>(d / n);
  }
  return out;
}

/// 1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps) over the trajectory.
template <class T>
T dice_loss(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  detail::check_inputs(p, y);
  double inter = 0, sy = 0, sp = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(y[i]) * static_cast<double>(p[i]);
    sy += static_cast<double>(y[i]);
    sp += static_cast<double>(p[i]);
  }
  return static_cast<T>(1.0 - (2.0 * inter + cfg.eps_dice) / (sy + sp + cfg.eps_dice));
}

template <class T>
std::vector<T> dice_loss_grad(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  detail::check_inputs(p, y);
  double inter = 0, sy = 0, sp = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(y[i]) * static_cast<double>(p[i]);
    sy += static_cast<double>(y[i]);
    sp += static_cast<double>(p[i]);
  }
  const double num = 2.0 * inter + cfg.eps_dice, den = sy + sp + cfg.eps_dice;
  std::vector<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    out[i] = static_cast<T>(-(2.0 * static_cast<double>(y[i]) * den - num) / (den * den));
  return out;
}

inline bool uses_focal(LossVariant v) { return v == LossVariant::Focal || v == LossVariant::FocalDice; }
inline bool uses_dice(LossVariant v) { return v == LossVariant::BceDice || v == LossVariant::FocalDice; }

template <class T>
T total_loss(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  const double cls = uses_focal(cfg.variant) ? static_cast<double>(focal_loss(p, y, cfg)) : static_cast<double>(bce_loss(p, y));
  double total = cfg.lambda_focal * cls;
  if (uses_dice(cfg.variant)) total += cfg.lambda_dice * static_cast<double>(dice_loss(p, y, cfg));
  return static_cast<T>(total);
}

template <class T>
std::vector<T> total_loss_grad(std::span<const T> p, std::span<const T> y, const LossConfig& cfg) {
  auto cls = uses_focal(cfg.variant) ? focal_loss_grad(p, y, cfg) : bce_loss_grad(p, y);
  std::vector<T> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<T>(cfg.lambda_focal * static_cast<double>(cls[i]));
  if (uses_dice(cfg.variant)) {
    auto dice = dice_loss_grad(p, y, cfg);
    for (std::size_t i = 0; i < p.size(); ++i) out[i] += static_cast<T>(cfg.lambda_dice * static_cast<double>(dice[i]));
  }
  return out;
}

/// total_loss as a graph node over the probability vector p.
template <class T>
num::Var total_loss(num::Graph<T>& g, num::Var p, std::vector<T> y, const LossConfig& cfg) {
  const auto& P = g.value(p);
  const T value = total_loss<T>(P.values(), y, cfg);
  return g.op(num::Tensor<T>(num::Shape{1}, value), {p}, [&g, p, y = std::move(y), cfg](num::Var out) mutable {
    return [&g, p, out, y = std::move(y), cfg] {
      const T seed = g.grad(out)[0];
      const auto grad = total_loss_grad<T>(g.value(p).values(), y, cfg);
      auto& dP = g.grad(p);
      for (std::size_t i = 0; i < grad.size(); ++i) dP[i] += seed * grad[i];
    };
  });
}

}  // namespace trajground
