#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "trajground/error.hpp"
#include "trajground/numerics/param_store.hpp"

namespace trajground::num {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_name;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Gradients whose magnitude (analytic and numeric) stays below this are
  /// compared absolutely against it instead of relatively.
  double floor = 1e-6;
};

/// Compares analytic gradients with central differences (f(p+h)-f(p-h))/2h.
///
/// `objective(params, with_grad)` returns the scalar value; when with_grad is
/// true it must also accumulate d(value)/d(param) into params' grads. The
/// relative error of an element is |a - n| / max(|a|, |n|, floor); a
/// parameter's error is the max over its elements.
inline GradCheckReport grad_check(ParamStore<double>& params,
                                  const std::function<double(ParamStore<double>&, bool)>& objective,
                                  const GradCheckOptions& opt = {}) {
  params.zero_grad();
  const double f0 = objective(params, true);
  if (!std::isfinite(f0)) fail(ErrorCode::NonFiniteValue, "objective is not finite at the base point");
  std::vector<Tensor<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    GradCheckEntry e{p.name, 0.0, 0.0};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + opt.step;
      const double fp = objective(params, false);
      p.value[i] = orig - opt.step;
      const double fm = objective(params, false);
      p.value[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) fail(ErrorCode::NonFiniteValue, "objective not finite near '" + p.name + "'");
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.floor});
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      e.max_rel_error = std::max(e.max_rel_error, rel);
    }
    if (e.max_rel_error >= report.worst) {
      report.worst = e.max_rel_error;
      report.worst_name = e.name;
    }
    report.entries.push_back(std::move(e));
  }
  report.passed = report.worst < opt.tolerance;
  return report;
}

}  // namespace trajground::num
