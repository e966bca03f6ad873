#pragma once

// Experiment recipes: a config plus overrides, a runtime budget and metric
// assertions checked against the pipeline's report.
//
//   {"name": "smoke", "config": "../configs/smoke.json", "set": ["train.iterations=200"],
//    "budget_seconds": 120,
//    "assertions": [{"metric": "return.OSR", "op": "==", "value": "baseline.OSR"},
//                   {"metric": "baseline.gap", "op": ">=", "value": 0.15}]}
//
// `config` is resolved relative to the recipe file. An assertion's value is a
// number or the name of another metric.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "trajground/config.hpp"
#include "trajground/pipeline.hpp"

namespace trajground {

struct RecipeAssertion {
  std::string metric;
  std::string op;  // one of >= <= > < ==
  std::variant<double, std::string> value;
};

struct ExperimentRecipe {
  std::string name;
  fs::path config;  // empty means defaults
  std::vector<std::string> overrides;
  double budget_seconds = 0.0;  // 0 disables the runtime check
  std::vector<RecipeAssertion> assertions;
};

struct AssertionOutcome {
  std::string description;
  double actual = 0.0;
  double expected = 0.0;
  bool passed = false;
};

struct RecipeResult {
  std::string name;
  bool passed = false;
  double runtime_seconds = 0.0;
  std::vector<AssertionOutcome> outcomes;
  nlohmann::json report;
};

inline constexpr const char* kRuntimeMetric = "runtime_seconds";

/// Metric names an assertion may reference: everything the report flattens
/// to, plus the recipe's measured runtime.
inline std::set<std::string> known_metrics() {
  std::set<std::string> names{kRuntimeMetric};
  for (const auto& [k, v] : flatten_metrics(report_to_json(GapReport{}))) names.insert(k);
  return names;
}

inline ExperimentRecipe recipe_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  ExperimentRecipe r;
  try {
    for (const auto& [k, v] : j.items())
      if (k != "name" && k != "config" && k != "set" && k != "budget_seconds" && k != "assertions")
        fail(ErrorCode::ConfigError, "unknown recipe key '" + k + "'");
    r.name = j.at("name").get<std::string>();
    if (j.contains("config")) r.config = base_dir / j.at("config").get<std::string>();
    r.overrides = j.value("set", std::vector<std::string>{});
    r.budget_seconds = j.value("budget_seconds", 0.0);
    const auto known = known_metrics();
    auto check_metric = [&](const std::string& m) {
      if (!known.count(m)) fail(ErrorCode::ConfigError, "recipe '" + r.name + "' references unknown metric '" + m + "'");
    };
    for (const auto& a : j.value("assertions", nlohmann::json::array())) {
      RecipeAssertion ra;
      ra.metric = a.at("metric").get<std::string>();
      ra.op = a.at("op").get<std::string>();
      check_metric(ra.metric);
      if (ra.op != ">=" && ra.op != "<=" && ra.op != ">" && ra.op != "<" && ra.op != "==")
        fail(ErrorCode::ConfigError, "recipe '" + r.name + "': unknown comparator '" + ra.op + "'");
      const auto& v = a.at("value");
      if (v.is_string()) {
        check_metric(v.get<std::string>());
        ra.value = v.get<std::string>();
      } else {
        ra.value = v.get<double>();
      }
      r.assertions.push_back(std::move(ra));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("malformed recipe: ") + e.what());
  }
  return r;
}

inline ExperimentRecipe load_recipe(const fs::path& file) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(file));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, "recipe '" + file.string() + "' is not valid JSON: " + e.what());
  }
  return recipe_from_json(j, file.parent_path());
}

/// Builds the run configuration: recipe config file, then its overrides,
/// then `extra` overrides (applied last).
inline RunConfig recipe_config(const ExperimentRecipe& r, const std::vector<std::string>& extra = {}) {
  nlohmann::json j = r.config.empty() ? nlohmann::json::object() : load_config_json(r.config);
  for (const auto& o : r.overrides) apply_override(j, o);
  for (const auto& o : extra) apply_override(j, o);
  return config_from_json(j);
}

inline std::vector<AssertionOutcome> evaluate_assertions(const ExperimentRecipe& r, const std::map<std::string, double>& metrics) {
  auto get = [&](const std::string& m) {
    auto it = metrics.find(m);
    if (it == metrics.end()) fail(ErrorCode::ConfigError, "metric '" + m + "' was not produced");
    return it->second;
  };
  std::vector<AssertionOutcome> out;
  for (const auto& a : r.assertions) {
    AssertionOutcome o;
    o.actual = get(a.metric);
    std::string rhs;
    if (const auto* name = std::get_if<std::string>(&a.value)) {
      o.expected = get(*name);
      rhs = *name;
    } else {
      o.expected = std::get<double>(a.value);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%g", o.expected);
      rhs = buf;
    }
    if (a.op == ">=") o.passed = o.actual >= o.expected;
    else if (a.op == "<=") o.passed = o.actual <= o.expected;
    else if (a.op == ">") o.passed = o.actual > o.expected;
    else if (a.op == "<") o.passed = o.actual < o.expected;
    else o.passed = o.actual == o.expected;
    o.description = a.metric + " " + a.op + " " + rhs;
    out.push_back(std::move(o));
  }
  return out;
}

inline nlohmann::json recipe_result_to_json(const RecipeResult& r) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& o : r.outcomes)
    checks.push_back({{"assertion", o.description}, {"actual", o.actual}, {"expected", o.expected}, {"passed", o.passed}});
  return {{"recipe", r.name}, {"passed", r.passed}, {"runtime_seconds", r.runtime_seconds}, {"assertions", std::move(checks)}};
}

/// Runs the pipeline, checks the assertions and archives the verdict as
/// recipe-<name>.json in the run directory. Throws AssertionFailed listing
/// every failed assertion.
inline RecipeResult run_recipe(const ExperimentRecipe& recipe, const RunConfig& cfg, std::ostream* log = nullptr) {
  const RunContext ctx(cfg, log);
  const auto t0 = std::chrono::steady_clock::now();
  RecipeResult res;
  res.name = recipe.name;
  res.report = run_pipeline(ctx);
  res.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  auto metrics = flatten_metrics(res.report);
  metrics[kRuntimeMetric] = res.runtime_seconds;
  ExperimentRecipe checked = recipe;
  if (recipe.budget_seconds > 0) checked.assertions.push_back({kRuntimeMetric, "<=", recipe.budget_seconds});
  res.outcomes = evaluate_assertions(checked, metrics);
  res.passed = std::all_of(res.outcomes.begin(), res.outcomes.end(), [](const auto& o) { return o.passed; });

  nlohmann::json archive = recipe_result_to_json(res);
  archive["metrics"] = res.report;
  archive["config"] = config_to_json(cfg);
  write_file(ctx.out_dir / ("recipe-" + recipe.name + ".json"), archive.dump(2) + "\n");

  if (!res.passed) {
    std::string msg = "recipe '" + recipe.name + "' failed:";
    for (const auto& o : res.outcomes)
      if (!o.passed) {
        char buf[64];
        std::snprintf(buf, sizeof buf, " (actual %.6g)", o.actual);
        msg += "\n  " + o.description + buf;
      }
    fail(ErrorCode::AssertionFailed, msg);
  }
  return res;
}

}  // namespace trajground
