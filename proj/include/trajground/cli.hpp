#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage or
// configuration error.

#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trajground/config.hpp"
#include "trajground/error.hpp"
#include "trajground/pipeline.hpp"
#include "trajground/recipe.hpp"

namespace trajground {

inline constexpr const char* kCommands[] = {"gen-world", "build-data", "train", "eval", "correct", "report", "render", "pipeline", "recipe"};

inline std::string usage() {
  return "usage: trajground <command> [--config FILE] [--set key=value ...] [--seed N] [--out-dir DIR] [--quiet]\n"
         "       trajground recipe FILE [--set key=value ...] [--out-dir DIR] [--quiet]\n"
         "\n"
         "commands:\n"
         "  gen-world    generate the synthetic world (world.json)\n"
         "  build-data   build train/val/test episodes (data/*.jsonl)\n"
         "  train        train the grounding model (model.ckpt, train_log.jsonl)\n"
         "  eval         predict target steps on the eval split (predictions.jsonl)\n"
         "  correct      apply return and crop corrections (corrected_*.jsonl)\n"
         "  report       gap report before and after correction (report.json, report.txt)\n"
         "  render       SVG renderings of corrected trajectories (render/*.svg)\n"
         "  pipeline     all of the above in order\n"
         "  recipe       run an experiment recipe and check its assertions\n";
}

struct CliOptions {
  std::string command;
  std::string config;
  std::string recipe;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool quiet = false;
};

/// Config precedence: defaults, then the config file, then --set in order,
/// then --seed and --out-dir.
inline RunConfig resolve_config(const CliOptions& o) {
  nlohmann::json j = o.config.empty() ? nlohmann::json::object() : load_config_json(o.config);
  for (const auto& s : o.overrides) apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (o.out_dir) j["paths"]["out_dir"] = *o.out_dir;
  return config_from_json(j);
}

inline void run_command(const CliOptions& o, std::ostream& out) {
  std::ostream* log = o.quiet ? nullptr : &out;
  if (o.command == "recipe") {
    const ExperimentRecipe recipe = load_recipe(o.recipe);
    std::vector<std::string> extra = o.overrides;
    if (o.seed) extra.push_back("seed=" + std::to_string(*o.seed));
    if (o.out_dir) extra.push_back("paths.out_dir=\"" + *o.out_dir + "\"");
    const RecipeResult r = run_recipe(recipe, recipe_config(recipe, extra), log);
    for (const auto& a : r.outcomes) out << (a.passed ? "PASS " : "FAIL ") << a.description << " (actual " << a.actual << ")\n";
    out << "recipe " << r.name << ": " << (r.passed ? "PASS" : "FAIL") << "\n";
    return;
  }
  const RunContext ctx(resolve_config(o), log);
  fs::create_directories(ctx.out_dir);
  if (o.command == "gen-world") stage_gen_world(ctx);
  else if (o.command == "build-data") stage_build_data(ctx);
  else if (o.command == "train") stage_train(ctx);
  else if (o.command == "eval") stage_eval(ctx);
  else if (o.command == "correct") stage_correct(ctx);
  else if (o.command == "report") stage_report(ctx);
  else if (o.command == "render") stage_render(ctx);
  else if (o.command == "pipeline") run_pipeline(ctx);
  else fail(ErrorCode::UnknownCommand, "unknown command '" + o.command + "'");
}

/// Parses `args` (without the program name) and runs the command.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty() || args[0] == "--help" || args[0] == "-h") {
    (args.empty() ? err : out) << usage();
    return args.empty() ? 2 : 0;
  }
  CliOptions o;
  o.command = args[0];
  if (std::find(std::begin(kCommands), std::end(kCommands), o.command) == std::end(kCommands)) {
    err << "error: unknown command '" << o.command << "'\n\n" << usage();
    return 2;
  }

  CLI::App app("trajground " + o.command);
  if (o.command == "recipe") app.add_option("recipe", o.recipe, "recipe file")->required();
  else app.add_option("--config", o.config, "JSON config file");
  app.add_option("--set", o.overrides, "override a config key, e.g. --set train.iterations=5000");
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("--out-dir", o.out_dir, "artifact directory");
  app.add_flag("--quiet", o.quiet, "suppress progress output");
  std::vector<std::string> rest(args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());  // CLI11 consumes the vector from the back
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help() << "\n" << usage();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << usage();
    return 2;
  }

  try {
    run_command(o, out);
    return 0;
  } catch (const Error& e) {
    err << "error [" << o.command << "]: " << e.what() << "\n";
    return e.code() == ErrorCode::ConfigError || e.code() == ErrorCode::UnknownCommand ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error [" << o.command << "]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace trajground
