#pragma once

// Artifact-producing stages behind the command-line front end. Every stage
// reads its inputs from the run directory, writes its outputs there, and
// records a manifest (config snapshot, seed, SHA-256 of each artifact,
// timestamp). Outputs other than manifests depend only on config and inputs.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "trajground/config.hpp"
#include "trajground/dataset.hpp"
#include "trajground/evalcorrect.hpp"
#include "trajground/model.hpp"
#include "trajground/numerics/checkpoint.hpp"
#include "trajground/render.hpp"
#include "trajground/synthworld.hpp"
#include "trajground/trainer.hpp"

namespace trajground {

namespace fs = std::filesystem;

/// Artifact names inside the run directory.
namespace artifact {
inline constexpr const char* kWorld = "world.json";
inline constexpr const char* kTrain = "data/train.jsonl";
inline constexpr const char* kVal = "data/val.jsonl";
inline constexpr const char* kTest = "data/test.jsonl";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kTrainLog = "train_log.jsonl";
inline constexpr const char* kPredictions = "predictions.jsonl";
inline constexpr const char* kCorrectedReturn = "corrected_return.jsonl";
inline constexpr const char* kCorrectedCrop = "corrected_crop.jsonl";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kReportText = "report.txt";
inline constexpr const char* kRenderDir = "render";
}  // namespace artifact

struct RunContext {
  RunConfig cfg;
  fs::path out_dir;
  std::ostream* log = nullptr;  // progress messages; null when quiet

  explicit RunContext(RunConfig c, std::ostream* progress = nullptr) : cfg(std::move(c)), out_dir(cfg.out_dir), log(progress) {}
  fs::path at(const char* name) const { return out_dir / name; }
  fs::path eval_episodes() const { return at(cfg.eval.split == "val" ? artifact::kVal : artifact::kTest); }
};

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) fail(ErrorCode::IoError, "SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

inline std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + file.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& file, const std::string& bytes) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + file.string() + "' for writing");
  out << bytes;
  if (!out) fail(ErrorCode::IoError, "write to '" + file.string() + "' failed");
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes manifest-<command>.json next to the artifacts.
inline void write_manifest(const RunContext& ctx, const std::string& command, const std::vector<std::string>& artifacts) {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& name : artifacts) hashes[name] = sha256_hex(read_file(ctx.out_dir / name));
  nlohmann::json m{{"command", command},
                   {"seed", ctx.cfg.seed},
                   {"config", config_to_json(ctx.cfg)},
                   {"artifacts", std::move(hashes)},
                   {"created_utc", utc_timestamp()}};
  write_file(ctx.out_dir / ("manifest-" + command + ".json"), m.dump(2) + "\n");
}

inline void require_inputs(const std::string& command, std::initializer_list<fs::path> files) {
  for (const auto& f : files)
    if (!fs::exists(f)) fail(ErrorCode::IoError, command + ": required input '" + f.string() + "' does not exist; run the earlier stages first");
}

inline SynthWorld load_world(const fs::path& file) {
  try {
    return world_from_json(nlohmann::json::parse(read_file(file)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, "'" + file.string() + "' is not valid JSON: " + e.what());
  }
}

inline std::vector<Episode> load_episodes(const RunContext& ctx, const fs::path& file, const NavGraph& g) {
  return read_episodes(file, g, ctx.cfg.data.positive_radius, ctx.cfg.data.distance_mode);
}

// --- stages ---

inline void stage_gen_world(const RunContext& ctx) {
  const SynthWorld w = generate_world(ctx.cfg.world, ctx.cfg.seed);
  write_file(ctx.at(artifact::kWorld), world_to_json(w).dump() + "\n");
  if (ctx.log) *ctx.log << "gen-world: " << w.graph.node_count() << " nodes, " << w.graph.edge_count() << " edges\n";
  write_manifest(ctx, "gen-world", {artifact::kWorld});
}

inline void stage_build_data(const RunContext& ctx) {
  require_inputs("build-data", {ctx.at(artifact::kWorld)});
  const SynthWorld w = load_world(ctx.at(artifact::kWorld));
  const DatasetSplits ds = build_dataset(w, ctx.cfg.data, ctx.cfg.seed);
  fs::create_directories(ctx.out_dir / "data");
  write_episodes(ds.train, w.graph, ctx.at(artifact::kTrain));
  write_episodes(ds.val, w.graph, ctx.at(artifact::kVal));
  write_episodes(ds.test, w.graph, ctx.at(artifact::kTest));
  if (ctx.log)
    *ctx.log << "build-data: " << ds.train.size() << " train, " << ds.val.size() << " val, " << ds.test.size() << " test episodes\n";
  write_manifest(ctx, "build-data", {artifact::kTrain, artifact::kVal, artifact::kTest});
}

inline void stage_train(const RunContext& ctx) {
  require_inputs("train", {ctx.at(artifact::kWorld), ctx.at(artifact::kTrain), ctx.at(artifact::kVal)});
  const SynthWorld w = load_world(ctx.at(artifact::kWorld));
  const auto train_set = load_episodes(ctx, ctx.at(artifact::kTrain), w.graph);
  const auto val_set = load_episodes(ctx, ctx.at(artifact::kVal), w.graph);
  ModelConfig mcfg = ctx.cfg.model;
  mcfg.feature_dim = w.dim();

  std::string log_text;
  const auto result = train<float>(w, train_set, val_set, mcfg, ctx.cfg.loss, ctx.cfg.train, [&](const nlohmann::json& rec) {
    log_text += rec.dump() + "\n";
    if (ctx.log && rec.contains("val_metric"))
      *ctx.log << "train: iteration " << rec.at("iteration").get<std::size_t>() << " loss " << rec.at("loss").get<double>()
               << " val corrected SR " << rec.at("val_metric").get<double>() << "\n";
  });
  write_file(ctx.at(artifact::kTrainLog), log_text);
  const nlohmann::json meta{{"model", model_config_to_json(mcfg)},
                            {"weights", "ema"},
                            {"best_iteration", result.best_iteration},
                            {"best_val_metric", result.best_metric}};
  num::save_checkpoint(ctx.at(artifact::kCheckpoint), result.best, meta);
  if (ctx.log) *ctx.log << "train: selected iteration " << result.best_iteration << "\n";
  write_manifest(ctx, "train", {artifact::kCheckpoint, artifact::kTrainLog});
}

inline void stage_eval(const RunContext& ctx) {
  require_inputs("eval", {ctx.at(artifact::kWorld), ctx.eval_episodes(), ctx.at(artifact::kCheckpoint)});
  const SynthWorld w = load_world(ctx.at(artifact::kWorld));
  const auto episodes = load_episodes(ctx, ctx.eval_episodes(), w.graph);
  nlohmann::json meta;
  auto params = num::load_checkpoint<float>(ctx.at(artifact::kCheckpoint), &meta);
  if (!meta.contains("model")) fail(ErrorCode::IoError, "checkpoint has no model configuration");
  const ModelConfig mcfg = model_config_from_json(meta.at("model"));
  if (mcfg.feature_dim != w.dim()) fail(ErrorCode::ShapeMismatch, "checkpoint feature_dim does not match the world");

  const auto samples = episode_samples<float>(w, episodes);
  std::vector<std::vector<double>> probs;
  const auto steps = predict_steps<float>(params, samples, mcfg, &probs);
  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < episodes.size(); ++i) preds.push_back({episodes[i].episode_id, steps[i], probs[i]});
  write_predictions(ctx.at(artifact::kPredictions), preds);
  if (ctx.log) *ctx.log << "eval: " << preds.size() << " predictions on the " << ctx.cfg.eval.split << " split\n";
  write_manifest(ctx, "eval", {artifact::kPredictions});
}

namespace detail {
struct EvalInputs {
  SynthWorld world;
  std::vector<Episode> episodes;
  std::vector<std::size_t> steps;
};

inline EvalInputs load_eval_inputs(const RunContext& ctx, const std::string& command) {
  require_inputs(command, {ctx.at(artifact::kWorld), ctx.eval_episodes(), ctx.at(artifact::kPredictions)});
  EvalInputs in{load_world(ctx.at(artifact::kWorld)), {}, {}};
  in.episodes = load_episodes(ctx, ctx.eval_episodes(), in.world.graph);
  in.steps = align_predictions(in.episodes, read_predictions(ctx.at(artifact::kPredictions)));
  return in;
}
}  // namespace detail

inline void stage_correct(const RunContext& ctx) {
  const auto in = detail::load_eval_inputs(ctx, "correct");
  const auto& g = in.world.graph;
  std::string ret_lines, crop_lines;
  auto line = [&](const Episode& e, std::size_t step, const Path& p) {
    nlohmann::json nodes = nlohmann::json::array();
    for (auto n : p.nodes) nodes.push_back(g.id(n));
    return nlohmann::json{{"episode_id", e.episode_id}, {"predicted_step", step}, {"path", std::move(nodes)}, {"length", p.length}}
               .dump() +
           "\n";
  };
  for (std::size_t i = 0; i < in.episodes.size(); ++i) {
    const Path traj = make_path(g, in.episodes[i].path);
    ret_lines += line(in.episodes[i], in.steps[i], correct_return(g, traj, in.steps[i]));
    crop_lines += line(in.episodes[i], in.steps[i], correct_crop(g, traj, in.steps[i]));
  }
  write_file(ctx.at(artifact::kCorrectedReturn), ret_lines);
  write_file(ctx.at(artifact::kCorrectedCrop), crop_lines);
  if (ctx.log) *ctx.log << "correct: " << in.episodes.size() << " trajectories corrected both ways\n";
  write_manifest(ctx, "correct", {artifact::kCorrectedReturn, artifact::kCorrectedCrop});
}

inline nlohmann::json stage_report(const RunContext& ctx) {
  const auto in = detail::load_eval_inputs(ctx, "report");
  const GapReport rep = gap_report(in.world.graph, in.world.geodesics, in.episodes, in.steps, ctx.cfg.eval.radius);
  nlohmann::json j = report_to_json(rep);
  j["split"] = ctx.cfg.eval.split;
  write_file(ctx.at(artifact::kReport), j.dump(2) + "\n");
  const std::string table = report_table(rep);
  write_file(ctx.at(artifact::kReportText), table);
  if (ctx.log) *ctx.log << table;
  write_manifest(ctx, "report", {artifact::kReport, artifact::kReportText});
  return j;
}

/// Renders up to eval.render_episodes trajectories, preferring episodes that
/// passed the target but stopped elsewhere.
inline void stage_render(const RunContext& ctx) {
  const auto in = detail::load_eval_inputs(ctx, "render");
  const auto& g = in.world.graph;
  std::vector<std::size_t> gap, rest;
  for (std::size_t i = 0; i < in.episodes.size(); ++i) {
    const auto& e = in.episodes[i];
    const auto r = episode_metrics(in.world.geodesics, make_path(g, e.path), e.start, e.target, shortest_path(g, e.start, e.target),
                                   ctx.cfg.eval.radius);
    (r.oracle_success && !r.success ? gap : rest).push_back(i);
  }
  gap.insert(gap.end(), rest.begin(), rest.end());
  if (gap.size() > ctx.cfg.eval.render_episodes) gap.resize(ctx.cfg.eval.render_episodes);

  fs::create_directories(ctx.out_dir / artifact::kRenderDir);
  std::vector<std::string> written;
  for (auto i : gap) {
    const auto& e = in.episodes[i];
    const Path traj = make_path(g, e.path);
    const std::string name = std::string(artifact::kRenderDir) + "/" + e.episode_id + ".svg";
    write_file(ctx.out_dir / name, render_trajectory_svg(g, traj, correct_return(g, traj, in.steps[i]), e.target));
    written.push_back(name);
  }
  if (ctx.log) *ctx.log << "render: " << written.size() << " SVG files\n";
  write_manifest(ctx, "render", written);
}

/// All stages end to end; returns the report JSON.
inline nlohmann::json run_pipeline(const RunContext& ctx) {
  fs::create_directories(ctx.out_dir);
  stage_gen_world(ctx);
  stage_build_data(ctx);
  stage_train(ctx);
  stage_eval(ctx);
  stage_correct(ctx);
  nlohmann::json report = stage_report(ctx);
  stage_render(ctx);
  write_manifest(ctx, "pipeline",
                 {artifact::kWorld, artifact::kTrain, artifact::kVal, artifact::kTest, artifact::kCheckpoint, artifact::kTrainLog,
                  artifact::kPredictions, artifact::kCorrectedReturn, artifact::kCorrectedCrop, artifact::kReport,
                  artifact::kReportText});
  return report;
}

}  // namespace trajground
