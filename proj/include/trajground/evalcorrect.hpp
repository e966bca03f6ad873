#pragma once

// Navigation metrics, the two trajectory-correction protocols (return to the
// predicted viewpoint, or crop at it) and the before/after gap report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajground/dataset.hpp"
#include "trajground/error.hpp"
#include "trajground/navgraph.hpp"

namespace trajground {

struct EpisodeResult {
  double TL = 0.0;
  double NE = 0.0;
  int success = 0;
  int oracle_success = 0;
  double SPL = 0.0;
  double GP = 0.0;
  double nDTW = 0.0;
  double sDTW = 0.0;
  std::optional<std::size_t> predicted_step;
};

namespace detail {
inline double checked_distance(const GeodesicTable& dist, NodeIndex a, NodeIndex b) {
  const double d = dist(a, b);
  if (d == kUnreachable) fail(ErrorCode::NoPath, "nodes " + std::to_string(a) + " and " + std::to_string(b) + " are disconnected");
  return d;
}
}  // namespace detail

/// exp(-DTW(traj, ref) / (|ref| * threshold)) with geodesic step costs.
inline double ndtw(const GeodesicTable& dist, std::span<const NodeIndex> traj, std::span<const NodeIndex> ref,
                   double threshold = kSuccessRadius) {
  if (traj.empty() || ref.empty()) fail(ErrorCode::EmptyPath, "nDTW needs two nonempty paths");
  const std::size_t m = traj.size();
  // Rolling rows over the reference; row i holds DTW(ref[0..i], traj[0..j]).
  std::vector<double> prev(m + 1, kUnreachable), cur(m + 1, kUnreachable);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = kUnreachable;
    for (std::size_t j = 1; j <= m; ++j) {
      const double cost = detail::checked_distance(dist, ref[i - 1], traj[j - 1]);
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return std::exp(-prev[m] / (static_cast<double>(ref.size()) * threshold));
}

inline double ndtw(const NavGraph& g, const Path& traj, const Path& ref, double threshold = kSuccessRadius) {
  return ndtw(GeodesicTable(g), traj.nodes, ref.nodes, threshold);
}

/// Metrics of one trajectory against its target and reference path.
inline EpisodeResult episode_metrics(const GeodesicTable& dist, const Path& traj, NodeIndex start, NodeIndex target,
                                     const Path& ref, double radius = kSuccessRadius) {
  if (traj.nodes.empty()) fail(ErrorCode::EmptyPath, "trajectory is empty");
  if (traj.front() != start) fail(ErrorCode::StartMismatch, "trajectory does not begin at the episode start");
  const double best = detail::checked_distance(dist, start, target);
  EpisodeResult r;
  r.TL = traj.length;
  r.NE = detail::checked_distance(dist, traj.back(), target);
  r.success = r.NE <= radius ? 1 : 0;
  double closest = kUnreachable;
  for (auto u : traj.nodes) closest = std::min(closest, dist(u, target));
  r.oracle_success = closest <= radius ? 1 : 0;
  r.SPL = r.success ? best / std::max(best, r.TL) : 0.0;
  r.GP = best - r.NE;
  r.nDTW = ndtw(dist, traj.nodes, ref.nodes, radius);
  r.sDTW = r.success * r.nDTW;
  return r;
}

inline EpisodeResult episode_metrics(const NavGraph& g, const Path& traj, NodeIndex start, NodeIndex target,
                                     double radius = kSuccessRadius) {
  return episode_metrics(GeodesicTable(g), traj, start, target, shortest_path(g, start, target), radius);
}

/// The trajectory followed by the shortest route from its end back to the
/// predicted step's node.
inline Path correct_return(const NavGraph& g, const Path& traj, std::size_t predicted_step) {
  if (traj.nodes.empty()) fail(ErrorCode::EmptyPath, "trajectory is empty");
  if (predicted_step >= traj.size())
    fail(ErrorCode::BadStep, "predicted step " + std::to_string(predicted_step) + " outside a " + std::to_string(traj.size()) + "-step trajectory");
  const NodeIndex goal = traj.nodes[predicted_step];
  if (goal == traj.back()) return traj;
  Path back = shortest_path(g, traj.back(), goal);
  Path out = traj;
  out.nodes.insert(out.nodes.end(), back.nodes.begin() + 1, back.nodes.end());
  out.length += back.length;
  return out;
}

/// The prefix of the trajectory ending at the predicted step.
inline Path correct_crop(const NavGraph& g, const Path& traj, std::size_t predicted_step) {
  if (traj.nodes.empty()) fail(ErrorCode::EmptyPath, "trajectory is empty");
  if (predicted_step >= traj.size())
    fail(ErrorCode::BadStep, "predicted step " + std::to_string(predicted_step) + " outside a " + std::to_string(traj.size()) + "-step trajectory");
  std::vector<NodeIndex> nodes(traj.nodes.begin(), traj.nodes.begin() + static_cast<std::ptrdiff_t>(predicted_step) + 1);
  return make_path(g, std::move(nodes));
}

struct AggregateMetrics {
  double SR = 0, OSR = 0, SPL = 0, TL = 0, NE = 0, GP = 0, nDTW = 0, sDTW = 0;
  double gap() const { return OSR - SR; }
};

inline AggregateMetrics aggregate(std::span<const EpisodeResult> rs) {
  AggregateMetrics a;
  if (rs.empty()) return a;
  for (const auto& r : rs) {
    a.SR += r.success;
    a.OSR += r.oracle_success;
    a.SPL += r.SPL;
    a.TL += r.TL;
    a.NE += r.NE;
    a.GP += r.GP;
    a.nDTW += r.nDTW;
    a.sDTW += r.sDTW;
  }
  const double n = static_cast<double>(rs.size());
  for (double* v : {&a.SR, &a.OSR, &a.SPL, &a.TL, &a.NE, &a.GP, &a.nDTW, &a.sDTW}) *v /= n;
  return a;
}

/// How a correction moved successes relative to the baseline.
struct CorrectionSummary {
  AggregateMetrics metrics;
  double keeping_rate = 0.0;     // successful before, still successful after
  double correcting_rate = 0.0;  // failed but oracle-successful before, successful after
  double gap_recovery = 0.0;     // (SR after - SR before) / baseline gap; 0 when the baseline gap is 0
};

struct GapReport {
  std::size_t episodes = 0;
  AggregateMetrics baseline;
  CorrectionSummary returned;
  CorrectionSummary cropped;
  std::vector<std::string> episode_ids;
  std::vector<EpisodeResult> baseline_results, return_results, crop_results;
};

namespace detail {
inline CorrectionSummary summarize(std::span<const EpisodeResult> base, std::span<const EpisodeResult> after) {
  CorrectionSummary s;
  s.metrics = aggregate(after);
  std::size_t succ = 0, kept = 0, gapped = 0, fixed = 0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (base[i].success) {
      ++succ;
      kept += after[i].success;
    } else if (base[i].oracle_success) {
      ++gapped;
      fixed += after[i].success;
    }
  }
  s.keeping_rate = succ ? static_cast<double>(kept) / static_cast<double>(succ) : 0.0;
  s.correcting_rate = gapped ? static_cast<double>(fixed) / static_cast<double>(gapped) : 0.0;
  const auto b = aggregate(base);
  s.gap_recovery = b.gap() > 0 ? (s.metrics.SR - b.SR) / b.gap() : 0.0;
  return s;
}
}  // namespace detail

/// Baseline, return-corrected and crop-corrected metrics over episodes with
/// one predicted step each.
inline GapReport gap_report(const NavGraph& g, const GeodesicTable& dist, std::span<const Episode> episodes,
                            std::span<const std::size_t> predictions, double radius = kSuccessRadius) {
  if (episodes.size() != predictions.size())
    fail(ErrorCode::LengthMismatch, std::to_string(episodes.size()) + " episodes but " + std::to_string(predictions.size()) + " predictions");
  GapReport rep;
  rep.episodes = episodes.size();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    const Path traj = make_path(g, e.path);
    const Path ref = shortest_path(g, e.start, e.target);
    auto base = episode_metrics(dist, traj, e.start, e.target, ref, radius);
    auto ret = episode_metrics(dist, correct_return(g, traj, predictions[i]), e.start, e.target, ref, radius);
    auto crop = episode_metrics(dist, correct_crop(g, traj, predictions[i]), e.start, e.target, ref, radius);
    ret.predicted_step = crop.predicted_step = predictions[i];
    rep.episode_ids.push_back(e.episode_id);
    rep.baseline_results.push_back(base);
    rep.return_results.push_back(ret);
    rep.crop_results.push_back(crop);
  }
  rep.baseline = aggregate(rep.baseline_results);
  rep.returned = detail::summarize(rep.baseline_results, rep.return_results);
  rep.cropped = detail::summarize(rep.baseline_results, rep.crop_results);
  return rep;
}

inline GapReport gap_report(const NavGraph& g, std::span<const Episode> episodes, std::span<const std::size_t> predictions,
                            double radius = kSuccessRadius) {
  return gap_report(g, GeodesicTable(g), episodes, predictions, radius);
}

inline nlohmann::json metrics_to_json(const AggregateMetrics& a) {
  return {{"SR", a.SR}, {"OSR", a.OSR}, {"gap", a.gap()}, {"SPL", a.SPL}, {"TL", a.TL},
          {"NE", a.NE}, {"GP", a.GP},   {"nDTW", a.nDTW},  {"sDTW", a.sDTW}};
}

inline nlohmann::json report_to_json(const GapReport& r) {
  auto variant = [](const CorrectionSummary& s) {
    auto j = metrics_to_json(s.metrics);
    j["keeping_rate"] = s.keeping_rate;
    j["correcting_rate"] = s.correcting_rate;
    j["gap_recovery"] = s.gap_recovery;
    return j;
  };
  nlohmann::json per = nlohmann::json::array();
  std::size_t crop_ge_return = 0;
  for (std::size_t i = 0; i < r.episodes; ++i) {
    const auto& b = r.baseline_results[i];
    const auto& ret = r.return_results[i];
    const auto& c = r.crop_results[i];
    crop_ge_return += c.SPL >= ret.SPL ? 1 : 0;
    per.push_back({{"episode_id", r.episode_ids[i]},
                   {"predicted_step", ret.predicted_step.value_or(0)},
                   {"baseline_success", b.success},
                   {"oracle_success", b.oracle_success},
                   {"return_success", ret.success},
                   {"crop_success", c.success},
                   {"return_SPL", ret.SPL},
                   {"crop_SPL", c.SPL}});
  }
  nlohmann::json j;
  j["episodes"] = r.episodes;
  j["baseline"] = metrics_to_json(r.baseline);
  j["return"] = variant(r.returned);
  j["crop"] = variant(r.cropped);
  j["crop_spl_ge_return_fraction"] = r.episodes ? static_cast<double>(crop_ge_return) / static_cast<double>(r.episodes) : 1.0;
  j["tl_convention"] = "return-corrected TL always includes the appended return path";
  j["per_episode"] = std::move(per);
  return j;
}

/// Dotted metric names ("return.SR", "baseline.gap", ...) for assertions.
inline std::map<std::string, double> flatten_metrics(const nlohmann::json& report) {
  std::map<std::string, double> out;
  for (const char* section : {"baseline", "return", "crop"}) {
    if (!report.contains(section)) continue;
    for (const auto& [k, v] : report.at(section).items())
      if (v.is_number()) out[std::string(section) + "." + k] = v.get<double>();
  }
  for (const auto& [k, v] : report.items())
    if (v.is_number()) out[k] = v.get<double>();
  return out;
}

/// Table-style rendering in percent (rates) and meters (lengths).
inline std::string report_table(const GapReport& r) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %7s %7s %7s %7s %7s %7s %7s %7s %7s\n", "variant", "TL", "NE", "SR", "OSR", "gap", "SPL", "GP",
                "nDTW", "sDTW");
  os << buf;
  auto row = [&](const char* name, const AggregateMetrics& a) {
    std::snprintf(buf, sizeof buf, "%-10s %7.2f %7.2f %7.1f %7.1f %7.1f %7.1f %7.2f %7.1f %7.1f\n", name, a.TL, a.NE, 100 * a.SR,
                  100 * a.OSR, 100 * a.gap(), 100 * a.SPL, a.GP, 100 * a.nDTW, 100 * a.sDTW);
    os << buf;
  };
  row("baseline", r.baseline);
  row("+return", r.returned.metrics);
  row("+crop", r.cropped.metrics);
  std::snprintf(buf, sizeof buf, "\nepisodes %zu\n", r.episodes);
  os << buf;
  for (auto [name, s] : {std::pair<const char*, const CorrectionSummary*>{"return", &r.returned}, {"crop", &r.cropped}}) {
    std::snprintf(buf, sizeof buf, "%-7s keeping %.1f%%  correcting %.1f%%  gap recovered %.1f%%\n", name, 100 * s->keeping_rate,
                  100 * s->correcting_rate, 100 * s->gap_recovery);
    os << buf;
  }
  os << "TL of +return always includes the appended return path.\n";
  return os.str();
}

struct Prediction {
  std::string episode_id;
  std::size_t predicted_step = 0;
  std::vector<double> probabilities;
};

inline void write_predictions(const std::filesystem::path& file, std::span<const Prediction> preds) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + file.string() + "' for writing");
  for (const auto& p : preds)
    out << nlohmann::json{{"episode_id", p.episode_id}, {"predicted_step", p.predicted_step}, {"probabilities", p.probabilities}}.dump()
        << '\n';
}

inline std::vector<Prediction> read_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + file.string() + "'");
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("episode_id").get<std::string>(), j.at("predicted_step").get<std::size_t>(),
                     j.value("probabilities", std::vector<double>{})});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedLine, file.string() + ": " + e.what(), line_no);
    }
  }
  return out;
}

/// Orders predictions to match episodes by id.
inline std::vector<std::size_t> align_predictions(std::span<const Episode> episodes, std::span<const Prediction> preds) {
  std::map<std::string, std::size_t> by_id;
  for (const auto& p : preds) by_id[p.episode_id] = p.predicted_step;
  if (by_id.size() != episodes.size())
    fail(ErrorCode::LengthMismatch, std::to_string(episodes.size()) + " episodes but " + std::to_string(by_id.size()) + " predictions");
  std::vector<std::size_t> out;
  for (const auto& e : episodes) {
    auto it = by_id.find(e.episode_id);
    if (it == by_id.end()) fail(ErrorCode::LengthMismatch, "no prediction for episode '" + e.episode_id + "'");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace trajground
