#pragma once

// Training-data preparation: positive viewpoint mining around a target,
// spliced training trajectories with 1-2 sampled positives, baseline-agent
// evaluation episodes, and the episode JSON-lines format.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trajground/error.hpp"
#include "trajground/navgraph.hpp"
#include "trajground/rng.hpp"
#include "trajground/synthworld.hpp"

namespace trajground {

inline constexpr double kSuccessRadius = 3.0;
inline constexpr double kExpansionBudget = 6.0;

enum class Split { Train, ValSeenLike, ValUnseenLike };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::ValSeenLike: return "val_seen_like";
    case Split::ValUnseenLike: return "val_unseen_like";
  }
  return "train";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val_seen_like") return Split::ValSeenLike;
  if (s == "val_unseen_like") return Split::ValUnseenLike;
  return std::nullopt;
}

struct Episode {
  std::string episode_id;
  std::string world_id;
  NodeIndex start = 0;
  NodeIndex target = 0;
  std::vector<NodeIndex> path;
  std::vector<std::size_t> positive_steps;  // sorted, unique
  std::uint64_t instruction_seed = 0;
  Split split = Split::Train;

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Viewpoints whose distance to `target` is within `radius`: every one of
/// them counts as a successful stop.
inline std::vector<NodeIndex> find_positive_set(const NavGraph& g, NodeIndex target, double radius = kSuccessRadius,
                                                DistanceMode mode = DistanceMode::Geodesic) {
  return nodes_within(g, target, radius, mode);
}

struct ConstructedTrajectory {
  std::vector<NodeIndex> path;
  std::vector<std::size_t> positive_steps;
  std::vector<NodeIndex> positives;  // the sampled A[, B]
  double expansion_length = 0.0;     // length added after B
};

/// Builds a training trajectory around the positive set Z:
/// shortest path start -> A, optionally A -> B and a random simple walk of at
/// most `expansion_budget` meters from B. Returns nullopt when the draw is
/// degenerate (a one-node trajectory) and the caller should resample.
inline std::optional<ConstructedTrajectory> construct_training_trajectory(const NavGraph& g, NodeIndex start,
                                                                          std::span<const NodeIndex> Z, CounterRng& rng,
                                                                          double expansion_budget = kExpansionBudget) {
  g.check(start);
  if (Z.empty()) fail(ErrorCode::EmptyPositiveSet, "positive set is empty");
  const bool start_in_z = std::find(Z.begin(), Z.end(), start) != Z.end();
  if (start_in_z && Z.size() == 1) return std::nullopt;

  const bool two = Z.size() >= 2 && rng.coin();
  const NodeIndex a = Z[rng.below(Z.size())];
  std::optional<NodeIndex> b;
  if (two) {
    std::size_t k = rng.below(Z.size() - 1);
    for (std::size_t i = 0; i < Z.size(); ++i) {
      if (Z[i] == a) continue;
      if (k-- == 0) {
        b = Z[i];
        break;
      }
    }
  }

  ConstructedTrajectory out;
  out.path = shortest_path(g, start, a).nodes;
  out.positives.push_back(a);
  if (b) {
    out.positives.push_back(*b);
    const auto ab = shortest_path(g, a, *b).nodes;
    out.path.insert(out.path.end(), ab.begin() + 1, ab.end());

    std::vector<bool> used(g.node_count(), false);
    for (auto v : out.path) used[v] = true;
    double remaining = expansion_budget;
    NodeIndex cur = *b;
    for (;;) {
      std::vector<Neighbor> cand;
      for (const auto& nb : g.neighbors(cur))
        if (!used[nb.node] && nb.weight <= remaining) cand.push_back(nb);
      if (cand.empty()) break;
      const auto pick = cand[rng.below(cand.size())];
      used[pick.node] = true;
      remaining -= pick.weight;
      out.expansion_length += pick.weight;
      out.path.push_back(pick.node);
      cur = pick.node;
    }
  }
  if (out.path.size() < 2) return std::nullopt;
  for (std::size_t i = 0; i < out.path.size(); ++i)
    if (std::find(out.positives.begin(), out.positives.end(), out.path[i]) != out.positives.end())
      out.positive_steps.push_back(i);
  return out;
}

/// Throws InvariantViolation when the episode is inconsistent with the graph.
inline void validate_episode(const Episode& e, const NavGraph& g, double radius = kSuccessRadius,
                             DistanceMode mode = DistanceMode::Geodesic) {
  auto bad = [&](const std::string& what) { fail(ErrorCode::InvariantViolation, "episode '" + e.episode_id + "': " + what); };
  if (e.path.empty()) bad("empty path");
  for (auto v : e.path)
    if (!g.contains(v)) bad("path node out of range");
  if (!g.contains(e.start) || !g.contains(e.target)) bad("start/target out of range");
  if (e.path.front() != e.start) bad("path does not begin at start");
  for (std::size_t i = 1; i < e.path.size(); ++i)
    if (!g.adjacent(e.path[i - 1], e.path[i])) bad("consecutive path nodes are not adjacent at step " + std::to_string(i));
  if (!std::is_sorted(e.positive_steps.begin(), e.positive_steps.end()) ||
      std::adjacent_find(e.positive_steps.begin(), e.positive_steps.end()) != e.positive_steps.end())
    bad("positive_steps must be sorted and unique");
  std::optional<std::vector<double>> dist;
  if (mode == DistanceMode::Geodesic) dist = distances_from(g, e.target);
  for (auto s : e.positive_steps) {
    if (s >= e.path.size()) bad("positive step " + std::to_string(s) + " beyond path");
    const NodeIndex v = e.path[s];
    const double d = dist ? (*dist)[v] : euclidean(g.position(v), g.position(e.target));
    if (!(d <= radius + 1e-9)) bad("positive step " + std::to_string(s) + " is " + std::to_string(d) + " m from target");
  }
  if (e.split == Split::Train && e.positive_steps.empty()) bad("training episode without positives");
}

inline nlohmann::json episode_to_json(const Episode& e, const NavGraph& g) {
  nlohmann::json path = nlohmann::json::array();
  for (auto v : e.path) path.push_back(g.id(v));
  return {{"episode_id", e.episode_id}, {"world_id", e.world_id},     {"start", g.id(e.start)},
          {"target", g.id(e.target)},   {"path", std::move(path)},    {"positive_steps", e.positive_steps},
          {"instruction_seed", e.instruction_seed}, {"split", to_string(e.split)}};
}

inline Episode episode_from_json(const nlohmann::json& j, const NavGraph& g) {
  Episode e;
  e.episode_id = j.at("episode_id").get<std::string>();
  e.world_id = j.at("world_id").get<std::string>();
  auto node = [&](const std::string& id) {
    auto found = g.find(id);
    if (!found) fail(ErrorCode::InvariantViolation, "episode '" + e.episode_id + "' references unknown node '" + id + "'");
    return *found;
  };
  e.start = node(j.at("start").get<std::string>());
  e.target = node(j.at("target").get<std::string>());
  for (const auto& id : j.at("path")) e.path.push_back(node(id.get<std::string>()));
  e.positive_steps = j.at("positive_steps").get<std::vector<std::size_t>>();
  e.instruction_seed = j.at("instruction_seed").get<std::uint64_t>();
  auto split = parse_split(j.at("split").get<std::string>());
  if (!split) fail(ErrorCode::InvariantViolation, "unknown split '" + j.at("split").get<std::string>() + "'");
  e.split = *split;
  return e;
}

inline void write_episodes(std::span<const Episode> episodes, const NavGraph& g, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + file.string() + "' for writing");
  for (const auto& e : episodes) out << episode_to_json(e, g).dump() << '\n';
  if (!out) fail(ErrorCode::IoError, "write to '" + file.string() + "' failed");
}

/// Reads JSON-lines episodes and validates each against `g`.
inline std::vector<Episode> read_episodes(const std::filesystem::path& file, const NavGraph& g,
                                          double radius = kSuccessRadius, DistanceMode mode = DistanceMode::Geodesic) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open '" + file.string() + "'");
  std::vector<Episode> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Episode e;
    try {
      e = episode_from_json(nlohmann::json::parse(line), g);
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::MalformedLine, file.string() + ": " + ex.what(), line_no);
    }
    validate_episode(e, g, radius, mode);
    out.push_back(std::move(e));
  }
  if (in.bad()) fail(ErrorCode::IoError, "read from '" + file.string() + "' failed");
  return out;
}

struct DatasetOptions {
  std::size_t train_episodes = 500;
  std::size_t val_episodes = 100;
  std::size_t test_episodes = 100;
  std::size_t max_steps = 15;
  double min_start_distance = 4.0;
  double positive_radius = kSuccessRadius;
  double expansion_budget = kExpansionBudget;
  DistanceMode distance_mode = DistanceMode::Geodesic;
  RolloutOptions rollout;
};

struct DatasetSplits {
  std::vector<Episode> train;
  std::vector<Episode> val;   // val_unseen_like: baseline rollouts for model selection
  std::vector<Episode> test;  // val_unseen_like: held-out baseline rollouts for reporting
};

namespace detail {
inline std::string episode_name(const std::string& prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  return prefix + "-" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}
}  // namespace detail

/// Builds training episodes (spliced trajectories) and two evaluation splits
/// of baseline-agent rollouts. Both evaluation splits use (start, target)
/// pairs unseen in training, and val pairs are also disjoint from test pairs. Targets are landmark anchors so that each
/// episode's instruction is synthesizable from its target.
inline DatasetSplits build_dataset(const SynthWorld& w, const DatasetOptions& opt, std::uint64_t seed) {
  const auto& g = w.graph;
  const auto& anchors = w.latents.anchors;
  if (anchors.empty()) fail(ErrorCode::EmptyDataset, "world has no landmarks");
  constexpr std::size_t kMaxAttempts = 1000000;

  auto pick_pair = [&](CounterRng& rng) -> std::pair<NodeIndex, NodeIndex> {
    for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const NodeIndex target = anchors[rng.below(anchors.size())];
      const NodeIndex start = rng.below(g.node_count());
      if (start == target || !w.geodesics.connected(start, target)) continue;
      if (w.geodesics(start, target) < opt.min_start_distance) continue;
      return {start, target};
    }
    fail(ErrorCode::InfeasibleSpec, "no (start, target) pair satisfies min_start_distance");
  };

  DatasetSplits out;
  std::set<std::pair<NodeIndex, NodeIndex>> train_pairs;
  {
    CounterRng rng(seed, derive_stream({0xDA7A, 0}));
    std::size_t attempts = 0;
    while (out.train.size() < opt.train_episodes) {
      if (++attempts > kMaxAttempts) fail(ErrorCode::InfeasibleSpec, "could not construct enough training episodes");
      auto [start, target] = pick_pair(rng);
      const auto Z = find_positive_set(g, target, opt.positive_radius, opt.distance_mode);
      auto built = construct_training_trajectory(g, start, Z, rng, opt.expansion_budget);
      if (!built || built->path.size() > opt.max_steps) continue;
      Episode e;
      e.episode_id = detail::episode_name("train", out.train.size());
      e.world_id = w.world_id;
      e.start = start;
      e.target = target;
      e.path = std::move(built->path);
      e.positive_steps = std::move(built->positive_steps);
      e.instruction_seed = mix64(derive_stream({seed, 0, out.train.size()}));
      e.split = Split::Train;
      train_pairs.insert({start, target});
      out.train.push_back(std::move(e));
    }
  }

  auto rollouts = [&](const std::string& prefix, std::size_t count, std::uint64_t tag,
                      const std::set<std::pair<NodeIndex, NodeIndex>>& excluded) {
    std::vector<Episode> eps;
    CounterRng rng(seed, derive_stream({0xDA7A, tag}));
    std::size_t attempts = 0;
    while (eps.size() < count) {
      if (++attempts > kMaxAttempts) fail(ErrorCode::InfeasibleSpec, "could not build enough evaluation episodes");
      auto [start, target] = pick_pair(rng);
      if (excluded.count({start, target})) continue;
      const std::uint64_t episode_seed = mix64(derive_stream({seed, tag, eps.size(), attempts}));
      Path p = baseline_rollout(g, episode_seed, start, target, opt.rollout);
      if (p.size() > opt.max_steps) continue;
      Episode e;
      e.episode_id = detail::episode_name(prefix, eps.size());
      e.world_id = w.world_id;
      e.start = start;
      e.target = target;
      e.path = std::move(p.nodes);
      for (std::size_t i = 0; i < e.path.size(); ++i) {
        const double d = opt.distance_mode == DistanceMode::Geodesic ? w.geodesics(e.path[i], target)
                                                                      : euclidean(g.position(e.path[i]), g.position(target));
        if (d <= opt.positive_radius) e.positive_steps.push_back(i);
      }
      e.instruction_seed = mix64(derive_stream({seed, tag, eps.size()}));
      e.split = Split::ValUnseenLike;
      eps.push_back(std::move(e));
    }
    return eps;
  };
  out.test = rollouts("test", opt.test_episodes, 2, train_pairs);
  auto seen = train_pairs;
  for (const auto& e : out.test) seen.insert({e.start, e.target});
  out.val = rollouts("val", opt.val_episodes, 1, seen);
  return out;
}

}  // namespace trajground
