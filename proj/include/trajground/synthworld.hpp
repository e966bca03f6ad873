#pragma once

// Synthetic stand-in for a scanned building, its panoramic image features and
// an instruction encoder. Landmarks are anchored next to graph nodes; each
// landmark owns a unit latent vector. A view facing a landmark carries that
// latent (scaled by elevation and distance) on top of a Gaussian background,
// and an instruction about a landmark is a noisy copy of its latent.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "trajground/error.hpp"
#include "trajground/navgraph.hpp"
#include "trajground/rng.hpp"

namespace trajground {

inline constexpr std::size_t kHeadings = 12;
inline constexpr std::size_t kElevations = 3;
inline constexpr std::size_t kViews = kHeadings * kElevations;

/// Signal multiplier per elevation (down, level, up) = view_index / 12.
inline constexpr std::array<double, kElevations> kElevationWeights{0.6, 1.0, 0.6};

struct WorldSpec {
  std::size_t node_count = 60;
  double area_side = 20.0;       // meters
  double connect_radius = 3.0;   // meters
  std::size_t landmark_count = 20;
  std::size_t feature_dim = 32;
  double signal_strength = 1.0;  // beta
  double noise_scale = 0.1;
  double visibility_radius = 8.0;  // meters
  double signal_falloff = 2.0;     // meters; signal decays as exp(-distance / falloff)

  void validate() const {
    if (node_count < 2) fail(ErrorCode::InfeasibleSpec, "node_count must be at least 2");
    if (!(connect_radius > 0.0)) fail(ErrorCode::InfeasibleSpec, "connect_radius must be positive");
    if (!(area_side > 0.0)) fail(ErrorCode::InfeasibleSpec, "area_side must be positive");
    if (feature_dim < 4) fail(ErrorCode::InfeasibleSpec, "feature_dim must be at least 4");
    if (landmark_count == 0 || landmark_count > node_count)
      fail(ErrorCode::InfeasibleSpec, "landmark_count must be in [1, node_count]");
    if (!(signal_strength >= 0.0 && signal_strength <= 1.0)) fail(ErrorCode::InfeasibleSpec, "signal_strength must lie in [0,1]");
    if (!(noise_scale >= 0.0)) fail(ErrorCode::InfeasibleSpec, "noise_scale must be nonnegative");
    if (!(visibility_radius > 0.0) || !(signal_falloff > 0.0))
      fail(ErrorCode::InfeasibleSpec, "visibility_radius and signal_falloff must be positive");
  }
};

struct VisibleLandmark {
  std::size_t landmark;
  std::size_t heading;
  double distance;
};

struct SceneLatents {
  std::size_t dim = 0;
  std::vector<std::vector<double>> latents;     // unit norm, one per landmark
  std::vector<Position3D> landmark_positions;
  std::vector<NodeIndex> anchors;               // node each landmark stands next to
  std::vector<std::vector<VisibleLandmark>> visibility;  // per node

  std::size_t landmark_count() const { return latents.size(); }
};

/// Heading sector (30 degrees wide, sector 0 centred on +x) containing the
/// bearing from `from` to `to`.
inline std::size_t heading_sector(const Position3D& from, const Position3D& to) {
  double deg = std::atan2(to.y - from.y, to.x - from.x) * 180.0 / std::numbers::pi;
  deg = std::fmod(deg + 15.0 + 720.0, 360.0);
  auto sector = static_cast<std::size_t>(deg / 30.0);
  return std::min(sector, kHeadings - 1);
}

inline std::vector<std::vector<VisibleLandmark>> compute_visibility(const NavGraph& g, const std::vector<Position3D>& landmarks,
                                                                    double visibility_radius) {
  std::vector<std::vector<VisibleLandmark>> vis(g.node_count());
  for (NodeIndex u = 0; u < g.node_count(); ++u)
    for (std::size_t l = 0; l < landmarks.size(); ++l) {
      const double d = euclidean(g.position(u), landmarks[l]);
      if (d <= visibility_radius && d > 0.0) vis[u].push_back({l, heading_sector(g.position(u), landmarks[l]), d});
    }
  return vis;
}

struct SynthWorld {
  std::string world_id;
  std::uint64_t seed = 0;
  WorldSpec spec;
  NavGraph graph;
  SceneLatents latents;
  GeodesicTable geodesics;
  std::vector<double> feature_table;  // node-major [node][view][dim]

  std::size_t dim() const { return spec.feature_dim; }

  std::span<const double> view_feature(NodeIndex node, std::size_t view) const {
    const std::size_t d = dim();
    return {feature_table.data() + (node * kViews + view) * d, d};
  }
  std::span<const double> panorama(NodeIndex node) const {
    const std::size_t d = dim();
    return {feature_table.data() + node * kViews * d, kViews * d};
  }

  /// Landmark anchored at `node`, if any.
  std::optional<std::size_t> landmark_at(NodeIndex node) const {
    for (std::size_t l = 0; l < latents.anchors.size(); ++l)
      if (latents.anchors[l] == node) return l;
    return std::nullopt;
  }
};

namespace detail {
enum : std::uint64_t { kStreamPositions = 1, kStreamLandmarks = 2, kStreamLatents = 3, kStreamViews = 4, kStreamInstruction = 5, kStreamRollout = 6 };

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}
}  // namespace detail

/// Feature of one of the 36 views at `node`. Deterministic per
/// (world seed, node, view_index).
inline std::vector<double> synth_view_features(const NavGraph& g, const SceneLatents& latents, const WorldSpec& spec,
                                               std::uint64_t seed, NodeIndex node, std::size_t view_index) {
  if (view_index >= kViews) fail(ErrorCode::BadViewIndex, "view index " + std::to_string(view_index) + " not in [0,36)");
  g.check(node);
  const std::size_t d = spec.feature_dim;
  std::vector<double> o(d);
  CounterRng rng(seed, derive_stream({detail::kStreamViews, node, view_index}));
  const double bg = spec.noise_scale / std::sqrt(static_cast<double>(d));
  for (auto& x : o) x = bg * rng.normal();
  const std::size_t heading = view_index % kHeadings;
  const double elev = kElevationWeights[view_index / kHeadings];
  for (const auto& v : latents.visibility[node]) {
    if (v.heading != heading) continue;
    const double w = spec.signal_strength * elev * std::exp(-v.distance / spec.signal_falloff);
    const auto& lat = latents.latents[v.landmark];
    for (std::size_t k = 0; k < d; ++k) o[k] += w * lat[k];
  }
  return o;
}

inline std::vector<double> build_feature_table(const NavGraph& g, const SceneLatents& latents, const WorldSpec& spec,
                                               std::uint64_t seed) {
  const std::size_t d = spec.feature_dim;
  std::vector<double> table(g.node_count() * kViews * d);
  for (NodeIndex u = 0; u < g.node_count(); ++u)
    for (std::size_t v = 0; v < kViews; ++v) {
      auto o = synth_view_features(g, latents, spec, seed, u, v);
      std::copy(o.begin(), o.end(), table.begin() + static_cast<std::ptrdiff_t>((u * kViews + v) * d));
    }
  return table;
}

inline std::string node_name(std::size_t i, std::size_t count) {
  std::size_t width = 1;
  for (std::size_t c = count > 0 ? count - 1 : 0; c >= 10; c /= 10) ++width;
  std::string digits = std::to_string(i);
  return "n" + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

inline SynthWorld assemble_world(std::string world_id, std::uint64_t seed, const WorldSpec& spec, NavGraph graph,
                                 std::vector<std::vector<double>> latent_vectors, std::vector<Position3D> landmark_positions,
                                 std::vector<NodeIndex> anchors) {
  SynthWorld w;
  w.world_id = std::move(world_id);
  w.seed = seed;
  w.spec = spec;
  w.graph = std::move(graph);
  w.latents.dim = spec.feature_dim;
  w.latents.latents = std::move(latent_vectors);
  w.latents.landmark_positions = std::move(landmark_positions);
  w.latents.anchors = std::move(anchors);
  w.latents.visibility = compute_visibility(w.graph, w.latents.landmark_positions, spec.visibility_radius);
  w.geodesics = GeodesicTable(w.graph);
  w.feature_table = build_feature_table(w.graph, w.latents, spec, seed);
  return w;
}

/// Random geometric graph in a square, bridged to a single component, with
/// landmarks and latents. Deterministic for fixed (spec, seed).
inline SynthWorld generate_world(const WorldSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.node_count;

  CounterRng pos_rng(seed, derive_stream({detail::kStreamPositions}));
  std::vector<std::pair<std::string, Position3D>> nodes;
  nodes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos_rng.uniform(0.0, spec.area_side);
    const double y = pos_rng.uniform(0.0, spec.area_side);
    nodes.emplace_back(node_name(i, n), Position3D{x, y, 0.0});
  }

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (euclidean(nodes[a].second, nodes[b].second) < spec.connect_radius) pairs.emplace_back(a, b);

  // Bridge components: repeatedly join the component of node 0 to its
  // nearest outside node.
  std::vector<std::size_t> comp(n);
  auto label = [&] {
    std::vector<std::vector<std::size_t>> adj(n);
    for (auto [a, b] : pairs) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    std::fill(comp.begin(), comp.end(), n);
    std::size_t next = 0;
    for (std::size_t s = 0; s < n; ++s) {
      if (comp[s] != n) continue;
      std::vector<std::size_t> stack{s};
      comp[s] = next;
      while (!stack.empty()) {
        auto u = stack.back();
        stack.pop_back();
        for (auto v : adj[u])
          if (comp[v] == n) {
            comp[v] = next;
            stack.push_back(v);
          }
      }
      ++next;
    }
    return next;
  };
  while (label() > 1) {
    double best = kUnreachable;
    std::pair<std::size_t, std::size_t> bridge{0, 0};
    for (std::size_t a = 0; a < n; ++a) {
      if (comp[a] != comp[0]) continue;
      for (std::size_t b = 0; b < n; ++b) {
        if (comp[b] == comp[0]) continue;
        const double d = euclidean(nodes[a].second, nodes[b].second);
        if (d < best) {
          best = d;
          bridge = {std::min(a, b), std::max(a, b)};
        }
      }
    }
    pairs.push_back(bridge);
  }
  std::sort(pairs.begin(), pairs.end());

  std::vector<std::pair<std::string, std::string>> edges;
  edges.reserve(pairs.size());
  for (auto [a, b] : pairs) edges.emplace_back(nodes[a].first, nodes[b].first);
  NavGraph graph = NavGraph::construct(nodes, edges);

  CounterRng lm_rng(seed, derive_stream({detail::kStreamLandmarks}));
  std::vector<NodeIndex> all(n);
  std::iota(all.begin(), all.end(), 0);
  lm_rng.shuffle(all);
  std::vector<NodeIndex> anchors(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.landmark_count));
  std::vector<Position3D> lm_positions;
  for (NodeIndex a : anchors) {
    const double r = lm_rng.uniform(0.5, 1.0);
    const double theta = lm_rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto& p = graph.position(a);
    lm_positions.push_back({p.x + r * std::cos(theta), p.y + r * std::sin(theta), p.z});
  }

  // Gaussian latents, orthonormalized when they fit in the feature space.
  const std::size_t d = spec.feature_dim;
  CounterRng lat_rng(seed, derive_stream({detail::kStreamLatents}));
  std::vector<std::vector<double>> latents(spec.landmark_count, std::vector<double>(d));
  for (auto& v : latents)
    for (auto& x : v) x = lat_rng.normal();
  const bool orthogonalize = spec.landmark_count <= d;
  for (std::size_t l = 0; l < latents.size(); ++l) {
    if (orthogonalize)
      for (std::size_t m = 0; m < l; ++m) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += latents[l][k] * latents[m][k];
        for (std::size_t k = 0; k < d; ++k) latents[l][k] -= dot * latents[m][k];
      }
    detail::normalize(latents[l]);
  }

  return assemble_world("world-" + std::to_string(seed), seed, spec, std::move(graph), std::move(latents),
                        std::move(lm_positions), std::move(anchors));
}

/// Instruction embedding for a landmark: normalize(latent + noise_scale * g / sqrt(d)).
inline std::vector<double> synth_instruction(const SceneLatents& latents, double noise_scale, std::size_t target_landmark,
                                             std::uint64_t seed) {
  if (target_landmark >= latents.landmark_count())
    fail(ErrorCode::BadLandmarkIndex, "landmark " + std::to_string(target_landmark) + " out of range");
  const auto& lat = latents.latents[target_landmark];
  const std::size_t d = lat.size();
  CounterRng rng(seed, derive_stream({detail::kStreamInstruction, target_landmark}));
  const double scale = noise_scale / std::sqrt(static_cast<double>(d));
  std::vector<double> t(d);
  for (std::size_t k = 0; k < d; ++k) t[k] = lat[k] + scale * rng.normal();
  detail::normalize(t);
  return t;
}

inline std::vector<double> synth_instruction(const SynthWorld& w, std::size_t target_landmark, std::uint64_t seed) {
  return synth_instruction(w.latents, w.spec.noise_scale, target_landmark, seed);
}

struct RolloutOptions {
  double p_overshoot = 0.5;
  double p_undershoot = 0.1;
  std::size_t k_extra = 3;
};

/// Scripted navigation agent: follows the shortest path to the target and then
/// either stops, keeps walking for k_extra steps, or stops one or two nodes early.
inline Path baseline_rollout(const NavGraph& g, std::uint64_t episode_seed, NodeIndex start, NodeIndex target,
                             const RolloutOptions& opt) {
  if (opt.k_extra < 1) fail(ErrorCode::InfeasibleSpec, "k_extra must be at least 1");
  Path route = shortest_path(g, start, target);
  std::vector<NodeIndex> nodes = route.nodes;
  CounterRng rng(episode_seed, derive_stream({detail::kStreamRollout}));
  const double u = rng.uniform();

  if (u < opt.p_overshoot) {
    std::vector<bool> visited(g.node_count(), false);
    for (auto v : nodes) visited[v] = true;
    for (std::size_t step = 0; step < opt.k_extra; ++step) {
      const NodeIndex cur = nodes.back();
      const NodeIndex prev = nodes.size() > 1 ? nodes[nodes.size() - 2] : cur;
      const bool last = step + 1 == opt.k_extra;
      std::vector<NodeIndex> cand;
      for (const auto& nb : g.neighbors(cur))
        if (!visited[nb.node]) cand.push_back(nb.node);
      if (cand.empty())
        for (const auto& nb : g.neighbors(cur))
          if (nb.node != prev && nb.node != target) cand.push_back(nb.node);
      if (cand.empty())
        for (const auto& nb : g.neighbors(cur))
          if (!last || nb.node != target) cand.push_back(nb.node);
      if (cand.empty()) break;
      const NodeIndex next = cand[rng.below(cand.size())];
      visited[next] = true;
      nodes.push_back(next);
    }
  } else if (u < opt.p_overshoot + opt.p_undershoot) {
    const std::size_t drop = 1 + rng.below(2);
    const std::size_t keep = nodes.size() > drop ? nodes.size() - drop : 1;
    nodes.resize(keep);
  }
  return make_path(g, std::move(nodes));
}

// World file: graph + spec + landmarks with their latents.

inline nlohmann::json spec_to_json(const WorldSpec& s) {
  return {{"node_count", s.node_count},
          {"area_side", s.area_side},
          {"connect_radius", s.connect_radius},
          {"landmark_count", s.landmark_count},
          {"feature_dim", s.feature_dim},
          {"signal_strength", s.signal_strength},
          {"noise_scale", s.noise_scale},
          {"visibility_radius", s.visibility_radius},
          {"signal_falloff", s.signal_falloff}};
}

inline WorldSpec spec_from_json(const nlohmann::json& j) {
  WorldSpec s;
  s.node_count = j.at("node_count").get<std::size_t>();
  s.area_side = j.at("area_side").get<double>();
  s.connect_radius = j.at("connect_radius").get<double>();
  s.landmark_count = j.at("landmark_count").get<std::size_t>();
  s.feature_dim = j.at("feature_dim").get<std::size_t>();
  s.signal_strength = j.at("signal_strength").get<double>();
  s.noise_scale = j.at("noise_scale").get<double>();
  s.visibility_radius = j.at("visibility_radius").get<double>();
  s.signal_falloff = j.at("signal_falloff").get<double>();
  return s;
}

inline nlohmann::json world_to_json(const SynthWorld& w) {
  nlohmann::json j = graph_to_json(w.graph);
  j["world_id"] = w.world_id;
  j["seed"] = w.seed;
  j["spec"] = spec_to_json(w.spec);
  nlohmann::json lms = nlohmann::json::array();
  for (std::size_t l = 0; l < w.latents.landmark_count(); ++l) {
    const auto& p = w.latents.landmark_positions[l];
    lms.push_back({{"anchor", w.graph.id(w.latents.anchors[l])},
                   {"x", p.x},
                   {"y", p.y},
                   {"z", p.z},
                   {"latent", w.latents.latents[l]}});
  }
  j["landmarks"] = std::move(lms);
  return j;
}

inline SynthWorld world_from_json(const nlohmann::json& j) {
  try {
    NavGraph g = graph_from_json(j);
    WorldSpec spec = spec_from_json(j.at("spec"));
    std::vector<std::vector<double>> latents;
    std::vector<Position3D> positions;
    std::vector<NodeIndex> anchors;
    for (const auto& l : j.at("landmarks")) {
      anchors.push_back(g.index_of(l.at("anchor").get<std::string>()));
      positions.push_back({l.at("x").get<double>(), l.at("y").get<double>(), l.at("z").get<double>()});
      latents.push_back(l.at("latent").get<std::vector<double>>());
      if (latents.back().size() != spec.feature_dim) fail(ErrorCode::InvariantViolation, "latent dimension mismatch");
      double norm = 0.0;
      for (double x : latents.back()) norm += x * x;
      if (std::abs(std::sqrt(norm) - 1.0) > 1e-9) fail(ErrorCode::InvariantViolation, "latent is not unit norm");
    }
    spec.landmark_count = latents.size();
    return assemble_world(j.at("world_id").get<std::string>(), j.at("seed").get<std::uint64_t>(), spec, std::move(g),
                          std::move(latents), std::move(positions), std::move(anchors));
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::InvariantViolation, std::string("malformed world file: ") + ex.what());
  }
}

}  // namespace trajground
