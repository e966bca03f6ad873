#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trajground/error.hpp"

namespace trajground {

using NodeIndex = std::size_t;

struct Position3D {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Position3D&, const Position3D&) = default;
};

inline double euclidean(const Position3D& a, const Position3D& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct Neighbor {
  NodeIndex node;
  double weight;
};

struct Edge {
  NodeIndex a;
  NodeIndex b;
  double weight;
};

/// A path through a NavGraph. `length` is the sum of traversed edge weights
/// accumulated front to back.
struct Path {
  std::vector<NodeIndex> nodes;
  double length = 0.0;

  std::size_t size() const { return nodes.size(); }
  NodeIndex front() const { return nodes.front(); }
  NodeIndex back() const { return nodes.back(); }
  friend bool operator==(const Path&, const Path&) = default;
};

/// Which distance the radius queries use. Benchmarks measure success radii
/// along the graph; straight-line is kept for sensitivity studies.
enum class DistanceMode { Geodesic, Euclidean };

/// Undirected viewpoint graph with Euclidean edge weights. Immutable after
/// construction.
class NavGraph {
 public:
  NavGraph() = default;

  /// Builds a graph from (id, position) pairs and id-pair edges. Edge weights
  /// are the Euclidean distances of the endpoints.
  static NavGraph construct(const std::vector<std::pair<std::string, Position3D>>& nodes,
                            const std::vector<std::pair<std::string, std::string>>& edges) {
    NavGraph g;
    g.ids_.reserve(nodes.size());
    g.positions_.reserve(nodes.size());
    for (const auto& [id, pos] : nodes) {
      if (g.index_.count(id)) fail(ErrorCode::InvariantViolation, "duplicate node id '" + id + "'");
      if (!std::isfinite(pos.x) || !std::isfinite(pos.y) || !std::isfinite(pos.z))
        fail(ErrorCode::InvariantViolation, "non-finite position for node '" + id + "'");
      g.index_.emplace(id, g.ids_.size());
      g.ids_.push_back(id);
      g.positions_.push_back(pos);
    }
    g.adjacency_.assign(g.ids_.size(), {});

    std::vector<std::size_t> order(g.ids_.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return g.ids_[a] < g.ids_[b]; });
    g.rank_.assign(g.ids_.size(), 0);
    for (std::size_t r = 0; r < order.size(); ++r) g.rank_[order[r]] = r;

    for (const auto& [ida, idb] : edges) {
      auto ia = g.index_.find(ida);
      auto ib = g.index_.find(idb);
      if (ia == g.index_.end()) fail(ErrorCode::UnknownEndpoint, "edge endpoint '" + ida + "' is not a node");
      if (ib == g.index_.end()) fail(ErrorCode::UnknownEndpoint, "edge endpoint '" + idb + "' is not a node");
      const NodeIndex a = ia->second, b = ib->second;
      if (a == b) fail(ErrorCode::SelfLoop, "self-loop at '" + ida + "'");
      if (g.edge_weight(a, b)) fail(ErrorCode::DuplicateEdge, "duplicate edge '" + ida + "'-'" + idb + "'");
      const double w = euclidean(g.positions_[a], g.positions_[b]);
      if (!(w > 0.0)) fail(ErrorCode::InvariantViolation, "zero-length edge '" + ida + "'-'" + idb + "'");
      g.adjacency_[a].push_back({b, w});
      g.adjacency_[b].push_back({a, w});
      ++g.edge_count_;
    }
    for (auto& adj : g.adjacency_)
      std::sort(adj.begin(), adj.end(), [&](const Neighbor& x, const Neighbor& y) { return g.rank_[x.node] < g.rank_[y.node]; });
    return g;
  }

  std::size_t node_count() const { return ids_.size(); }
  std::size_t edge_count() const { return edge_count_; }

  bool contains(NodeIndex i) const { return i < ids_.size(); }
  const std::string& id(NodeIndex i) const {
    check(i);
    return ids_[i];
  }
  std::optional<NodeIndex> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  NodeIndex index_of(std::string_view id) const {
    auto found = find(id);
    if (!found) fail(ErrorCode::UnknownNode, "no node with id '" + std::string(id) + "'");
    return *found;
  }
  const Position3D& position(NodeIndex i) const {
    check(i);
    return positions_[i];
  }
  /// Neighbors ordered by lexicographic rank of their ids.
  std::span<const Neighbor> neighbors(NodeIndex i) const {
    check(i);
    return adjacency_[i];
  }
  /// Position of the node in lexicographic id order.
  std::size_t rank(NodeIndex i) const {
    check(i);
    return rank_[i];
  }
  std::optional<double> edge_weight(NodeIndex a, NodeIndex b) const {
    check(a);
    check(b);
    for (const auto& n : adjacency_[a])
      if (n.node == b) return n.weight;
    return std::nullopt;
  }
  bool adjacent(NodeIndex a, NodeIndex b) const { return edge_weight(a, b).has_value(); }

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    out.reserve(edge_count_);
    for (NodeIndex a = 0; a < adjacency_.size(); ++a)
      for (const auto& n : adjacency_[a])
        if (a < n.node) out.push_back({a, n.node, n.weight});
    return out;
  }

  void check(NodeIndex i) const {
    if (i >= ids_.size()) fail(ErrorCode::UnknownNode, "node index " + std::to_string(i) + " out of range");
  }

 private:
  std::vector<std::string> ids_;
  std::vector<Position3D> positions_;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<std::size_t> rank_;
  std::unordered_map<std::string, NodeIndex> index_;
  std::size_t edge_count_ = 0;
};

inline constexpr double kUnreachable = std::numeric_limits<double>::infinity();

/// Single-source Dijkstra; unreachable nodes get kUnreachable.
inline std::vector<double> distances_from(const NavGraph& g, NodeIndex source) {
  g.check(source);
  std::vector<double> dist(g.node_count(), kUnreachable);
  using Item = std::pair<double, NodeIndex>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (const auto& n : g.neighbors(u)) {
      const double nd = d + n.weight;
      if (nd < dist[n.node]) {
        dist[n.node] = nd;
        heap.emplace(nd, n.node);
      }
    }
  }
  return dist;
}

/// Sum of edge weights along `nodes`, front to back. Throws NoPath if two
/// consecutive nodes are not adjacent.
inline double path_length(const NavGraph& g, std::span<const NodeIndex> nodes) {
  double len = 0.0;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    auto w = g.edge_weight(nodes[i - 1], nodes[i]);
    if (!w) fail(ErrorCode::NoPath, "nodes '" + g.id(nodes[i - 1]) + "' and '" + g.id(nodes[i]) + "' are not adjacent");
    len += *w;
  }
  return len;
}

inline Path make_path(const NavGraph& g, std::vector<NodeIndex> nodes) {
  Path p;
  p.length = path_length(g, nodes);
  p.nodes = std::move(nodes);
  return p;
}

/// Minimum-weight path from a to b. Among equal-cost paths the
/// lexicographically smallest id sequence is returned.
inline Path shortest_path(const NavGraph& g, NodeIndex a, NodeIndex b) {
  g.check(a);
  g.check(b);
  if (a == b) return Path{{a}, 0.0};
  const auto to_b = distances_from(g, b);
  if (to_b[a] == kUnreachable)
    fail(ErrorCode::NoPath, "no path from '" + g.id(a) + "' to '" + g.id(b) + "'");

  // Walk forward, at each node taking the smallest-ranked neighbor that stays
  // on some shortest path. Neighbors are pre-sorted by rank.
  std::vector<NodeIndex> nodes{a};
  NodeIndex u = a;
  while (u != b) {
    const double du = to_b[u];
    const double tol = 1e-9 * std::max(1.0, du);
    NodeIndex next = u;
    for (const auto& n : g.neighbors(u)) {
      if (to_b[n.node] == kUnreachable) continue;
      if (std::abs(n.weight + to_b[n.node] - du) <= tol && to_b[n.node] < du) {
        next = n.node;
        break;
      }
    }
    if (next == u) fail(ErrorCode::NoPath, "shortest-path reconstruction stalled at '" + g.id(u) + "'");
    nodes.push_back(next);
    u = next;
  }
  return make_path(g, std::move(nodes));
}

inline double geodesic(const NavGraph& g, NodeIndex a, NodeIndex b) { return shortest_path(g, a, b).length; }

/// All nodes u with distance(center, u) <= radius, sorted by index.
inline std::vector<NodeIndex> nodes_within(const NavGraph& g, NodeIndex center, double radius,
                                           DistanceMode mode = DistanceMode::Geodesic) {
  g.check(center);
  if (radius < 0.0 || std::isnan(radius)) fail(ErrorCode::NegativeRadius, "radius " + std::to_string(radius));
  std::vector<NodeIndex> out;
  const double slack = 1e-12 * (1.0 + radius);
  if (mode == DistanceMode::Geodesic) {
    const auto dist = distances_from(g, center);
    for (NodeIndex u = 0; u < g.node_count(); ++u)
      if (dist[u] <= radius + slack) out.push_back(u);
  } else {
    for (NodeIndex u = 0; u < g.node_count(); ++u)
      if (euclidean(g.position(center), g.position(u)) <= radius + slack) out.push_back(u);
  }
  return out;
}

/// All-pairs geodesic cache for repeated metric queries on small graphs.
class GeodesicTable {
 public:
  GeodesicTable() = default;
  explicit GeodesicTable(const NavGraph& g) : n_(g.node_count()), dist_(n_ * n_) {
    for (NodeIndex s = 0; s < n_; ++s) {
      auto row = distances_from(g, s);
      std::copy(row.begin(), row.end(), dist_.begin() + static_cast<std::ptrdiff_t>(s * n_));
    }
  }

  double operator()(NodeIndex a, NodeIndex b) const {
    if (a >= n_ || b >= n_) fail(ErrorCode::UnknownNode, "node index out of range");
    const double d = dist_[a * n_ + b];
    if (d == kUnreachable) fail(ErrorCode::NoPath, "nodes " + std::to_string(a) + " and " + std::to_string(b) + " are disconnected");
    return d;
  }
  bool connected(NodeIndex a, NodeIndex b) const { return dist_.at(a * n_ + b) != kUnreachable; }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> dist_;
};

inline bool is_connected(const NavGraph& g) {
  if (g.node_count() == 0) return true;
  std::vector<bool> seen(g.node_count(), false);
  std::vector<NodeIndex> stack{0};
  seen[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    NodeIndex u = stack.back();
    stack.pop_back();
    for (const auto& n : g.neighbors(u))
      if (!seen[n.node]) {
        seen[n.node] = true;
        ++count;
        stack.push_back(n.node);
      }
  }
  return count == g.node_count();
}

// World-file (de)serialization of the geometric part:
//   {"nodes": [{"id", "x", "y", "z"}], "edges": [[id, id], ...]}

inline nlohmann::json graph_to_json(const NavGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (NodeIndex i = 0; i < g.node_count(); ++i) {
    const auto& p = g.position(i);
    nodes.push_back({{"id", g.id(i)}, {"x", p.x}, {"y", p.y}, {"z", p.z}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({g.id(e.a), g.id(e.b)});
  return {{"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

inline NavGraph graph_from_json(const nlohmann::json& j) {
  try {
    std::vector<std::pair<std::string, Position3D>> nodes;
    for (const auto& n : j.at("nodes"))
      nodes.emplace_back(n.at("id").get<std::string>(),
                         Position3D{n.at("x").get<double>(), n.at("y").get<double>(), n.at("z").get<double>()});
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) fail(ErrorCode::InvariantViolation, "edge entries must be [id, id]");
      edges.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
    }
    return NavGraph::construct(nodes, edges);
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::InvariantViolation, std::string("malformed world graph: ") + ex.what());
  }
}

}  // namespace trajground
