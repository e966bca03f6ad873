#pragma once

// Shared fixtures for the test binaries.

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "trajground/error.hpp"
#include "trajground/navgraph.hpp"
#include "trajground/rng.hpp"

#define EXPECT_THROW_CODE(stmt, expected_code)                                        \
  do {                                                                                \
    try {                                                                             \
      (void)(stmt);                                                                   \
      ADD_FAILURE() << "expected " << ::trajground::to_string(expected_code);         \
    } catch (const ::trajground::Error& e_) {                                         \
      EXPECT_EQ(e_.code(), expected_code) << e_.what();                               \
    }                                                                                 \
  } while (0)

namespace test_support {

using trajground::NavGraph;
using trajground::Position3D;

inline std::string letter_id(std::size_t i) {
  std::string s;
  do {
    s.insert(s.begin(), static_cast<char>('a' + i % 26));
    i /= 26;
  } while (i > 0 && s.size() < 8);
  return s;
}

/// Straight chain a-b-c-... along x with the given spacing.
inline NavGraph chain(std::size_t n, double spacing) {
  std::vector<std::pair<std::string, Position3D>> nodes;
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i < n; ++i) {
    nodes.push_back({letter_id(i), {spacing * static_cast<double>(i), 0, 0}});
    if (i) edges.push_back({letter_id(i - 1), letter_id(i)});
  }
  return NavGraph::construct(nodes, edges);
}

/// Random subgraph of a 6x6 integer lattice: `n` distinct points, each
/// axis-aligned unit edge kept with probability 0.7. Weights are exactly 1.
inline NavGraph lattice_graph(std::uint64_t seed, std::size_t n) {
  trajground::CounterRng rng(seed, trajground::derive_stream({0x6c6174}));
  std::vector<std::pair<int, int>> cells;
  for (int x = 0; x < 6; ++x)
    for (int y = 0; y < 6; ++y) cells.push_back({x, y});
  rng.shuffle(cells);
  cells.resize(std::min(n, cells.size()));
  std::vector<std::pair<std::string, Position3D>> nodes;
  for (std::size_t i = 0; i < cells.size(); ++i)
    nodes.push_back({"n" + std::to_string(100 + i), {double(cells[i].first), double(cells[i].second), 0}});
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (std::size_t j = i + 1; j < cells.size(); ++j) {
      const int dx = std::abs(cells[i].first - cells[j].first), dy = std::abs(cells[i].second - cells[j].second);
      if (dx + dy == 1 && rng.coin(0.7)) edges.push_back({nodes[i].first, nodes[j].first});
    }
  return NavGraph::construct(nodes, edges);
}

/// Uniform points in a square, connected when closer than `radius`.
inline NavGraph random_geometric_graph(std::uint64_t seed, std::size_t n, double side, double radius) {
  trajground::CounterRng rng(seed, trajground::derive_stream({0x726767}));
  std::vector<std::pair<std::string, Position3D>> nodes;
  for (std::size_t i = 0; i < n; ++i) nodes.push_back({"v" + std::to_string(100 + i), {rng.uniform(0, side), rng.uniform(0, side), 0}});
  std::vector<std::pair<std::string, std::string>> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (trajground::euclidean(nodes[i].second, nodes[j].second) < radius) edges.push_back({nodes[i].first, nodes[j].first});
  return NavGraph::construct(nodes, edges);
}

}  // namespace test_support
