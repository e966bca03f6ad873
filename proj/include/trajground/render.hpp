#pragma once

// Top-down SVG rendering of a baseline trajectory and its correction. Steps
// that still follow the shortest route to the target are drawn as "success",
// the overshoot after the first deviation as "error", and any nodes the
// correction appends as "return".

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "trajground/error.hpp"
#include "trajground/navgraph.hpp"

namespace trajground {

struct TrajectorySegments {
  std::vector<NodeIndex> success;  // polyline points; fewer than two means the class is empty
  std::vector<NodeIndex> error;
  std::vector<NodeIndex> ret;
};

/// Splits `baseline` at the last step whose running path is a prefix of the
/// shortest path to `target`, and takes whatever `corrected` adds beyond its
/// common prefix with `baseline` as the return segment.
inline TrajectorySegments classify_segments(const NavGraph& g, const Path& baseline, const Path& corrected, NodeIndex target) {
  if (baseline.nodes.empty() || corrected.nodes.empty()) fail(ErrorCode::EmptyPath, "cannot render an empty trajectory");
  const Path route = shortest_path(g, baseline.front(), target);
  std::size_t k = 0;  // last index still on the route
  while (k + 1 < baseline.size() && k + 1 < route.size() && baseline.nodes[k + 1] == route.nodes[k + 1]) ++k;

  TrajectorySegments s;
  s.success.assign(baseline.nodes.begin(), baseline.nodes.begin() + static_cast<std::ptrdiff_t>(k + 1));
  s.error.assign(baseline.nodes.begin() + static_cast<std::ptrdiff_t>(k), baseline.nodes.end());

  std::size_t common = 0;
  while (common < baseline.size() && common < corrected.size() && baseline.nodes[common] == corrected.nodes[common]) ++common;
  if (common > 0 && corrected.size() > common)
    s.ret.assign(corrected.nodes.begin() + static_cast<std::ptrdiff_t>(common - 1), corrected.nodes.end());
  return s;
}

namespace detail {
inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s(buf);
  return s == "-0.00" ? "0.00" : s;
}
}  // namespace detail

/// Returns the SVG document. Output depends only on the inputs.
inline std::string render_trajectory_svg(const NavGraph& g, const Path& baseline, const Path& corrected, NodeIndex target) {
  const TrajectorySegments seg = classify_segments(g, baseline, corrected, target);

  constexpr double kScale = 20.0, kMargin = 20.0;
  double min_x = g.position(0).x, max_x = min_x, min_y = g.position(0).y, max_y = min_y;
  for (NodeIndex i = 0; i < g.node_count(); ++i) {
    const auto& p = g.position(i);
    min_x = std::min(min_x, p.x), max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y), max_y = std::max(max_y, p.y);
  }
  // Flip y so that north is up.
  auto sx = [&](NodeIndex i) { return detail::fmt2(kMargin + (g.position(i).x - min_x) * kScale); };
  auto sy = [&](NodeIndex i) { return detail::fmt2(kMargin + (max_y - g.position(i).y) * kScale); };
  const std::string width = detail::fmt2(2 * kMargin + (max_x - min_x) * kScale);
  const std::string height = detail::fmt2(2 * kMargin + (max_y - min_y) * kScale);

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + width + "\" height=\"" + height + "\" viewBox=\"0 0 " + width +
         " " + height + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n<g class=\"edges\" stroke=\"#c8c8c8\" stroke-width=\"1\">\n";
  for (const auto& e : g.edges())
    out += "<line x1=\"" + sx(e.a) + "\" y1=\"" + sy(e.a) + "\" x2=\"" + sx(e.b) + "\" y2=\"" + sy(e.b) + "\"/>\n";
  out += "</g>\n<g class=\"nodes\" fill=\"#969696\">\n";
  for (NodeIndex i = 0; i < g.node_count(); ++i) out += "<circle cx=\"" + sx(i) + "\" cy=\"" + sy(i) + "\" r=\"2\"/>\n";
  out += "</g>\n";

  auto polyline = [&](const std::vector<NodeIndex>& pts, const char* cls, const char* color, const char* dash) {
    if (pts.size() < 2) return;
    out += std::string("<polyline class=\"") + cls + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"3\"";
    if (*dash) out += std::string(" stroke-dasharray=\"") + dash + "\"";
    out += " points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) out += (i ? " " : "") + sx(pts[i]) + "," + sy(pts[i]);
    out += "\"/>\n";
  };
  polyline(seg.success, "success", "#e6b800", "");
  polyline(seg.error, "error", "#d62728", "");
  polyline(seg.ret, "return", "#2ca02c", "6,3");

  out += "<circle class=\"start\" cx=\"" + sx(baseline.front()) + "\" cy=\"" + sy(baseline.front()) +
         "\" r=\"5\" fill=\"#1f77b4\"/>\n";
  out += "<circle class=\"target\" cx=\"" + sx(target) + "\" cy=\"" + sy(target) +
         "\" r=\"7\" fill=\"none\" stroke=\"#000000\" stroke-width=\"2\"/>\n";
  out += "</svg>\n";
  return out;
}

inline std::string render_trajectory_svg(const NavGraph& g, const Path& baseline, const Path& corrected, NodeIndex target,
                                         const std::filesystem::path& file) {
  std::string svg = render_trajectory_svg(g, baseline, corrected, target);
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open '" + file.string() + "' for writing");
  out << svg;
  if (!out) fail(ErrorCode::IoError, "write to '" + file.string() + "' failed");
  return svg;
}

}  // namespace trajground
