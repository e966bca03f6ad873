// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit when any
// criterion fails. Tolerances are pinned below; oracles are independent of
// the library code they check.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "trajground/trajground.hpp"

using namespace trajground;

namespace {

const fs::path kSource = TRAJGROUND_SOURCE_DIR;

constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kSoftmaxTolerance = 1e-9;
constexpr double kConvexSlack = 1e-12;
constexpr double kPermutationTolerance = 1e-12;
constexpr double kDiceTolerance = 1e-6;
constexpr double kFocalValue = 0.0433217;
constexpr double kFocalTolerance = 1e-7;
constexpr double kBceTolerance = 1e-12;
constexpr double kNdtwTolerance = 1e-12;
constexpr double kFinalPositiveLimit = 0.9;
constexpr double kGapFloor = 0.15;
constexpr double kRecoveryFloor = 0.6;
constexpr double kGapRunSeconds = 900.0;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool passed = true;
  std::ostringstream detail;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (passed) detail << " first failure: " << what << ";";
      passed = false;
    }
  }
};

int failures = 0;

void report(int n, const std::string& title, Verdict& v) {
  std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << n << " (" << title << "):" << v.detail.str() << std::endl;
  failures += v.passed ? 0 : 1;
}

template <class F>
void run_criterion(int n, const std::string& title, F&& body) {
  Verdict v;
  try {
    body(v);
  } catch (const std::exception& e) {
    v.check(false, std::string("exception: ") + e.what());
  }
  report(n, title, v);
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> floyd_warshall(const NavGraph& g) {
  const std::size_t n = g.node_count();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, kUnreachable));
  for (NodeIndex i = 0; i < n; ++i) {
    d[i][i] = 0;
    for (const auto& nb : g.neighbors(i)) d[i][nb.node] = nb.weight;
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  return d;
}

double naive_ndtw(const std::vector<std::vector<double>>& dist, const std::vector<NodeIndex>& q, const std::vector<NodeIndex>& r,
                  double th) {
  const std::size_t n = r.size(), m = q.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> D(n + 1, std::vector<double>(m + 1, inf));
  D[0][0] = 0;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) D[i][j] = dist[r[i - 1]][q[j - 1]] + std::min({D[i - 1][j], D[i][j - 1], D[i - 1][j - 1]});
  return std::exp(-D[n][m] / (static_cast<double>(n) * th));
}

double reference_bce(const std::vector<double>& p, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += y[i] == 1.0 ? -std::log(p[i]) : -std::log(1.0 - p[i]);
  return s / static_cast<double>(p.size());
}

std::vector<NodeIndex> random_walk(const NavGraph& g, NodeIndex start, std::size_t steps, CounterRng& rng) {
  std::vector<NodeIndex> p{start};
  for (std::size_t i = 0; i < steps; ++i) {
    const auto& nb = g.neighbors(p.back());
    if (nb.empty()) break;
    p.push_back(nb[rng.below(nb.size())].node);
  }
  return p;
}

ModelConfig tiny_model(std::size_t feature_dim) {
  ModelConfig c;
  c.d = 8;
  c.feature_dim = feature_dim;
  c.heads = 2;
  c.layers_elevation = c.layers_spatial_temporal = c.layers_selection = 1;
  c.max_T = 15;
  return c;
}

TrajectorySample<double> random_sample(std::size_t steps, std::size_t dv, std::uint64_t seed) {
  CounterRng rng(seed, 77);
  TrajectorySample<double> s;
  s.features = num::normal_tensor<double>(Shape{steps, kViews, dv}, 0.3, rng);
  s.t_cls = num::normal_tensor<double>(Shape{dv}, 0.3, rng);
  s.labels.assign(steps, 0.0);
  s.labels[rng.below(steps)] = 1.0;
  return s;
}

void jitter(ParamStore<double>& ps, std::uint64_t seed) {
  CounterRng rng(seed, 5);
  for (auto& p : ps)
    for (auto& v : p.value.values()) v += 0.05 * rng.normal();
}

RunConfig gap_config(const std::string& out_dir, const std::vector<std::string>& overrides = {}) {
  auto j = load_config_json(kSource / "configs" / "gap.json");
  apply_override(j, "paths.out_dir=\"" + out_dir + "\"");
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// Corrected SPL per episode recomputed from the run's artifacts, independent
// of the report writer.
struct SplCheck {
  std::size_t episodes = 0, crop_ge_return = 0;
};

SplCheck recompute_spl(const fs::path& dir, const std::string& split_file) {
  auto world = world_from_json(nlohmann::json::parse(read_file(dir / artifact::kWorld)));
  auto episodes = read_episodes(dir / split_file, world.graph);
  auto preds = align_predictions(episodes, read_predictions(dir / artifact::kPredictions));
  auto fw = floyd_warshall(world.graph);
  SplCheck out;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    const Path traj = make_path(world.graph, e.path);
    auto spl = [&](const Path& p) {
      const double d_stop = fw[p.back()][e.target];
      if (d_stop > kSuccessRadius) return 0.0;
      const double shortest = fw[e.start][e.target];
      return shortest / std::max(shortest, p.length);
    };
    const double r = spl(correct_return(world.graph, traj, preds[i]));
    const double c = spl(correct_crop(world.graph, traj, preds[i]));
    ++out.episodes;
    out.crop_ge_return += c >= r - 1e-12 ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

void criterion_gradients(Verdict& v) {
  const auto t0 = Clock::now();
  auto cfg = tiny_model(8);
  cfg.max_T = 3;
  auto ps = init_params<double>(cfg, 7);
  jitter(ps, 7);
  auto s = random_sample(3, 8, 7);
  s.labels = {0.0, 1.0, 0.0};
  auto rep = num::grad_check(ps, [&](ParamStore<double>& p, bool with_grad) {
    Graph<double> g(&p);
    Var loss = total_loss(g, forward(g, s, cfg), s.labels, LossConfig{});
    if (with_grad) g.backward(loss);
    return g.value(loss)[0];
  });
  const double secs = seconds_since(t0);
  v.detail << " entries=" << rep.entries.size() << " worst_rel_err=" << rep.worst << " (" << rep.worst_name << ") runtime=" << secs << "s;";
  v.check(rep.worst < kGradTolerance, "relative error");
  v.check(secs < kGradSeconds, "runtime");
}

void criterion_shapes(Verdict& v) {
  std::size_t failures_seen = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto cfg = tiny_model(8);
    auto ps = init_params<double>(cfg, seed);
    jitter(ps, seed);
    CounterRng rng(seed, 901);
    const std::size_t T = 1 + rng.below(15);
    auto s = random_sample(T, 8, seed);
    bool ok = true;

    Graph<double> g(&ps);
    Var o = embed_trajectory(g, g.constant(s.features), cfg);
    ok &= g.value(o).shape() == Shape{T * kViews, 8};
    Var f = fuse_text_vision(g, o, g.constant(s.t_cls), cfg);
    ok &= g.value(f).shape() == Shape{T * kViews, 8};
    Var he = elevation_fuse(g, f, cfg);
    ok &= g.value(he).shape() == Shape{T * kHeadings, 8};
    Var hs = spatial_temporal(g, he, cfg);
    ok &= g.value(hs).shape() == Shape{T * kHeadings, 8};
    Var q = target_select(g, hs, cfg);
    ok &= g.value(q).shape() == Shape{T, 8};
    Var p = predict(g, q, cfg);
    ok &= g.value(p).shape() == Shape{T};

    // Softmax rows sum to one.
    auto logits = num::normal_tensor<double>(Shape{1 + rng.below(6), 1 + rng.below(20)}, 10.0, rng);
    auto sm = num::softmax(logits);
    for (std::size_t r = 0; r < sm.rows(); ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < sm.cols(); ++c) sum += sm.at(r, c);
      ok &= std::abs(sum - 1.0) <= kSoftmaxTolerance;
    }

    // Attention outputs lie in the per-channel hull of the values.
    const std::size_t nq = 1 + rng.below(5), nk = 1 + rng.below(12), d = 1 + rng.below(6);
    auto Q = num::normal_tensor<double>(Shape{nq, d}, 2.0, rng), K = num::normal_tensor<double>(Shape{nk, d}, 2.0, rng);
    auto V = num::normal_tensor<double>(Shape{nk, d}, 1.0, rng);
    auto out = num::scaled_attention(Q, K, V);
    for (std::size_t c = 0; c < d; ++c) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t j = 0; j < nk; ++j) lo = std::min(lo, V.at(j, c)), hi = std::max(hi, V.at(j, c));
      for (std::size_t r = 0; r < nq; ++r) ok &= out.at(r, c) >= lo - kConvexSlack && out.at(r, c) <= hi + kConvexSlack;
    }

    // Permuting the three elevations of every heading leaves the fused tokens unchanged.
    auto x = g.value(f);
    auto y = x;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<std::size_t> perm{0, 1, 2};
      rng.shuffle(perm);
      for (std::size_t e = 0; e < kElevations; ++e)
        for (std::size_t h = 0; h < kHeadings; ++h)
          for (std::size_t c = 0; c < 8; ++c) y.at(t * kViews + e * kHeadings + h, c) = x.at(t * kViews + perm[e] * kHeadings + h, c);
    }
    Graph<double> g2(&ps);
    auto a = g2.value(elevation_fuse(g2, g2.constant(x), cfg));
    auto b = g2.value(elevation_fuse(g2, g2.constant(y), cfg));
    for (std::size_t i = 0; i < a.size(); ++i) ok &= std::abs(a[i] - b[i]) <= kPermutationTolerance;

    failures_seen += ok ? 0 : 1;
  }
  v.detail << " seeds=200 failures=" << failures_seen << ";";
  v.check(failures_seen == 0, "shape/normalization suite");
}

void criterion_loss(Verdict& v) {
  LossConfig c;
  const double dice_self = dice_loss<double>(std::vector<double>{1, 0, 1, 1}, std::vector<double>{1, 0, 1, 1}, c);
  const double focal_one = focal_loss<double>(std::vector<double>{1.0}, std::vector<double>{1.0}, c);
  const double focal_half = focal_loss<double>(std::vector<double>{0.5}, std::vector<double>{1.0}, c);
  v.detail << " dice(y=p)=" << dice_self << " focal(1,1)=" << focal_one << " focal(0.5,1)=" << focal_half;
  v.check(std::abs(dice_self) <= kDiceTolerance, "dice(y=p)");
  v.check(focal_one == 0.0, "focal(y=1,p=1)");
  v.check(std::abs(focal_half - kFocalValue) <= kFocalTolerance, "focal(y=1,p=0.5)");
  LossConfig half;
  half.gamma = 0;
  half.alpha = 0.5;
  CounterRng rng(13, 13);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(15);
    std::vector<double> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = rng.uniform(0.02, 0.98), y[i] = rng.coin(0.3) ? 1.0 : 0.0;
    worst = std::max(worst, std::abs(focal_loss<double>(p, y, half) - 0.5 * reference_bce(p, y)));
  }
  v.detail << " max|focal-0.5*bce|=" << worst << ";";
  v.check(worst <= kBceTolerance, "focal vs half BCE");
}

void criterion_metrics(Verdict& v) {
  std::size_t sp_mismatch = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto g = test_support::lattice_graph(seed, 25);
    auto fw = floyd_warshall(g);
    for (NodeIndex a = 0; a < g.node_count(); ++a)
      for (NodeIndex b = 0; b < g.node_count(); ++b) {
        if (fw[a][b] == kUnreachable) {
          try {
            shortest_path(g, a, b);
            ++sp_mismatch;
          } catch (const Error& e) {
            sp_mismatch += e.code() == ErrorCode::NoPath ? 0 : 1;
          }
          continue;
        }
        const auto p = shortest_path(g, a, b);
        sp_mismatch += p.length == fw[a][b] && p.front() == a && p.back() == b ? 0 : 1;
      }
  }

  auto world = generate_world(WorldSpec{}, 5);
  auto fw = floyd_warshall(world.graph);
  CounterRng rng(2, 2);
  double ndtw_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_walk(world.graph, rng.below(world.graph.node_count()), 1 + rng.below(10), rng);
    auto b = random_walk(world.graph, rng.below(world.graph.node_count()), 1 + rng.below(10), rng);
    ndtw_err = std::max(ndtw_err, std::abs(ndtw(world.geodesics, a, b) - naive_ndtw(fw, a, b, kSuccessRadius)));
  }

  std::size_t violations = 0, episodes = 0;
  while (episodes < 1000) {
    const NodeIndex start = rng.below(world.graph.node_count());
    auto path = random_walk(world.graph, start, 2 + rng.below(10), rng);
    const NodeIndex target = rng.coin(0.6) ? path[rng.below(path.size())] : static_cast<NodeIndex>(rng.below(world.graph.node_count()));
    if (target == start) continue;
    ++episodes;
    auto r = episode_metrics(world.graph, make_path(world.graph, path), start, target);
    const bool ok = r.success <= r.oracle_success && r.SPL <= r.success && r.sDTW == r.success * r.nDTW;
    violations += ok ? 0 : 1;
  }
  v.detail << " shortest_path_mismatches=" << sp_mismatch << " max_ndtw_err=" << ndtw_err << " invariant_violations=" << violations
           << "/1000;";
  v.check(sp_mismatch == 0, "shortest path oracle");
  v.check(ndtw_err <= kNdtwTolerance, "ndtw oracle");
  v.check(violations == 0, "metric invariants");
}

void criterion_dataset(Verdict& v) {
  auto world = generate_world(WorldSpec{}, 11);
  auto fw = floyd_warshall(world.graph);
  DatasetOptions opt;
  opt.train_episodes = 1000;
  opt.val_episodes = 1;
  opt.test_episodes = 1;
  auto ds = build_dataset(world, opt, 11);
  std::size_t bad = 0, final_positive = 0, over_budget = 0;
  for (const auto& e : ds.train) {
    bool ok = !e.positive_steps.empty() && e.path.size() >= 2;
    for (std::size_t i = 1; i < e.path.size(); ++i) ok &= world.graph.adjacent(e.path[i - 1], e.path[i]);
    for (auto s : e.positive_steps) ok &= s < e.path.size() && fw[e.path[s]][e.target] <= kSuccessRadius + 1e-9;
    ok &= e.path.front() == e.start;
    bad += ok ? 0 : 1;
    if (!e.positive_steps.empty()) {
      final_positive += e.positive_steps.back() == e.path.size() - 1 ? 1 : 0;
      // Length walked after the last positive step is the expansion.
      double tail = 0;
      for (std::size_t i = e.positive_steps.back() + 1; i < e.path.size(); ++i) tail += fw[e.path[i - 1]][e.path[i]];
      over_budget += tail > opt.expansion_budget + 1e-9 ? 1 : 0;
    }
  }
  const double frac = static_cast<double>(final_positive) / static_cast<double>(ds.train.size());
  v.detail << " trajectories=" << ds.train.size() << " invariant_failures=" << bad << " final_positive_fraction=" << frac
           << " over_budget=" << over_budget << ";";
  v.check(ds.train.size() == 1000, "count");
  v.check(bad == 0, "adjacency/positive invariants");
  v.check(frac < kFinalPositiveLimit, "final-step-positive fraction");
  v.check(over_budget == 0, "expansion budget");
}

void criterion_gap_phenomenon(Verdict& v) {
  WorldSpec spec;
  spec.node_count = 60;
  auto world = generate_world(spec, 7);
  auto fw = floyd_warshall(world.graph);
  DatasetOptions opt;
  opt.train_episodes = 1;
  opt.val_episodes = 1;
  opt.test_episodes = 200;
  opt.rollout.p_overshoot = 0.5;
  opt.rollout.k_extra = 3;
  auto ds = build_dataset(world, opt, 7);
  std::size_t sr = 0, osr = 0;
  for (const auto& e : ds.test) {
    sr += fw[e.path.back()][e.target] <= kSuccessRadius ? 1 : 0;
    bool any = false;
    for (auto n : e.path) any |= fw[n][e.target] <= kSuccessRadius;
    osr += any ? 1 : 0;
  }
  const double n = static_cast<double>(ds.test.size());
  const double gap = (static_cast<double>(osr) - static_cast<double>(sr)) / n;
  v.detail << " episodes=" << ds.test.size() << " SR=" << sr / n << " OSR=" << osr / n << " gap=" << gap << ";";
  v.check(ds.test.size() == 200, "episode count");
  v.check(gap >= kGapFloor, "gap");
}

struct FullRun {
  nlohmann::json report;
  double seconds = 0;
  bool ok = false;
};

FullRun run_full(const std::string& out_dir, const std::vector<std::string>& overrides = {}) {
  auto cfg = gap_config(out_dir, overrides);
  fs::remove_all(cfg.out_dir);
  const auto t0 = Clock::now();
  RunContext ctx(cfg);
  FullRun r;
  r.report = run_pipeline(ctx);
  r.seconds = seconds_since(t0);
  r.ok = true;
  return r;
}

FullRun full_model;

void criterion_gap_closing(Verdict& v) {
  auto cfg = gap_config("accept-gap");
  v.check(cfg.model.d == 32 && cfg.model.heads == 4 && cfg.model.layers_elevation == 2 && cfg.model.layers_spatial_temporal == 2 &&
              cfg.model.layers_selection == 2 && cfg.train.iterations == 5000 && cfg.train.batch_size == 16 && cfg.seed == 7 &&
              cfg.data.train_episodes == 500 && cfg.data.test_episodes == 100 && cfg.eval.split == "test",
          "configs/gap.json settings");
  full_model = run_full("accept-gap");
  const auto& r = full_model.report;
  const double recovery = r["return"]["gap_recovery"].get<double>();
  const double base_osr = r["baseline"]["OSR"].get<double>(), ret_osr = r["return"]["OSR"].get<double>();
  auto spl = recompute_spl("accept-gap", artifact::kTest);
  v.detail << " baseline SR=" << r["baseline"]["SR"] << " OSR=" << base_osr << " gap=" << r["baseline"]["gap"] << "; return SR="
           << r["return"]["SR"] << " OSR=" << ret_osr << " recovery=" << recovery << "; crop SPL>=return SPL in " << spl.crop_ge_return << "/"
           << spl.episodes << " episodes; runtime=" << full_model.seconds << "s;";
  v.check(r["episodes"].get<std::size_t>() == 100, "episode count");
  v.check(recovery >= kRecoveryFloor, "gap recovery");
  v.check(ret_osr == base_osr, "OSR unchanged");
  v.check(spl.episodes == 100 && spl.crop_ge_return == spl.episodes, "crop SPL >= return SPL");
  v.check(r["crop_spl_ge_return_fraction"].get<double>() == 1.0, "reported crop SPL fraction");
  v.check(full_model.seconds < kGapRunSeconds, "runtime");
}

void criterion_ablation(Verdict& v) {
  if (!full_model.ok) full_model = run_full("accept-gap");
  const double full_sr = full_model.report["return"]["SR"].get<double>();
  v.detail << " full return SR=" << full_sr << ";";
  std::vector<std::pair<std::string, double>> deltas;
  double elevation_sr = 0;
  for (const char* component : {"elevation", "st", "selection"}) {
    auto r = run_full(std::string("accept-no-") + component, {std::string("model.") + component + "_on=false"});
    const double sr = r.report["return"]["SR"].get<double>();
    if (std::string(component) == "elevation") elevation_sr = sr;
    deltas.emplace_back(component, full_sr - sr);
    v.detail << " no-" << component << " return SR=" << sr << " delta=" << full_sr - sr << ";";
  }
  std::stable_sort(deltas.begin(), deltas.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  v.detail << " drop ordering:";
  for (const auto& [name, d] : deltas) v.detail << " " << name;
  v.detail << ";";
  v.check(elevation_sr <= full_sr, "elevation-off corrected SR <= full");
}

void criterion_determinism(Verdict& v) {
  auto j = load_config_json(kSource / "configs" / "smoke.json");
  std::vector<std::string> bytes;
  for (const char* dir : {"accept-det-a", "accept-det-b"}) {
    auto jj = j;
    apply_override(jj, std::string("paths.out_dir=\"") + dir + "\"");
    auto cfg = config_from_json(jj);
    fs::remove_all(cfg.out_dir);
    RunContext ctx(cfg);
    run_pipeline(ctx);
    bytes.push_back(read_file(fs::path(dir) / artifact::kReport));
  }
  v.detail << " report bytes " << bytes[0].size() << " vs " << bytes[1].size() << " sha256 " << sha256_hex(bytes[0]).substr(0, 16) << " vs "
           << sha256_hex(bytes[1]).substr(0, 16) << ";";
  v.check(!bytes[0].empty() && bytes[0] == bytes[1], "byte-identical report.json");
}

}  // namespace

int main() {
  run_criterion(1, "end-to-end gradient check", criterion_gradients);
  run_criterion(2, "shape and normalization suite", criterion_shapes);
  run_criterion(3, "loss unit values", criterion_loss);
  run_criterion(4, "metric oracles", criterion_metrics);
  run_criterion(5, "dataset builder", criterion_dataset);
  run_criterion(6, "synthetic gap phenomenon", criterion_gap_phenomenon);
  run_criterion(9, "pipeline determinism", criterion_determinism);
  run_criterion(7, "gap closing", criterion_gap_closing);
  run_criterion(8, "ablation direction", criterion_ablation);
  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
