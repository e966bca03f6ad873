#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>

#include "support.hpp"
#include "trajground/numerics/checkpoint.hpp"
#include "trajground/numerics/grad_check.hpp"
#include "trajground/numerics/graph.hpp"
#include "trajground/numerics/layers.hpp"

using namespace trajground;
using namespace trajground::num;

namespace {

using Build = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

Tensor<double> random_tensor(Shape s, CounterRng& rng, double scale = 1.0) { return normal_tensor<double>(std::move(s), scale, rng); }

// Checks the op's gradients by contracting its output with fixed random
// weights and running the finite-difference oracle over every input.
GradCheckReport check_op(std::uint64_t seed, const std::vector<Shape>& inputs, const Build& build) {
  CounterRng rng(seed, 1);
  ParamStore<double> ps;
  for (std::size_t i = 0; i < inputs.size(); ++i) ps.add("in" + std::to_string(i), random_tensor(inputs[i], rng));
  auto objective = [&](ParamStore<double>& p, bool with_grad) {
    Graph<double> g(&p);
    std::vector<Var> vs;
    for (std::size_t i = 0; i < p.size(); ++i) vs.push_back(g.param(p[i].name));
    Var out = build(g, vs);
    CounterRng wr(seed, 2);
    Var w = g.constant(random_tensor(g.value(out).shape(), wr));
    Var loss = sum(g, mul(g, out, w));
    if (with_grad) g.backward(loss);
    return g.value(loss)[0];
  };
  return grad_check(ps, objective);
}

std::size_t dim_in(CounterRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace

TEST(Linear, Examples) {
  Graph<double> g;
  Var x = g.constant(Tensor<double>({1, 2}, {1, 2}));
  Var w = g.constant(Tensor<double>({2, 2}, {1, 0, 0, 2}));
  Var b = g.constant(Tensor<double>({2}, {0, 1}));
  EXPECT_EQ(g.value(linear(g, x, w, b)).to_vector(), (std::vector<double>{1, 5}));
  Var eye = g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(g.value(linear(g, x, eye, g.constant(Tensor<double>({2})))).to_vector(), (std::vector<double>{1, 2}));
  Var zero = g.constant(Tensor<double>({3, 2}));
  auto out = g.value(linear(g, zero, w, b));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(out.at(r, 0), 0.0);
    EXPECT_EQ(out.at(r, 1), 1.0);
  }
  EXPECT_THROW_CODE(linear(g, g.constant(Tensor<double>({1, 3})), w, b), ErrorCode::ShapeMismatch);
}

TEST(Softmax, Examples) {
  auto u = softmax(Tensor<double>({4}, {3, 3, 3, 3}));
  for (double v : u.values()) EXPECT_NEAR(v, 0.25, 1e-15);
  auto p = softmax(Tensor<double>({2}, {0.0, std::log(2.0)}));
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
  EXPECT_THROW_CODE(softmax(Tensor<double>(Shape{2, 0})), ErrorCode::EmptyAxis);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  CounterRng rng(3, 0);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_tensor({4, 7}, rng, 30.0);
    auto p = softmax(v);
    auto shifted = v;
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 7; ++c) shifted.at(r, c) += 1000.0 * static_cast<double>(r + 1);
    auto q = softmax(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.at(r, c), 0.0);
        EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    ASSERT_TRUE(q.all_finite());
  }
}

TEST(ScaledAttention, Examples) {
  CounterRng rng(5, 0);
  auto Q = random_tensor({3, 4}, rng);
  auto V1 = random_tensor({1, 4}, rng);
  auto one = scaled_attention(Q, random_tensor({1, 4}, rng), V1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(one.at(r, c), V1.at(0, c), 1e-15);

  Tensor<double> Ksame({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  auto V = random_tensor({3, 4}, rng);
  auto mean = scaled_attention(Q, Ksame, V);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(mean.at(r, c), (V.at(0, c) + V.at(1, c) + V.at(2, c)) / 3.0, 1e-12);

  // Hand evaluation: each row weights its own key by e^{1/sqrt 2}.
  Tensor<double> I({2, 2}, {1, 0, 0, 1});
  auto out = scaled_attention(I, I, I);
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double hi = e / (e + 1.0), lo = 1.0 / (e + 1.0);
  EXPECT_NEAR(out.at(0, 0), hi, 1e-15);
  EXPECT_NEAR(out.at(0, 1), lo, 1e-15);
  EXPECT_NEAR(out.at(1, 0), lo, 1e-15);
  EXPECT_NEAR(out.at(1, 1), hi, 1e-15);

  EXPECT_THROW_CODE(scaled_attention(Q, random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)), ErrorCode::ShapeMismatch);
}

TEST(ScaledAttention, ConvexCombinationAndPermutationEquivariance) {
  CounterRng rng(6, 0);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t q = dim_in(rng, 1, 5), k = dim_in(rng, 1, 12), d = dim_in(rng, 1, 6);
    auto Q = random_tensor({q, d}, rng, 2.0), K = random_tensor({k, d}, rng, 2.0), V = random_tensor({k, d}, rng);
    auto out = scaled_attention(Q, K, V);
    for (std::size_t c = 0; c < d; ++c) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t j = 0; j < k; ++j) lo = std::min(lo, V.at(j, c)), hi = std::max(hi, V.at(j, c));
      for (std::size_t r = 0; r < q; ++r) {
        EXPECT_GE(out.at(r, c), lo - 1e-12);
        EXPECT_LE(out.at(r, c), hi + 1e-12);
      }
    }
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor<double> Kp({k, d}), Vp({k, d});
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < d; ++c) Kp.at(j, c) = K.at(perm[j], c), Vp.at(j, c) = V.at(perm[j], c);
    auto outp = scaled_attention(Q, Kp, Vp);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], outp[i], 1e-12);
  }
}

TEST(ScaledAttention, LargeGroupPathMatchesSmallGroupPath) {
  // Groups above 8 keys take the Eigen path; compare with a direct loop.
  CounterRng rng(8, 0);
  auto Q = random_tensor({5, 6}, rng), K = random_tensor({20, 6}, rng), V = random_tensor({20, 6}, rng);
  auto out = scaled_attention(Q, K, V);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> s(20);
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < 20; ++j) {
      for (std::size_t c = 0; c < 6; ++c) s[j] += Q.at(i, c) * K.at(j, c);
      s[j] /= std::sqrt(6.0);
      mx = std::max(mx, s[j]);
    }
    for (auto& v : s) z += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < 6; ++c) {
      double y = 0;
      for (std::size_t j = 0; j < 20; ++j) y += s[j] / z * V.at(j, c);
      EXPECT_NEAR(out.at(i, c), y, 1e-12);
    }
  }
}

TEST(TransformerLayer, ShapeDeterminismAndHeads) {
  CounterRng init(7, 0);
  ParamStore<double> ps;
  add_transformer_layer_params(ps, "L", 8, 32, init);
  for (std::size_t n : {1, 3, 10}) {
    auto x = random_tensor({n, 8}, init);
    Graph<double> g1(&ps), g2(&ps);
    LayerOptions opt{2, 0.1, nullptr};
    auto a = g1.value(transformer_layer(g1, "L", g1.constant(x), 0, opt));
    auto b = g2.value(transformer_layer(g2, "L", g2.constant(x), 0, opt));
    EXPECT_EQ(a.shape(), x.shape());
    EXPECT_EQ(a, b);
  }
  Graph<double> g(&ps);
  EXPECT_THROW_CODE(transformer_layer(g, "L", g.constant(random_tensor({3, 8}, init)), 0, LayerOptions{3, 0.0, nullptr}),
                    ErrorCode::BadHeadCount);
}

TEST(TransformerLayer, GradCheckSmallLayer) {
  CounterRng init(11, 0);
  ParamStore<double> ps;
  add_transformer_layer_params(ps, "L", 8, 32, init);
  // Break the identity initialization of the norms so their gradients are exercised.
  for (auto& p : ps)
    if (p.name.find("gamma") != std::string::npos || p.name.find("beta") != std::string::npos)
      for (auto& v : p.value.values()) v += 0.3 * init.normal();
  ps.add("x", random_tensor({3, 8}, init));
  CounterRng wr(12, 0);
  const auto w = random_tensor({3, 8}, wr);
  auto report = grad_check(ps, [&](ParamStore<double>& p, bool with_grad) {
    Graph<double> g(&p);
    Var y = transformer_layer(g, "L", g.param("x"), 0, LayerOptions{2, 0.0, nullptr});
    Var loss = sum(g, mul(g, y, g.constant(w)));
    if (with_grad) g.backward(loss);
    return g.value(loss)[0];
  });
  EXPECT_LT(report.worst, 1e-5) << report.worst_name;
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, QuadraticIsExact) {
  ParamStore<double> ps;
  ps.add("p", Tensor<double>({3}, {0.5, -1.25, 2.0}));
  auto report = grad_check(ps, [](ParamStore<double>& p, bool with_grad) {
    double f = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      f += p[0].value[i] * p[0].value[i];
      if (with_grad) p[0].grad[i] += 2 * p[0].value[i];
    }
    return f;
  });
  EXPECT_LT(report.worst, 1e-9);
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, NaNObjectiveRaises) {
  ParamStore<double> ps;
  ps.add("p", Tensor<double>({1}, {1.0}));
  EXPECT_THROW_CODE(grad_check(ps, [](ParamStore<double>&, bool) { return std::nan(""); }), ErrorCode::NonFiniteValue);
}

TEST(GradCheck, DetectsAWrongGradient) {
  ParamStore<double> ps;
  ps.add("p", Tensor<double>({1}, {1.0}));
  auto report = grad_check(ps, [](ParamStore<double>& p, bool with_grad) {
    if (with_grad) p[0].grad[0] += 3.0 * p[0].value[0];  // true derivative is 2p
    return p[0].value[0] * p[0].value[0];
  });
  EXPECT_FALSE(report.passed);
}

// Every differentiable op, on randomized small shapes over 20 seeds.
TEST(GradCheck, EveryOpOnRandomShapes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng shapes(seed, 9);
    const std::size_t r = dim_in(shapes, 1, 4), m = dim_in(shapes, 1, 5), n = dim_in(shapes, 1, 5);
    const std::size_t heads = dim_in(shapes, 1, 2), dh = dim_in(shapes, 1, 3), qg = dim_in(shapes, 1, 3),
                      kg = dim_in(shapes, 1, 10), groups = dim_in(shapes, 1, 2);
    std::vector<std::pair<std::string, GradCheckReport>> reports;
    reports.emplace_back("matmul", check_op(seed, {{r, m}, {m, n}}, [](auto& g, auto& v) { return matmul(g, v[0], v[1]); }));
    reports.emplace_back("add_bias", check_op(seed, {{r, n}, {n}}, [](auto& g, auto& v) { return add_bias(g, v[0], v[1]); }));
    reports.emplace_back("add", check_op(seed, {{r, n}, {r, n}}, [](auto& g, auto& v) { return add(g, v[0], v[1]); }));
    reports.emplace_back("mul", check_op(seed, {{r, n}, {r, n}}, [](auto& g, auto& v) { return mul(g, v[0], v[1]); }));
    reports.emplace_back("scale", check_op(seed, {{r, n}}, [](auto& g, auto& v) { return scale(g, v[0], -1.7); }));
    reports.emplace_back("gelu", check_op(seed, {{r, n}}, [](auto& g, auto& v) { return gelu(g, v[0]); }));
    reports.emplace_back("sigmoid", check_op(seed, {{r, n}}, [](auto& g, auto& v) { return sigmoid(g, v[0]); }));
    reports.emplace_back("softmax", check_op(seed, {{r, n}}, [](auto& g, auto& v) { return softmax(g, v[0]); }));
    // Two features pin the normalized output at +-1; three or more keep the gradient well conditioned.
    reports.emplace_back("layer_norm", check_op(seed, {{r, n + 2}, {n + 2}, {n + 2}},
                                                [](auto& g, auto& v) { return layer_norm(g, v[0], v[1], v[2]); }));
    reports.emplace_back("dropout", check_op(seed, {{r, n}}, [seed](auto& g, auto& v) {
                           CounterRng d(seed, 4);
                           return dropout(g, v[0], 0.3, &d);
                         }));
    reports.emplace_back("concat_broadcast",
                         check_op(seed, {{r, m}, {n}}, [](auto& g, auto& v) { return concat_broadcast(g, v[0], v[1]); }));
    reports.emplace_back("group_mean", check_op(seed, {{r * 3, n}}, [](auto& g, auto& v) { return group_mean(g, v[0], 3); }));
    reports.emplace_back("gather_rows", check_op(seed, {{r + 1, n}}, [r](auto& g, auto& v) {
                           return gather_rows(g, v[0], std::vector<std::size_t>{r, 0, r});
                         }));
    reports.emplace_back("reshape", check_op(seed, {{r, n}}, [r, n](auto& g, auto& v) { return reshape(g, v[0], Shape{n, r}); }));
    reports.emplace_back("attention", check_op(seed, {{groups * qg, heads * dh}, {groups * kg, heads * dh}, {groups * kg, heads * dh}},
                                               [=](auto& g, auto& v) { return attention(g, v[0], v[1], v[2], qg, kg, heads); }));
    for (const auto& [name, rep] : reports) EXPECT_LT(rep.worst, 1e-5) << name << " seed " << seed << " param " << rep.worst_name;
  }
}

TEST(Dropout, IdentityAtEvalAndInvertedScaling) {
  Graph<double> g;
  Tensor<double> ones({1000}, 1.0);
  Var x = g.constant(ones);
  EXPECT_EQ(g.value(dropout(g, x, 0.5, nullptr)), ones);
  CounterRng rng(1, 1);
  auto y = g.value(dropout(g, x, 0.4, &rng));
  double mean = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.6) < 1e-12);
    mean += v;
  }
  EXPECT_NEAR(mean / 1000.0, 1.0, 0.1);
}

TEST(Checkpoint, BitExactRoundTrip) {
  CounterRng rng(2, 2);
  ParamStore<double> ps;
  ps.add("a.w", random_tensor({3, 4}, rng));
  ps.add("b", Tensor<double>({2}, {std::numeric_limits<double>::denorm_min(), -0.0}));
  ps.add("scalar", Tensor<double>({1}, {std::numbers::pi}));
  auto dir = std::filesystem::temp_directory_path() / "trajground_test_numerics";
  std::filesystem::create_directories(dir);
  nlohmann::json meta = {{"k", 1}};
  save_checkpoint(dir / "c.ckpt", ps, meta);
  nlohmann::json back_meta;
  auto back = load_checkpoint<double>(dir / "c.ckpt", &back_meta);
  EXPECT_EQ(back_meta, meta);
  ASSERT_EQ(back.size(), ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(back[i].name, ps[i].name);
    EXPECT_EQ(back[i].value.shape(), ps[i].value.shape());
    EXPECT_EQ(std::memcmp(back[i].value.data(), ps[i].value.data(), ps[i].value.size() * sizeof(double)), 0);
  }
  // f32 storage round-trips float values bit-exactly too.
  auto f = ps.cast<float>();
  save_checkpoint(dir / "f.ckpt", f, meta);
  auto fb = load_checkpoint<float>(dir / "f.ckpt");
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(fb[i].value, f[i].value);

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint\n";
  EXPECT_THROW_CODE(load_checkpoint<double>(dir / "junk.ckpt"), ErrorCode::IoError);
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW_CODE(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ErrorCode::ShapeMismatch);
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW_CODE(t.reshaped({4}), ErrorCode::ShapeMismatch);
}
