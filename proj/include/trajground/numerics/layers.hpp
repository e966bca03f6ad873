#pragma once

// Pre-norm transformer blocks built from graph ops:
//   x = x + Dropout(MHA(LN(x)))
//   x = x + Dropout(W2 GELU(W1 LN(x)))
// The cross-attention variant takes its keys and values from a second
// (separately normalized) token set.

#include <string>

#include "trajground/numerics/graph.hpp"
#include "trajground/numerics/param_store.hpp"

namespace trajground::num {

struct LayerOptions {
  std::size_t heads = 1;
  double dropout = 0.0;
  CounterRng* rng = nullptr;  // null in eval mode
};

template <class T>
void add_layer_norm_params(ParamStore<T>& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".gamma", Tensor<T>(Shape{d}, T(1)));
  ps.add(prefix + ".beta", Tensor<T>(Shape{d}));
}

template <class T>
void add_linear_params(ParamStore<T>& ps, const std::string& prefix, std::size_t in, std::size_t out, CounterRng& rng,
                       bool bias = true) {
  ps.add(prefix + ".w", xavier_uniform<T>(Shape{in, out}, rng));
  if (bias) ps.add(prefix + ".b", Tensor<T>(Shape{out}));
}

template <class T>
void add_transformer_layer_params(ParamStore<T>& ps, const std::string& prefix, std::size_t d, std::size_t ffn,
                                  CounterRng& rng, bool cross = false) {
  if (cross) {
    add_layer_norm_params(ps, prefix + ".ln_q", d);
    add_layer_norm_params(ps, prefix + ".ln_kv", d);
  } else {
    add_layer_norm_params(ps, prefix + ".ln1", d);
  }
  for (const char* m : {".wq", ".wk", ".wv", ".wo"}) add_linear_params(ps, prefix + ".attn" + m, d, d, rng);
  add_layer_norm_params(ps, prefix + ".ln2", d);
  add_linear_params(ps, prefix + ".mlp1", d, ffn, rng);
  add_linear_params(ps, prefix + ".mlp2", ffn, d, rng);
}

template <class T>
Var dense(Graph<T>& g, const std::string& prefix, Var x) {
  return linear(g, x, g.param(prefix + ".w"), g.param(prefix + ".b"));
}

template <class T>
Var norm(Graph<T>& g, const std::string& prefix, Var x) {
  return layer_norm(g, x, g.param(prefix + ".gamma"), g.param(prefix + ".beta"));
}

namespace detail {
template <class T>
Var attend_and_mlp(Graph<T>& g, const std::string& prefix, Var residual, Var hq, Var hkv, std::size_t q_group,
                   std::size_t kv_group, const LayerOptions& opt) {
  Var q = dense(g, prefix + ".attn.wq", hq);
  Var k = dense(g, prefix + ".attn.wk", hkv);
  Var v = dense(g, prefix + ".attn.wv", hkv);
  Var a = attention(g, q, k, v, q_group, kv_group, opt.heads);
  a = dropout(g, dense(g, prefix + ".attn.wo", a), opt.dropout, opt.rng);
  Var x = add(g, residual, a);
  Var m = dense(g, prefix + ".mlp2", gelu(g, dense(g, prefix + ".mlp1", norm(g, prefix + ".ln2", x))));
  m = dropout(g, m, opt.dropout, opt.rng);
  return add(g, x, m);
}
}  // namespace detail

/// Self-attention block; rows attend within consecutive groups of `group`
/// rows (group == 0 means all rows form one group).
template <class T>
Var transformer_layer(Graph<T>& g, const std::string& prefix, Var x, std::size_t group, const LayerOptions& opt) {
  const std::size_t rows = g.value(x).rows();
  if (group == 0) group = rows;
  Var h = norm(g, prefix + ".ln1", x);
  return detail::attend_and_mlp(g, prefix, x, h, h, group, group, opt);
}

/// Cross-attention block: each group of `q_group` query rows attends to the
/// matching group of `kv_group` rows of kv.
template <class T>
Var cross_attention_layer(Graph<T>& g, const std::string& prefix, Var q, Var kv, std::size_t q_group,
                          std::size_t kv_group, const LayerOptions& opt) {
  Var hq = norm(g, prefix + ".ln_q", q);
  Var hkv = norm(g, prefix + ".ln_kv", kv);
  return detail::attend_and_mlp(g, prefix, q, hq, hkv, q_group, kv_group, opt);
}

}  // namespace trajground::num
