#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/params.hpp"

namespace cotok {

template <class T>
void init_attention(ParamStore<T>& store, const std::string& p, std::size_t c, Rng& rng) {
  for (const char* n : {"wq", "wk", "wv", "wo"}) {
    store.add_glorot(p + "." + n, {c, c}, c, c, rng);
    store.add_constant(p + ".b" + std::string(n + 1), {c}, T{0});
  }
}

template <class T>
void init_layer_norm(ParamStore<T>& store, const std::string& p, std::size_t c) {
  store.add_constant(p + ".g", {c}, T{1});
  store.add_constant(p + ".b", {c}, T{0});
}

/// Pre-norm block: self-attention, optional cross-attention, 4x ReLU MLP.
template <class T>
void init_transformer_layer(ParamStore<T>& store, const std::string& p, std::size_t c, Rng& rng,
                            bool cross_attention = false) {
  init_layer_norm(store, p + ".ln1", c);
  init_attention(store, p + ".attn", c, rng);
  if (cross_attention) {
    init_layer_norm(store, p + ".lnx", c);
    init_attention(store, p + ".xattn", c, rng);
  }
  init_layer_norm(store, p + ".ln2", c);
  store.add_glorot(p + ".mlp.w1", {c, 4 * c}, c, 4 * c, rng);
  store.add_constant(p + ".mlp.b1", {4 * c}, T{0});
  store.add_glorot(p + ".mlp.w2", {4 * c, c}, 4 * c, c, rng);
  store.add_constant(p + ".mlp.b2", {c}, T{0});
}

/// Additive attention mask {queries, keys}: 0 where allowed, -inf otherwise.
/// Masked keys are hidden from every query except themselves, so no row is
/// ever fully masked.
template <class T>
Tensor<T> attention_mask(std::size_t queries, const std::vector<bool>& key_pad, bool causal, bool self) {
  const std::size_t keys = key_pad.size();
  Tensor<T> mask({queries, keys});
  const T ninf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < queries; ++i)
    for (std::size_t j = 0; j < keys; ++j) {
      bool allowed = !key_pad[j] || (self && i == j);
      if (causal && j > i) allowed = false;
      if (!allowed) mask.data[i * keys + j] = ninf;
    }
  if (!self) {
    for (std::size_t i = 0; i < queries; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < keys; ++j) any = any || std::isfinite(mask.data[i * keys + j]);
      if (!any) throw Error("attention_mask: every key is masked");
    }
  }
  return mask;
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

template <class T>
Var<T> multihead_attention(Var<T> queries, Var<T> keys_values, const Tensor<T>& mask, std::size_t heads,
                           ParamBinder<T>& params, const std::string& p) {
  const std::size_t c = queries.cols();
  if (heads == 0 || c % heads != 0)
    throw Error("multihead_attention: heads (" + std::to_string(heads) + ") must divide width (" +
                std::to_string(c) + ")");
  const std::size_t d = c / heads;
  Var<T> q = linear(queries, params(p + ".wq"), params(p + ".bq"));
  Var<T> k = linear(keys_values, params(p + ".wk"), params(p + ".bk"));
  Var<T> v = linear(keys_values, params(p + ".wv"), params(p + ".bv"));
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  std::vector<Var<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * d, d);
    Var<T> kh = slice_cols(k, h * d, d);
    Var<T> vh = slice_cols(v, h * d, d);
    Var<T> scores = add_constant(scale(matmul(qh, transpose(kh)), inv_sqrt_d), mask);
    outs.push_back(matmul(softmax_rows(scores), vh));
  }
  Var<T> merged = heads == 1 ? outs.front() : concat_cols(outs);
  return linear(merged, params(p + ".wo"), params(p + ".bo"));
}

/// Pre-norm transformer layer. Rows flagged in pad_mask are excluded as keys
/// and pass through unchanged. With `memory`, a cross-attention sublayer
/// attends over it (memory_pad marks its masked rows).
template <class T>
Var<T> transformer_layer(Var<T> x, const std::vector<bool>& pad_mask, std::size_t heads, ParamBinder<T>& params,
                         const std::string& p, bool causal = false, const Var<T>* memory = nullptr,
                         const std::vector<bool>* memory_pad = nullptr) {
  const std::size_t m = x.rows();
  if (m == 0) throw Error("transformer_layer: empty sequence");
  if (pad_mask.size() != m) throw Error("transformer_layer: pad mask length mismatch");
  std::vector<T> active(m);
  for (std::size_t i = 0; i < m; ++i) active[i] = pad_mask[i] ? T{0} : T{1};

  const Tensor<T> self_mask = attention_mask<T>(m, pad_mask, causal, true);
  Var<T> h = layer_norm_rows(x, params(p + ".ln1.g"), params(p + ".ln1.b"));
  x = add(x, scale_rows(multihead_attention(h, h, self_mask, heads, params, p + ".attn"), active));

  if (memory != nullptr) {
    const std::vector<bool> none(memory->rows(), false);
    const Tensor<T> cross_mask = attention_mask<T>(m, memory_pad ? *memory_pad : none, false, false);
    Var<T> hx = layer_norm_rows(x, params(p + ".lnx.g"), params(p + ".lnx.b"));
    x = add(x, scale_rows(multihead_attention(hx, *memory, cross_mask, heads, params, p + ".xattn"), active));
  }

  Var<T> h2 = layer_norm_rows(x, params(p + ".ln2.g"), params(p + ".ln2.b"));
  Var<T> mlp = linear(relu(linear(h2, params(p + ".mlp.w1"), params(p + ".mlp.b1"))), params(p + ".mlp.w2"),
                      params(p + ".mlp.b2"));
  return add(x, scale_rows(mlp, active));
}

/// Standard sinusoidal table {length, c}.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t c) {
  Tensor<T> pe({length, c});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < c; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(c));
      const double angle = static_cast<double>(pos) / rate;
      pe.data[pos * c + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

}  // namespace cotok
