#pragma once

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// A Tape records every value produced during a forward pass together with a
// closure that propagates the output gradient to its inputs. Values are never
// mutated after being pushed, so closures can read them freely during the
// reverse sweep. Nodes live in a deque, which keeps references stable.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cotok/tensor.hpp"

namespace cotok {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    std::function<void()> backward;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When disabled no backward closures are recorded (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), grad_enabled_, nullptr); }

  Var<T> push(Tensor<T> value, bool needs_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var<T> v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient accumulator for a node, allocated as zeros on first use.
  std::vector<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }

  /// Gradient of the last backward() target with respect to v; zeros if v
  /// did not contribute.
  std::vector<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<T>(n.value.size(), T{0});
    return n.grad;
  }

  void backward(Var<T> output) {
    if (value(output).size() != 1) {
      throw Error("backward() needs a scalar output, got shape " + shape_str(value(output).shape));
    }
    backward(output, std::vector<T>{T{1}});
  }

  void backward(Var<T> output, std::vector<T> seed) {
    if (!nodes_.at(output.id).needs_grad) return;
    grad_buffer(output.id) = std::move(seed);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.backward && !n.grad.empty()) n.backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Dense kernels. All accumulate into C.

namespace kernel {

/// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

/// C[m,n] += A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

namespace detail {

template <class T>
void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

template <class T>
bool any_needs_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.tape->needs_grad(v)) return true;
  }
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  detail::require<T>(bv.rows() == k, "matmul: inner dims differ, " + shape_str(av.shape) + " x " +
                                         shape_str(bv.shape));
  Tensor<T> out({m, n});
  kernel::gemm_nn(m, k, n, av.data.data(), bv.data.data(), out.data.data());
  const std::size_t out_id = t.size();
  return t.push(std::move(out), detail::any_needs_grad({a, b}), [&t, a, b, out_id, m, k, n] {
    const auto& g = t.grad_buffer(out_id);
    if (t.needs_grad(a)) kernel::gemm_nt(m, n, k, g.data(), b.value().data.data(), t.grad_buffer(a.id).data());
    if (t.needs_grad(b)) kernel::gemm_tn(k, m, n, a.value().data.data(), g.data(), t.grad_buffer(b.id).data());
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  Tape<T>& t = *a.tape;
  const auto& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = av.data[i * n + j];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, m, n] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

/// Reinterprets the element buffer with a new shape of equal size.
template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tape<T>& t = *a.tape;
  detail::require<T>(shape_numel(shape) == a.value().size(),
                     "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  detail::require<T>(a.value().size() == b.value().size(),
                     "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), detail::any_needs_grad({a, b}), [&t, a, b, out_id] {
    const auto& g = t.grad_buffer(out_id);
    for (Var<T> v : {a, b}) {
      if (!t.needs_grad(v)) continue;
      auto& gv = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, s] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// Adds a constant tensor of identical size (masks, positional tables).
template <class T>
Var<T> add_constant(Var<T> a, const Tensor<T>& c) {
  Tape<T>& t = *a.tape;
  detail::require<T>(a.value().size() == c.size(), "add_constant: size mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// out[i, j] = a[i, j] + bias[j]
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  detail::require<T>(bias.value().size() == n, "add_bias: bias size " +
                                                   std::to_string(bias.value().size()) +
                                                   " != cols " + std::to_string(n));
  Tensor<T> out = a.value();
  const auto& bv = bias.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv[j];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), detail::any_needs_grad({a, bias}), [&t, a, bias, out_id, m, n] {
    const auto& g = t.grad_buffer(out_id);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(bias)) {
      auto& gb = t.grad_buffer(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

/// out[i, :] = factor[i] * a[i, :] with constant factors.
template <class T>
Var<T> scale_rows(Var<T> a, std::vector<T> factors) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  detail::require<T>(factors.size() == m, "scale_rows: factor count mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= factors[i];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, m, n, f = std::move(factors)] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += f[i] * g[i * n + j];
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id] {
    const auto& g = t.grad_buffer(out_id);
    const auto& x = a.value().data;
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T{0}) ga[i] += g[i];
  });
}

/// Row-wise softmax. Entries equal to -inf receive probability zero; every
/// row must contain at least one finite entry.
template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data.data() + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw Error("softmax_rows: row " + std::to_string(i) + " has no finite entry");
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, m, n] {
    const auto& g = t.grad_buffer(out_id);
    const auto& y = t.value(Var<T>{&t, out_id}).data;
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Row-wise layer normalization with learned gain and bias of length cols.
template <class T>
Var<T> layer_norm_rows(Var<T> a, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  detail::require<T>(gain.value().size() == n && bias.value().size() == n,
                     "layer_norm_rows: gain/bias size mismatch");
  const auto& x = a.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  Tensor<T> out({m, n});
  std::vector<T> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (x[i * n + j] - mean) * (x[i * n + j] - mean);
    var /= static_cast<T>(n);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mean) * inv_std[i];
      out.data[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), detail::any_needs_grad({a, gain, bias}),
                [&t, a, gain, bias, out_id, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                  const auto& g = t.grad_buffer(out_id);
                  const auto& gv = gain.value().data;
                  if (t.needs_grad(gain) || t.needs_grad(bias)) {
                    auto& gg = t.grad_buffer(gain.id);
                    auto& gb = t.grad_buffer(bias.id);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                        gb[j] += g[i * n + j];
                      }
                  }
                  if (!t.needs_grad(a)) return;
                  auto& ga = t.grad_buffer(a.id);
                  const T inv_n = T{1} / static_cast<T>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    T sum_dy{0}, sum_dy_xhat{0};
                    for (std::size_t j = 0; j < n; ++j) {
                      const T dy = g[i * n + j] * gv[j];
                      sum_dy += dy;
                      sum_dy_xhat += dy * xhat[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const T dy = g[i * n + j] * gv[j];
                      ga[i * n + j] += inv_std[i] * (dy - inv_n * sum_dy - xhat[i * n + j] * inv_n * sum_dy_xhat);
                    }
                  }
                });
}

/// Spatio-temporal extent of a feature map stored as a {T*H*W, C} matrix.
struct Geometry {
  std::size_t t = 1, h = 1, w = 1;
  std::size_t cells() const { return t * h * w; }
  bool operator==(const Geometry&) const = default;
};

struct Conv3dSpec {
  std::size_t kernel = 3;     // cubic kernel, odd
  std::size_t stride_t = 1;
  std::size_t stride_hw = 1;

  std::size_t pad() const { return kernel / 2; }
  Geometry output(const Geometry& in) const {
    auto dim = [&](std::size_t d, std::size_t s) { return (d + 2 * pad() - kernel) / s + 1; };
    return {dim(in.t, stride_t), dim(in.h, stride_hw), dim(in.w, stride_hw)};
  }
};

/// 3-D convolution with zero "same" padding. x is {T*H*W, Cin}, weight is
/// {k^3 * Cin, Cout} ordered (kt, kh, kw, ci), bias is {Cout}.
template <class T>
Var<T> conv3d(Var<T> x, const Geometry& in, Var<T> weight, Var<T> bias, const Conv3dSpec& spec) {
  Tape<T>& t = *x.tape;
  const std::size_t cin = x.cols();
  const std::size_t k = spec.kernel;
  const std::size_t cout = weight.cols();
  detail::require<T>(x.rows() == in.cells(), "conv3d: input rows " + std::to_string(x.rows()) +
                                                 " != geometry cells " + std::to_string(in.cells()));
  detail::require<T>(weight.rows() == k * k * k * cin,
                     "conv3d: weight rows " + std::to_string(weight.rows()) + " != k^3*Cin " +
                         std::to_string(k * k * k * cin));
  detail::require<T>(bias.value().size() == cout, "conv3d: bias size mismatch");
  const Geometry og = spec.output(in);
  detail::require<T>(og.t >= 1 && og.h >= 1 && og.w >= 1, "conv3d: output geometry underflow");

  // Precompute (output cell, kernel offset) -> input cell, or npos if padded.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  const std::size_t kvol = k * k * k;
  std::vector<std::size_t> taps(og.cells() * kvol, npos);
  const long pad = static_cast<long>(spec.pad());
  for (std::size_t ot = 0; ot < og.t; ++ot)
    for (std::size_t oh = 0; oh < og.h; ++oh)
      for (std::size_t ow = 0; ow < og.w; ++ow) {
        const std::size_t cell = (ot * og.h + oh) * og.w + ow;
        for (std::size_t kt = 0; kt < k; ++kt)
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const long it = static_cast<long>(ot * spec.stride_t + kt) - pad;
              const long ih = static_cast<long>(oh * spec.stride_hw + kh) - pad;
              const long iw = static_cast<long>(ow * spec.stride_hw + kw) - pad;
              if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long>(in.t) ||
                  ih >= static_cast<long>(in.h) || iw >= static_cast<long>(in.w))
                continue;
              taps[cell * kvol + (kt * k + kh) * k + kw] =
                  (static_cast<std::size_t>(it) * in.h + static_cast<std::size_t>(ih)) * in.w +
                  static_cast<std::size_t>(iw);
            }
      }

  const auto& xv = x.value().data;
  const auto& wv = weight.value().data;
  const auto& bv = bias.value().data;
  Tensor<T> out({og.cells(), cout});
  for (std::size_t cell = 0; cell < og.cells(); ++cell) {
    T* orow = out.data.data() + cell * cout;
    for (std::size_t co = 0; co < cout; ++co) orow[co] = bv[co];
    for (std::size_t kk = 0; kk < kvol; ++kk) {
      const std::size_t src = taps[cell * kvol + kk];
      if (src == npos) continue;
      kernel::gemm_nn<T>(1, cin, cout, xv.data() + src * cin, wv.data() + kk * cin * cout, orow);
    }
  }

  const std::size_t out_id = t.size();
  return t.push(std::move(out), detail::any_needs_grad({x, weight, bias}),
                [&t, x, weight, bias, out_id, cin, cout, kvol, og, taps = std::move(taps)] {
                  const auto& g = t.grad_buffer(out_id);
                  const auto& xv = x.value().data;
                  const auto& wv = weight.value().data;
                  if (t.needs_grad(bias)) {
                    auto& gb = t.grad_buffer(bias.id);
                    for (std::size_t cell = 0; cell < og.cells(); ++cell)
                      for (std::size_t co = 0; co < cout; ++co) gb[co] += g[cell * cout + co];
                  }
                  const bool gx_needed = t.needs_grad(x);
                  const bool gw_needed = t.needs_grad(weight);
                  T* gx = gx_needed ? t.grad_buffer(x.id).data() : nullptr;
                  T* gw = gw_needed ? t.grad_buffer(weight.id).data() : nullptr;
                  for (std::size_t cell = 0; cell < og.cells(); ++cell) {
                    const T* grow = g.data() + cell * cout;
                    for (std::size_t kk = 0; kk < kvol; ++kk) {
                      const std::size_t src = taps[cell * kvol + kk];
                      if (src == npos) continue;
                      if (gw_needed)
                        kernel::gemm_tn<T>(cin, 1, cout, xv.data() + src * cin, grow, gw + kk * cin * cout);
                      if (gx_needed)
                        kernel::gemm_nt<T>(1, cout, cin, grow, wv.data() + kk * cin * cout, gx + src * cin);
                    }
                  }
                });
}

/// Row lookup: out[i, :] = table[ids[i], :].
template <class T>
Var<T> embedding(Var<T> table, std::vector<int> ids) {
  Tape<T>& t = *table.tape;
  const std::size_t vocab = table.rows(), n = table.cols();
  Tensor<T> out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw Error("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                  std::to_string(vocab));
    const auto src = table.value().row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.data.begin() + static_cast<long>(i * n));
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(table), [&t, table, out_id, n, ids = std::move(ids)] {
    const auto& g = t.grad_buffer(out_id);
    auto& gt = t.grad_buffer(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gt[static_cast<std::size_t>(ids[i]) * n + j] += g[i * n + j];
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require<T>(!parts.empty(), "concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require<T>(p.cols() == n, "concat_rows: column mismatch");
    m += p.rows();
    needs = needs || t.needs_grad(p);
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<long>(off));
    off += p.value().size();
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), needs, [&t, parts, out_id] {
    const auto& g = t.grad_buffer(out_id);
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t sz = p.value().size();
      if (t.needs_grad(p)) {
        auto& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
      }
      off += sz;
    }
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t start, std::size_t count) {
  Tape<T>& t = *a.tape;
  const std::size_t n = a.cols();
  detail::require<T>(start + count <= a.rows(), "slice_rows: out of range");
  Tensor<T> out({count, n});
  std::copy(a.value().data.begin() + static_cast<long>(start * n),
            a.value().data.begin() + static_cast<long>((start + count) * n), out.data.begin());
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, start, count, n] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < count * n; ++i) ga[start * n + i] += g[i];
  });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t count) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  detail::require<T>(start + count <= n, "slice_cols: out of range");
  Tensor<T> out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.data[i * count + j] = a.value().data[i * n + start + j];
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, start, count, m, n] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require<T>(!parts.empty(), "concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require<T>(p.rows() == m, "concat_cols: row mismatch");
    n += p.cols();
    needs = needs || t.needs_grad(p);
  }
  Tensor<T> out({m, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[i * n + off + j] = p.value().data[i * c + j];
    off += c;
  }
  const std::size_t out_id = t.size();
  return t.push(std::move(out), needs, [&t, parts, out_id, m, n] {
    const auto& g = t.grad_buffer(out_id);
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.cols();
      if (t.needs_grad(p)) {
        auto& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * n + off + j];
      }
      off += c;
    }
  });
}

/// Column means over all rows: {m, n} -> {1, n}.
template <class T>
Var<T> mean_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += a.value().data[i * n + j];
  for (auto& v : out.data) v /= static_cast<T>(m);
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(a), [&t, a, out_id, m, n] {
    const auto& g = t.grad_buffer(out_id);
    auto& ga = t.grad_buffer(a.id);
    const T inv = T{1} / static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

/// Mean softmax cross-entropy over the active rows; inactive rows get no
/// gradient.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, const std::vector<bool>& active) {
  Tape<T>& t = *logits.tape;
  const std::size_t m = logits.rows(), v = logits.cols();
  detail::require<T>(targets.size() == m && active.size() == m, "cross_entropy: target count mismatch");
  std::size_t count = 0;
  for (bool a : active) count += a ? 1 : 0;
  detail::require<T>(count > 0, "cross_entropy: every position is padded");
  const auto& x = logits.value().data;
  Tensor<T> probs({m, v});
  T loss{0};
  for (std::size_t i = 0; i < m; ++i) {
    if (!active[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw Error("cross_entropy: target id " + std::to_string(targets[i]) + " out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, x[i * v + j]);
    T sum{0};
    for (std::size_t j = 0; j < v; ++j) {
      probs.data[i * v + j] = std::exp(x[i * v + j] - mx);
      sum += probs.data[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs.data[i * v + j] /= sum;
    loss += -(x[i * v + static_cast<std::size_t>(targets[i])] - mx - std::log(sum));
  }
  const T inv = T{1} / static_cast<T>(count);
  Tensor<T> out({1}, std::vector<T>{loss * inv});
  const std::size_t out_id = t.size();
  return t.push(std::move(out), t.needs_grad(logits),
                [&t, logits, out_id, m, v, inv, targets, active, probs = std::move(probs)] {
                  const T g = t.grad_buffer(out_id)[0] * inv;
                  auto& gl = t.grad_buffer(logits.id);
                  for (std::size_t i = 0; i < m; ++i) {
                    if (!active[i]) continue;
                    for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs.data[i * v + j];
                    gl[i * v + static_cast<std::size_t>(targets[i])] -= g;
                  }
                });
}

/// Scalar sum(a * w) for a constant weight tensor; used to build test losses.
template <class T>
Var<T> weighted_sum(Var<T> a, const Tensor<T>& w) {
  Tape<T>& t = *a.tape;
  detail::require<T>(a.value().size() == w.size(), "weighted_sum: size mismatch");
  T acc{0};
  for (std::size_t i = 0; i < w.size(); ++i) acc += a.value().data[i] * w.data[i];
  const std::size_t out_id = t.size();
  return t.push(Tensor<T>({1}, std::vector<T>{acc}), t.needs_grad(a), [&t, a, out_id, w] {
    const T g = t.grad_buffer(out_id)[0];
    auto& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g * w.data[i];
  });
}

/// Sum of scalar nodes.
template <class T>
Var<T> add_scalars(const std::vector<Var<T>>& parts) {
  detail::require<T>(!parts.empty(), "add_scalars: no inputs");
  Var<T> acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

/// Copies the value without connecting gradients.
template <class T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

}  // namespace cotok
