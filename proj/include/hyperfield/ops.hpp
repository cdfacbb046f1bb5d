// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <type_traits>

namespace hyperfield {

enum class Elementwise { add, sub, mul, relu, sigmoid, exp, log, sin, cos, softplus };

namespace detail {

struct BroadcastPlan {
  Shape out;
  std::vector<Index> a_strides;
  std::vector<Index> b_strides;
  bool same = false;
};

inline std::vector<Index> row_major_strides(const Shape& shape) {
  std::vector<Index> st(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  }
  return st;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size()) {
    throw ShapeError("rank mismatch " + to_string(a) + " vs " + to_string(b) +
                     " (no implicit rank promotion)");
  }
  p.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      p.out[i] = a[i];
    } else if (a[i] == 1) {
      p.out[i] = b[i];
    } else {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
  }
  auto sa = row_major_strides(a);
  auto sb = row_major_strides(b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 1 && p.out[i] != 1) sa[i] = 0;
    if (b[i] == 1 && p.out[i] != 1) sb[i] = 0;
  }
  p.a_strides = std::move(sa);
  p.b_strides = std::move(sb);
  return p;
}

// Visits every output element with the matching operand offsets.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const Index total = numel(p.out);
  if (p.same) {
    for (Index o = 0; o < total; ++o) fn(o, o, o);
    return;
  }
  const std::size_t rank = p.out.size();
  std::vector<Index> idx(rank, 0);
  Index ia = 0;
  Index ib = 0;
  for (Index o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      ia += p.a_strides[k];
      ib += p.b_strides[k];
      if (idx[k] < p.out[k]) break;
      ia -= p.a_strides[k] * idx[k];
      ib -= p.b_strides[k] * idx[k];
      idx[k] = 0;
    }
  }
}

template <class S, class Fwd, class DA, class DB>
Tensor<S> binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd, DA da, DB db) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  Tensor<S> out(plan.out);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for_each_broadcast(plan, [&](Index o, Index ia, Index ib) { po[o] = fwd(pa[ia], pb[ib]); });
  const bool track = tracking<S>({&a, &b});
  auto na = a.node();
  auto nb = b.node();
  return finish<S>(name, std::move(out), track, [plan, na, nb, da, db](const Buffer<S>& g) {
    const S* xa = na->value.data();
    const S* xb = nb->value.data();
    if (na->requires_grad) {
      Buffer<S> ga = Buffer<S>::Zero(na->value.size());
      for_each_broadcast(plan, [&](Index o, Index ia, Index ib) { ga[ia] += g[o] * da(xa[ia], xb[ib]); });
      na->accumulate(ga);
    }
    if (nb->requires_grad) {
      Buffer<S> gb = Buffer<S>::Zero(nb->value.size());
      for_each_broadcast(plan, [&](Index o, Index ia, Index ib) { gb[ib] += g[o] * db(xa[ia], xb[ib]); });
      nb->accumulate(gb);
    }
  });
}

// dfn receives (x, y) and returns dy/dx.
template <class S, class Fwd, class Deriv>
Tensor<S> unary(const char* name, const Tensor<S>& a, Fwd fwd, Deriv dfn) {
  Tensor<S> out(a.shape(), a.values().unaryExpr(fwd));
  const bool track = tracking<S>({&a});
  auto na = a.node();
  auto no = out.node();
  return finish<S>(name, std::move(out), track, [na, no, dfn](const Buffer<S>& g) {
    if (!na->requires_grad) return;
    Buffer<S> ga(g.size());
    for (Index i = 0; i < g.size(); ++i) ga[i] = g[i] * dfn(na->value[i], no->value[i]);
    na->accumulate(ga);
  });
}

template <class S>
S stable_sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
S stable_softplus(S x) {
  if (x > S(0)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Product with a fixed accumulation order in 64-bit mode so results equal a
// textbook triple loop bit for bit; Eigen's blocked GEMM otherwise.
template <class S>
RowMatrix<S> gemm(const RowMatrix<S>& a, const RowMatrix<S>& b) {
  if constexpr (std::is_same_v<S, double>) {
    const Index m = a.rows();
    const Index k = a.cols();
    const Index n = b.cols();
    RowMatrix<S> c = RowMatrix<S>::Zero(m, n);
    for (Index i = 0; i < m; ++i) {
      S* crow = c.row(i).data();
      for (Index p = 0; p < k; ++p) {
        const S aip = a(i, p);
        const S* brow = b.row(p).data();
        for (Index j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
    return c;
  } else {
    return a * b;
  }
}

inline std::atomic<std::size_t>& zero_slice_counter() {
  static std::atomic<std::size_t> count{0};
  return count;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; });
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary<S>(
      "relu", a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary<S>(
      "sigmoid", a, [](S x) { return detail::stable_sigmoid(x); },
      [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary<S>(
      "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  if ((a.values() <= S(0)).any()) throw std::domain_error("log of nonpositive input");
  return detail::unary<S>(
      "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <class S>
Tensor<S> sin(const Tensor<S>& a) {
  return detail::unary<S>(
      "sin", a, [](S x) { return std::sin(x); }, [](S x, S) { return std::cos(x); });
}

template <class S>
Tensor<S> cos(const Tensor<S>& a) {
  return detail::unary<S>(
      "cos", a, [](S x) { return std::cos(x); }, [](S x, S) { return -std::sin(x); });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& a) {
  return detail::unary<S>(
      "softplus", a, [](S x) { return detail::stable_softplus(x); },
      [](S x, S) { return detail::stable_sigmoid(x); });
}

/// Exact (erf-based) GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr S inv_sqrt2 = S(0.70710678118654752440);
  constexpr S inv_sqrt2pi = S(0.39894228040143267794);
  return detail::unary<S>(
      "gelu", a, [](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); },
      [](S x, S) {
        return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(S(-0.5) * x * x);
      });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return detail::unary<S>(
      "scale", a, [factor](S x) { return x * factor; }, [factor](S, S) { return factor; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::unary<S>(
      "add_scalar", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

/// Clamps into [lo, hi]; gradient passes only where the input is inside.
template <class S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  return detail::unary<S>(
      "clamp", a, [lo, hi](S x) { return std::clamp(x, lo, hi); },
      [lo, hi](S x, S) { return (x >= lo && x <= hi) ? S(1) : S(0); });
}

template <class S>
Tensor<S> elementwise(Elementwise op, const Tensor<S>& a, const Tensor<S>& b = Tensor<S>()) {
  auto need_b = [&]() -> const Tensor<S>& {
    if (!b.defined()) throw std::invalid_argument("binary elementwise op needs two operands");
    return b;
  };
  switch (op) {
    case Elementwise::add: return add(a, need_b());
    case Elementwise::sub: return sub(a, need_b());
    case Elementwise::mul: return mul(a, need_b());
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::exp: return exp(a);
    case Elementwise::log: return log(a);
    case Elementwise::sin: return sin(a);
    case Elementwise::cos: return cos(a);
    case Elementwise::softplus: return softplus(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a) { return scale(a, S(-1)); }

// ---------------------------------------------------------------------------
// Linear algebra

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner extent mismatch " + to_string(a.shape()) + " * " +
                     to_string(b.shape()));
  }
  RowMatrix<S> am = a.matrix();
  RowMatrix<S> bm = b.matrix();
  Tensor<S> out({a.dim(0), b.dim(1)});
  out.matrix() = detail::gemm<S>(am, bm);
  const bool track = detail::tracking<S>({&a, &b});
  auto na = a.node();
  auto nb = b.node();
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return detail::finish<S>("matmul", std::move(out), track, [na, nb, m, k, n](const Buffer<S>& g) {
    RowMatrix<S> gm = ConstMatrixMap<S>(g.data(), m, n);
    if (na->requires_grad) {
      RowMatrix<S> bt = ConstMatrixMap<S>(nb->value.data(), k, n).transpose();
      RowMatrix<S> ga = detail::gemm<S>(gm, bt);
      na->accumulate(Eigen::Map<const Buffer<S>>(ga.data(), ga.size()));
    }
    if (nb->requires_grad) {
      RowMatrix<S> at = ConstMatrixMap<S>(na->value.data(), m, k).transpose();
      RowMatrix<S> gb = detail::gemm<S>(at, gm);
      nb->accumulate(Eigen::Map<const Buffer<S>>(gb.data(), gb.size()));
    }
  });
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2");
  const Index r = a.dim(0), c = a.dim(1);
  Tensor<S> out({c, r});
  out.matrix() = a.matrix().transpose();
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("transpose", std::move(out), track, [na, r, c](const Buffer<S>& g) {
    if (!na->requires_grad) return;
    RowMatrix<S> gt = ConstMatrixMap<S>(g.data(), c, r).transpose();
    na->accumulate(Eigen::Map<const Buffer<S>>(gt.data(), gt.size()));
  });
}

/// x [n x in] times W^T for W [out x in] plus optional bias [out].
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias = Tensor<S>()) {
  Tensor<S> y = matmul(x, transpose(weight));
  if (!bias.defined()) return y;
  if (bias.rank() == 1) return add(y, reshape(bias, {1, bias.size()}));
  return add(y, bias);
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  Tensor<S> out(std::move(shape), a.values());
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("reshape", std::move(out), track, [na](const Buffer<S>& g) {
    if (na->requires_grad) na->accumulate(g);
  });
}

template <class S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index start, Index length) {
  axis = detail::normalize_axis(axis, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  if (start < 0 || length < 0 || start + length > sp.extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for " + to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  Tensor<S> out(shape);
  const S* src = a.data();
  S* dst = out.data();
  for (Index o = 0; o < sp.outer; ++o) {
    const S* s = src + (o * sp.extent + start) * sp.inner;
    std::copy(s, s + length * sp.inner, dst + o * length * sp.inner);
  }
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("slice", std::move(out), track, [na, sp, start, length](const Buffer<S>& g) {
    if (!na->requires_grad) return;
    Buffer<S> ga = Buffer<S>::Zero(na->value.size());
    for (Index o = 0; o < sp.outer; ++o) {
      const S* s = g.data() + o * length * sp.inner;
      S* d = ga.data() + (o * sp.extent + start) * sp.inner;
      for (Index i = 0; i < length * sp.inner; ++i) d[i] += s[i];
    }
    na->accumulate(ga);
  });
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  axis = detail::normalize_axis(axis, parts.front().rank());
  Shape shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (static_cast<Index>(i) != axis && ps[i] != shape[i]) {
        throw ShapeError("concat extent mismatch " + to_string(ps) + " vs " + to_string(shape));
      }
    }
    total += ps[static_cast<std::size_t>(axis)];
  }
  shape[static_cast<std::size_t>(axis)] = total;
  Tensor<S> out(shape);
  const auto sp = detail::split_at(shape, axis);
  std::vector<Index> offsets;
  std::vector<Index> extents;
  Index off = 0;
  for (const auto& p : parts) {
    const Index e = p.dim(axis);
    offsets.push_back(off);
    extents.push_back(e);
    for (Index o = 0; o < sp.outer; ++o) {
      const S* s = p.data() + o * e * sp.inner;
      std::copy(s, s + e * sp.inner, out.data() + (o * sp.extent + off) * sp.inner);
    }
    off += e;
  }
  std::vector<const Tensor<S>*> ptrs;
  bool track = false;
  if (active_tape<S>() != nullptr) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  std::vector<typename Tensor<S>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::finish<S>("concat", std::move(out), track,
                           [nodes, offsets, extents, sp](const Buffer<S>& g) {
                             for (std::size_t k = 0; k < nodes.size(); ++k) {
                               if (!nodes[k]->requires_grad) continue;
                               const Index e = extents[k];
                               Buffer<S> gk(nodes[k]->value.size());
                               for (Index o = 0; o < sp.outer; ++o) {
                                 const S* s = g.data() + (o * sp.extent + offsets[k]) * sp.inner;
                                 std::copy(s, s + e * sp.inner, gk.data() + o * e * sp.inner);
                               }
                               nodes[k]->accumulate(gk);
                             }
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(a.values().sum());
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("sum", std::move(out), track, [na](const Buffer<S>& g) {
    if (na->requires_grad) na->accumulate(Buffer<S>::Constant(na->value.size(), g[0]));
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

/// Sum along `axis`, keeping it with extent 1.
template <class S>
Tensor<S> sum(const Tensor<S>& a, Index axis) {
  axis = detail::normalize_axis(axis, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] = 1;
  Tensor<S> out(shape);
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index e = 0; e < sp.extent; ++e) {
      const S* s = a.data() + (o * sp.extent + e) * sp.inner;
      S* d = out.data() + o * sp.inner;
      for (Index i = 0; i < sp.inner; ++i) d[i] += s[i];
    }
  }
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("sum_axis", std::move(out), track, [na, sp](const Buffer<S>& g) {
    if (!na->requires_grad) return;
    Buffer<S> ga(na->value.size());
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index e = 0; e < sp.extent; ++e) {
        for (Index i = 0; i < sp.inner; ++i) ga[(o * sp.extent + e) * sp.inner + i] = g[o * sp.inner + i];
      }
    }
    na->accumulate(ga);
  });
}

/// out_i = sum_{j<i} x_j along `axis` (first entry is 0).
template <class S>
Tensor<S> cumsum_exclusive(const Tensor<S>& a, Index axis) {
  axis = detail::normalize_axis(axis, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  Tensor<S> out(a.shape());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      S acc = S(0);
      for (Index e = 0; e < sp.extent; ++e) {
        const Index at = (o * sp.extent + e) * sp.inner + i;
        out.data()[at] = acc;
        acc += a.data()[at];
      }
    }
  }
  const bool track = detail::tracking<S>({&a});
  auto na = a.node();
  return detail::finish<S>("cumsum_exclusive", std::move(out), track, [na, sp](const Buffer<S>& g) {
    if (!na->requires_grad) return;
    Buffer<S> ga(na->value.size());
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        S acc = S(0);
        for (Index e = sp.extent; e-- > 0;) {
          const Index at = (o * sp.extent + e) * sp.inner + i;
          ga[at] = acc;
          acc += g[at];
        }
      }
    }
    na->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Max-subtracted softmax along `axis`.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  axis = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), axis);
  Tensor<S> out(x.shape());
  const S* src = x.data();
  S* dst = out.data();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      S mx = src[base];
      for (Index e = 1; e < sp.extent; ++e) mx = std::max(mx, src[base + e * sp.inner]);
      S total = S(0);
      for (Index e = 0; e < sp.extent; ++e) {
        const S v = std::exp(src[base + e * sp.inner] - mx);
        dst[base + e * sp.inner] = v;
        total += v;
      }
      for (Index e = 0; e < sp.extent; ++e) dst[base + e * sp.inner] /= total;
    }
  }
  const bool track = detail::tracking<S>({&x});
  auto nx = x.node();
  auto no = out.node();
  return detail::finish<S>("softmax", std::move(out), track, [nx, no, sp](const Buffer<S>& g) {
    if (!nx->requires_grad) return;
    const S* y = no->value.data();
    Buffer<S> gx(g.size());
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.extent * sp.inner + i;
        S dot = S(0);
        for (Index e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        for (Index e = 0; e < sp.extent; ++e) {
          const Index at = base + e * sp.inner;
          gx[at] = y[at] * (g[at] - dot);
        }
      }
    }
    nx->accumulate(gx);
  });
}

/// Normalizes over the last axis, then applies gamma/beta.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const Index d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm width " + std::to_string(d) + " does not match gamma/beta");
  }
  const Index rows = d == 0 ? 0 : x.size() / d;
  Tensor<S> out(x.shape());
  Buffer<S> xhat(x.size());
  Buffer<S> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const S* row = x.data() + r * d;
    S mu = S(0);
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (Index j = 0; j < d; ++j) {
      const S h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out.data()[r * d + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  const bool track = detail::tracking<S>({&x, &gamma, &beta});
  auto nx = x.node();
  auto ng = gamma.node();
  auto nb = beta.node();
  return detail::finish<S>(
      "layer_norm", std::move(out), track, [nx, ng, nb, xhat, inv_std, rows, d](const Buffer<S>& g) {
        if (nx->requires_grad) {
          Buffer<S> gx(g.size());
          for (Index r = 0; r < rows; ++r) {
            S m1 = S(0), m2 = S(0);
            for (Index j = 0; j < d; ++j) {
              const S dh = g[r * d + j] * ng->value[j];
              m1 += dh;
              m2 += dh * xhat[r * d + j];
            }
            m1 /= static_cast<S>(d);
            m2 /= static_cast<S>(d);
            for (Index j = 0; j < d; ++j) {
              const S dh = g[r * d + j] * ng->value[j];
              gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
            }
          }
          nx->accumulate(gx);
        }
        if (ng->requires_grad || nb->requires_grad) {
          Buffer<S> gg = Buffer<S>::Zero(d);
          Buffer<S> gb = Buffer<S>::Zero(d);
          for (Index r = 0; r < rows; ++r) {
            for (Index j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gb[j] += g[r * d + j];
            }
          }
          if (ng->requires_grad) ng->accumulate(gg);
          if (nb->requires_grad) nb->accumulate(gb);
        }
      });
}

/// Number of all-zero slices seen by l2_normalize since process start.
inline std::size_t l2_normalize_zero_slices() { return detail::zero_slice_counter().load(); }

/// x / sqrt(sum(x^2) + eps^2) along `axis`.
template <class S>
Tensor<S> l2_normalize(const Tensor<S>& x, Index axis, S eps) {
  axis = detail::normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), axis);
  Tensor<S> out(x.shape());
  Buffer<S> norms(sp.outer * sp.inner);
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      S ss = S(0);
      for (Index e = 0; e < sp.extent; ++e) ss += x.data()[base + e * sp.inner] * x.data()[base + e * sp.inner];
      if (ss == S(0)) detail::zero_slice_counter().fetch_add(1);
      const S n = std::sqrt(ss + eps * eps);
      norms[o * sp.inner + i] = n;
      for (Index e = 0; e < sp.extent; ++e) out.data()[base + e * sp.inner] = x.data()[base + e * sp.inner] / n;
    }
  }
  const bool track = detail::tracking<S>({&x});
  auto nx = x.node();
  auto no = out.node();
  return detail::finish<S>("l2_normalize", std::move(out), track, [nx, no, norms, sp](const Buffer<S>& g) {
    if (!nx->requires_grad) return;
    const S* y = no->value.data();
    Buffer<S> gx(g.size());
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.extent * sp.inner + i;
        S dot = S(0);
        for (Index e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        const S n = norms[o * sp.inner + i];
        for (Index e = 0; e < sp.extent; ++e) {
          const Index at = base + e * sp.inner;
          gx[at] = (g[at] - y[at] * dot) / n;
        }
      }
    }
    nx->accumulate(gx);
  });
}

}  // namespace hyperfield
