#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "geopix/blas.hpp"
#include "geopix/tape.hpp"
#include "geopix/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes its value
// eagerly, and records a backward rule on the tape of its inputs.

namespace geopix::ops {

namespace detail {

// Message is only built on failure.
#define GEOPIX_REQUIRE(cond, msg)                      \
  do {                                                 \
    if (!(cond)) throw ::geopix::DimensionError(msg);  \
  } while (0)

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
bool wants(Tape<T>& t, std::size_t id) {
  return t.requires_grad(id);
}

// Packs a boolean pattern into 64-bit words and feeds it to the tape's
// branch signature.
template <typename T, typename Pred>
void note_pattern(Tape<T>& tape, std::size_t n, Pred pred) {
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < n; ++i) {
    word = (word << 1) | (pred(i) ? 1u : 0u);
    if ((i & 63) == 63) {
      tape.note_branch(word);
      word = 0;
    }
  }
  tape.note_branch(word ^ n);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  if (x.numel() == 1 && y.numel() != 1) return add(b, a);
  const bool scalar = y.numel() == 1 && x.numel() != 1;
  GEOPIX_REQUIRE(scalar || x.shape() == y.shape(),
                  "add: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  BasicTensor<T> out = x;
  if (scalar) {
    for (auto& v : out.values()) v += y[0];
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += y[i];
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, scalar](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad(ib);
      if (scalar) {
        T s{0};
        for (std::size_t i = 0; i < g.numel(); ++i) s += g[i];
        gb[0] += s;
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      }
    }
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  GEOPIX_REQUIRE(x.shape() == y.shape(), "sub: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  BasicTensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= y[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

/// Elementwise product; either side may be a one-element scalar tensor.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  if (x.numel() == 1 && y.numel() != 1) return mul(b, a);
  const bool scalar = y.numel() == 1 && x.numel() != 1;
  GEOPIX_REQUIRE(scalar || x.shape() == y.shape(),
                  "mul: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  BasicTensor<T> out = x;
  if (scalar) {
    for (auto& v : out.values()) v *= y[0];
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= y[i];
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, scalar](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(ib);
    if (detail::wants(t, ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (scalar ? y[0] : y[i]);
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad(ib);
      if (scalar) {
        T s{0};
        for (std::size_t i = 0; i < g.numel(); ++i) s += g[i] * x[i];
        gb[0] += s;
      } else {
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x[i];
      }
    }
  }, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
  }, "scale");
}

/// x[M,N] + b[N] broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const auto& xv = x.value();
  const auto& bv = b.value();
  GEOPIX_REQUIRE(xv.rank() == 2 && bv.numel() == xv.extent(1), "add_bias: expects [M,N] and [N]");
  const std::size_t m = xv.extent(0), n = xv.extent(1);
  BasicTensor<T> out = xv;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->record(std::move(out), {x, b}, [ix, ib, m, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::wants(t, ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  }, "add_bias");
}

template <typename T>
Var<T> relu(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  detail::note_pattern(*a.tape, out.numel(), [&](std::size_t i) { return out[i] > T{0}; });
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > T{0}) ga[i] += g[i];
  }, "relu");
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.values()) v = T{1} / (T{1} + std::exp(-v));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (T{1} - y[i]);
  }, "sigmoid");
}

// ------------------------------------------------------------------ products

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  GEOPIX_REQUIRE(x.rank() == 2 && y.rank() == 2, "matmul: rank-2 operands required");
  GEOPIX_REQUIRE(x.extent(1) == y.extent(0),
                  "matmul: inner dimensions differ " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  const std::size_t m = x.extent(0), k = x.extent(1), n = y.extent(1);
  BasicTensor<T> out({m, n});
  detail::gemm<T>(false, false, m, n, k, x.data(), k, y.data(), n, T{0}, out.data(), n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    // ga += g y^T, gb += x^T g
    if (detail::wants(t, ia))
      detail::gemm<T>(false, true, m, k, n, g, n, t.value(ib).data(), n, T{1}, t.grad(ia).data(), k);
    if (detail::wants(t, ib))
      detail::gemm<T>(true, false, k, n, m, t.value(ia).data(), k, g, n, T{1}, t.grad(ib).data(), n);
  }, "matmul");
}

/// a[M,K] x b[N,K]^T -> [M,N].
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& y = b.value();
  GEOPIX_REQUIRE(x.rank() == 2 && y.rank() == 2, "matmul_nt: rank-2 operands required");
  GEOPIX_REQUIRE(x.extent(1) == y.extent(1),
                  "matmul_nt: inner dimensions differ " + shape_str(x.shape()) + " x " + shape_str(y.shape()) + "^T");
  const std::size_t m = x.extent(0), k = x.extent(1), n = y.extent(0);
  BasicTensor<T> out({m, n});
  detail::gemm<T>(false, true, m, n, k, x.data(), k, y.data(), k, T{0}, out.data(), n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    // ga += g y, gb += g^T x
    if (detail::wants(t, ia))
      detail::gemm<T>(false, false, m, k, n, g, n, t.value(ib).data(), k, T{1}, t.grad(ia).data(), k);
    if (detail::wants(t, ib))
      detail::gemm<T>(true, false, n, k, m, g, n, t.value(ia).data(), k, T{1}, t.grad(ib).data(), k);
  }, "matmul_nt");
}

// ------------------------------------------------------------- shape changes

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  }, "reshape");
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> perm) {
  const auto& x = a.value();
  const std::size_t r = x.rank();
  GEOPIX_REQUIRE(perm.size() == r, "permute: permutation rank mismatch");
  {
    std::vector<bool> seen(r, false);
    for (std::size_t p : perm) {
      GEOPIX_REQUIRE(p < r && !seen[p], "permute: invalid permutation");
      seen[p] = true;
    }
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.extent(perm[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.extent(i + 1);
  // src index for each destination element
  std::vector<std::size_t> src(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
      std::size_t s = 0;
      for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_stride[perm[i]];
      src[o] = s;
      for (std::size_t i = r; i-- > 0;) {
        if (++idx[i] < os[i]) break;
        idx[i] = 0;
      }
    }
  }
  BasicTensor<T> out(os);
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = x[src[o]];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, src = std::move(src)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += g[o];
  }, "permute");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  GEOPIX_REQUIRE(a.value().rank() == 2, "transpose: rank-2 operand required");
  return permute(a, {1, 0});
}

/// Slice [start, start+len) along `axis`.
template <typename T>
Var<T> narrow(Var<T> a, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& x = a.value();
  const auto sp = detail::split_at(x.shape(), axis);
  GEOPIX_REQUIRE(len >= 1 && start + len <= sp.n, "narrow: range out of bounds");
  Shape os = x.shape();
  os[axis] = len;
  BasicTensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data() + (o * sp.n + start) * sp.inner, len * sp.inner, out.data() + o * len * sp.inner);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, sp, start, len](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* src = g.data() + o * len * sp.inner;
      T* dst = ga.data() + (o * sp.n + start) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  }, "narrow");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  GEOPIX_REQUIRE(!xs.empty(), "concat: no inputs");
  const Shape& s0 = xs.front().shape();
  GEOPIX_REQUIRE(axis < s0.size(), "concat: axis out of range");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    GEOPIX_REQUIRE(s.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      GEOPIX_REQUIRE(i == axis || s[i] == s0[i], "concat: extent mismatch off the concat axis");
    lens.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  const auto sp = detail::split_at(os, axis);
  BasicTensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t q = 0; q < xs.size(); ++q) {
    const auto& x = xs[q].value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data() + o * lens[q] * sp.inner, lens[q] * sp.inner, out.data() + (o * total + off) * sp.inner);
    off += lens[q];
  }
  std::vector<std::size_t> ids;
  for (const auto& v : xs) ids.push_back(v.id);
  return xs.front().tape->record(std::move(out), xs, [ids, lens, sp, total](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t q = 0; q < ids.size(); ++q) {
      if (detail::wants(t, ids[q])) {
        auto& gx = t.grad(ids[q]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * total + off) * sp.inner;
          T* dst = gx.data() + o * lens[q] * sp.inner;
          for (std::size_t i = 0; i < lens[q] * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off += lens[q];
    }
  }, "concat");
}

/// Views `a` as rows of `row_shape` and gathers the listed rows:
/// output shape = [rows.size()] ++ row_shape. Gradient scatters back into
/// exactly the gathered rows.
template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::size_t> rows, const Shape& row_shape) {
  const auto& x = a.value();
  const std::size_t rn = shape_numel(row_shape);
  GEOPIX_REQUIRE(rn > 0 && x.numel() % rn == 0, "gather_rows: row shape does not tile the source");
  const std::size_t nrows = x.numel() / rn;
  GEOPIX_REQUIRE(!rows.empty(), "gather_rows: empty row list");
  for (std::size_t r : rows)
    if (r >= nrows) throw IndexError("gather_rows: row " + std::to_string(r) + " >= " + std::to_string(nrows));
  Shape os{rows.size()};
  os.insert(os.end(), row_shape.begin(), row_shape.end());
  BasicTensor<T> out(os);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.data() + rows[i] * rn, rn, out.data() + i * rn);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, idx = std::move(idx), rn](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = g.data() + i * rn;
      T* dst = ga.data() + idx[i] * rn;
      for (std::size_t j = 0; j < rn; ++j) dst[j] += src[j];
    }
  }, "gather_rows");
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(BasicTensor<T>::scalar(s), {a}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(ia).values()) v += g;
  }, "sum");
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

/// Sum over `axis`, removing it (a rank-1 input yields shape [1]).
template <typename T>
Var<T> sum_axis(Var<T> a, std::size_t axis) {
  const auto& x = a.value();
  const auto sp = detail::split_at(x.shape(), axis);
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.extent(i));
  if (os.empty()) os.push_back(1);
  BasicTensor<T> out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, sp](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  }, "sum_axis");
}

template <typename T>
Var<T> mean_axis(Var<T> a, std::size_t axis) {
  const std::size_t n = a.value().extent(axis);
  return scale(sum_axis(a, axis), T{1} / static_cast<T>(n));
}

/// Numerically stabilized softmax along `axis`.
template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const auto& x = a.value();
  const auto sp = detail::split_at(x.shape(), axis);
  BasicTensor<T> out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      T s{0};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= s;
    }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, sp](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& ga = t.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot{0};
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t q = base + j * sp.inner;
          ga[q] += y[q] * (g[q] - dot);
        }
      }
  }, "softmax");
}

/// Layer normalization over the last axis of x[M,N] with affine gamma/beta[N].
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  GEOPIX_REQUIRE(xv.rank() == 2, "layer_norm: expects [M,N]");
  const std::size_t m = xv.extent(0), n = xv.extent(1);
  GEOPIX_REQUIRE(gamma.numel() == n && beta.numel() == n, "layer_norm: affine size mismatch");
  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> rstd(m);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [ix, ig, ib, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& gv = t.value(ig);
    if (detail::wants(t, ig)) {
      auto& gg = t.grad(ig);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
    }
    if (detail::wants(t, ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
    if (detail::wants(t, ix)) {
      auto& gx = t.grad(ix);
      for (std::size_t i = 0; i < m; ++i) {
        T s1{0}, s2{0};
        for (std::size_t j = 0; j < n; ++j) {
          const T dh = g[i * n + j] * gv[j];
          s1 += dh;
          s2 += dh * xhat[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const T dh = g[i * n + j] * gv[j];
          gx[i * n + j] += rstd[i] * (dh - s1 / static_cast<T>(n) - xhat[i * n + j] * s2 / static_cast<T>(n));
        }
      }
    }
  }, "layer_norm");
}

/// Per (outer, inner) position, keeps the entry along `axis` with the largest
/// magnitude (lowest index on ties). The axis is kept with extent 1.
template <typename T>
Var<T> select_max_abs(Var<T> a, std::size_t axis) {
  const auto& x = a.value();
  const auto sp = detail::split_at(x.shape(), axis);
  Shape os = x.shape();
  os[axis] = 1;
  BasicTensor<T> out(os);
  std::vector<std::size_t> src(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T bv = std::abs(x[o * sp.n * sp.inner + i]);
      for (std::size_t j = 1; j < sp.n; ++j) {
        const T v = std::abs(x[(o * sp.n + j) * sp.inner + i]);
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      const std::size_t q = (o * sp.n + best) * sp.inner + i;
      src[o * sp.inner + i] = q;
      out[o * sp.inner + i] = x[q];
    }
  for (std::size_t q : src) a.tape->note_branch(q);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, src = std::move(src)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += g[o];
  }, "select_max_abs");
}

/// Index of the maximum along `axis` (lowest index on ties); not differentiable.
template <typename T>
std::vector<std::size_t> argmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis);
  std::vector<std::size_t> out(sp.outer * sp.inner, 0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T bv = x[o * sp.n * sp.inner + i];
      for (std::size_t j = 1; j < sp.n; ++j) {
        const T v = x[(o * sp.n + j) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * sp.inner + i] = best;
    }
  return out;
}

// --------------------------------------------------------------- convolutions

namespace detail {

struct ConvGeom {
  std::size_t ci, dp, h, w, kd, kh, kw;
  std::size_t rows() const { return ci * kd * kh * kw; }
  std::size_t cols() const { return dp * h * w; }
};

// Same-padded patch matrix [ci*kd*kh*kw, dp*h*w] of one [ci,dp,h,w] volume.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const auto D = static_cast<std::ptrdiff_t>(g.dp), H = static_cast<std::ptrdiff_t>(g.h),
             W = static_cast<std::ptrdiff_t>(g.w);
  const auto pd = static_cast<std::ptrdiff_t>(g.kd / 2), ph = static_cast<std::ptrdiff_t>(g.kh / 2),
             pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
          T* row = col + r * g.cols();
          const auto dz = static_cast<std::ptrdiff_t>(kz) - pd, dy = static_cast<std::ptrdiff_t>(ky) - ph,
                     dx = static_cast<std::ptrdiff_t>(kx) - pw;
          for (std::ptrdiff_t z = 0; z < D; ++z)
            for (std::ptrdiff_t y = 0; y < H; ++y) {
              T* o = row + (z * H + y) * W;
              const std::ptrdiff_t sz = z + dz, sy = y + dy;
              if (sz < 0 || sz >= D || sy < 0 || sy >= H) {
                std::fill(o, o + W, T{0});
                continue;
              }
              const T* src = x + ((static_cast<std::ptrdiff_t>(c) * D + sz) * H + sy) * W;
              const std::ptrdiff_t x0 = std::min(W, std::max<std::ptrdiff_t>(0, -dx));
              const std::ptrdiff_t x1 = std::max(x0, std::min(W, W - dx));
              std::fill(o, o + x0, T{0});
              std::copy(src + x0 + dx, src + x1 + dx, o + x0);
              std::fill(o + x1, o + W, T{0});
            }
        }
}

// Adjoint of im2col: accumulates patch gradients back into the volume.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const auto D = static_cast<std::ptrdiff_t>(g.dp), H = static_cast<std::ptrdiff_t>(g.h),
             W = static_cast<std::ptrdiff_t>(g.w);
  const auto pd = static_cast<std::ptrdiff_t>(g.kd / 2), ph = static_cast<std::ptrdiff_t>(g.kh / 2),
             pw = static_cast<std::ptrdiff_t>(g.kw / 2);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz)
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
          const T* row = col + r * g.cols();
          const auto dz = static_cast<std::ptrdiff_t>(kz) - pd, dy = static_cast<std::ptrdiff_t>(ky) - ph,
                     dx = static_cast<std::ptrdiff_t>(kx) - pw;
          for (std::ptrdiff_t z = 0; z < D; ++z)
            for (std::ptrdiff_t y = 0; y < H; ++y) {
              const std::ptrdiff_t sz = z + dz, sy = y + dy;
              if (sz < 0 || sz >= D || sy < 0 || sy >= H) continue;
              const T* o = row + (z * H + y) * W;
              T* dst = x + ((static_cast<std::ptrdiff_t>(c) * D + sz) * H + sy) * W;
              const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
              for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx + dx] += o[xx];
            }
        }
}

// Shared body of conv2d/conv3d over `batch` volumes of geometry g.
template <typename T>
Var<T> conv_same(Var<T> x, Var<T> k, std::optional<Var<T>> bias, std::size_t batch, std::size_t co, ConvGeom geo,
                 Shape out_shape, const char* name) {
  const auto& xv = x.value();
  const auto& kv = k.value();
  BasicTensor<T> out(std::move(out_shape));
  const std::size_t rows = geo.rows(), cols = geo.cols(), in_vol = geo.ci * cols, out_vol = co * cols;
  thread_local std::vector<T> col;
  col.resize(rows * cols);
  for (std::size_t b = 0; b < batch; ++b) {
    T* op = out.data() + b * out_vol;
    if (bias)
      for (std::size_t o = 0; o < co; ++o) std::fill(op + o * cols, op + (o + 1) * cols, bias->value()[o]);
    im2col(xv.data() + b * in_vol, geo, col.data());
    gemm<T>(false, false, co, cols, rows, kv.data(), rows, col.data(), cols, bias ? T{1} : T{0}, op, cols);
  }
  std::vector<Var<T>> ins{x, k};
  if (bias) ins.push_back(*bias);
  const std::size_t ix = x.id, ik = k.id;
  const std::size_t ib = bias ? bias->id : 0;
  const bool has_bias = bias.has_value();
  return x.tape->record(std::move(out), ins, [=](Tape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    if (has_bias && wants(t, ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < co; ++o) {
          const T* gp = g + b * out_vol + o * cols;
          T s{0};
          for (std::size_t i = 0; i < cols; ++i) s += gp[i];
          gb[o] += s;
        }
    }
    const bool gx = wants(t, ix), gk = wants(t, ik);
    if (!gx && !gk) return;
    thread_local std::vector<T> buf;
    buf.resize(rows * cols);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gp = g + b * out_vol;
      if (gk) {
        im2col(t.value(ix).data() + b * in_vol, geo, buf.data());
        gemm<T>(false, true, co, rows, cols, gp, cols, buf.data(), cols, T{1}, t.grad(ik).data(), rows);
      }
      if (gx) {
        gemm<T>(true, false, rows, cols, co, t.value(ik).data(), rows, gp, cols, T{0}, buf.data(), cols);
        col2im(buf.data(), geo, t.grad(ix).data() + b * in_vol);
      }
    }
  }, name);
}

}  // namespace detail

/// Same-padded 2-D cross-correlation. x: [C_in,H,W] or [B,C_in,H,W];
/// k: [C_out,C_in,kh,kw] with odd kh, kw; bias: [C_out] or absent.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, std::optional<Var<T>> bias = std::nullopt) {
  const auto& xv = x.value();
  const auto& kv = k.value();
  GEOPIX_REQUIRE(xv.rank() == 3 || xv.rank() == 4, "conv2d: input must be [C,H,W] or [B,C,H,W]");
  GEOPIX_REQUIRE(kv.rank() == 4, "conv2d: kernel must be [C_out,C_in,kh,kw]");
  const std::size_t off = xv.rank() - 3;
  const std::size_t batch = off ? xv.extent(0) : 1;
  const std::size_t ci = xv.extent(off), h = xv.extent(off + 1), w = xv.extent(off + 2);
  const std::size_t co = kv.extent(0), kh = kv.extent(2), kw = kv.extent(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel extents must be odd for same padding");
  GEOPIX_REQUIRE(kv.extent(1) == ci, "conv2d: kernel expects " + std::to_string(kv.extent(1)) +
                                          " input channels, got " + std::to_string(ci));
  if (bias) GEOPIX_REQUIRE(bias->numel() == co, "conv2d: bias size mismatch");
  Shape os = xv.shape();
  os[off] = co;
  return detail::conv_same(x, k, bias, batch, co, detail::ConvGeom{ci, 1, h, w, 1, kh, kw}, std::move(os), "conv2d");
}

/// Same-padded 3-D cross-correlation. x: [C_in,Dp,H,W]; k: [C_out,C_in,kd,kh,kw].
template <typename T>
Var<T> conv3d(Var<T> x, Var<T> k, std::optional<Var<T>> bias = std::nullopt) {
  const auto& xv = x.value();
  const auto& kv = k.value();
  GEOPIX_REQUIRE(xv.rank() == 4, "conv3d: input must be [C,D,H,W]");
  GEOPIX_REQUIRE(kv.rank() == 5, "conv3d: kernel must be [C_out,C_in,kd,kh,kw]");
  const std::size_t ci = xv.extent(0), dp = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
  const std::size_t co = kv.extent(0), kd = kv.extent(2), kh = kv.extent(3), kw = kv.extent(4);
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0)
    throw ConfigError("conv3d: kernel extents must be odd for same padding");
  GEOPIX_REQUIRE(kv.extent(1) == ci, "conv3d: input channel mismatch");
  if (bias) GEOPIX_REQUIRE(bias->numel() == co, "conv3d: bias size mismatch");
  return detail::conv_same(x, k, bias, 1, co, detail::ConvGeom{ci, dp, h, w, kd, kh, kw}, Shape{co, dp, h, w},
                           "conv3d");
}

/// Non-overlapping average pooling over the two trailing axes.
template <typename T>
Var<T> avg_pool2d(Var<T> a, std::size_t factor) {
  const auto& x = a.value();
  GEOPIX_REQUIRE(x.rank() >= 2, "avg_pool2d: rank >= 2 required");
  const std::size_t h = x.extent(x.rank() - 2), w = x.extent(x.rank() - 1);
  if (factor == 0 || h % factor != 0 || w % factor != 0)
    throw ConfigError("avg_pool2d: extents " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by " + std::to_string(factor));
  const std::size_t lead = x.numel() / (h * w);
  const std::size_t oh = h / factor, ow = w / factor;
  Shape os = x.shape();
  os[os.size() - 2] = oh;
  os[os.size() - 1] = ow;
  BasicTensor<T> out(os);
  const T inv = T{1} / static_cast<T>(factor * factor);
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(l * oh + y / factor) * ow + xx / factor] += x[(l * h + y) * w + xx] * inv;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t l = 0; l < lead; ++l)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) ga[(l * h + y) * w + xx] += g[(l * oh + y / factor) * ow + xx / factor] * inv;
  }, "avg_pool2d");
}

namespace detail {

struct LerpTap {
  std::size_t i0 = 0, i1 = 0;
  double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel-centre source taps (align_corners = false), clamped at the edges.
inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of the two trailing axes (align_corners = false). Equal
/// sizes pass through unchanged.
template <typename T>
Var<T> resize_bilinear(Var<T> a, std::size_t out_h, std::size_t out_w) {
  const auto& x = a.value();
  GEOPIX_REQUIRE(x.rank() >= 2, "resize_bilinear: rank >= 2 required");
  if (out_h == 0 || out_w == 0) throw ConfigError("resize_bilinear: output extents must be >= 1");
  const std::size_t h = x.extent(x.rank() - 2), w = x.extent(x.rank() - 1);
  if (h == out_h && w == out_w) return reshape(a, x.shape());
  const std::size_t lead = x.numel() / (h * w);
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);
  Shape os = x.shape();
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  BasicTensor<T> out(os);
  for (std::size_t l = 0; l < lead; ++l) {
    const T* ip = x.data() + l * h * w;
    T* op = out.data() + l * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a0 = ty[y];
      const T wy1 = static_cast<T>(a0.w1), wy0 = T{1} - wy1;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& b0 = tx[xx];
        const T wx1 = static_cast<T>(b0.w1), wx0 = T{1} - wx1;
        op[y * out_w + xx] = wy0 * (wx0 * ip[a0.i0 * w + b0.i0] + wx1 * ip[a0.i0 * w + b0.i1]) +
                             wy1 * (wx0 * ip[a0.i1 * w + b0.i0] + wx1 * ip[a0.i1 * w + b0.i1]);
      }
    }
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t l = 0; l < lead; ++l) {
      const T* gp = g.data() + l * out_h * out_w;
      T* ip = ga.data() + l * h * w;
      for (std::size_t y = 0; y < out_h; ++y) {
        const auto& a0 = ty[y];
        const T wy1 = static_cast<T>(a0.w1), wy0 = T{1} - wy1;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const auto& b0 = tx[xx];
          const T wx1 = static_cast<T>(b0.w1), wx0 = T{1} - wx1;
          const T gv = gp[y * out_w + xx];
          ip[a0.i0 * w + b0.i0] += gv * wy0 * wx0;
          ip[a0.i0 * w + b0.i1] += gv * wy0 * wx1;
          ip[a0.i1 * w + b0.i0] += gv * wy1 * wx0;
          ip[a0.i1 * w + b0.i1] += gv * wy1 * wx1;
        }
      }
    }
  }, "resize_bilinear");
}

// ------------------------------------------------------------------ attention

template <typename T>
struct AttentionOutput {
  Var<T> out;      // [Lq, Dv]
  Var<T> weights;  // [Lq, Lk], rows sum to 1
};

/// softmax(q k^T / sqrt(Dk)) v for q[Lq,Dk], k[Lk,Dk], v[Lk,Dv].
template <typename T>
AttentionOutput<T> attention(Var<T> q, Var<T> k, Var<T> v) {
  if (k.value().empty() || v.value().empty()) throw ConfigError("attention: empty key/value set");
  GEOPIX_REQUIRE(q.value().rank() == 2 && k.value().rank() == 2 && v.value().rank() == 2,
                  "attention: rank-2 operands required");
  GEOPIX_REQUIRE(q.value().extent(1) == k.value().extent(1), "attention: query/key width mismatch");
  GEOPIX_REQUIRE(k.value().extent(0) == v.value().extent(0), "attention: key/value length mismatch");
  const T inv = T{1} / std::sqrt(static_cast<T>(q.value().extent(1)));
  auto w = softmax(scale(matmul_nt(q, k), inv), 1);
  return {matmul(w, v), w};
}

// --------------------------------------------------------------------- losses

/// Mean binary cross-entropy with logits against fixed targets.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const BasicTensor<T>& target) {
  const auto& x = logits.value();
  GEOPIX_REQUIRE(x.shape() == target.shape(), "bce_with_logits: target shape mismatch");
  T s{0};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T z = x[i];
    s += std::max(z, T{0}) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T n = static_cast<T>(x.numel());
  const std::size_t il = logits.id;
  return logits.tape->record(BasicTensor<T>::scalar(s / n), {logits}, [il, target, n](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    const auto& x = t.value(il);
    auto& gl = t.grad(il);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const T p = T{1} / (T{1} + std::exp(-x[i]));
      gl[i] += g * (p - target[i]) / n;
    }
  }, "bce_with_logits");
}

/// Soft Dice loss on sigmoid(logits), averaged over the leading axis.
template <typename T>
Var<T> dice_loss(Var<T> logits, const BasicTensor<T>& target, T smooth = T{1}) {
  const auto& x = logits.value();
  GEOPIX_REQUIRE(x.shape() == target.shape(), "dice_loss: target shape mismatch");
  const std::size_t k = x.extent(0);
  const std::size_t per = x.numel() / k;
  std::vector<T> inter(k, T{0}), den(k, T{0});
  BasicTensor<T> prob(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) prob[i] = T{1} / (T{1} + std::exp(-x[i]));
  T total{0};
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t j = 0; j < per; ++j) {
      inter[a] += prob[a * per + j] * target[a * per + j];
      den[a] += prob[a * per + j] + target[a * per + j];
    }
    total += T{1} - (T{2} * inter[a] + smooth) / (den[a] + smooth);
  }
  const std::size_t il = logits.id;
  return logits.tape->record(
      BasicTensor<T>::scalar(total / static_cast<T>(k)), {logits},
      [il, target, prob = std::move(prob), inter = std::move(inter), den = std::move(den), k, per, smooth](
          Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(k);
        auto& gl = t.grad(il);
        for (std::size_t a = 0; a < k; ++a) {
          const T d = den[a] + smooth;
          const T num = T{2} * inter[a] + smooth;
          for (std::size_t j = 0; j < per; ++j) {
            const std::size_t q = a * per + j;
            const T dldp = -(T{2} * target[q] * d - num) / (d * d);
            gl[q] += g * dldp * prob[q] * (T{1} - prob[q]);
          }
        }
      },
      "dice_loss");
}

/// Mean softmax cross-entropy of logits[K,C] against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> labels) {
  const auto& x = logits.value();
  GEOPIX_REQUIRE(x.rank() == 2 && x.extent(0) == labels.size(), "cross_entropy: expects [K,C] and K labels");
  const std::size_t k = x.extent(0), c = x.extent(1);
  BasicTensor<T> prob(x.shape());
  T total{0};
  for (std::size_t a = 0; a < k; ++a) {
    if (labels[a] >= c) throw IndexError("cross_entropy: label out of range");
    T mx = x[a * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[a * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[a * c + j] - mx);
    for (std::size_t j = 0; j < c; ++j) prob[a * c + j] = std::exp(x[a * c + j] - mx) / s;
    total += -(x[a * c + labels[a]] - mx - std::log(s));
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id;
  return logits.tape->record(BasicTensor<T>::scalar(total / static_cast<T>(k)), {logits},
                             [il, prob = std::move(prob), lab = std::move(lab), k, c](Tape<T>& t, std::size_t self) {
                               const T g = t.grad(self)[0] / static_cast<T>(k);
                               auto& gl = t.grad(il);
                               for (std::size_t a = 0; a < k; ++a)
                                 for (std::size_t j = 0; j < c; ++j)
                                   gl[a * c + j] += g * (prob[a * c + j] - (j == lab[a] ? T{1} : T{0}));
                             },
                             "cross_entropy");
}

}  // namespace geopix::ops
