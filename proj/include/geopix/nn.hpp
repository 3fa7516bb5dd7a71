#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "geopix/ops.hpp"

// Small parameterized layers shared by the model modules.

namespace geopix::nn {

template <typename T>
BasicTensor<T> xavier(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return BasicTensor<T>::uniform(std::move(shape), rng, static_cast<T>(-a), static_cast<T>(a));
}

/// y = x W (+ b), x: [M, in], W: [in, out].
template <typename T>
struct Linear {
  Parameter<T> weight;
  std::optional<Parameter<T>> bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(name + ".weight", xavier<T>({in, out}, in, out, rng)) {
    if (with_bias) bias.emplace(name + ".bias", BasicTensor<T>::zeros({out}), false);
  }

  std::size_t in_features() const { return weight.value.extent(0); }
  std::size_t out_features() const { return weight.value.extent(1); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    auto y = ops::matmul(x, tape.param(weight));
    return bias ? ops::add_bias(y, tape.param(*bias)) : y;
  }

  void set_identity() {
    weight.value.fill(T{0});
    const std::size_t n = std::min(in_features(), out_features());
    for (std::size_t i = 0; i < n; ++i) weight.value[i * out_features() + i] = T{1};
    if (bias) bias->value.fill(T{0});
  }

  void set_zero() {
    weight.value.fill(T{0});
    if (bias) bias->value.fill(T{0});
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    if (bias) f(*bias);
  }
  template <typename F>
  void visit(F&& f) const {
    f(weight);
    if (bias) f(*bias);
  }
};

/// Same-padded 2-D convolution with bias.
template <typename T>
struct Conv2d {
  Parameter<T> weight;  // [out, in, k, k]
  Parameter<T> bias;    // [out]

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng)
      : weight(name + ".weight", xavier<T>({out, in, k, k}, in * k * k, out * k * k, rng)),
        bias(name + ".bias", BasicTensor<T>::zeros({out}), false) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ops::conv2d(x, tape.param(weight), std::optional<Var<T>>(tape.param(bias)));
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
  template <typename F>
  void visit(F&& f) const {
    f(weight);
    f(bias);
  }
};

/// Scaled dot-product attention with learned projections and an optional
/// head split. Projections carry no bias, so all-zero key/value inputs give
/// an all-zero output.
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t q_dim, std::size_t kv_dim, std::size_t model_dim,
                     std::size_t out_dim, std::size_t n_heads, Rng& rng)
      : wq(name + ".q", q_dim, model_dim, rng, false),
        wk(name + ".k", kv_dim, model_dim, rng, false),
        wv(name + ".v", kv_dim, model_dim, rng, false),
        wo(name + ".o", model_dim, out_dim, rng, false),
        heads(n_heads) {
    if (n_heads == 0 || model_dim % n_heads != 0)
      throw ConfigError(name + ": model dim " + std::to_string(model_dim) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  }

  struct Result {
    Var<T> out;
    std::vector<Var<T>> weights;  // one [Lq, Lk] matrix per head
  };

  Result operator()(Tape<T>& tape, Var<T> query, Var<T> kv) const { return attend(tape, wq(tape, query), kv); }

  /// Variant taking an already projected query.
  Result attend(Tape<T>& tape, Var<T> q, Var<T> kv) const {
    auto k = wk(tape, kv);
    auto v = wv(tape, kv);
    Result r;
    if (heads == 1) {
      auto a = ops::attention(q, k, v);
      r.weights.push_back(a.weights);
      r.out = wo(tape, a.out);
      return r;
    }
    const std::size_t dh = q.shape()[1] / heads;
    std::vector<Var<T>> parts;
    for (std::size_t h = 0; h < heads; ++h) {
      auto a = ops::attention(ops::narrow(q, 1, h * dh, dh), ops::narrow(k, 1, h * dh, dh),
                              ops::narrow(v, 1, h * dh, dh));
      parts.push_back(a.out);
      r.weights.push_back(a.weights);
    }
    r.out = wo(tape, ops::concat(parts, 1));
    return r;
  }

  template <typename F>
  void visit(F&& f) {
    wq.visit(f);
    wk.visit(f);
    wv.visit(f);
    wo.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    wq.visit(f);
    wk.visit(f);
    wv.visit(f);
    wo.visit(f);
  }
};

template <typename Module>
std::size_t count_parameters(const Module& m) {
  std::size_t n = 0;
  m.visit([&](const auto& p) { n += p.value.numel(); });
  return n;
}

}  // namespace geopix::nn
