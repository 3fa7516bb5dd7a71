#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "geopix/nn.hpp"

// Class-wise learnable memory: a (class, scale)-indexed bank of learnable
// feature maps, a mask encoder, capacity-axis fusion, and memory attention
// with a learnable residual gate.

namespace geopix::clm {

enum class FusionKind { Argmax, Conv2D, Conv3D, Attention, DualAttention };

inline constexpr std::array<FusionKind, 5> kAllFusions = {FusionKind::Argmax, FusionKind::Conv2D, FusionKind::Conv3D,
                                                          FusionKind::Attention, FusionKind::DualAttention};

inline std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::Argmax: return "argmax";
    case FusionKind::Conv2D: return "conv2d";
    case FusionKind::Conv3D: return "conv3d";
    case FusionKind::Attention: return "attention";
    case FusionKind::DualAttention: return "dual_attention";
  }
  throw ConfigError("unknown fusion variant");
}

inline FusionKind fusion_from_string(const std::string& s) {
  for (auto k : kAllFusions)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown fusion variant '" + s + "'");
}

struct Dims {
  std::size_t classes = 6;   // K_cls
  std::size_t scales = 2;    // L
  std::size_t capacity = 16; // N_mem
  std::size_t dim = 8;       // D
  std::size_t height = 8;    // H_mem
  std::size_t width = 8;     // W_mem
};

/// Category query Q_c (one class per target) and scale query Q_l.
struct MemoryQuery {
  std::vector<std::size_t> class_ids;
  std::size_t scale_id = 0;
};

template <typename T>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(const Dims& d, Rng& rng, T stddev = T(0.02))
      : dims_(d),
        store("clm.bank", BasicTensor<T>::randn({d.classes, d.scales, d.capacity, d.dim, d.height, d.width}, rng,
                                                stddev)) {}

  const Dims& dims() const { return dims_; }

  /// Rows of the result are store[class_ids[i], scale_id]:
  /// [K_tgt, N_mem, D, H_mem, W_mem].
  Var<T> retrieve(Tape<T>& tape, const MemoryQuery& q) const {
    if (q.scale_id >= dims_.scales)
      throw IndexError("memory bank: scale " + std::to_string(q.scale_id) + " out of range");
    if (q.class_ids.empty()) throw UsageError("memory bank: empty class query");
    std::vector<std::size_t> rows;
    for (std::size_t c : q.class_ids) {
      if (c >= dims_.classes) throw IndexError("memory bank: class " + std::to_string(c) + " out of range");
      rows.push_back(c * dims_.scales + q.scale_id);
    }
    return ops::gather_rows(tape.param(store), std::span<const std::size_t>(rows),
                            Shape{dims_.capacity, dims_.dim, dims_.height, dims_.width});
  }

  template <typename F>
  void visit(F&& f) {
    f(store);
  }
  template <typename F>
  void visit(F&& f) const {
    f(store);
  }

 private:
  Dims dims_;

 public:
  Parameter<T> store;
};

/// Encodes initial mask logits [K, H_p, W_p] into [K, D, H_mem, W_mem]:
/// conv+relu at mask resolution, average-pool (or bilinear resize when the
/// ratio is not integral) to memory size, conv+relu.
template <typename T>
class MemoryEncoder {
 public:
  MemoryEncoder() = default;
  MemoryEncoder(const Dims& d, Rng& rng)
      : dims_(d), conv1_("clm.encoder.conv1", 1, d.dim, 3, rng), conv2_("clm.encoder.conv2", d.dim, d.dim, 3, rng) {}

  Var<T> operator()(Tape<T>& tape, Var<T> m_init) const {
    const Shape& s = m_init.shape();
    if (s.size() != 3) throw DimensionError("memory encoder: expects [K, H_p, W_p]");
    const std::size_t k = s[0], h = s[1], w = s[2];
    if (h < dims_.height || w < dims_.width)
      throw ConfigError("memory encoder: mask " + std::to_string(h) + "x" + std::to_string(w) +
                        " smaller than memory " + std::to_string(dims_.height) + "x" + std::to_string(dims_.width));
    auto x = ops::reshape(m_init, {k, 1, h, w});
    x = ops::relu(conv1_(tape, x));
    if (h % dims_.height == 0 && w % dims_.width == 0 && h / dims_.height == w / dims_.width) {
      if (h != dims_.height) x = ops::avg_pool2d(x, h / dims_.height);
    } else {
      x = ops::resize_bilinear(x, dims_.height, dims_.width);
    }
    return ops::relu(conv2_(tape, x));
  }

  void set_zero() {
    visit([](auto& p) { p.value.fill(T{0}); });
  }

  template <typename F>
  void visit(F&& f) {
    conv1_.visit(f);
    conv2_.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    conv1_.visit(f);
    conv2_.visit(f);
  }

 private:
  Dims dims_;
  nn::Conv2d<T> conv1_, conv2_;
};

/// Reduces the capacity axis of retrieved memory h[K, N, D, H, W] to
/// [K, 1, D, H, W].
template <typename T>
class Fusion {
 public:
  Fusion() = default;
  Fusion(FusionKind kind, const Dims& d, Rng& rng) : kind_(kind), dims_(d) {
    const std::size_t n = d.capacity, dd = d.dim, nd = n * d.dim;
    switch (kind) {
      case FusionKind::Argmax:
        break;
      case FusionKind::Conv2D:
        kernel_.emplace("clm.fusion.conv2d.weight", nn::xavier<T>({1, n, 3, 3}, n * 9, 9, rng));
        bias_.emplace("clm.fusion.conv2d.bias", BasicTensor<T>::zeros({1}), false);
        add_identity_init();
        break;
      case FusionKind::Conv3D:
        kernel_.emplace("clm.fusion.conv3d.weight", BasicTensor<T>::randn({dd, dd, 3, 3, 3}, rng, T(0.01)));
        bias_.emplace("clm.fusion.conv3d.bias", BasicTensor<T>::zeros({dd}), false);
        add_identity_init();
        break;
      case FusionKind::DualAttention:
        first_.emplace("clm.fusion.dual", nd, dd, nd, nd, 1, rng);
        [[fallthrough]];
      case FusionKind::Attention:
        attn_.emplace("clm.fusion.attn", dd, nd, dd, dd, 1, rng);
        break;
    }
  }

  FusionKind kind() const { return kind_; }

  /// Whether the output depends on the encoded mask (and so cannot be shared
  /// between targets of the same class).
  bool uses_encoded_mask() const {
    return kind_ == FusionKind::Attention || kind_ == FusionKind::DualAttention;
  }

  /// Conv variants: kernels become an average over capacity slots, so with a
  /// single slot the output equals that slot.
  void set_identity() {
    if (kind_ == FusionKind::Conv2D || kind_ == FusionKind::Conv3D) {
      kernel_->value.fill(T{0});
      bias_->value.fill(T{0});
      add_identity_init();
    }
  }

  Var<T> operator()(Tape<T>& tape, Var<T> h, std::optional<Var<T>> encoded = std::nullopt) const {
    const Shape& s = h.shape();
    if (s.size() != 5 || s[1] != dims_.capacity || s[2] != dims_.dim || s[3] != dims_.height || s[4] != dims_.width)
      throw DimensionError("fusion: memory must be [K," + std::to_string(dims_.capacity) + "," +
                           std::to_string(dims_.dim) + "," + std::to_string(dims_.height) + "," +
                           std::to_string(dims_.width) + "], got " + shape_str(s));
    const std::size_t k = s[0], n = s[1], d = s[2], hh = s[3], ww = s[4];
    switch (kind_) {
      case FusionKind::Argmax:
        return ops::select_max_abs(h, 1);
      case FusionKind::Conv2D: {
        auto x = ops::reshape(ops::permute(h, {0, 2, 1, 3, 4}), {k * d, n, hh, ww});
        auto y = ops::conv2d(x, tape.param(*kernel_), std::optional<Var<T>>(tape.param(*bias_)));
        return ops::reshape(y, {k, 1, d, hh, ww});
      }
      case FusionKind::Conv3D: {
        std::vector<Var<T>> rows;
        for (std::size_t i = 0; i < k; ++i) {
          auto hi = ops::reshape(ops::narrow(h, 0, i, 1), {n, d, hh, ww});
          auto x = ops::permute(hi, {1, 0, 2, 3});  // [D, N, H, W]: capacity as depth
          auto y = ops::conv3d(x, tape.param(*kernel_), std::optional<Var<T>>(tape.param(*bias_)));
          rows.push_back(ops::reshape(ops::mean_axis(y, 1), {1, 1, d, hh, ww}));
        }
        return rows.size() == 1 ? rows.front() : ops::concat(rows, 0);
      }
      case FusionKind::Attention:
      case FusionKind::DualAttention: {
        if (!encoded) throw UsageError("fusion: attention variants need the encoded mask");
        const Shape& es = encoded->shape();
        if (es != Shape{k, d, hh, ww}) throw DimensionError("fusion: encoded mask shape " + shape_str(es));
        // Sequences are the K targets at each spatial position.
        auto query = ops::reshape(ops::permute(*encoded, {2, 3, 0, 1}), {hh * ww * k, d});
        auto mem = ops::reshape(ops::permute(h, {3, 4, 0, 1, 2}), {hh * ww * k, n * d});
        if (kind_ == FusionKind::DualAttention) mem = positionwise(tape, *first_, mem, query, hh * ww, k);
        auto out = positionwise(tape, *attn_, query, mem, hh * ww, k);  // [HW*K, D]
        return ops::reshape(ops::permute(ops::reshape(out, {hh, ww, k, d}), {2, 3, 0, 1}), {k, 1, d, hh, ww});
      }
    }
    throw ConfigError("unknown fusion variant");
  }

  template <typename F>
  void visit(F&& f) {
    if (kernel_) f(*kernel_);
    if (bias_) f(*bias_);
    if (first_) first_->visit(f);
    if (attn_) attn_->visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    if (kernel_) f(*kernel_);
    if (bias_) f(*bias_);
    if (first_) first_->visit(f);
    if (attn_) attn_->visit(f);
  }

 private:
  void add_identity_init() {
    auto& w = kernel_->value;
    if (kind_ == FusionKind::Conv2D) {
      const std::size_t n = dims_.capacity;
      for (std::size_t c = 0; c < n; ++c) w[(c * 3 + 1) * 3 + 1] += T{1} / static_cast<T>(n);
    } else {
      const std::size_t d = dims_.dim;
      for (std::size_t c = 0; c < d; ++c) w[((((c * d + c) * 3 + 1) * 3 + 1) * 3) + 1] += T{1};
    }
  }

  // Attention over the K-long sequence at each of `positions` locations.
  // q_rows: [positions*K, Dq], kv_rows: [positions*K, Dkv].
  static Var<T> positionwise(Tape<T>& tape, const nn::MultiHeadAttention<T>& m, Var<T> q_rows, Var<T> kv_rows,
                             std::size_t positions, std::size_t k) {
    auto q = m.wq(tape, q_rows);
    auto key = m.wk(tape, kv_rows);
    auto val = m.wv(tape, kv_rows);
    std::vector<Var<T>> outs;
    outs.reserve(positions);
    for (std::size_t p = 0; p < positions; ++p) {
      outs.push_back(ops::attention(ops::narrow(q, 0, p * k, k), ops::narrow(key, 0, p * k, k),
                                    ops::narrow(val, 0, p * k, k))
                         .out);
    }
    return m.wo(tape, ops::concat(outs, 0));
  }

  FusionKind kind_ = FusionKind::Conv3D;
  Dims dims_;
  std::optional<Parameter<T>> kernel_;
  std::optional<Parameter<T>> bias_;
  std::optional<nn::MultiHeadAttention<T>> first_;
  std::optional<nn::MultiHeadAttention<T>> attn_;
};

/// Learnable residual weight alpha for one scale; starts at 0 so the memory
/// path is closed until training opens it.
template <typename T>
struct ResidualGate {
  Parameter<T> alpha;

  ResidualGate() = default;
  explicit ResidualGate(const std::string& name) : alpha(name, BasicTensor<T>::zeros({1}), false) {}

  template <typename F>
  void visit(F&& f) {
    f(alpha);
  }
  template <typename F>
  void visit(F&& f) const {
    f(alpha);
  }
};

template <typename T>
struct MemoryAttendResult {
  Var<T> self_attended;               // SA(F), [HW, C]
  std::vector<Var<T>> enhanced;       // per target, [HW, C]
  std::vector<Var<T>> cross_weights;  // per target, [HW, H_mem*W_mem] (head 0)
};

/// H_me = SA(F) + alpha * CA(SA(F), I(m_init) + F(h)), one output per target.
template <typename T>
class MemoryAttention {
 public:
  MemoryAttention() = default;
  MemoryAttention(const std::string& name, std::size_t channels, std::size_t mem_dim, std::size_t heads, Rng& rng)
      : channels_(channels),
        mem_dim_(mem_dim),
        self_(name + ".self", channels, channels, channels, channels, heads, rng),
        cross_(name + ".cross", channels, mem_dim, channels, channels, heads, rng) {}

  MemoryAttendResult<T> operator()(Tape<T>& tape, Var<T> f_img, Var<T> encoded, Var<T> fused,
                                   const ResidualGate<T>& gate) const {
    const Shape& fs = f_img.shape();
    if (fs.size() != 2 || fs[1] != channels_)
      throw ConfigError("memory attention: features must be [HW," + std::to_string(channels_) + "], got " +
                        shape_str(fs));
    const Shape& es = encoded.shape();
    if (es.size() != 4 || es[1] != mem_dim_)
      throw ConfigError("memory attention: encoded mask must carry " + std::to_string(mem_dim_) + " channels");
    const Shape& us = fused.shape();
    if (us.size() != 5 || us[0] != es[0] || us[1] != 1 || us[2] != es[1] || us[3] != es[2] || us[4] != es[3])
      throw DimensionError("memory attention: fused " + shape_str(us) + " does not match encoded " + shape_str(es));
    const std::size_t k = es[0], m = es[2] * es[3];

    MemoryAttendResult<T> r;
    r.self_attended = ops::add(f_img, self_(tape, f_img, f_img).out);
    auto agg = ops::add(encoded, ops::reshape(fused, es));
    auto seq = ops::permute(ops::reshape(agg, {k, mem_dim_, m}), {0, 2, 1});  // [K, M, D]
    auto q = cross_.wq(tape, r.self_attended);
    auto alpha = tape.param(gate.alpha);
    for (std::size_t i = 0; i < k; ++i) {
      auto kv = ops::reshape(ops::narrow(seq, 0, i, 1), {m, mem_dim_});
      auto ca = cross_.attend(tape, q, kv);
      r.cross_weights.push_back(ca.weights.front());
      r.enhanced.push_back(ops::add(r.self_attended, ops::mul(ca.out, alpha)));
    }
    return r;
  }

  /// Zeroes the key/value projections of the cross attention.
  void zero_kv() {
    cross_.wk.set_zero();
    cross_.wv.set_zero();
  }

  template <typename F>
  void visit(F&& f) {
    self_.visit(f);
    cross_.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    self_.visit(f);
    cross_.visit(f);
  }

 private:
  std::size_t channels_ = 0;
  std::size_t mem_dim_ = 0;
  nn::MultiHeadAttention<T> self_;
  nn::MultiHeadAttention<T> cross_;
};

template <typename Module>
std::size_t parameter_count(const Module& m) {
  return nn::count_parameters(m);
}

}  // namespace geopix::clm
