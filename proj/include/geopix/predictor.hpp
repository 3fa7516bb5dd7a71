#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geopix/clm.hpp"

namespace geopix {

enum class ProjectorMode { Independent, Shared };

inline std::string to_string(ProjectorMode m) { return m == ProjectorMode::Shared ? "shared" : "independent"; }

inline ProjectorMode projector_from_string(const std::string& s) {
  if (s == "independent") return ProjectorMode::Independent;
  if (s == "shared") return ProjectorMode::Shared;
  throw ConfigError("unknown projector mode '" + s + "'");
}

/// Fixed coordinate encoding of a point in [-1,1]^2: the raw coordinates
/// and sin/cos at frequencies pi * 2^k, k = 0..3.
inline constexpr std::size_t kPositionOctaves = 4;
inline constexpr std::size_t kPositionDim = 2 + 4 * kPositionOctaves;

inline std::array<double, kPositionDim> position_features(double x, double y) {
  std::array<double, kPositionDim> f{};
  f[0] = x;
  f[1] = y;
  double w = std::numbers::pi;
  for (std::size_t k = 0; k < kPositionOctaves; ++k, w *= 2) {
    f[2 + 4 * k] = std::sin(w * x);
    f[3 + 4 * k] = std::cos(w * x);
    f[4 + 4 * k] = std::sin(w * y);
    f[5 + 4 * k] = std::cos(w * y);
  }
  return f;
}

struct ModelConfig {
  std::size_t scales = 2;            // L
  std::size_t tokens = 3;            // N_tok
  std::size_t token_dim = 16;        // d
  std::size_t channels = 16;         // C
  std::size_t classes = 6;           // K_cls
  std::size_t memory_capacity = 16;  // N_mem
  std::size_t memory_dim = 8;        // D
  std::size_t memory_h = 8;
  std::size_t memory_w = 8;
  std::size_t image_h = 48;
  std::size_t image_w = 48;
  std::size_t mask_h = 24;  // H_p
  std::size_t mask_w = 24;  // W_p
  clm::FusionKind fusion = clm::FusionKind::Conv3D;
  ProjectorMode projector = ProjectorMode::Independent;
  bool clm_enabled = true;
  std::size_t heads = 1;
  std::size_t hidden = 32;
  std::size_t stem_channels = 8;

  /// Total encoder stride: the stem pools once, every scale pools once more.
  std::size_t stride() const { return std::size_t{1} << (scales + 1); }
  std::size_t feature_h(std::size_t l) const { return image_h >> (l + 2); }
  std::size_t feature_w(std::size_t l) const { return image_w >> (l + 2); }

  clm::Dims clm_dims() const { return {classes, scales, memory_capacity, memory_dim, memory_h, memory_w}; }

  void validate() const {
    auto pos = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
    };
    pos(scales, "scales");
    pos(tokens, "tokens");
    pos(token_dim, "token_dim");
    pos(channels, "channels");
    pos(memory_capacity, "memory_capacity");
    pos(memory_dim, "memory_dim");
    pos(memory_h, "memory_h");
    pos(memory_w, "memory_w");
    pos(mask_h, "mask_h");
    pos(mask_w, "mask_w");
    pos(hidden, "hidden");
    pos(stem_channels, "stem_channels");
    pos(heads, "heads");
    if (classes < 2) throw ConfigError("model config: classes must be >= 2");
    if (scales > 6) throw ConfigError("model config: at most 6 scales");
    if (image_h == 0 || image_w == 0 || image_h % stride() != 0 || image_w % stride() != 0)
      throw ConfigError("model config: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " not divisible by encoder stride " + std::to_string(stride()));
    if (channels % heads != 0 || memory_dim % heads != 0)
      throw ConfigError("model config: heads must divide channels and memory_dim");
    if (clm_enabled && (mask_h < memory_h || mask_w < memory_w))
      throw ConfigError("model config: mask extent smaller than memory extent");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"scales", c.scales},
                     {"tokens", c.tokens},
                     {"token_dim", c.token_dim},
                     {"channels", c.channels},
                     {"classes", c.classes},
                     {"memory_capacity", c.memory_capacity},
                     {"memory_dim", c.memory_dim},
                     {"memory_h", c.memory_h},
                     {"memory_w", c.memory_w},
                     {"image_h", c.image_h},
                     {"image_w", c.image_w},
                     {"mask_h", c.mask_h},
                     {"mask_w", c.mask_w},
                     {"fusion", clm::to_string(c.fusion)},
                     {"projector", to_string(c.projector)},
                     {"clm_enabled", c.clm_enabled},
                     {"heads", c.heads},
                     {"hidden", c.hidden},
                     {"stem_channels", c.stem_channels}};
}

namespace detail {

// Reads `key` into `out` if present, rejecting type mismatches.
template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<V, std::size_t>) {
      if (!it->is_number_unsigned()) throw ConfigError(std::string("'") + key + "' must be a non-negative integer");
    }
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("'") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::reject_unknown(j,
                         {"scales", "tokens", "token_dim", "channels", "classes", "memory_capacity", "memory_dim",
                          "memory_h", "memory_w", "image_h", "image_w", "mask_h", "mask_w", "fusion", "projector",
                          "clm_enabled", "heads", "hidden", "stem_channels"},
                         "model config");
  detail::read_field(j, "scales", c.scales);
  detail::read_field(j, "tokens", c.tokens);
  detail::read_field(j, "token_dim", c.token_dim);
  detail::read_field(j, "channels", c.channels);
  detail::read_field(j, "classes", c.classes);
  detail::read_field(j, "memory_capacity", c.memory_capacity);
  detail::read_field(j, "memory_dim", c.memory_dim);
  detail::read_field(j, "memory_h", c.memory_h);
  detail::read_field(j, "memory_w", c.memory_w);
  detail::read_field(j, "image_h", c.image_h);
  detail::read_field(j, "image_w", c.image_w);
  detail::read_field(j, "mask_h", c.mask_h);
  detail::read_field(j, "mask_w", c.mask_w);
  detail::read_field(j, "clm_enabled", c.clm_enabled);
  detail::read_field(j, "heads", c.heads);
  detail::read_field(j, "hidden", c.hidden);
  detail::read_field(j, "stem_channels", c.stem_channels);
  std::string s;
  if (j.contains("fusion")) {
    detail::read_field(j, "fusion", s);
    c.fusion = clm::fusion_from_string(s);
  }
  if (j.contains("projector")) {
    detail::read_field(j, "projector", s);
    c.projector = projector_from_string(s);
  }
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ModelConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(nlohmann::json(c).dump())));
  return buf;
}

/// One referred target: its class and bbox centre normalized to [-1,1].
struct InstanceQuery {
  std::size_t class_id = 0;
  double cx = 0.0;
  double cy = 0.0;
};

/// Centre of a half-open pixel box, normalized to [-1,1].
inline InstanceQuery make_query(std::size_t class_id, double x0, double y0, double x1, double y1, std::size_t img_w,
                                std::size_t img_h) {
  return {class_id, (x0 + x1) / static_cast<double>(img_w) - 1.0, (y0 + y1) / static_cast<double>(img_h) - 1.0};
}

// ------------------------------------------------------------------- encoder

/// Stride-2 conv pyramid; scale l has extent image / 2^(l+2).
template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& c, Rng& rng) : cfg_(c), stem_("encoder.stem", 3, c.stem_channels, 3, rng) {
    std::size_t in = c.stem_channels;
    for (std::size_t l = 0; l < c.scales; ++l) {
      stages_.emplace_back("encoder.stage" + std::to_string(l), in, c.channels, 3, rng);
      in = c.channels;
    }
  }

  std::vector<Var<T>> operator()(Tape<T>& tape, Var<T> img) const {
    const Shape& s = img.shape();
    if (s.size() != 3 || s[0] != 3) throw DimensionError("encode_image: expects [3,H,W], got " + shape_str(s));
    if (s[1] % cfg_.stride() != 0 || s[2] % cfg_.stride() != 0)
      throw ConfigError("encode_image: extents " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                        " not divisible by stride " + std::to_string(cfg_.stride()));
    auto x = ops::avg_pool2d(ops::relu(stem_(tape, img)), 2);
    std::vector<Var<T>> feats;
    for (const auto& st : stages_) {
      x = ops::avg_pool2d(ops::relu(st(tape, x)), 2);
      feats.push_back(x);
    }
    return feats;
  }

  template <typename F>
  void visit(F&& f) {
    stem_.visit(f);
    for (auto& s : stages_) s.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    stem_.visit(f);
    for (const auto& s : stages_) s.visit(f);
  }

 private:
  ModelConfig cfg_;
  nn::Conv2d<T> stem_;
  std::vector<nn::Conv2d<T>> stages_;
};

// ----------------------------------------------------------------- projector

/// Per-scale map [C,H,W] -> [HW,C]: x W_f + PE(pos) W_p + b.
template <typename T>
class Projector {
 public:
  Projector() = default;
  Projector(ProjectorMode mode, std::vector<std::size_t> in_channels, std::size_t out_channels, Rng& rng)
      : mode_(mode), in_(std::move(in_channels)), out_(out_channels) {
    if (in_.empty()) throw ConfigError("projector: no scales");
    if (mode == ProjectorMode::Shared) {
      for (std::size_t c : in_)
        if (c != in_.front())
          throw ConfigError("projector: shared mode needs equal channel dims across scales, got " +
                            std::to_string(in_.front()) + " and " + std::to_string(c));
      maps_.emplace_back("projector.shared", in_.front(), out_, rng);
    } else {
      for (std::size_t l = 0; l < in_.size(); ++l) maps_.emplace_back("projector.scale" + std::to_string(l), in_[l], out_, rng);
    }
  }

  ProjectorMode mode() const { return mode_; }

  Var<T> operator()(Tape<T>& tape, Var<T> feat, std::size_t scale) const {
    const Shape& s = feat.shape();
    if (scale >= in_.size()) throw IndexError("projector: scale out of range");
    if (s.size() != 3 || s[0] != in_[scale]) throw DimensionError("projector: feature shape " + shape_str(s));
    const std::size_t h = s[1], w = s[2];
    auto x = ops::transpose(ops::reshape(feat, {s[0], h * w}));
    const Map& m = maps_[mode_ == ProjectorMode::Shared ? 0 : scale];
    auto y = ops::matmul(x, tape.param(m.feat));
    y = ops::add(y, ops::matmul(tape.constant(encoding(h, w)), tape.param(m.pos)));
    return ops::add_bias(y, tape.param(m.bias));
  }

  /// W_f = I, W_p = 0, b = 0.
  void set_identity() {
    for (auto& m : maps_) {
      m.feat.value.fill(T{0});
      for (std::size_t i = 0; i < std::min(m.feat.value.extent(0), out_); ++i) m.feat.value[i * out_ + i] = T{1};
      m.pos.value.fill(T{0});
      m.bias.value.fill(T{0});
    }
  }

  static BasicTensor<T> encoding(std::size_t h, std::size_t w) {
    BasicTensor<T> pe({h * w, kPositionDim});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const auto f = position_features((2.0 * x + 1.0) / static_cast<double>(w) - 1.0,
                                         (2.0 * y + 1.0) / static_cast<double>(h) - 1.0);
        for (std::size_t k = 0; k < kPositionDim; ++k) pe[(y * w + x) * kPositionDim + k] = static_cast<T>(f[k]);
      }
    return pe;
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& m : maps_) m.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    for (const auto& m : maps_) m.visit(f);
  }

 private:
  struct Map {
    Parameter<T> feat, pos, bias;
    Map(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
        : feat(name + ".feat", nn::xavier<T>({in, out}, in, out, rng)),
          pos(name + ".pos", nn::xavier<T>({kPositionDim, out}, kPositionDim, out, rng)),
          bias(name + ".bias", BasicTensor<T>::zeros({out}), false) {}
    template <typename F>
    void visit(F&& f) {
      f(feat);
      f(pos);
      f(bias);
    }
    template <typename F>
    void visit(F&& f) const {
      f(feat);
      f(pos);
      f(bias);
    }
  };

  ProjectorMode mode_ = ProjectorMode::Independent;
  std::vector<std::size_t> in_;
  std::size_t out_ = 0;
  std::vector<Map> maps_;
};

// --------------------------------------------------------------- conditioner

/// Segmentation tokens for K targets: [K, L, N_tok, d].
template <typename T>
struct SegTokenSet {
  Var<T> tokens;
};

template <typename T>
struct Conditioning {
  SegTokenSet<T> tokens;
  Var<T> class_logits;  // [K, K_cls]
};

/// Stand-in for the language model: class embedding plus position
/// descriptor, a two-layer trunk, a token head and a class head.
template <typename T>
class Conditioner {
 public:
  Conditioner() = default;
  Conditioner(const ModelConfig& c, Rng& rng)
      : cfg_(c),
        embed_("conditioner.embed", BasicTensor<T>::randn({c.classes, c.token_dim}, rng, T(1))),
        trunk1_("conditioner.trunk1", c.token_dim + kPositionDim, c.hidden, rng),
        trunk2_("conditioner.trunk2", c.hidden, c.hidden, rng),
        token_head_("conditioner.token_head", c.hidden, c.scales * c.tokens * c.token_dim, rng),
        class_head_("conditioner.class_head", c.hidden, c.classes, rng) {}

  Conditioning<T> operator()(Tape<T>& tape, std::span<const InstanceQuery> queries) const {
    if (queries.empty()) throw UsageError("condition: empty query list");
    std::vector<std::size_t> ids;
    BasicTensor<T> pos({queries.size(), kPositionDim});
    for (std::size_t i = 0; i < queries.size(); ++i) {
      if (queries[i].class_id >= cfg_.classes)
        throw IndexError("condition: class " + std::to_string(queries[i].class_id) + " out of range");
      ids.push_back(queries[i].class_id);
      const auto f = position_features(queries[i].cx, queries[i].cy);
      for (std::size_t k = 0; k < kPositionDim; ++k) pos[i * kPositionDim + k] = static_cast<T>(f[k]);
    }
    auto e = ops::gather_rows(tape.param(embed_), std::span<const std::size_t>(ids), Shape{cfg_.token_dim});
    auto x = ops::concat(std::vector<Var<T>>{e, tape.constant(std::move(pos))}, 1);
    auto h = ops::relu(trunk2_(tape, ops::relu(trunk1_(tape, x))));
    Conditioning<T> out;
    out.tokens.tokens =
        ops::reshape(token_head_(tape, h), {queries.size(), cfg_.scales, cfg_.tokens, cfg_.token_dim});
    out.class_logits = class_head_(tape, h);
    return out;
  }

  /// Narrow scope freezes the trunk; the embedding table and heads stay live.
  void set_trunk_trainable(bool on) {
    trunk1_.visit([on](auto& p) { p.trainable = on; });
    trunk2_.visit([on](auto& p) { p.trainable = on; });
  }

  template <typename F>
  void visit(F&& f) {
    f(embed_);
    trunk1_.visit(f);
    trunk2_.visit(f);
    token_head_.visit(f);
    class_head_.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    f(embed_);
    trunk1_.visit(f);
    trunk2_.visit(f);
    token_head_.visit(f);
    class_head_.visit(f);
  }

 private:
  ModelConfig cfg_;
  Parameter<T> embed_;
  nn::Linear<T> trunk1_, trunk2_, token_head_, class_head_;
};

// ----------------------------------------------------------------- mask head

template <typename T>
struct MaskHeadOutput {
  Var<T> logits;  // [K, H_p, W_p]
  Var<T> pooled;  // [K, C]
};

/// Tokens attend over feature positions; their mean is dotted with every
/// position feature.
template <typename T>
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(const std::string& name, const ModelConfig& c, Rng& rng)
      : cfg_(c),
        token_proj_(name + ".token_proj", c.token_dim, c.channels, rng, false),
        key_(name + ".key", c.channels, c.channels, rng, false),
        value_(name + ".value", c.channels, c.channels, rng, false) {}

  /// features: [HW, C] at extent h x w; tokens: [K, N_tok, d].
  MaskHeadOutput<T> operator()(Tape<T>& tape, Var<T> features, Var<T> tokens, std::size_t h, std::size_t w) const {
    const Shape& ts = tokens.shape();
    if (ts.size() != 3 || ts[2] != cfg_.token_dim) throw DimensionError("mask head: tokens " + shape_str(ts));
    const std::size_t k = ts[0], n = ts[1];
    auto q = token_proj_(tape, ops::reshape(tokens, {k * n, cfg_.token_dim}));
    auto att = ops::attention(q, key_(tape, features), value_(tape, features));
    auto z = ops::reshape(ops::add(q, att.out), {k, n, cfg_.channels});
    MaskHeadOutput<T> out;
    out.pooled = ops::mean_axis(z, 1);
    out.logits = decode(out.pooled, features, h, w);
    return out;
  }

  /// dot(pooled, per-position feature) / sqrt(C), resized to the mask extent.
  Var<T> decode(Var<T> pooled, Var<T> features, std::size_t h, std::size_t w) const {
    const std::size_t k = pooled.shape()[0];
    auto s = ops::scale(ops::matmul_nt(pooled, features), T{1} / std::sqrt(static_cast<T>(cfg_.channels)));
    return ops::resize_bilinear(ops::reshape(s, {k, h, w}), cfg_.mask_h, cfg_.mask_w);
  }

  template <typename F>
  void visit(F&& f) {
    token_proj_.visit(f);
    key_.visit(f);
    value_.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    token_proj_.visit(f);
    key_.visit(f);
    value_.visit(f);
  }

 private:
  ModelConfig cfg_;
  nn::Linear<T> token_proj_, key_, value_;
};

// --------------------------------------------------------------------- model

enum class ClassSource { GroundTruth, Predicted };

enum class TrainScope { Wide, Narrow };

/// Per-tape memoization of class-independent fused memory (one [K_cls,1,D,H,W]
/// node per scale). Must not outlive or cross tapes.
template <typename T>
struct FusedCache {
  const Tape<T>* tape = nullptr;
  std::vector<std::optional<Var<T>>> per_scale;
};

template <typename T>
struct ForwardOutput {
  std::vector<Var<T>> initial;    // m_init per scale, [K, H_p, W_p]
  std::vector<Var<T>> per_scale;  // refined P^l, [K, H_p, W_p]
  Var<T> final_mask;
  Var<T> class_logits;
  SegTokenSet<T> tokens;
  std::vector<std::size_t> memory_classes;  // Q_c used for retrieval
  // Filled when diagnostics are requested: softmax over positions of the
  // pooled-token scores against plain and memory-enhanced features, per scale.
  std::vector<Var<T>> attn_pre, attn_post;
};

struct ForwardOptions {
  ClassSource class_source = ClassSource::Predicted;
  bool diagnostics = false;
};

/// Tensor-valued result of an inference call.
struct Prediction {
  std::vector<Tensor> per_scale_masks;
  Tensor final_mask;
  Tensor class_logits;
  std::vector<std::size_t> classes;
};

template <typename T>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& c, std::uint64_t seed) : cfg_(c) {
    c.validate();
    Rng rng(seed);
    encoder_ = ImageEncoder<T>(c, rng);
    projector_ = Projector<T>(c.projector, std::vector<std::size_t>(c.scales, c.channels), c.channels, rng);
    conditioner_ = Conditioner<T>(c, rng);
    for (std::size_t l = 0; l < c.scales; ++l) heads_.emplace_back("head" + std::to_string(l), c, rng);
    beta_ = Parameter<T>("beta", BasicTensor<T>(Shape{c.scales}, T{1} / static_cast<T>(c.scales)), false);
    // CLM parts are built even when disabled so the RNG stream, and with it
    // every other parameter, matches between the two settings.
    const auto dims = c.clm_dims();
    bank_ = clm::MemoryBank<T>(dims, rng);
    mem_encoder_ = clm::MemoryEncoder<T>(dims, rng);
    fusion_ = clm::Fusion<T>(c.fusion, dims, rng);
    for (std::size_t l = 0; l < c.scales; ++l) {
      const std::string n = "clm.scale" + std::to_string(l);
      attend_.emplace_back(n + ".attend", c.channels, c.memory_dim, c.heads, rng);
      gates_.emplace_back(n + ".alpha");
      decode_.emplace_back(n + ".decode", c.channels, c.channels, rng, false);
      decode_.back().set_zero();
    }
  }

  const ModelConfig& config() const { return cfg_; }

  /// Conditioner only; enough for samples that carry no mask.
  Conditioning<T> condition(Tape<T>& tape, std::span<const InstanceQuery> queries) const {
    return conditioner_(tape, queries);
  }

  ForwardOutput<T> forward(Tape<T>& tape, Var<T> img, std::span<const InstanceQuery> queries,
                           const ForwardOptions& opt = {}, FusedCache<T>* cache = nullptr) const {
    const Shape& s = img.shape();
    if (s != Shape{3, cfg_.image_h, cfg_.image_w})
      throw DimensionError("forward: image " + shape_str(s) + " does not match config");
    ForwardOutput<T> out;
    auto feats = encoder_(tape, img);
    auto cond = conditioner_(tape, queries);
    out.tokens = cond.tokens;
    out.class_logits = cond.class_logits;
    const std::size_t k = queries.size();
    if (opt.class_source == ClassSource::GroundTruth) {
      for (const auto& q : queries) out.memory_classes.push_back(q.class_id);
    } else {
      out.memory_classes = ops::argmax(cond.class_logits.value(), 1);
    }
    auto tok = ops::reshape(cond.tokens.tokens, {k, cfg_.scales, cfg_.tokens * cfg_.token_dim});
    auto beta = tape.param(beta_);
    for (std::size_t l = 0; l < cfg_.scales; ++l) {
      const std::size_t h = cfg_.feature_h(l), w = cfg_.feature_w(l);
      auto f = projector_(tape, feats[l], l);
      auto tl = ops::reshape(ops::narrow(tok, 1, l, 1), {k, cfg_.tokens, cfg_.token_dim});
      auto head = heads_[l](tape, f, tl, h, w);
      out.initial.push_back(head.logits);
      Var<T> refined = head.logits;
      std::optional<std::vector<Var<T>>> post_features;
      if (cfg_.clm_enabled) {
        auto r = refine(tape, f, head, out.memory_classes, l, cache);
        refined = r.first;
        post_features = r.second;
      }
      out.per_scale.push_back(refined);
      auto term = ops::mul(refined, ops::narrow(beta, 0, l, 1));
      out.final_mask = l == 0 ? term : ops::add(out.final_mask, term);
      if (opt.diagnostics) {
        const T inv = T{1} / std::sqrt(static_cast<T>(cfg_.channels));
        out.attn_pre.push_back(ops::softmax(ops::scale(ops::matmul_nt(head.pooled, f), inv), 1));
        if (post_features) {
          std::vector<Var<T>> rows;
          for (std::size_t i = 0; i < k; ++i)
            rows.push_back(ops::softmax(
                ops::scale(ops::matmul_nt(ops::narrow(head.pooled, 0, i, 1), (*post_features)[i]), inv), 1));
          out.attn_post.push_back(ops::concat(rows, 0));
        } else {
          out.attn_post.push_back(out.attn_pre.back());
        }
      }
    }
    return out;
  }

  /// Inference on a grad-free tape.
  Prediction predict(const Tensor& img, std::span<const InstanceQuery> queries,
                     ClassSource source = ClassSource::Predicted) const {
    Tape<T> tape(false);
    auto out = forward(tape, tape.constant(img.template cast<T>()), queries, ForwardOptions{source, false});
    Prediction p;
    for (const auto& v : out.per_scale) p.per_scale_masks.push_back(v.value().template cast<float>());
    p.final_mask = out.final_mask.value().template cast<float>();
    p.class_logits = out.class_logits.value().template cast<float>();
    p.classes = out.memory_classes;
    return p;
  }

  void set_scope(TrainScope scope) { conditioner_.set_trunk_trainable(scope == TrainScope::Wide); }

  // Accessors used by tests and tools.
  ImageEncoder<T>& encoder() { return encoder_; }
  Projector<T>& projector() { return projector_; }
  Conditioner<T>& conditioner() { return conditioner_; }
  clm::MemoryBank<T>& bank() { return bank_; }
  const clm::MemoryBank<T>& bank() const { return bank_; }
  clm::Fusion<T>& fusion() { return fusion_; }
  clm::ResidualGate<T>& gate(std::size_t l) { return gates_.at(l); }
  nn::Linear<T>& decode_delta(std::size_t l) { return decode_.at(l); }
  Parameter<T>& beta() { return beta_; }

  /// Every live parameter in a stable order. CLM parameters are skipped when
  /// the module is disabled.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const { return nn::count_parameters(*this); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    visit([&](const Parameter<T>& p) { n += p.trainable ? p.value.numel() : 0; });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    self.encoder_.visit(f);
    self.projector_.visit(f);
    self.conditioner_.visit(f);
    for (auto& h : self.heads_) h.visit(f);
    f(self.beta_);
    if (!self.cfg_.clm_enabled) return;
    self.bank_.visit(f);
    self.mem_encoder_.visit(f);
    self.fusion_.visit(f);
    for (std::size_t l = 0; l < self.cfg_.scales; ++l) {
      self.attend_[l].visit(f);
      self.gates_[l].visit(f);
      self.decode_[l].visit(f);
    }
  }

  // Returns refined logits and the per-target enhanced features
  // F + H_me W_dec used for decoding.
  std::pair<Var<T>, std::vector<Var<T>>> refine(Tape<T>& tape, Var<T> f, const MaskHeadOutput<T>& head,
                                                 const std::vector<std::size_t>& classes, std::size_t l,
                                                 FusedCache<T>* cache) const {
    const std::size_t k = classes.size();
    const std::size_t h = cfg_.feature_h(l), w = cfg_.feature_w(l);
    auto enc = mem_encoder_(tape, head.logits);
    Var<T> fused;
    if (fusion_.uses_encoded_mask()) {
      fused = fusion_(tape, bank_.retrieve(tape, {classes, l}), enc);
    } else {
      // Class-only dependence: fuse every class once per tape and gather.
      FusedCache<T> local;
      FusedCache<T>& c = cache ? *cache : local;
      if (c.tape != &tape) c = FusedCache<T>{&tape, {}};
      if (c.per_scale.size() < cfg_.scales) c.per_scale.resize(cfg_.scales);
      if (!c.per_scale[l]) {
        std::vector<std::size_t> all(cfg_.classes);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        c.per_scale[l] = fusion_(tape, bank_.retrieve(tape, {all, l}));
      }
      fused = ops::gather_rows(*c.per_scale[l], std::span<const std::size_t>(classes),
                               Shape{1, cfg_.memory_dim, cfg_.memory_h, cfg_.memory_w});
    }
    auto mem = attend_[l](tape, f, enc, fused, gates_[l]);
    std::vector<Var<T>> eff, rows;
    for (std::size_t i = 0; i < k; ++i) {
      eff.push_back(ops::add(f, decode_[l](tape, mem.enhanced[i])));
      rows.push_back(ops::matmul_nt(ops::narrow(head.pooled, 0, i, 1), eff.back()));
    }
    auto s = ops::scale(k == 1 ? rows.front() : ops::concat(rows, 0), T{1} / std::sqrt(static_cast<T>(cfg_.channels)));
    auto logits = ops::resize_bilinear(ops::reshape(s, {k, h, w}), cfg_.mask_h, cfg_.mask_w);
    return {logits, std::move(eff)};
  }

  ModelConfig cfg_;
  ImageEncoder<T> encoder_;
  Projector<T> projector_;
  Conditioner<T> conditioner_;
  std::vector<MaskHead<T>> heads_;
  Parameter<T> beta_;
  clm::MemoryBank<T> bank_;
  clm::MemoryEncoder<T> mem_encoder_;
  clm::Fusion<T> fusion_;
  std::vector<clm::MemoryAttention<T>> attend_;
  std::vector<clm::ResidualGate<T>> gates_;
  std::vector<nn::Linear<T>> decode_;
};

}  // namespace geopix
