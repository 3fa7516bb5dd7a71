#pragma once

// Central finite-difference gradient checks in double precision.
//
// A check evaluates loss = sum(out * W) for a fixed random W. Input tensors
// are checked coordinate by coordinate; parameters along random directions.
// Evaluations whose branch signature differs from the base point (a relu
// sign or a max selection flipped) straddle a kink and are skipped.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "geopix/geopix.hpp"

namespace gc {

using D = double;
using geopix::BasicTensor;
using geopix::Parameter;
using geopix::Rng;
using geopix::Shape;
using geopix::Tape;
using geopix::Var;
using TensorD = BasicTensor<D>;

inline constexpr double kStep = 1e-3;
inline constexpr double kTol = 1e-4;
inline constexpr std::size_t kTrials = 100;
inline constexpr std::size_t kDirections = 2;  // per parameter tensor
inline constexpr std::size_t kResample = 8;    // direction redraws on a kink
// Denominator floor as a fraction of the whole gradient's norm. Blocks the loss
// barely depends on (cross-attention queries against a near-uniform bank sit
// at 1e-11) otherwise measure only fd roundoff.
inline constexpr double kFloor = 1e-3;

using Fn = std::function<Var<D>(Tape<D>&, const std::vector<Var<D>>&)>;

struct Outcome {
  double rel = 0;           // worst norm-wise relative error over checked blocks
  std::size_t checked = 0;  // coordinates plus directions
  std::size_t skipped = 0;
  std::string worst;        // block that produced `rel`

  void merge(const Outcome& o) {
    if (o.rel > rel) {
      rel = o.rel;
      worst = o.worst;
    }
    checked += o.checked;
    skipped += o.skipped;
  }
};

inline double rel_error(const std::vector<double>& fd, const std::vector<double>& an, double floor = 0) {
  double d = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    d += (fd[i] - an[i]) * (fd[i] - an[i]);
    a += fd[i] * fd[i];
    b += an[i] * an[i];
  }
  const double den = std::max({std::sqrt(a), std::sqrt(b), floor});
  if (den < 1e-12) return std::sqrt(d) < 1e-12 ? 0.0 : 1.0;
  return std::sqrt(d) / den;
}

/// Checks d(sum(f(inputs) * W))/d(inputs) and /d(params).
class Checker {
 public:
  Checker(Fn f, std::vector<TensorD> inputs, std::vector<Parameter<D>*> params, Rng& rng)
      : f_(std::move(f)), xs_(std::move(inputs)), ps_(std::move(params)), rng_(rng) {}

  Outcome run() {
    // Base evaluation with gradients.
    for (auto* p : ps_) p->zero_grad();
    Tape<D> tape;
    std::vector<Var<D>> leaves;
    for (const auto& x : xs_) leaves.push_back(tape.leaf(x));
    auto out = f_(tape, leaves);
    w_ = TensorD::randn(out.shape(), rng_);
    auto loss = geopix::ops::sum(geopix::ops::mul(out, tape.constant(w_)));
    sig_ = tape.branch_signature();
    tape.backward(loss);

    std::vector<TensorD> in_g, p_g;
    double total = 0;
    for (std::size_t i = 0; i < xs_.size(); ++i)
      in_g.push_back(tape.has_grad(leaves[i].id) ? tape.grad(leaves[i].id) : TensorD::zeros(xs_[i].shape()));
    for (auto* p : ps_) p_g.push_back(p->grad.empty() ? TensorD::zeros(p->value.shape()) : p->grad);
    for (const auto* g : {&in_g, &p_g})
      for (const auto& t : *g)
        for (D v : t.values()) total += double(v) * v;
    floor_ = kFloor * std::sqrt(total);

    Outcome res;
    for (std::size_t i = 0; i < xs_.size(); ++i) res.merge(check_input(i, in_g[i]));
    for (std::size_t k = 0; k < ps_.size(); ++k) res.merge(check_param(*ps_[k], p_g[k]));
    return res;
  }

 private:
  double eval(std::uint64_t* sig) {
    Tape<D> tape(false);
    std::vector<Var<D>> leaves;
    for (const auto& x : xs_) leaves.push_back(tape.constant(x));
    auto out = f_(tape, leaves);
    const auto& v = out.value();
    double s = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) s += v[i] * w_[i];
    *sig = tape.branch_signature();
    return s;
  }

  Outcome check_input(std::size_t i, const TensorD& an) {
    Outcome o;
    o.worst = "input" + std::to_string(i);
    std::vector<double> fd_v, an_v;
    auto& x = xs_[i];
    for (std::size_t j = 0; j < x.numel(); ++j) {
      const D keep = x[j];
      std::uint64_t s1 = 0, s2 = 0;
      x[j] = keep + kStep;
      const double up = eval(&s1);
      x[j] = keep - kStep;
      const double dn = eval(&s2);
      x[j] = keep;
      if (s1 != sig_ || s2 != sig_) {
        ++o.skipped;
        continue;
      }
      fd_v.push_back((up - dn) / (2 * kStep));
      an_v.push_back(an[j]);
      ++o.checked;
    }
    o.rel = rel_error(fd_v, an_v, floor_);
    return o;
  }

  Outcome check_param(Parameter<D>& p, const TensorD& an) {
    Outcome o;
    o.worst = p.name;
    std::vector<double> fd_v, an_v;
    const TensorD keep = p.value;
    for (std::size_t d = 0; d < kDirections; ++d) {
      bool done = false;
      for (std::size_t attempt = 0; attempt < kResample && !done; ++attempt) {
        TensorD u = TensorD::randn(keep.shape(), rng_);
        double norm = 0;
        for (D v : u.values()) norm += v * v;
        norm = std::sqrt(norm);
        for (auto& v : u.values()) v /= norm;
        std::uint64_t s1 = 0, s2 = 0;
        for (std::size_t j = 0; j < u.numel(); ++j) p.value[j] = keep[j] + kStep * u[j];
        const double up = eval(&s1);
        for (std::size_t j = 0; j < u.numel(); ++j) p.value[j] = keep[j] - kStep * u[j];
        const double dn = eval(&s2);
        p.value = keep;
        if (s1 != sig_ || s2 != sig_) continue;
        double dir = 0;
        for (std::size_t j = 0; j < u.numel(); ++j) dir += an[j] * u[j];
        fd_v.push_back((up - dn) / (2 * kStep));
        an_v.push_back(dir);
        ++o.checked;
        done = true;
      }
      if (!done) ++o.skipped;
    }
    o.rel = rel_error(fd_v, an_v, floor_);
    return o;
  }

  Fn f_;
  std::vector<TensorD> xs_;
  std::vector<Parameter<D>*> ps_;
  Rng& rng_;
  TensorD w_;
  std::uint64_t sig_ = 0;
  double floor_ = 0;
};

inline Outcome check(Fn f, std::vector<TensorD> inputs, Rng& rng, std::vector<Parameter<D>*> params = {}) {
  return Checker(std::move(f), std::move(inputs), std::move(params), rng).run();
}

template <typename Module>
std::vector<Parameter<D>*> params_of(Module& m) {
  std::vector<Parameter<D>*> out;
  m.visit([&](Parameter<D>& p) { out.push_back(&p); });
  return out;
}

// Moves every parameter off its structured initial value (zero gates, zero
// decode deltas, identity kernels) so no path is trivially closed.
template <typename Module>
void jitter(Module& m, Rng& rng, double s = 0.1) {
  m.visit([&](Parameter<D>& p) {
    for (auto& v : p.value.values()) v += std::normal_distribution<double>(0.0, s)(rng);
  });
}

inline TensorD rnd(Shape s, Rng& rng, double sd = 1.0) { return TensorD::randn(std::move(s), rng, sd); }

inline TensorD binary(Shape s, Rng& rng) {
  TensorD t(std::move(s));
  for (auto& v : t.values()) v = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
  return t;
}

struct Case {
  std::string name;
  std::function<Outcome(Rng&)> trial;
};

// ------------------------------------------------------------------ op cases

inline std::vector<Case> op_cases() {
  namespace ops = geopix::ops;
  using V = std::vector<Var<D>>;
  std::vector<Case> c;
  auto unary = [&](std::string name, Shape s, std::function<Var<D>(Var<D>)> f) {
    c.push_back({name, [s, f](Rng& r) { return check([f](Tape<D>&, const V& x) { return f(x[0]); }, {rnd(s, r)}, r); }});
  };
  auto binary_op = [&](std::string name, Shape a, Shape b, std::function<Var<D>(Var<D>, Var<D>)> f) {
    c.push_back({name, [a, b, f](Rng& r) {
                   return check([f](Tape<D>&, const V& x) { return f(x[0], x[1]); }, {rnd(a, r), rnd(b, r)}, r);
                 }});
  };

  binary_op("add", {3, 4}, {3, 4}, [](auto a, auto b) { return ops::add(a, b); });
  binary_op("add_scalar", {3, 4}, {1}, [](auto a, auto b) { return ops::add(a, b); });
  binary_op("sub", {2, 5}, {2, 5}, [](auto a, auto b) { return ops::sub(a, b); });
  binary_op("mul", {4, 3}, {4, 3}, [](auto a, auto b) { return ops::mul(a, b); });
  binary_op("mul_scalar", {4, 3}, {1}, [](auto a, auto b) { return ops::mul(a, b); });
  unary("scale", {3, 3}, [](auto a) { return ops::scale(a, 0.7); });
  binary_op("add_bias", {4, 3}, {3}, [](auto a, auto b) { return ops::add_bias(a, b); });
  unary("relu", {5, 4}, [](auto a) { return ops::relu(a); });
  unary("sigmoid", {5, 4}, [](auto a) { return ops::sigmoid(a); });
  binary_op("matmul", {3, 4}, {4, 5}, [](auto a, auto b) { return ops::matmul(a, b); });
  binary_op("matmul_nt", {3, 4}, {5, 4}, [](auto a, auto b) { return ops::matmul_nt(a, b); });
  unary("reshape", {2, 6}, [](auto a) { return ops::reshape(a, {3, 4}); });
  unary("permute", {2, 3, 4}, [](auto a) { return ops::permute(a, {2, 0, 1}); });
  unary("transpose", {3, 5}, [](auto a) { return ops::transpose(a); });
  unary("narrow", {4, 5}, [](auto a) { return ops::narrow(a, 1, 1, 3); });
  binary_op("concat", {2, 3}, {2, 2}, [](auto a, auto b) { return ops::concat(std::vector<Var<D>>{a, b, a}, 1); });
  unary("gather_rows", {4, 2, 3}, [](auto a) {
    static const std::vector<std::size_t> rows{2, 0, 2, 3};
    return ops::gather_rows(a, std::span<const std::size_t>(rows), Shape{2, 3});
  });
  unary("sum", {3, 4}, [](auto a) { return ops::sum(a); });
  unary("mean", {3, 4}, [](auto a) { return ops::mean(a); });
  unary("sum_axis", {2, 3, 4}, [](auto a) { return ops::sum_axis(a, 1); });
  unary("mean_axis", {2, 3, 4}, [](auto a) { return ops::mean_axis(a, 2); });
  unary("softmax_rows", {3, 5}, [](auto a) { return ops::softmax(a, 1); });
  unary("softmax_cols", {4, 3}, [](auto a) { return ops::softmax(a, 0); });
  c.push_back({"layer_norm", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::layer_norm(x[0], x[1], x[2]); },
                              {rnd({3, 6}, r), rnd({6}, r), rnd({6}, r)}, r);
               }});
  unary("select_max_abs", {2, 4, 3}, [](auto a) { return ops::select_max_abs(a, 1); });
  c.push_back({"conv2d", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::conv2d(x[0], x[1], std::optional<Var<D>>(x[2])); },
                              {rnd({2, 5, 4}, r), rnd({3, 2, 3, 3}, r), rnd({3}, r)}, r);
               }});
  c.push_back({"conv2d_batched_nobias", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::conv2d(x[0], x[1]); },
                              {rnd({2, 2, 4, 3}, r), rnd({2, 2, 3, 1}, r)}, r);
               }});
  c.push_back({"conv3d", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::conv3d(x[0], x[1], std::optional<Var<D>>(x[2])); },
                              {rnd({2, 3, 3, 4}, r), rnd({2, 2, 3, 3, 3}, r), rnd({2}, r)}, r);
               }});
  unary("avg_pool2d", {2, 4, 6}, [](auto a) { return ops::avg_pool2d(a, 2); });
  unary("resize_up", {2, 3, 4}, [](auto a) { return ops::resize_bilinear(a, 5, 7); });
  unary("resize_down", {1, 6, 5}, [](auto a) { return ops::resize_bilinear(a, 4, 3); });
  c.push_back({"attention", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::attention(x[0], x[1], x[2]).out; },
                              {rnd({3, 4}, r), rnd({5, 4}, r), rnd({5, 2}, r)}, r);
               }});
  c.push_back({"attention_weights", [](Rng& r) {
                 return check([](Tape<D>&, const V& x) { return ops::attention(x[0], x[1], x[2]).weights; },
                              {rnd({3, 4}, r), rnd({5, 4}, r), rnd({5, 2}, r)}, r);
               }});
  c.push_back({"bce_with_logits", [](Rng& r) {
                 auto t = binary({3, 4}, r);
                 return check([t](Tape<D>&, const V& x) { return ops::bce_with_logits(x[0], t); }, {rnd({3, 4}, r, 3)}, r);
               }});
  c.push_back({"dice_loss", [](Rng& r) {
                 auto t = binary({2, 3, 3}, r);
                 return check([t](Tape<D>&, const V& x) { return ops::dice_loss(x[0], t); }, {rnd({2, 3, 3}, r, 2)}, r);
               }});
  c.push_back({"cross_entropy", [](Rng& r) {
                 std::vector<std::size_t> lab{std::uniform_int_distribution<std::size_t>(0, 4)(r),
                                              std::uniform_int_distribution<std::size_t>(0, 4)(r), 0};
                 return check([lab](Tape<D>&, const V& x) {
                   return ops::cross_entropy(x[0], std::span<const std::size_t>(lab));
                 }, {rnd({3, 5}, r, 2)}, r);
               }});
  c.push_back({"mask_loss", [](Rng& r) {
                 auto t = binary({2, 4, 4}, r);
                 return check([t](Tape<D>&, const V& x) { return geopix::train::mask_loss(x[0], t).total; },
                              {rnd({2, 4, 4}, r, 2)}, r);
               }});
  return c;
}

// -------------------------------------------------------------- module cases

inline geopix::ModelConfig tiny_config(geopix::clm::FusionKind kind, bool clm, geopix::ProjectorMode proj) {
  geopix::ModelConfig m;
  m.scales = 2;
  m.tokens = 2;
  m.token_dim = 6;
  m.channels = 6;
  m.classes = 3;
  m.memory_capacity = 2;
  m.memory_dim = 4;
  m.memory_h = 4;
  m.memory_w = 4;
  m.image_h = 16;
  m.image_w = 16;
  m.mask_h = 8;
  m.mask_w = 8;
  m.hidden = 8;
  m.stem_channels = 3;
  m.fusion = kind;
  m.clm_enabled = clm;
  m.projector = proj;
  return m;
}

inline std::vector<geopix::InstanceQuery> random_queries(Rng& r, std::size_t k, std::size_t classes) {
  std::vector<geopix::InstanceQuery> q;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t i = 0; i < k; ++i)
    q.push_back({std::uniform_int_distribution<std::size_t>(0, classes - 1)(r), u(r), u(r)});
  return q;
}

inline std::vector<Case> module_cases() {
  namespace ops = geopix::ops;
  namespace clm = geopix::clm;
  namespace nn = geopix::nn;
  using V = std::vector<Var<D>>;
  std::vector<Case> c;

  c.push_back({"nn.linear", [](Rng& r) {
                 auto m = std::make_shared<nn::Linear<D>>("lin", 4, 3, r);
                 jitter(*m, r);
                 return check([m](Tape<D>& t, const V& x) { return (*m)(t, x[0]); }, {rnd({5, 4}, r)}, r, params_of(*m));
               }});
  c.push_back({"nn.conv2d", [](Rng& r) {
                 auto m = std::make_shared<nn::Conv2d<D>>("conv", 2, 3, 3, r);
                 jitter(*m, r);
                 return check([m](Tape<D>& t, const V& x) { return (*m)(t, x[0]); }, {rnd({2, 4, 4}, r)}, r, params_of(*m));
               }});
  c.push_back({"nn.mha_2heads", [](Rng& r) {
                 auto m = std::make_shared<nn::MultiHeadAttention<D>>("mha", 4, 3, 4, 5, 2, r);
                 return check([m](Tape<D>& t, const V& x) { return (*m)(t, x[0], x[1]).out; },
                              {rnd({3, 4}, r), rnd({6, 3}, r)}, r, params_of(*m));
               }});

  const clm::Dims dims{3, 2, 2, 4, 4, 4};
  c.push_back({"clm.bank_retrieve", [dims](Rng& r) {
                 auto b = std::make_shared<clm::MemoryBank<D>>(dims, r, 1.0);
                 return check([b](Tape<D>& t, const V&) { return b->retrieve(t, {{2, 0, 2}, 1}); }, {}, r, params_of(*b));
               }});
  c.push_back({"clm.encoder_pool", [dims](Rng& r) {
                 auto e = std::make_shared<clm::MemoryEncoder<D>>(dims, r);
                 jitter(*e, r);
                 return check([e](Tape<D>& t, const V& x) { return (*e)(t, x[0]); }, {rnd({2, 8, 8}, r)}, r, params_of(*e));
               }});
  c.push_back({"clm.encoder_resize", [dims](Rng& r) {
                 auto e = std::make_shared<clm::MemoryEncoder<D>>(dims, r);
                 jitter(*e, r);
                 return check([e](Tape<D>& t, const V& x) { return (*e)(t, x[0]); }, {rnd({1, 6, 6}, r)}, r, params_of(*e));
               }});
  for (auto kind : clm::kAllFusions) {
    c.push_back({"clm.fusion_" + clm::to_string(kind), [dims, kind](Rng& r) {
                   auto f = std::make_shared<clm::Fusion<D>>(kind, dims, r);
                   jitter(*f, r);
                   return check([f](Tape<D>& t, const V& x) {
                     return f->uses_encoded_mask() ? (*f)(t, x[0], x[1]) : (*f)(t, x[0]);
                   }, {rnd({2, 2, 4, 4, 4}, r), rnd({2, 4, 4, 4}, r)}, r, params_of(*f));
                 }});
  }
  c.push_back({"clm.memory_attention", [](Rng& r) {
                 auto a = std::make_shared<clm::MemoryAttention<D>>("ma", 6, 4, 1, r);
                 auto g = std::make_shared<clm::ResidualGate<D>>("alpha");
                 g->alpha.value[0] = 0.7;
                 auto ps = params_of(*a);
                 ps.push_back(&g->alpha);
                 return check([a, g](Tape<D>& t, const V& x) {
                   auto res = (*a)(t, x[0], x[1], x[2], *g);
                   return ops::concat(res.enhanced, 0);
                 }, {rnd({9, 6}, r), rnd({2, 4, 3, 3}, r), rnd({2, 1, 4, 3, 3}, r)}, r, ps);
               }});

  using geopix::ProjectorMode;
  c.push_back({"model.encoder", [](Rng& r) {
                 auto cfg = tiny_config(clm::FusionKind::Conv3D, true, ProjectorMode::Independent);
                 auto e = std::make_shared<geopix::ImageEncoder<D>>(cfg, r);
                 jitter(*e, r);
                 return check([e](Tape<D>& t, const V& x) {
                   auto f = (*e)(t, x[0]);
                   return ops::concat(std::vector<Var<D>>{ops::reshape(f[0], {f[0].numel()}),
                                                          ops::reshape(f[1], {f[1].numel()})}, 0);
                 }, {rnd({3, 16, 16}, r)}, r, params_of(*e));
               }});
  for (auto mode : {ProjectorMode::Independent, ProjectorMode::Shared}) {
    c.push_back({"model.projector_" + geopix::to_string(mode), [mode](Rng& r) {
                   auto p = std::make_shared<geopix::Projector<D>>(mode, std::vector<std::size_t>{4, 4}, 5, r);
                   return check([p](Tape<D>& t, const V& x) {
                     return ops::concat(std::vector<Var<D>>{(*p)(t, x[0], 0), (*p)(t, x[1], 1)}, 0);
                   }, {rnd({4, 3, 3}, r), rnd({4, 2, 2}, r)}, r, params_of(*p));
                 }});
  }
  c.push_back({"model.conditioner", [](Rng& r) {
                 auto cfg = tiny_config(clm::FusionKind::Conv3D, true, ProjectorMode::Independent);
                 auto m = std::make_shared<geopix::Conditioner<D>>(cfg, r);
                 jitter(*m, r);
                 auto q = random_queries(r, 3, cfg.classes);
                 return check([m, q](Tape<D>& t, const V&) {
                   auto out = (*m)(t, q);
                   return ops::concat(std::vector<Var<D>>{ops::reshape(out.tokens.tokens, {out.tokens.tokens.numel()}),
                                                          ops::reshape(out.class_logits, {out.class_logits.numel()})}, 0);
                 }, {}, r, params_of(*m));
               }});
  c.push_back({"model.mask_head", [](Rng& r) {
                 auto cfg = tiny_config(clm::FusionKind::Conv3D, true, ProjectorMode::Independent);
                 auto h = std::make_shared<geopix::MaskHead<D>>("head", cfg, r);
                 return check([h](Tape<D>& t, const V& x) { return (*h)(t, x[0], x[1], 6, 6).logits; },
                              {rnd({36, 6}, r), rnd({2, 2, 6}, r)}, r, params_of(*h));
               }});

  // Whole forward pass plus the training loss, all parameters included.
  struct Variant {
    std::string name;
    clm::FusionKind kind;
    bool clm;
    ProjectorMode proj;
  };
  const std::vector<Variant> variants = {
      {"model.full_clm_off", clm::FusionKind::Conv3D, false, ProjectorMode::Independent},
      {"model.full_argmax", clm::FusionKind::Argmax, true, ProjectorMode::Independent},
      {"model.full_conv2d", clm::FusionKind::Conv2D, true, ProjectorMode::Shared},
      {"model.full_conv3d", clm::FusionKind::Conv3D, true, ProjectorMode::Independent},
      {"model.full_attention", clm::FusionKind::Attention, true, ProjectorMode::Independent},
      {"model.full_dual_attention", clm::FusionKind::DualAttention, true, ProjectorMode::Shared},
  };
  for (const auto& v : variants) {
    c.push_back({v.name, [v](Rng& r) {
                   auto cfg = tiny_config(v.kind, v.clm, v.proj);
                   auto m = std::make_shared<geopix::Model<D>>(cfg, r());
                   jitter(*m, r);
                   auto q = random_queries(r, 2, cfg.classes);
                   auto target = binary({2, cfg.mask_h, cfg.mask_w}, r);
                   std::vector<std::size_t> labels{q[0].class_id, q[1].class_id};
                   auto img = TensorD::uniform({3, cfg.image_h, cfg.image_w}, r, 0.0, 1.0);
                   return check([m, q, target, labels, img](Tape<D>& t, const V&) {
                     auto fw = m->forward(t, t.constant(img), q, {geopix::ClassSource::GroundTruth, false});
                     auto ml = geopix::train::mask_loss(fw.final_mask, target);
                     auto ce = ops::cross_entropy(fw.class_logits, std::span<const std::size_t>(labels));
                     return ops::add(ml.total, ce);
                   }, {}, r, params_of(*m));
                 }});
  }
  return c;
}

struct CaseReport {
  std::string name;
  Outcome worst;
  std::size_t trials = 0;
  bool pass() const { return worst.rel < kTol && worst.checked > 0; }
};

inline CaseReport run_case(const Case& c, std::size_t trials, std::uint64_t seed) {
  CaseReport rep{c.name, {}, trials};
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) rep.worst.merge(c.trial(rng));
  return rep;
}

}  // namespace gc
