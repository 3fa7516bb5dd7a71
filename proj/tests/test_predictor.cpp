#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace geopix;
namespace ops = geopix::ops;

namespace {

std::vector<InstanceQuery> queries3() { return {{0, -0.5, -0.5}, {3, 0.25, 0.5}, {0, 0.75, -0.1}}; }

Tensor image(std::uint64_t seed, const ModelConfig& c) {
  Rng r(seed);
  return Tensor::uniform({3, c.image_h, c.image_w}, r, 0.0f, 1.0f);
}

// Every parameter nudged so zero-initialized paths are open.
void perturb(Model<float>& m, std::uint64_t seed, float s = 0.05f) {
  Rng r(seed);
  m.visit([&](Parameter<float>& p) {
    for (auto& v : p.value.values()) v += std::normal_distribution<float>(0.0f, s)(r);
  });
}

}  // namespace

// ------------------------------------------------------------------- config

TEST(ModelConfig, DefaultsAndFeatureExtents) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.stride(), 8u);
  EXPECT_EQ(c.feature_h(0), 12u);
  EXPECT_EQ(c.feature_h(1), 6u);
}

TEST(ModelConfig, ValidationErrors) {
  ModelConfig c;
  c.image_h = 44;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.mask_h = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c.clm_enabled = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelConfig, JsonRoundTripAndStrictKeys) {
  ModelConfig c;
  c.fusion = clm::FusionKind::DualAttention;
  c.projector = ProjectorMode::Shared;
  c.memory_capacity = 4;
  const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.memory_capacity = 5;
  EXPECT_NE(config_hash(back), config_hash(c));
  EXPECT_THROW(nlohmann::json({{"chanels", 4}}).get<ModelConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"channels", -4}}).get<ModelConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"fusion", "maxpool"}}).get<ModelConfig>(), ConfigError);
}

TEST(Query, CentreNormalization) {
  const auto q = make_query(2, 0, 0, 48, 48, 48, 48);
  EXPECT_EQ(q.cx, 0.0);
  EXPECT_EQ(q.cy, 0.0);
  const auto tl = make_query(2, 0, 0, 2, 2, 48, 48);
  EXPECT_NEAR(tl.cx, -1.0 + 2.0 / 48, 1e-12);
}

// ----------------------------------------------------------------- encoder

TEST(ImageEncoder, PyramidShapes) {
  ModelConfig c;
  Rng r(1);
  ImageEncoder<float> enc(c, r);
  Tape<float> t(false);
  const auto f = enc(t, t.constant(image(1, c)));
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].shape(), (Shape{c.channels, 12, 12}));
  EXPECT_EQ(f[1].shape(), (Shape{c.channels, 6, 6}));
  EXPECT_THROW(enc(t, t.constant(Tensor::zeros({3, 44, 48}))), ConfigError);
  EXPECT_THROW(enc(t, t.constant(Tensor::zeros({1, 48, 48}))), DimensionError);
}

// --------------------------------------------------------------- projector

TEST(Projector, IdentityReturnsTransposedFeatures) {
  Rng r(2);
  Projector<float> p(ProjectorMode::Independent, {4, 4}, 4, r);
  p.set_identity();
  const Tensor x = Tensor::randn({4, 3, 2}, r);
  Tape<float> t(false);
  const auto y = p(t, t.constant(x), 1).value();
  ASSERT_EQ(y.shape(), (Shape{6, 4}));
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.at({i, c}), x[c * 6 + i]);
}

TEST(Projector, SharedUsesOneMapForAllScales) {
  Rng r(3);
  Projector<float> ind(ProjectorMode::Independent, {8, 8, 8}, 8, r);
  Projector<float> sh(ProjectorMode::Shared, {8, 8, 8}, 8, r);
  EXPECT_EQ(nn::count_parameters(ind), 3 * nn::count_parameters(sh));
  EXPECT_THROW(Projector<float>(ProjectorMode::Shared, {8, 4}, 8, r), ConfigError);
  // same input at two scales: shared gives the same output, independent does not
  const Tensor x = Tensor::randn({8, 2, 2}, r);
  Tape<float> t(false);
  EXPECT_EQ(sh(t, t.constant(x), 0).value(), sh(t, t.constant(x), 2).value());
  EXPECT_NE(ind(t, t.constant(x), 0).value(), ind(t, t.constant(x), 2).value());
}

TEST(Projector, ModelParameterCountsScaleWithL) {
  ModelConfig ci, cs;
  cs.projector = ProjectorMode::Shared;
  ci.scales = cs.scales = 3;
  Model<float> mi(ci, 1), ms(cs, 1);
  Projector<float>& pi = mi.projector();
  Projector<float>& ps = ms.projector();
  EXPECT_EQ(nn::count_parameters(pi), 3 * nn::count_parameters(ps));
  EXPECT_EQ(mi.parameter_count() - ms.parameter_count(), 2 * nn::count_parameters(ps));
}

// ------------------------------------------------------------- conditioner

TEST(Conditioner, DeterministicAndInjective) {
  ModelConfig c;
  Rng r(4);
  Conditioner<float> cond(c, r);
  const auto q = queries3();
  Tape<float> t(false);
  const auto a = cond(t, q);
  const auto b = cond(t, q);
  EXPECT_EQ(a.tokens.tokens.value(), b.tokens.tokens.value());
  EXPECT_EQ(a.tokens.tokens.shape(), (Shape{3, c.scales, c.tokens, c.token_dim}));
  EXPECT_EQ(a.class_logits.shape(), (Shape{3, c.classes}));

  // Distinct (class, position) pairs map to distinct token sets.
  std::vector<InstanceQuery> grid;
  for (std::size_t k = 0; k < c.classes; ++k)
    for (double x : {-0.9, -0.3, 0.0, 0.4, 0.8})
      for (double y : {-0.7, 0.1, 0.6}) grid.push_back({k, x, y});
  const auto g = cond(t, grid).tokens.tokens.value();
  const std::size_t per = g.numel() / grid.size();
  for (std::size_t i = 0; i < grid.size(); ++i)
    for (std::size_t j = i + 1; j < grid.size(); ++j)
      EXPECT_FALSE(std::equal(g.data() + i * per, g.data() + (i + 1) * per, g.data() + j * per)) << i << " vs " << j;
}

TEST(Conditioner, RejectsBadQueries) {
  ModelConfig c;
  Rng r(5);
  Conditioner<float> cond(c, r);
  Tape<float> t(false);
  EXPECT_THROW(cond(t, std::vector<InstanceQuery>{}), UsageError);
  EXPECT_THROW(cond(t, std::vector<InstanceQuery>{{6, 0, 0}}), IndexError);
}

// ----------------------------------------------------------------- forward

TEST(Model, ForwardShapes) {
  ModelConfig c;
  Model<float> m(c, 7);
  const auto q = queries3();
  Tape<float> t(false);
  const auto out = m.forward(t, t.constant(image(1, c)), q, {ClassSource::GroundTruth, true});
  ASSERT_EQ(out.per_scale.size(), c.scales);
  for (std::size_t l = 0; l < c.scales; ++l) {
    EXPECT_EQ(out.initial[l].shape(), (Shape{3, c.mask_h, c.mask_w}));
    EXPECT_EQ(out.per_scale[l].shape(), (Shape{3, c.mask_h, c.mask_w}));
    EXPECT_EQ(out.attn_pre[l].shape(), (Shape{3, c.feature_h(l) * c.feature_w(l)}));
    EXPECT_EQ(out.attn_post[l].shape(), out.attn_pre[l].shape());
  }
  EXPECT_EQ(out.final_mask.shape(), (Shape{3, c.mask_h, c.mask_w}));
  EXPECT_EQ(out.memory_classes, (std::vector<std::size_t>{0, 3, 0}));
  EXPECT_THROW(m.forward(t, t.constant(Tensor::zeros({3, 40, 48})), q), DimensionError);
}

TEST(Model, FinalMaskIsBetaWeightedSumExactly) {
  // Every fusion variant, several beta settings; the reference sum is formed
  // in the same order (l = 0, 1, ...) in f32.
  Rng r(8);
  for (auto kind : clm::kAllFusions) {
    ModelConfig c;
    c.fusion = kind;
    c.memory_capacity = 4;
    Model<float> m(c, 11);
    perturb(m, 12);
    for (int trial = 0; trial < 4; ++trial) {
      for (std::size_t l = 0; l < c.scales; ++l) m.beta().value[l] = std::uniform_real_distribution<float>(-1, 1)(r);
      Tape<float> t(false);
      const auto out = m.forward(t, t.constant(image(trial, c)), queries3());
      Tensor ref(out.final_mask.shape());
      for (std::size_t i = 0; i < ref.numel(); ++i) {
        float s = out.per_scale[0].value()[i] * m.beta().value[0];
        for (std::size_t l = 1; l < c.scales; ++l) s = s + out.per_scale[l].value()[i] * m.beta().value[l];
        ref[i] = s;
      }
      ASSERT_EQ(out.final_mask.value(), ref) << clm::to_string(kind) << " trial " << trial;
    }
  }
}

TEST(Model, OneHotBetaReproducesSingleScale) {
  ModelConfig c;
  Model<float> m(c, 13);
  perturb(m, 14);
  for (std::size_t hot = 0; hot < c.scales; ++hot) {
    for (std::size_t l = 0; l < c.scales; ++l) m.beta().value[l] = l == hot ? 1.0f : 0.0f;
    Tape<float> t(false);
    const auto out = m.forward(t, t.constant(image(2, c)), queries3());
    EXPECT_EQ(out.final_mask.value(), out.per_scale[hot].value());
  }
  m.beta().value[0] = m.beta().value[1] = 0.5f;
  Tape<float> t(false);
  const auto out = m.forward(t, t.constant(image(2, c)), queries3());
  for (std::size_t i = 0; i < out.final_mask.numel(); ++i)
    EXPECT_EQ(out.final_mask.value()[i], 0.5f * out.per_scale[0].value()[i] + 0.5f * out.per_scale[1].value()[i]);
}

TEST(Model, ClmOffIgnoresTheBank) {
  ModelConfig c;
  c.clm_enabled = false;
  Model<float> m(c, 15);
  const auto q = queries3();
  const auto before = m.predict(image(3, c), q).final_mask;
  m.bank().store.value.fill(7.0f);
  EXPECT_EQ(m.predict(image(3, c), q).final_mask, before);

  ModelConfig on = c;
  on.clm_enabled = true;
  Model<float> mo(on, 15);
  EXPECT_LT(m.parameter_count(), mo.parameter_count());
  std::size_t n = 0;
  m.visit([&](const Parameter<float>& p) { n += p.name.rfind("clm.", 0) == 0; });
  EXPECT_EQ(n, 0u);
}

TEST(Model, ClosedMemoryPathMatchesClmOff) {
  // Fresh models: the gate and the decode delta start at zero, so the memory
  // branch contributes nothing and both settings share every other weight.
  ModelConfig off;
  off.clm_enabled = false;
  ModelConfig on;
  Model<float> a(off, 21), b(on, 21);
  const auto q = queries3();
  const auto pa = a.predict(image(4, off), q).final_mask;
  const auto pb = b.predict(image(4, on), q).final_mask;
  for (std::size_t i = 0; i < pa.numel(); ++i) EXPECT_NEAR(pa[i], pb[i], 1e-5f);
}

TEST(Model, MemoryChangesOutputOnceOpen) {
  ModelConfig c;
  Model<float> m(c, 22);
  perturb(m, 23);
  const auto q = queries3();
  const auto before = m.predict(image(5, c), q, ClassSource::GroundTruth).final_mask;
  Rng r(24);
  m.bank().store.value = Tensor::randn(m.bank().store.value.shape(), r);
  EXPECT_NE(m.predict(image(5, c), q, ClassSource::GroundTruth).final_mask, before);
}

TEST(Model, SeedDeterminism) {
  ModelConfig c;
  Model<float> a(c, 30), b(c, 30), d(c, 31);
  const auto q = queries3();
  EXPECT_EQ(a.predict(image(6, c), q).final_mask, b.predict(image(6, c), q).final_mask);
  EXPECT_NE(a.predict(image(6, c), q).final_mask, d.predict(image(6, c), q).final_mask);
}

TEST(Model, FusedCacheMatchesUncached) {
  for (auto kind : {clm::FusionKind::Argmax, clm::FusionKind::Conv3D}) {
    ModelConfig c;
    c.fusion = kind;
    Model<float> m(c, 40);
    perturb(m, 41);
    const auto q = queries3();
    Tape<float> t(false);
    FusedCache<float> cache;
    const auto img = t.constant(image(7, c));
    const auto a = m.forward(t, img, q, {ClassSource::GroundTruth, false}, &cache);
    const auto b = m.forward(t, img, std::vector<InstanceQuery>{q[1]}, {ClassSource::GroundTruth, false}, &cache);
    Tape<float> t2(false);
    const auto c1 = m.forward(t2, t2.constant(image(7, c)), std::vector<InstanceQuery>{q[1]},
                              {ClassSource::GroundTruth, false});
    EXPECT_EQ(b.final_mask.value(), c1.final_mask.value()) << clm::to_string(kind);
    (void)a;
  }
}

TEST(Model, PredictedClassesDriveRetrieval) {
  ModelConfig c;
  Model<float> m(c, 50);
  const auto q = queries3();
  Tape<float> t(false);
  const auto out = m.forward(t, t.constant(image(8, c)), q, {ClassSource::Predicted, false});
  EXPECT_EQ(out.memory_classes, ops::argmax(out.class_logits.value(), 1));
}

TEST(Model, ScopeFreezesConditionerTrunk) {
  ModelConfig c;
  Model<float> m(c, 60);
  const std::size_t wide = m.trainable_count();
  m.set_scope(TrainScope::Narrow);
  const std::size_t trunk = (c.token_dim + kPositionDim) * c.hidden + c.hidden + c.hidden * c.hidden + c.hidden;
  // biases are excluded from decay but still trainable; the whole trunk drops out
  EXPECT_EQ(wide - m.trainable_count(), trunk);
  m.set_scope(TrainScope::Wide);
  EXPECT_EQ(m.trainable_count(), wide);
}

// ---------------------------------------------------------------- gradcheck

namespace {

std::vector<gc::Case> model_cases() {
  std::vector<gc::Case> out;
  for (auto& c : gc::module_cases())
    if (c.name.rfind("model.", 0) == 0) out.push_back(c);
  return out;
}

}  // namespace

class ModelGradcheck : public ::testing::TestWithParam<gc::Case> {};

TEST_P(ModelGradcheck, CentralDifferenceAgrees) {
  const auto rep = gc::run_case(GetParam(), gc::kTrials, 999);
  EXPECT_GT(rep.worst.checked, 0u);
  EXPECT_LT(rep.worst.rel, gc::kTol) << "worst block " << rep.worst.worst;
}

INSTANTIATE_TEST_SUITE_P(Model, ModelGradcheck, ::testing::ValuesIn(model_cases()), [](const auto& info) {
  std::string n = info.param.name;
  std::replace(n.begin(), n.end(), '.', '_');
  return n;
});
