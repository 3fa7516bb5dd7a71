#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace geopix;
namespace ops = geopix::ops;

namespace {

Var<float> leaf(Tape<float>& t, Shape s, std::vector<float> v) { return t.leaf(Tensor(std::move(s), std::move(v))); }

}  // namespace

// ------------------------------------------------------------------ tensor

TEST(Tensor, ShapeContract) {
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.at({1, 2}), 1.5f);
  EXPECT_EQ(t.offset({1, 0}), 3u);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  EXPECT_THROW(t.at({2, 0}), IndexError);
  EXPECT_THROW(t.at({0}), DimensionError);
  EXPECT_THROW(t.reshaped({4}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
  EXPECT_TRUE(Tensor().empty());
}

TEST(Tensor, SeededInitIsReproducible) {
  Rng a(5), b(5);
  EXPECT_EQ(Tensor::randn({4, 4}, a), Tensor::randn({4, 4}, b));
}

// ---------------------------------------------------------------- examples

TEST(Ops, MatmulExamples) {
  Tape<float> t;
  auto a = leaf(t, {1, 2}, {1, 2});
  auto b = leaf(t, {2, 1}, {3, 4});
  EXPECT_EQ(ops::matmul(a, b).value()[0], 11.0f);

  Rng r(1);
  auto x = t.leaf(Tensor::randn({3, 4}, r));
  auto eye = leaf(t, {4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  EXPECT_EQ(ops::matmul(x, eye).value(), x.value());
  EXPECT_THROW(ops::matmul(x, x), DimensionError);
}

TEST(Ops, SoftmaxIsStable) {
  Tape<float> t;
  auto y = ops::softmax(leaf(t, {1, 2}, {1000.0f, 0.0f}), 1).value();
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 0.0f);
  auto z = ops::softmax(leaf(t, {2, 3}, {1, 2, 3, -1, 0, 1}), 1).value();
  // shift invariance along the axis
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(z[j], z[3 + j], 1e-7);
}

TEST(Ops, ConvOnesKernel) {
  Tape<float> t;
  auto x = t.leaf(Tensor::ones({1, 5, 5}));
  auto k = t.leaf(Tensor::ones({1, 1, 3, 3}));
  const auto y = ops::conv2d(x, k).value();
  EXPECT_EQ(y.at({0, 2, 2}), 9.0f);
  EXPECT_EQ(y.at({0, 0, 0}), 4.0f);
  EXPECT_EQ(y.at({0, 0, 2}), 6.0f);
  auto bad = t.leaf(Tensor::ones({1, 1, 2, 2}));
  EXPECT_THROW(ops::conv2d(x, bad), ConfigError);
  auto wrong_c = t.leaf(Tensor::ones({1, 2, 3, 3}));
  EXPECT_THROW(ops::conv2d(x, wrong_c), DimensionError);
}

TEST(Ops, Conv3dOnesKernel) {
  Tape<float> t;
  auto x = t.leaf(Tensor::ones({1, 3, 3, 3}));
  auto k = t.leaf(Tensor::ones({1, 1, 3, 3, 3}));
  const auto y = ops::conv3d(x, k).value();
  EXPECT_EQ(y.at({0, 1, 1, 1}), 27.0f);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 8.0f);
}

TEST(Ops, ResizeCheckerboard) {
  Tape<float> t;
  auto x = leaf(t, {1, 2, 2}, {0, 1, 1, 0});
  EXPECT_FLOAT_EQ(ops::resize_bilinear(x, 1, 1).value()[0], 0.5f);
  // same size is a pass-through
  EXPECT_EQ(ops::resize_bilinear(x, 2, 2).value(), x.value());
  // a constant stays constant at any size
  auto c = t.leaf(Tensor({1, 3, 4}, 2.5f));
  for (float v : ops::resize_bilinear(c, 7, 5).value().values()) EXPECT_FLOAT_EQ(v, 2.5f);
  EXPECT_THROW(ops::resize_bilinear(x, 0, 2), ConfigError);
}

TEST(Ops, PoolAndReductions) {
  Tape<float> t;
  auto x = leaf(t, {1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto p = ops::avg_pool2d(x, 2).value();
  EXPECT_EQ(p.shape(), (Shape{1, 1, 2}));
  EXPECT_FLOAT_EQ(p[0], 3.5f);
  EXPECT_FLOAT_EQ(p[1], 5.5f);
  EXPECT_THROW(ops::avg_pool2d(x, 3), ConfigError);
  EXPECT_FLOAT_EQ(ops::sum(x).value()[0], 36.0f);
  EXPECT_FLOAT_EQ(ops::mean(x).value()[0], 4.5f);
  const auto s = ops::sum_axis(x, 2).value();
  EXPECT_EQ(s.shape(), (Shape{1, 2}));
  EXPECT_FLOAT_EQ(s[1], 26.0f);
}

TEST(Ops, SelectMaxAbsTiesAndSigns) {
  Tape<float> t;
  auto x = leaf(t, {3, 2}, {1, -2, -3, 2, 3, 0});
  const auto y = ops::select_max_abs(x, 0).value();
  EXPECT_EQ(y[0], -3.0f);  // first of |-3| == |3|
  EXPECT_EQ(y[1], -2.0f);
}

TEST(Ops, GatherRowsRejectsBadIndex) {
  Tape<float> t;
  auto x = t.leaf(Tensor::ones({3, 2}));
  std::vector<std::size_t> rows{3};
  EXPECT_THROW(ops::gather_rows(x, std::span<const std::size_t>(rows), Shape{2}), IndexError);
}

TEST(Ops, LossExamples) {
  Tape<float> t;
  auto z = t.leaf(Tensor::zeros({2, 3}));
  EXPECT_NEAR(ops::bce_with_logits(z, Tensor::ones({2, 3})).value()[0], std::log(2.0f), 1e-6);
  std::vector<std::size_t> lab{0, 2};
  EXPECT_NEAR(ops::cross_entropy(z, std::span<const std::size_t>(lab)).value()[0], std::log(3.0f), 1e-6);
  std::vector<std::size_t> bad{0, 3};
  EXPECT_THROW(ops::cross_entropy(z, std::span<const std::size_t>(bad)), IndexError);
}

TEST(Tape, NonFiniteIsRejected) {
  Tape<float> t;
  auto x = leaf(t, {1}, {std::numeric_limits<float>::max()});
  EXPECT_THROW(ops::mul(x, x), NumericalError);
}

TEST(Tape, ParamNodesAreMemoizedAndAccumulate) {
  Parameter<float> p("p", Tensor({2}, 3.0f));
  p.zero_grad();
  Tape<float> t;
  auto a = t.param(p);
  auto b = t.param(p);
  EXPECT_EQ(a.id, b.id);
  t.backward(ops::sum(ops::mul(a, b)));  // d/dp sum(p^2) = 2p
  EXPECT_EQ(p.grad[0], 6.0f);
  Tape<float> t2;
  t2.backward(ops::sum(t2.param(p)));
  EXPECT_EQ(p.grad[0], 7.0f);
}

TEST(Tape, GradFreeTapeRecordsNoGradient) {
  Parameter<float> p("p", Tensor({2}, 1.0f));
  Tape<float> t(false);
  auto y = ops::sum(t.param(p));
  EXPECT_FALSE(y.requires_grad());
  t.backward(y);
  EXPECT_TRUE(p.grad.empty());
}

TEST(Tape, ReluBranchSignatureTracksSignPattern) {
  auto sig = [](std::vector<float> v) {
    Tape<float> t(false);
    ops::relu(t.leaf(Tensor({3}, std::move(v))));
    return t.branch_signature();
  };
  EXPECT_EQ(sig({1, -1, 2}), sig({3, -5, 0.5}));
  EXPECT_NE(sig({1, -1, 2}), sig({1, 1, 2}));
}

// ---------------------------------------------------------------- gradcheck

class OpGradcheck : public ::testing::TestWithParam<gc::Case> {};

TEST_P(OpGradcheck, CentralDifferenceAgrees) {
  const auto rep = gc::run_case(GetParam(), gc::kTrials, 1234);
  EXPECT_GT(rep.worst.checked, 0u);
  EXPECT_LT(rep.worst.rel, gc::kTol) << "worst block " << rep.worst.worst;
}

INSTANTIATE_TEST_SUITE_P(All, OpGradcheck, ::testing::ValuesIn(gc::op_cases()),
                         [](const auto& info) { return info.param.name; });
