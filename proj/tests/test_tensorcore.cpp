#include <gtest/gtest.h>

#include <cmath>

#include "fsdet/errors.hpp"
#include "fsdet/layers.hpp"
#include "support.hpp"

using namespace fsdet;
using fsdet::testing::central_difference;
using fsdet::testing::dot;
using fsdet::testing::random_tensor;
using fsdet::testing::rel_error;

namespace {

LayerParams random_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  LayerParams p = LayerParams::conv("probe", out, in, k);
  p.weights = random_tensor(p.weights.shape(), rng);
  p.bias = random_tensor(p.bias.shape(), rng);
  return p;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_numel(t.shape()), t.size());
}

TEST(Tensor, RejectsNonFinite) {
  Tensor t({2}, std::vector<double>{1.0, NAN});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.require_finite("probe"), NumericError);
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Rng rng(1);
  LayerParams p = random_conv(2, 1, 3, rng);
  p.bias.fill(0.0);
  const Tensor out = conv2d_forward(Tensor({1, 3, 3}), p, 1, 0);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(2);
  LayerParams p = LayerParams::conv("id", 1, 1, 1);
  p.weights[0] = 1.0;
  const Tensor x = random_tensor({1, 5, 4}, rng);
  EXPECT_EQ(conv2d_forward(x, p, 1, 0), x);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t stride = 1 + trial % 2, pad = (trial / 2) % 2;
    const Tensor x = random_tensor({2, 8, 8}, rng);
    const LayerParams p = random_conv(4, 2, 3, rng);
    const Tensor got = conv2d_forward(x, p, stride, pad);
    const Tensor want = fsdet::testing::naive_conv(x, p, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, OutputExtent) {
  Rng rng(4);
  const LayerParams p = random_conv(3, 2, 3, rng);
  EXPECT_EQ(conv2d_forward(Tensor({2, 9, 7}), p, 2, 1).shape(), (Shape{3, 5, 4}));
  EXPECT_EQ(conv2d_forward(Tensor({2, 9, 7}), p, 1, 0).shape(), (Shape{3, 7, 5}));
}

TEST(Conv2d, ChannelMismatchIsConfigError) {
  Rng rng(5);
  const LayerParams p = random_conv(3, 2, 3, rng);
  EXPECT_THROW(conv2d_forward(Tensor({3, 8, 8}), p, 1, 0), ConfigError);
}

TEST(Conv2d, TooSmallInputIsShapeError) {
  Rng rng(5);
  const LayerParams p = random_conv(3, 2, 3, rng);
  EXPECT_THROW(conv2d_forward(Tensor({2, 2, 2}), p, 1, 0), ShapeError);
}

TEST(Conv2d, BackwardWithoutSavedInputIsStateError) {
  Rng rng(6);
  LayerParams p = random_conv(1, 1, 3, rng);
  EXPECT_THROW(conv2d_backward(Tensor({1, 1, 1}), Tensor(), p, 1, 0), StateError);
}

TEST(Conv2d, ZeroGradientBackward) {
  Rng rng(7);
  LayerParams p = random_conv(3, 2, 3, rng);
  p.zero_grad();
  const Tensor x = random_tensor({2, 6, 6}, rng);
  const Tensor gi = conv2d_backward(Tensor({3, 4, 4}), x, p, 1, 0);
  for (double v : gi.values()) EXPECT_EQ(v, 0.0);
  for (double v : p.grad_weights.values()) EXPECT_EQ(v, 0.0);
  for (double v : p.grad_bias.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, BackwardIsLinearInUpstreamGradient) {
  Rng rng(8);
  LayerParams p = random_conv(3, 2, 3, rng);
  const Tensor x = random_tensor({2, 7, 7}, rng);
  const Tensor g = random_tensor({3, 4, 4}, rng);
  Tensor g3 = g;
  g3.scale(3.0);
  p.zero_grad();
  const Tensor a = conv2d_backward(g, x, p, 2, 1);
  const Tensor wa = p.grad_weights;
  p.zero_grad();
  const Tensor b = conv2d_backward(g3, x, p, 2, 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 3.0 * a[i], 1e-12);
  for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_NEAR(p.grad_weights[i], 3.0 * wa[i], 1e-12);
}

TEST(Conv2d, BackwardAccumulates) {
  Rng rng(9);
  LayerParams p = random_conv(2, 2, 3, rng);
  const Tensor x = random_tensor({2, 5, 5}, rng);
  const Tensor g = random_tensor({2, 3, 3}, rng);
  p.zero_grad();
  conv2d_backward(g, x, p, 1, 0);
  const Tensor once = p.grad_weights;
  conv2d_backward(g, x, p, 1, 0);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(p.grad_weights[i], 2.0 * once[i], 1e-12);
}

TEST(Conv2d, FiniteDifferencePerturbation) {
  Rng rng(10);
  LayerParams p = random_conv(3, 2, 3, rng);
  Tensor x = random_tensor({2, 6, 6}, rng);
  const Tensor r = random_tensor({3, 3, 3}, rng);
  auto loss = [&] { return dot(conv2d_forward(x, p, 2, 1), r); };
  p.zero_grad();
  const Tensor gx = conv2d_backward(r, x, p, 2, 1);
  for (std::size_t i : {0u, 7u, 35u, 71u}) EXPECT_LT(rel_error(gx[i], central_difference(x[i], loss)), 1e-6);
  for (std::size_t i : {0u, 13u, 53u}) {
    const double num = central_difference(p.weights[i], loss);
    EXPECT_LT(rel_error(p.grad_weights[i], num), 1e-6);
  }
  EXPECT_LT(rel_error(p.grad_bias[1], central_difference(p.bias[1], loss)), 1e-6);
}

TEST(Conv2d, ForwardIsPure) {
  Rng rng(11);
  const LayerParams p = random_conv(4, 3, 3, rng);
  const Tensor x = random_tensor({3, 9, 9}, rng);
  EXPECT_EQ(conv2d_forward(x, p, 2, 1), conv2d_forward(x, p, 2, 1));
}

TEST(MaxPool, ConstantField) {
  const auto r = maxpool2d(Tensor({2, 4, 4}, 0.25), 2, 2);
  for (double v : r.output.values()) EXPECT_EQ(v, 0.25);
}

TEST(MaxPool, ForcedMax) {
  const auto r = maxpool2d(Tensor({1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  ASSERT_EQ(r.output.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(r.output[0], 4.0);
}

TEST(MaxPool, MatchesBruteForceScan) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t window = 2 + trial % 2, stride = 1 + (trial / 2) % 2;
    const Tensor x = random_tensor({3, 7, 6}, rng);
    const auto got = maxpool2d(x, window, stride);
    const std::size_t oh = (7 - window) / stride + 1, ow = (6 - window) / stride + 1;
    ASSERT_EQ(got.output.shape(), (Shape{3, oh, ow}));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double m = -INFINITY;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx)
              m = std::max(m, x.at(c, oy * stride + dy, ox * stride + dx));
          EXPECT_EQ(got.output.at(c, oy, ox), m);
        }
  }
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  const Tensor x({1, 2, 2}, {1, 5, 3, 4});
  const auto r = maxpool2d(x, 2, 2);
  const Tensor g = maxpool2d_backward(Tensor({1, 1, 1}, {2.5}), r);
  EXPECT_EQ(g, Tensor({1, 2, 2}, {0, 2.5, 0, 0}));
}

TEST(MaxPool, WindowLargerThanInputIsShapeError) {
  EXPECT_THROW(maxpool2d(Tensor({1, 2, 2}), 3, 1), ShapeError);
}

TEST(AvgPool, ConstantField) {
  EXPECT_EQ(avgpool_global(Tensor({3, 4, 4}, 1.0)), Tensor::vector({1, 1, 1}));
}

TEST(AvgPool, ChannelRamp) {
  EXPECT_DOUBLE_EQ(avgpool_global(Tensor({1, 2, 2}, {0, 1, 2, 3}))[0], 1.5);
}

TEST(AvgPool, FiniteDifference) {
  Rng rng(13);
  Tensor x = random_tensor({3, 4, 5}, rng);
  const Tensor r = random_tensor({3}, rng);
  auto loss = [&] { return dot(avgpool_global(x), r); };
  const Tensor g = avgpool_global_backward(r, x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(rel_error(g[i], central_difference(x[i], loss)), 1e-6);
}

TEST(Fc, IdentityWeight) {
  LayerParams p = LayerParams::dense("id", 3, 3);
  for (std::size_t i = 0; i < 3; ++i) p.weights[i * 3 + i] = 1.0;
  const Tensor x = Tensor::vector({0.5, -2, 7});
  EXPECT_EQ(fc_forward(x, p), x);
}

TEST(Fc, ZeroWeightGivesBias) {
  LayerParams p = LayerParams::dense("b", 2, 4);
  p.bias = Tensor::vector({1.25, -3});
  EXPECT_EQ(fc_forward(Tensor::vector({1, 2, 3, 4}), p), p.bias);
}

TEST(Fc, DimensionMismatchIsConfigError) {
  const LayerParams p = LayerParams::dense("b", 2, 4);
  EXPECT_THROW(fc_forward(Tensor::vector({1, 2, 3}), p), ConfigError);
}

TEST(Fc, FiniteDifference) {
  Rng rng(14);
  LayerParams p = LayerParams::dense("fc", 4, 6);
  p.weights = random_tensor(p.weights.shape(), rng);
  p.bias = random_tensor(p.bias.shape(), rng);
  Tensor x = random_tensor({6}, rng);
  const Tensor r = random_tensor({4}, rng);
  auto loss = [&] { return dot(fc_forward(x, p), r); };
  p.zero_grad();
  const Tensor gx = fc_backward(r, x, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(rel_error(gx[i], central_difference(x[i], loss)), 1e-6);
  for (std::size_t i = 0; i < p.weights.size(); ++i)
    EXPECT_LT(rel_error(p.grad_weights[i], central_difference(p.weights[i], loss)), 1e-6);
  for (std::size_t i = 0; i < p.bias.size(); ++i)
    EXPECT_LT(rel_error(p.grad_bias[i], central_difference(p.bias[i], loss)), 1e-6);
}

TEST(Relu, Definition) {
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
}

TEST(Relu, DeadRegion) {
  const Tensor x = Tensor::vector({-1, -0.5, -3});
  EXPECT_EQ(relu(x), Tensor({3}));
  EXPECT_EQ(relu_backward(Tensor::vector({1, 2, 3}), x), Tensor({3}));
}

TEST(Relu, FiniteDifferenceAwayFromKink) {
  Rng rng(15);
  Tensor x = random_tensor({40}, rng);
  const Tensor r = random_tensor({40}, rng);
  auto loss = [&] { return dot(relu(x), r); };
  const Tensor g = relu_backward(r, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) <= 1e-3) continue;
    EXPECT_LT(rel_error(g[i], central_difference(x[i], loss)), 1e-6);
  }
}

TEST(Sgd, ZeroLearningRateKeepsParameters) {
  Rng rng(16);
  LayerParams p = random_conv(2, 2, 3, rng);
  p.grad_weights = random_tensor(p.weights.shape(), rng);
  p.grad_bias = random_tensor(p.bias.shape(), rng);
  const LayerParams before = p;
  LayerParams* list[] = {&p};
  sgd_step(list, 0.0);
  EXPECT_EQ(p.weights, before.weights);
  EXPECT_EQ(p.bias, before.bias);
  for (double v : p.grad_weights.values()) EXPECT_EQ(v, 0.0);
}

TEST(Sgd, ScalarArithmetic) {
  LayerParams p = LayerParams::dense("s", 1, 1);
  p.weights[0] = 1.0;
  p.grad_weights[0] = 2.0;
  LayerParams* list[] = {&p};
  sgd_step(list, 0.1);
  EXPECT_DOUBLE_EQ(p.weights[0], 0.8);
}

TEST(Sgd, NonFiniteGradientNamesLayer) {
  LayerParams good = LayerParams::dense("good", 1, 1);
  LayerParams bad = LayerParams::dense("mr.conv2", 1, 1);
  good.grad_weights[0] = 1.0;
  bad.grad_bias[0] = INFINITY;
  LayerParams* list[] = {&good, &bad};
  try {
    sgd_step(list, 0.1);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("mr.conv2"), std::string::npos);
  }
  EXPECT_EQ(good.weights[0], 0.0);
}

TEST(Sgd, StepDecreasesConvexQuadratic) {
  // f(w) = |W x - y|^2 for a dense layer.
  Rng rng(17);
  LayerParams p = LayerParams::dense("q", 3, 5);
  p.weights = random_tensor(p.weights.shape(), rng);
  const Tensor x = random_tensor({5}, rng);
  const Tensor y = random_tensor({3}, rng);
  auto loss = [&] {
    const Tensor o = fc_forward(x, p);
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += (o[i] - y[i]) * (o[i] - y[i]);
    return s;
  };
  const double before = loss();
  const Tensor o = fc_forward(x, p);
  Tensor g({3});
  for (std::size_t i = 0; i < 3; ++i) g[i] = 2.0 * (o[i] - y[i]);
  p.zero_grad();
  fc_backward(g, x, p);
  LayerParams* list[] = {&p};
  sgd_step(list, 1e-3);
  EXPECT_LT(loss(), before);
}
