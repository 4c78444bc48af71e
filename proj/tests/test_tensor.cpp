#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "swintext/ops.hpp"
#include "swintext/verify.hpp"

using namespace swintext;
using TD = Tensor<double>;

namespace {

TD t2(std::size_t r, std::size_t c, std::vector<double> v) { return TD({r, c}, std::move(v)); }

void expect_values(const TD& t, const std::vector<double>& want, double tol = 0.0) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.data()[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  expect_values(matmul(t2(2, 2, {1, 0, 0, 1}), t2(2, 2, {1, 2, 3, 4})), {1, 2, 3, 4});
}

TEST(Matmul, RowTimesColumn) {
  const auto y = matmul(t2(1, 2, {1, 2}), t2(2, 1, {3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y.item(), 11.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(t2(2, 3, {1, 2, 3, 4, 5, 6}), t2(2, 2, {1, 2, 3, 4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    TD a = verify::random_tensor({3, 4}, rng), b = verify::random_tensor({4, 2}, rng);
    verify::GradcheckOptions opt;
    opt.eps = 1e-5;
    EXPECT_LE(verify::gradcheck([&] { return sum(matmul(a, b)); }, {a}, opt), 1e-6);
  }
}

TEST(Softmax, SymmetricPairIsHalf) { expect_values(softmax(t2(1, 2, {0, 0})), {0.5, 0.5}); }

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const auto y = softmax(t2(1, 2, {1000, 0}));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y.data()[0]));
}

TEST(Softmax, MaskedKeyGetsExactlyZero) {
  const auto y = softmax(t2(1, 2, {0.3, -std::numeric_limits<double>::infinity()}));
  EXPECT_EQ(y.data()[0], 1.0);
  EXPECT_EQ(y.data()[1], 0.0);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(7);
    TD x = verify::random_tensor({rows, cols}, rng, -5, 5);
    std::vector<double> shifted(x.values());
    for (std::size_t r = 0; r < rows; ++r) {
      const double k = rng.uniform(-50, 50);
      for (std::size_t c = 0; c < cols; ++c) shifted[r * cols + c] += k;
    }
    const auto y = softmax(x), ys = softmax(TD({rows, cols}, shifted));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        s += y.data()[r * cols + c];
        EXPECT_GT(y.data()[r * cols + c], 0.0);
        EXPECT_LE(y.data()[r * cols + c], 1.0);
        EXPECT_NEAR(y.data()[r * cols + c], ys.data()[r * cols + c], 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, NormalizesRows) {
  const auto y = layer_norm(t2(1, 3, {1, 2, 3}), TD::full({3}, 1.0), TD::zeros({3}), 1e-12);
  double mean = 0.0, var = 0.0;
  for (double v : y.data()) mean += v / 3.0;
  for (double v : y.data()) var += (v - mean) * (v - mean) / 3.0;
  EXPECT_NEAR(mean, 0.0, 1e-10);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(LayerNorm, RandomRowsHaveZeroMeanUnitVariance) {
  Rng rng(9);
  TD x = verify::random_tensor({6, 16}, rng, -3, 3);
  const auto y = layer_norm(x, TD::full({16}, 1.0), TD::zeros({16}), 1e-12);
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c] / 16.0;
    for (std::size_t c = 0; c < 16; ++c) var += std::pow(y.data()[r * 16 + c] - mean, 2) / 16.0;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ConstantRowBecomesBeta) {
  expect_values(layer_norm(t2(1, 4, {2, 2, 2, 2}), TD::full({4}, 1.0), TD::full({4}, 5.0)), {5, 5, 5, 5});
}

TEST(Conv2d, OneByOneIdentityKernel) {
  TD x({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  expect_values(conv2d(x, TD::full({1, 1, 1, 1}, 1.0), TD::zeros({1}), 0), x.values());
}

TEST(Conv2d, ThreeByThreeOnesCountsOverlap) {
  const auto y = conv2d(TD::full({1, 1, 3, 3}, 1.0), TD::full({1, 1, 3, 3}, 1.0), TD::zeros({1}), 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  expect_values(y, {4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST(Conv2d, UnsupportedKernelIsConfigError) {
  EXPECT_THROW(conv2d(TD::full({1, 1, 5, 5}, 1.0), TD::full({1, 1, 5, 5}, 1.0), TD::zeros({1}), 2), ConfigError);
}

TEST(Backward, SumGivesOnes) {
  TD x = TD::full({2, 3}, 0.7, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  TD x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, FanOutAccumulates) {
  TD x({1}, {3}, true);
  backward(sum(add(mul(x, x), scale(x, 2.0))));
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Backward, NonScalarIsUsageError) {
  TD x = TD::full({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), UsageError);
}

TEST(Rearrange, ReshapeAndPermuteRoundTripExactly) {
  Rng rng(1);
  TD x = verify::random_tensor({2, 3, 4}, rng);
  expect_values(reshape(reshape(x, {4, 6}), {2, 3, 4}), x.values());
  const auto p = permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  expect_values(permute(p, {1, 2, 0}), x.values());
}

TEST(Gelu, UsesTanhApproximation) {
  const double x = 0.8;
  const double want = 0.5 * x * (1.0 + std::tanh(0.7978845608 * (x + 0.044715 * x * x * x)));
  EXPECT_NEAR(gelu(TD({1}, {x})).item(), want, 1e-15);
}

TEST(Upsample, BilinearDoublesAndKeepsConstants) {
  const auto y = upsample_bilinear2x(TD::full({1, 2, 3, 2}, 0.25));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 6, 4}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
  auto run = [] {
    SwinTextUNet<double> model(verify::micro_config(), 4);
    Rng rng(2);
    auto img = verify::random_tensor({2, 3, 16, 16}, rng, 0, 1);
    auto emb = verify::random_tensor({2, 8}, rng);
    return model(img, emb).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, DetectsPerturbedGradients) {
  Rng rng(4);
  TD a = verify::random_tensor({3, 3}, rng), b = verify::random_tensor({3, 3}, rng);
  verify::GradcheckOptions opt;
  opt.fault = 1e-2;
  EXPECT_GT(verify::gradcheck([&] { return verify::project(matmul(a, b), 1); }, {a, b}, opt), 1e-3);
}

TEST(Gradcheck, EveryOpPassesOnThreeSeeds) {
  for (const auto& c : verify::op_cases()) {
    verify::GradcheckOptions opt;
    opt.eps = c.eps;
    for (std::uint64_t s = 0; s < 3; ++s) {
      auto [fn, leaves] = c.build(mix_seed({s, 77}));
      EXPECT_LE(verify::gradcheck(fn, leaves, opt, s), c.tolerance) << c.name << " seed " << s;
    }
  }
}
