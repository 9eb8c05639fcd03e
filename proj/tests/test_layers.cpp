#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "panda/gradient_check.hpp"
#include "panda/layers.hpp"
#include "test_util.hpp"

using namespace panda;
using panda::test::max_relative_diff;
using panda::test::ramp;
using panda::test::random_tensor;

namespace {

// Six nested loops straight from the definition; shares nothing with the library.
Tensor naive_conv(const Tensor& in, const Tensor& k, const Tensor& b, int stride, int pad) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int F = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const int OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(F * OH * OW);
  for (int f = 0; f < F; ++f)
    for (int y = 0; y < OH; ++y)
      for (int x = 0; x < OW; ++x) {
        double s = b[f];
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < KH; ++i)
            for (int j = 0; j < KW; ++j) {
              const int yy = y * stride + i - pad, xx = x * stride + j - pad;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              s += in[(c * H + yy) * W + xx] * k[((f * C + c) * KH + i) * KW + j];
            }
        out[(f * OH + y) * OW + x] = s;
      }
  return Tensor({static_cast<std::size_t>(F), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)}, out);
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  const Tensor in({1, 3, 3}, 1.0);
  const Tensor k({1, 1, 1, 1}, {1.0});
  const Tensor b({1}, {0.0});
  const Tensor out = conv2d(in, k, b, 1, 0);
  EXPECT_EQ(out, Tensor({1, 3, 3}, 1.0));
}

TEST(Conv2d, RampStrideTwo) {
  const Tensor out = conv2d(ramp({1, 4, 4}), Tensor({1, 1, 2, 2}, 1.0), Tensor({1}, {0.0}), 2, 0);
  EXPECT_EQ(out, Tensor({1, 2, 2}, {10, 18, 42, 50}));
  EXPECT_EQ(conv2d_direct(ramp({1, 4, 4}), Tensor({1, 1, 2, 2}, 1.0), Tensor({1}, {0.0}), 2, 0), out);
}

TEST(Conv2d, MatchesNaiveOracleRandom) {
  const auto in = random_tensor({3, 8, 8}, 1);
  const auto k = random_tensor({4, 3, 3, 3}, 2);
  const auto b = random_tensor({4}, 3);
  const auto expected = naive_conv(in, k, b, 1, 1);
  EXPECT_LT(max_relative_diff(conv2d(in, k, b, 1, 1), expected), 1e-6);
  EXPECT_LT(max_relative_diff(conv2d_direct(in, k, b, 1, 1), expected), 1e-6);
}

TEST(Conv2d, ShapeGridAgainstOracle) {
  std::uint64_t seed = 10;
  for (int stride = 1; stride <= 2; ++stride)
    for (int pad = 0; pad <= 2; ++pad)
      for (std::size_t ksz : {1u, 3u, 5u}) {
        const auto in = random_tensor({2, 7, 9}, seed++);
        const auto k = random_tensor({3, 2, ksz, ksz}, seed++);
        const auto b = random_tensor({3}, seed++);
        const auto expected = naive_conv(in, k, b, stride, pad);
        EXPECT_LT(max_relative_diff(conv2d(in, k, b, stride, pad), expected), 1e-6)
            << "stride " << stride << " pad " << pad << " kernel " << ksz;
      }
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  try {
    conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 2, 2}), Tensor({1}), 1, 0);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos);
  }
  EXPECT_THROW(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, 0), InvalidArgument);
  EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({2, 1, 3, 3}), Tensor({1}), 1, 0), InvalidArgument);
}

TEST(Conv2d, IsPure) {
  const auto in = random_tensor({3, 10, 10}, 5);
  const auto k = random_tensor({4, 3, 3, 3}, 6);
  const auto b = random_tensor({4}, 7);
  EXPECT_EQ(conv2d(in, k, b, 1, 1), conv2d(in, k, b, 1, 1));
  const auto d = random_tensor({4, 10, 10}, 8);
  const auto g1 = conv2d_backward(in, k, b, 1, 1, d);
  const auto g2 = conv2d_backward(in, k, b, 1, 1, d);
  EXPECT_EQ(g1.d_input, g2.d_input);
  EXPECT_EQ(g1.d_params, g2.d_params);
}

TEST(MaxPool, ConstantInputPicksFirstIndex) {
  const auto r = maxpool(Tensor({1, 4, 4}, 3.0), 2, 2);
  EXPECT_EQ(r.output, Tensor({1, 2, 2}, 3.0));
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, Ramp) {
  const auto r = maxpool(ramp({1, 4, 4}), 2, 2);
  EXPECT_EQ(r.output, Tensor({1, 2, 2}, {5, 7, 13, 15}));
}

TEST(MaxPool, BackwardRoutesOneCellPerWindow) {
  const auto in = random_tensor({3, 8, 8}, 11);
  const auto r = maxpool(in, 2, 2);
  const auto d_out = random_tensor(r.output.shape(), 12, 0.5, 1.5);
  const auto d_in = maxpool_backward(in.shape(), r.argmax, d_out);
  std::size_t nonzero = 0;
  for (double v : d_in.values()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, d_out.size());
  const double sum_in = std::accumulate(d_in.values().begin(), d_in.values().end(), 0.0);
  const double sum_out = std::accumulate(d_out.values().begin(), d_out.values().end(), 0.0);
  EXPECT_NEAR(sum_in, sum_out, 1e-12);
}

TEST(MaxPool, RejectsOversizedWindowOrStride) {
  EXPECT_THROW(maxpool(Tensor({1, 3, 3}), 4, 1), InvalidArgument);
  EXPECT_THROW(maxpool(Tensor({1, 3, 3}), 2, 4), InvalidArgument);
}

TEST(Lrn, ZeroAlphaScalesByKPowerMinusBeta) {
  const auto in = random_tensor({4, 3, 3}, 21);
  const LrnParams p{5, 2.0, 0.0, 0.75};
  const auto out = lrn(in, p);
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_NEAR(out[i], in[i] * std::pow(2.0, -0.75), 1e-15);
}

TEST(Lrn, SingleChannelClosedForm) {
  const LrnParams p{1, 2.0, 1.0, 0.5};
  for (double v : {-3.0, -0.5, 0.0, 1.0, 4.0}) {
    const auto out = lrn(Tensor({1, 1, 1}, {v}), p);
    EXPECT_NEAR(out[0], v / std::sqrt(2.0 + v * v), 1e-15);
  }
}

TEST(Lrn, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto in = random_tensor({7, 3, 2}, 100 + seed, -2.0, 2.0);
    EXPECT_LT(gradient_check(lrn_closure({5, 2.0, 0.1, 0.75}), in, {}, 1e-5), 1e-4);
    EXPECT_LT(gradient_check(lrn_closure({4, 1.0, 0.5, 0.6}), in, {}, 1e-5), 1e-4);
  }
}

TEST(FullyConnected, IdentityWeights) {
  Tensor w({3, 3});
  for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
  const Tensor x({3}, {0.5, -2.0, 7.0});
  EXPECT_EQ(fully_connected(x, w, Tensor({3})), x);
}

TEST(FullyConnected, HandProduct) {
  const Tensor out = fully_connected(Tensor({2}, {1, 1}), Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {0, 0}));
  EXPECT_EQ(out, Tensor({2}, {3, 7}));
}

TEST(FullyConnected, DimensionMismatch) {
  EXPECT_THROW(fully_connected(Tensor({3}), Tensor({2, 2}), Tensor({2})), InvalidArgument);
  EXPECT_THROW(fully_connected(Tensor({2}), Tensor({2, 2}), Tensor({3})), InvalidArgument);
}

TEST(FullyConnected, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_tensor({6}, 200 + seed);
    const std::vector<Tensor> p{random_tensor({4, 6}, 300 + seed), random_tensor({4}, 400 + seed)};
    EXPECT_LT(gradient_check(fully_connected_closure(), x, p, 1e-5), 1e-8);
  }
}

TEST(Nonlinearity, RectifierSigns) {
  EXPECT_EQ(nonlinearity(Tensor({3}, {-1, 0, 2}), Activation::rectifier), Tensor({3}, {0, 0, 2}));
}

TEST(Nonlinearity, LogisticAtZero) {
  EXPECT_EQ(nonlinearity(Tensor({1}, {0.0}), Activation::logistic)[0], 0.5);
  EXPECT_EQ(logistic(-800.0), 0.0);
  EXPECT_TRUE(std::isfinite(logistic(-800.0)) && std::isfinite(logistic(800.0)));
}

TEST(Nonlinearity, LogisticBackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_tensor({20}, 500 + seed, -4.0, 4.0);
    EXPECT_LT(gradient_check(nonlinearity_closure(Activation::logistic), x, {}, 1e-5), 1e-6);
    EXPECT_LT(gradient_check(nonlinearity_closure(Activation::rectifier), x, {}, 1e-5), 1e-6);
  }
}

TEST(GradientCheck, ConvRandomInstances) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_tensor({2, 6, 5}, 600 + seed);
    const std::vector<Tensor> p{random_tensor({3, 2, 3, 3}, 700 + seed), random_tensor({3}, 800 + seed)};
    EXPECT_LT(gradient_check(conv2d_closure(1 + seed % 2, seed % 3), x, p, 1e-5), 1e-4);
  }
}

TEST(GradientCheck, MaxPoolRandomInstances) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_tensor({2, 6, 6}, 900 + seed);
    EXPECT_LT(gradient_check(maxpool_closure(2, 2), x, {}, 1e-6), 1e-4);
    EXPECT_LT(gradient_check(maxpool_closure(3, 2), x, {}, 1e-6), 1e-4);
  }
}

TEST(GradientCheck, RejectsEpsilonOutOfRange) {
  const auto x = random_tensor({3}, 1);
  EXPECT_THROW(gradient_check(nonlinearity_closure(Activation::logistic), x, {}, 1e-7), InvalidArgument);
  EXPECT_THROW(gradient_check(nonlinearity_closure(Activation::logistic), x, {}, 0.1), InvalidArgument);
}

TEST(GradientCheck, NonDeterministicLayerIsContractViolation) {
  int calls = 0;
  LayerClosure noisy{[&](const Tensor& x, const std::vector<Tensor>&) {
                       Tensor y = x;
                       y[0] += ++calls;
                       return y;
                     },
                     [](const Tensor& x, const std::vector<Tensor>&, const Tensor& d) {
                       return LayerGrad{d, {}};
                     }};
  EXPECT_THROW(gradient_check(noisy, random_tensor({3}, 2), {}, 1e-5), ContractViolation);
}

TEST(GradientCheck, DetectsWrongGradient) {
  auto bad = fully_connected_closure();
  bad.backward = [](const Tensor& x, const std::vector<Tensor>& p, const Tensor& d) {
    auto g = fully_connected_backward(x, p[0], d);
    g.d_params[0][0] += 0.5;
    return g;
  };
  const auto x = random_tensor({3}, 3);
  const std::vector<Tensor> p{random_tensor({2, 3}, 4), random_tensor({2}, 5)};
  EXPECT_GT(gradient_check(bad, x, p, 1e-5), 0.4);
}
