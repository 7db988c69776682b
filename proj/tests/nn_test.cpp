#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "trup/nn.hpp"

using namespace trup;

namespace {

// Direct sliding-window cross-correlation.
std::vector<float> sliding_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), K = w.dim(2);
  const int64_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  std::vector<float> out(B * O * OH * OW);
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < OH; ++i)
        for (int64_t j = 0; j < OW; ++j) {
          double s = b.at(o);
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ki = 0; ki < K; ++ki)
              for (int64_t kj = 0; kj < K; ++kj) {
                const int64_t y = i * stride - pad + ki, xx = j * stride - pad + kj;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                s += static_cast<double>(x.at(((n * C + c) * H + y) * W + xx)) * w.at(((o * C + c) * K + ki) * K + kj);
              }
          out[((n * O + o) * OH + i) * OW + j] = static_cast<float>(s);
        }
  return out;
}

// Half-pixel bilinear interpolation evaluated pixel by pixel.
double bilinear_at(const std::vector<float>& plane, int64_t h, int64_t w, int64_t oh, int64_t ow, int64_t i, int64_t j) {
  const double sy = std::clamp((i + 0.5) * h / oh - 0.5, 0.0, h - 1.0);
  const double sx = std::clamp((j + 0.5) * w / ow - 0.5, 0.0, w - 1.0);
  const int64_t y0 = static_cast<int64_t>(std::floor(sy)), x0 = static_cast<int64_t>(std::floor(sx));
  const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
         fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
}

void expect_bilinear_matches_formula(const Tensor& x, int64_t oh, int64_t ow) {
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y = bilinear_upsample(x, oh, ow);
  ASSERT_EQ(y.shape(), (Shape{x.dim(0), x.dim(1), oh, ow}));
  for (int64_t p = 0; p < planes; ++p) {
    std::vector<float> plane(x.data().begin() + p * h * w, x.data().begin() + (p + 1) * h * w);
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) EXPECT_NEAR(y.at((p * oh + i) * ow + j), bilinear_at(plane, h, w, oh, ow, i, j), 1e-6);
  }
}

}  // namespace

TEST(Conv2d, PointwiseIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({2, 1, 4, 5}, rng);
  Conv2dParams p{Tensor({1, 1, 1, 1}, 1.0f), Tensor({1}), 1, 0};
  EXPECT_EQ(conv2d(x, p).to_vector(), x.to_vector());
}

TEST(Conv2d, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::randn({1, 2, 5, 5}, rng);
  Conv2dParams p{Tensor({3, 2, 3, 3}), Tensor({3}, std::vector<float>{1, -2, 0.5f}), 1, 1};
  Tensor y = conv2d(x, p);
  for (int64_t o = 0; o < 3; ++o)
    for (int64_t i = 0; i < 25; ++i) EXPECT_EQ(y.at(o * 25 + i), p.bias.at(o));
}

TEST(Conv2d, OnesKernelOnOnes) {
  Conv2dParams p{Tensor({1, 1, 3, 3}, 1.0f), Tensor({1}), 1, 1};
  Tensor y = conv2d(Tensor({1, 1, 3, 3}, 1.0f), p);
  EXPECT_EQ(y.to_vector(), (std::vector<float>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  std::mt19937_64 rng(3);
  struct Case {
    int c_in, c_out, k, stride, pad, h, w;
  };
  for (const Case& c : {Case{3, 4, 3, 1, 1, 7, 6}, Case{2, 5, 3, 2, 1, 9, 8}, Case{3, 2, 7, 1, 3, 8, 8},
                        Case{4, 3, 2, 2, 0, 6, 6}, Case{5, 6, 1, 1, 0, 4, 3}}) {
    Tensor x = Tensor::randn({2, c.c_in, c.h, c.w}, rng);
    Conv2dParams p{Tensor::randn({c.c_out, c.c_in, c.k, c.k}, rng), Tensor::randn({c.c_out}, rng), c.stride, c.pad};
    Tensor y = conv2d(x, p);
    const auto expect = sliding_conv(x, p.weight, p.bias, c.stride, c.pad);
    ASSERT_EQ(y.numel(), static_cast<int64_t>(expect.size()));
    EXPECT_EQ(y.dim(2), (c.h + 2 * c.pad - c.k) / c.stride + 1);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.at(i), expect[i], 1e-4) << "k=" << c.k;
  }
}

TEST(Conv2d, OddKernelSamePaddingPreservesSize) {
  std::mt19937_64 rng(4);
  for (int k : {1, 3, 7}) {
    Tensor x = Tensor::randn({1, 2, 9, 11}, rng);
    Tensor y = conv2d(x, Conv2dParams::init(2, 3, k, 1, (k - 1) / 2, rng));
    EXPECT_EQ(y.shape(), (Shape{1, 3, 9, 11}));
  }
}

TEST(Conv2d, Errors) {
  std::mt19937_64 rng(5);
  Conv2dParams p = Conv2dParams::init(3, 4, 3, 1, 0, rng);
  EXPECT_THROW(conv2d(Tensor({1, 2, 5, 5}), p), ShapeError);
  EXPECT_THROW(conv2d(Tensor({1, 3, 2, 2}), p), ShapeError);
  EXPECT_THROW(conv2d(Tensor({3, 5, 5}), p), ShapeError);
}

TEST(Conv2d, InitBounds) {
  std::mt19937_64 rng(6);
  Conv2dParams p = Conv2dParams::init(4, 8, 3, 1, 1, rng);
  const float bound = 1.0f / 6.0f;  // 1/sqrt(4*3*3)
  for (float v : p.weight.data()) EXPECT_LE(std::fabs(v), bound);
  for (float v : p.bias.data()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, ConstantInputNormalisesToZero) {
  BatchNorm2dParams p = BatchNorm2dParams::init(2);
  Tensor y = batch_norm2d(Tensor({3, 2, 4, 4}, 7.0f), p, Mode::kTrain);
  for (float v : y.data()) EXPECT_LE(std::fabs(v), 1e-3f);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(7);
  BatchNorm2dParams p = BatchNorm2dParams::init(2);
  p.gamma = Tensor::zeros({2});
  p.beta = Tensor({2}, std::vector<float>{0.5f, -1.5f});
  for (Mode m : {Mode::kTrain, Mode::kEval}) {
    Tensor y = batch_norm2d(Tensor::randn({2, 2, 3, 3}, rng), p, m);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < 2; ++c)
        for (int64_t i = 0; i < 9; ++i) EXPECT_EQ(y.at((b * 2 + c) * 9 + i), p.beta.at(c));
  }
}

TEST(BatchNorm, HandFormula) {
  BatchNorm2dParams p = BatchNorm2dParams::init(1);
  p.eps = 1e-12f;
  Tensor y = batch_norm2d(Tensor({1, 1, 1, 2}, std::vector<float>{1, 3}), p, Mode::kTrain);
  EXPECT_NEAR(y.at(0), -1.0f, 1e-6);
  EXPECT_NEAR(y.at(1), 1.0f, 1e-6);
  // mean 2 and biased variance 1 folded in with momentum 0.1
  EXPECT_NEAR(p.running_mean.at(0), 0.2f, 1e-7);
  EXPECT_NEAR(p.running_var.at(0), 1.0f, 1e-7);
}

TEST(BatchNorm, DegenerateTrainBatchIsContractError) {
  BatchNorm2dParams p = BatchNorm2dParams::init(3);
  EXPECT_THROW(batch_norm2d(Tensor({1, 3, 1, 1}), p, Mode::kTrain), ContractError);
  EXPECT_NO_THROW(batch_norm2d(Tensor({1, 3, 1, 1}), p, Mode::kEval));
  EXPECT_THROW(batch_norm2d(Tensor({1, 2, 2, 2}), p, Mode::kTrain), ShapeError);
}

TEST(BatchNorm, EvalModeIsPerChannelAffine) {
  std::mt19937_64 rng(8);
  BatchNorm2dParams p = BatchNorm2dParams::init(3);
  p.running_mean = Tensor::randn({3}, rng);
  p.running_var = Tensor::uniform({3}, 0.5f, 2.0f, rng);
  p.gamma = Tensor::randn({3}, rng);
  p.beta = Tensor::randn({3}, rng);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  // y(x0), y(x0 + d), y(x0 + 2d) must be collinear.
  Tensor d = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor y0 = batch_norm2d(x, p, Mode::kEval);
  Tensor y1 = batch_norm2d(add(x, d), p, Mode::kEval);
  Tensor y2 = batch_norm2d(add(x, mul(d, 2.0f)), p, Mode::kEval);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y2.at(i) - y1.at(i), y1.at(i) - y0.at(i), 1e-5);
  const auto rm = p.running_mean.to_vector();
  batch_norm2d(x, p, Mode::kEval);
  EXPECT_EQ(p.running_mean.to_vector(), rm);
}

TEST(BatchNorm, RunningVarStaysNonNegative) {
  std::mt19937_64 rng(9);
  BatchNorm2dParams p = BatchNorm2dParams::init(4);
  for (int i = 0; i < 20; ++i) batch_norm2d(mul(Tensor::randn({2, 4, 3, 3}, rng), 5.0f), p, Mode::kTrain);
  for (float v : p.running_var.data()) EXPECT_GE(v, 0.0f);
}

TEST(Activation, Examples) {
  Tensor x({2}, std::vector<float>{-1, 2});
  EXPECT_EQ(relu(x).to_vector(), (std::vector<float>{0, 2}));
  EXPECT_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5f);
  EXPECT_EQ(gelu(Tensor::scalar(0)).item(), 0.0f);
  EXPECT_NEAR(sigmoid(Tensor::scalar(std::log(3.0f))).item(), 0.75f, 1e-7);
  // tanh form: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))
  const double g1 = 0.5 * (1 + std::tanh(0.7978845608 * (1 + 0.044715)));
  EXPECT_NEAR(gelu(Tensor::scalar(1)).item(), g1, 1e-6);
}

TEST(Activation, SigmoidStaysInsideOpenInterval) {
  Tensor y = sigmoid(Tensor({4}, std::vector<float>{-200, -30, 30, 200}));
  for (float v : y.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Bilinear, ConstantAndIdentity) {
  Tensor c = bilinear_upsample(Tensor({1, 2, 3, 3}, 0.25f), 8, 7);
  for (float v : c.data()) EXPECT_FLOAT_EQ(v, 0.25f);
  std::mt19937_64 rng(10);
  Tensor x = Tensor::randn({2, 2, 3, 4}, rng);
  EXPECT_EQ(bilinear_upsample(x, 3, 4).to_vector(), x.to_vector());
}

TEST(Bilinear, TwoByTwoMatchesFormula) {
  expect_bilinear_matches_formula(Tensor({1, 1, 2, 2}, std::vector<float>{0, 1, 2, 3}), 4, 4);
  Tensor y = bilinear_upsample(Tensor({1, 1, 2, 2}, std::vector<float>{0, 1, 2, 3}), 4, 4);
  EXPECT_NEAR(y.at(0), 0.0f, 1e-7);    // clamped corner
  EXPECT_NEAR(y.at(5), 0.75f, 1e-7);   // source (0.25, 0.25)
  EXPECT_NEAR(y.at(15), 3.0f, 1e-7);
}

TEST(Bilinear, RandomShapesMatchFormula) {
  std::mt19937_64 rng(11);
  expect_bilinear_matches_formula(Tensor::randn({1, 2, 3, 5}, rng), 7, 11);
  expect_bilinear_matches_formula(Tensor::randn({2, 1, 4, 4}, rng), 16, 16);
  expect_bilinear_matches_formula(Tensor::randn({1, 1, 1, 1}, rng), 5, 3);
}

TEST(Bilinear, StaysWithinInputRange) {
  std::mt19937_64 rng(12);
  Tensor x = Tensor::randn({1, 1, 4, 6}, rng);
  const auto [lo, hi] = std::ranges::minmax(x.data());
  const Tensor y = bilinear_upsample(x, 13, 17);
  for (float v : y.data()) {
    EXPECT_GE(v, lo - 1e-6f);
    EXPECT_LE(v, hi + 1e-6f);
  }
}

TEST(Bilinear, Errors) {
  EXPECT_THROW(bilinear_upsample(Tensor({1, 1, 4, 4}), 2, 4), ContractError);
  EXPECT_THROW(bilinear_upsample(Tensor({1, 1, 4, 4}), 0, 4), ShapeError);
  EXPECT_THROW(bilinear_upsample(Tensor({4, 4}), 8, 8), ShapeError);
}

TEST(ConcatChannels, SingleInputIsIdentity) {
  std::mt19937_64 rng(13);
  Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
  EXPECT_EQ(concat_channels({x}).to_vector(), x.to_vector());
}

TEST(ConcatChannels, FourWaySliceBack) {
  std::mt19937_64 rng(14);
  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(Tensor::randn({2, 64, 3, 3}, rng));
  Tensor c = concat_channels(xs);
  EXPECT_EQ(c.dim(1), 256);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(slice_channels(c, 64 * i, 64).to_vector(), xs[i].to_vector());
  EXPECT_EQ(concat_channels({xs[0], xs[1]}).dim(1), 128);
}

TEST(ConcatChannels, SpatialMismatch) {
  EXPECT_THROW(concat_channels({Tensor({1, 2, 4, 4}), Tensor({1, 2, 4, 5})}), ShapeError);
  EXPECT_THROW(concat_channels({Tensor({1, 2, 4, 4}), Tensor({2, 2, 4, 4})}), ShapeError);
}

TEST(LayerNorm, Examples) {
  Tensor ones({2}, 1.0f), zeros({2});
  const Tensor centred = layer_norm(Tensor({1, 2}, 3.0f), ones, zeros, 1e-6f);
  for (float v : centred.data()) EXPECT_NEAR(v, 0.0f, 1e-6);
  Tensor beta({2}, std::vector<float>{0.5f, -0.5f});
  EXPECT_EQ(layer_norm(Tensor({1, 2}, std::vector<float>{4, 9}), zeros, beta, 1e-6f).to_vector(), beta.to_vector());
  Tensor y = layer_norm(Tensor({2}, std::vector<float>{1, 3}), ones, zeros, 1e-12f);
  EXPECT_NEAR(y.at(0), -1.0f, 1e-6);
  EXPECT_NEAR(y.at(1), 1.0f, 1e-6);
}

TEST(LayerNorm, Errors) {
  EXPECT_THROW(layer_norm(Tensor({3, 1}), Tensor({1}), Tensor({1}), 1e-6f), ContractError);
  EXPECT_THROW(layer_norm(Tensor({3, 4}), Tensor({3}), Tensor({4}), 1e-6f), ShapeError);
}

TEST(Linear, Examples) {
  Tensor x({1, 2}, std::vector<float>{1, 2});
  Tensor w({2, 2}, std::vector<float>{1, 1, 2, 0});
  Tensor b({2}, std::vector<float>{0, 1});
  EXPECT_EQ(linear(x, w, b).to_vector(), (std::vector<float>{3, 3}));
  Tensor eye({2, 2}, std::vector<float>{1, 0, 0, 1});
  EXPECT_EQ(linear(x, eye, Tensor({2})).to_vector(), x.to_vector());
  EXPECT_EQ(linear(x, Tensor({3, 2}), Tensor({3}, 4.0f)).to_vector(), (std::vector<float>{4, 4, 4}));
}

TEST(Linear, Errors) {
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({4, 2}), Tensor({4})), ShapeError);
  EXPECT_THROW(linear(Tensor({2, 3}), Tensor({4, 3}), Tensor({3})), ShapeError);
}
