#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "trup/gradcheck.hpp"
#include "trup/nn.hpp"

using namespace trup;

namespace {

// x^2 whose recorded derivative is 3x instead of 2x.
Tensor bad_square(const Tensor& x) {
  std::vector<float> out;
  for (float v : x.data()) out.push_back(v * v);
  return detail::make_result("bad_square", x.shape(), std::move(out), {x},
                             [x](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                               auto xd = x.data();
                               for (std::size_t i = 0; i < xd.size(); ++i) (*pg[0])[i] += g[i] * 3.0f * xd[i];
                             });
}

}  // namespace

TEST(GradientError, RelativeWithUnitFloor) {
  const std::vector<double> a = {1.0, 100.0, 0.001}, n = {1.005, 101.0, 0.0};
  EXPECT_NEAR(gradient_error(a, n), 1.0 / 101.0, 1e-12);
  EXPECT_EQ(gradient_error(std::vector<double>{}, std::vector<double>{}), 0.0);
}

TEST(CheckGradients, AcceptsCorrectGradient) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::randn({3, 4}, rng);
  Tensor w = Tensor::randn({4, 2}, rng);
  GradcheckResult r = check_gradients("matmul_tanh", [&] { return sum(gelu(matmul(x, w))); }, {x, w}, 7);
  EXPECT_TRUE(r.passed) << r.max_error;
  EXPECT_EQ(r.checked, 12 + 8);
  EXPECT_LT(r.max_error, 1e-2);
}

TEST(CheckGradients, RejectsWrongGradient) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::uniform({5}, 0.5f, 2.0f, rng);
  GradcheckResult r = check_gradients("bad_square", [&] { return sum(bad_square(x)); }, {x}, 3);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_error, 0.1);
}

TEST(CheckGradients, SamplesLargeLeaves) {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::randn({50, 10}, rng);
  GradcheckOptions opt;
  opt.max_checks_per_leaf = 16;
  GradcheckResult r = check_gradients("sum_sq", [&] { return sum(mul(x, x)); }, {x}, 1, opt);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.checked, 16);
}

TEST(CheckGradients, LeavesAreRestored) {
  std::mt19937_64 rng(4);
  Tensor x = Tensor::randn({6}, rng);
  const auto before = x.to_vector();
  check_gradients("sigmoid", [&] { return sum(sigmoid(x)); }, {x}, 5);
  EXPECT_EQ(x.to_vector(), before);
}

TEST(KinkPattern, ReplayKeepsRecordedSide) {
  Tensor x({2}, std::vector<float>{0.5f, -0.5f});
  KinkPattern pattern;
  {
    KinkPatternScope scope(pattern);
    EXPECT_EQ(relu(x).to_vector(), (std::vector<float>{0.5f, 0.0f}));
  }
  EXPECT_EQ(pattern.size(), 2u);
  pattern.start_replay();
  KinkPatternScope scope(pattern);
  // Signs flipped, but the recorded pattern still selects the first entry only.
  EXPECT_EQ(relu(Tensor({2}, std::vector<float>{-0.25f, 0.25f})).to_vector(), (std::vector<float>{-0.25f, 0.0f}));
  EXPECT_THROW(relu(x), ContractError);
}

TEST(GradcheckSuite, AllOpsPassForSeedZero) {
  const auto results = run_gradcheck_suite(0);
  EXPECT_GE(results.size(), 30u);
  bool has_model = false;
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.op << " max error " << r.max_error;
    EXPECT_GT(r.checked, 0) << r.op;
    has_model = has_model || r.op == "model";
  }
  EXPECT_TRUE(has_model);
}
