#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "trup/loss_metrics.hpp"
#include "trup/random.hpp"

using namespace trup;

namespace {

Tensor random_mask(Shape shape, double p_one, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.mutable_data()) v = uniform01(rng) < p_one ? 1.0f : 0.0f;
  return t;
}

}  // namespace

TEST(BceLoss, Examples) {
  EXPECT_NEAR(bce_loss(Tensor({2}, 0.5f), Tensor({2}, std::vector<float>{0, 1})).item(), std::log(2.0), 1e-6);
  EXPECT_NEAR(bce_loss(Tensor({1}, 1.0f), Tensor({1}, 1.0f)).item(), 0.0, 1e-6);
  // clamped at 1e-7: -log(1e-7)
  EXPECT_NEAR(bce_loss(Tensor({1}, 0.0f), Tensor({1}, 1.0f)).item(), 16.118, 1e-3);
  EXPECT_THROW(bce_loss(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(BceLoss, NonNegative) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    Tensor p = Tensor::uniform({4, 4}, 0, 1, rng);
    EXPECT_GE(bce_loss(p, random_mask({4, 4}, 0.5, rng)).item(), 0.0f);
  }
}

TEST(DiceLoss, Examples) {
  Tensor y({4}, std::vector<float>{1, 0, 1, 0});
  EXPECT_NEAR(dice_loss(y, y, 0.0f).item(), 0.0, 1e-7);
  EXPECT_NEAR(dice_loss(Tensor({4}), y, 0.0f).item(), 1.0, 1e-7);
  EXPECT_NEAR(dice_loss(Tensor({4}), Tensor({4}), 0.0f).item(), 0.0, 1e-7);
  EXPECT_NEAR(dice_loss(Tensor({4}), Tensor({4}), 1.0f).item(), 0.0, 1e-7);
  // 1 - (2*1 + 1) / (2 + 2 + 1)
  EXPECT_NEAR(dice_loss(Tensor({4}, 0.5f), y).item(), 0.4, 1e-6);
}

TEST(DiceLoss, PerImageMean) {
  Tensor y({2, 4}, std::vector<float>{1, 1, 0, 0, 1, 1, 0, 0});
  Tensor p({2, 4}, std::vector<float>{1, 1, 0, 0, 0, 0, 0, 0});
  EXPECT_NEAR(dice_loss(p, y, 0.0f).item(), 0.5, 1e-7);
}

TEST(DiceLoss, InUnitInterval) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const float l = dice_loss(Tensor::uniform({2, 1, 4, 4}, 0, 1, rng), random_mask({2, 1, 4, 4}, 0.3, rng)).item();
    EXPECT_GE(l, 0.0f);
    EXPECT_LE(l, 1.0f);
  }
}

TEST(CombinedLoss, IsSum) {
  std::mt19937_64 rng(3);
  Tensor p = Tensor::uniform({2, 1, 3, 3}, 0.05f, 0.95f, rng);
  Tensor y = random_mask({2, 1, 3, 3}, 0.5, rng);
  EXPECT_NEAR(combined_loss(p, y).item(), bce_loss(p, y).item() + dice_loss(p, y).item(), 1e-6);
}

TEST(Metrics, Counts) {
  Tensor p({4}, std::vector<float>{1, 1, 0, 0});
  Tensor g({4}, std::vector<float>{1, 0, 1, 0});
  ConfusionCounts c = binary_counts(p, g);
  EXPECT_EQ(c.tp, 1);
  EXPECT_EQ(c.fp, 1);
  EXPECT_EQ(c.fn, 1);
  EXPECT_EQ(c.tn, 1);
  EXPECT_THROW(binary_counts(Tensor({2}, 0.5f), Tensor({2})), ContractError);
  EXPECT_THROW(binary_counts(Tensor({2}), Tensor({3})), ShapeError);
}

TEST(Metrics, Examples) {
  SegmentationScores s = metrics_from_counts(1, 1, 1);
  EXPECT_NEAR(s.dice, 0.5, 1e-6);
  EXPECT_NEAR(s.iou, 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(s.recall, 0.5, 1e-6);
  EXPECT_NEAR(s.precision, 0.5, 1e-6);
  EXPECT_NEAR(s.f2, 0.5, 1e-6);

  SegmentationScores empty = metrics_from_counts(0, 0, 0);
  for (double v : {empty.dice, empty.iou, empty.recall, empty.precision, empty.f2}) EXPECT_DOUBLE_EQ(v, 1.0);

  SegmentationScores miss = metrics_from_counts(0, 0, 10);
  EXPECT_NEAR(miss.dice, 0.0, 1e-7);
  EXPECT_NEAR(miss.recall, 0.0, 1e-7);

  // P = 1, R = 0.5 -> F2 = 5 * 0.5 / (4 + 0.5)
  EXPECT_NEAR(metrics_from_counts(2, 0, 2).f2, 2.5 / 4.5, 1e-6);
  EXPECT_THROW(metrics_from_counts(-1, 0, 0), ContractError);
}

TEST(Metrics, DiceIouIdentityAndBounds) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 500; ++i) {
    const auto tp = static_cast<int64_t>(uniform_index(rng, 50)), fp = static_cast<int64_t>(uniform_index(rng, 50)),
               fn = static_cast<int64_t>(uniform_index(rng, 50));
    SegmentationScores s = metrics_from_counts(tp, fp, fn);
    EXPECT_NEAR(s.dice, 2 * s.iou / (1 + s.iou), 1e-5);
    EXPECT_LE(s.iou, s.dice + 1e-12);
    for (double v : {s.dice, s.iou, s.recall, s.precision, s.f2}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
  }
}

TEST(Metrics, EvaluateMasksAveragesPerImage) {
  std::vector<Tensor> preds = {Tensor({2}, std::vector<float>{1, 1}), Tensor({2}, std::vector<float>{0, 0})};
  std::vector<Tensor> gts = {Tensor({2}, std::vector<float>{1, 1}), Tensor({2}, std::vector<float>{1, 1})};
  MetricReport r = evaluate_masks(preds, gts);
  EXPECT_EQ(r.n_images, 2u);
  ASSERT_EQ(r.ids.size(), 2u);
  EXPECT_NEAR(r.aggregate.dice, 0.5, 1e-6);
  EXPECT_NEAR(r.per_image[0].iou, 1.0, 1e-9);
  EXPECT_THROW(evaluate_masks({}, {}), ContractError);
  EXPECT_THROW(evaluate_masks(preds, {gts[0]}), ContractError);
}

TEST(Metrics, ReportCsv) {
  TempDir dir;
  MetricReport r = evaluate_masks({Tensor({1}, 1.0f)}, {Tensor({1}, 1.0f)}, {"img0"});
  write_report_csv(dir / "r.csv", r);
  const std::string csv = read_file(dir / "r.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "image,dice,iou,recall,precision,f2");
  EXPECT_NE(csv.find("\nimg0,"), std::string::npos);
  EXPECT_NE(csv.find("\nAGGREGATE,"), std::string::npos);
}

TEST(Fps, StubClock) {
  double now = 0;
  int calls = 0;
  Clock stub = [&] {
    const double t = now;
    now += 0.02125;
    return t;
  };
  FpsStats s = measure_fps([&](const Tensor& x) {
    EXPECT_EQ(x.shape(), (Shape{1, 3, 16, 16}));
    ++calls;
  }, {1, 3, 16, 16}, 5, 100, stub);
  EXPECT_EQ(calls, 105);
  EXPECT_EQ(s.n_frames, 100);
  EXPECT_NEAR(s.fps, 47.0588, 1e-3);
  EXPECT_NEAR(s.percentile_ms(50), 21.25, 1e-9);
  EXPECT_NEAR(s.percentile_ms(95), 21.25, 1e-9);
}

TEST(Fps, Percentiles) {
  FpsStats s;
  for (int i = 1; i <= 20; ++i) s.per_frame_ms.push_back(21 - i);
  EXPECT_EQ(s.percentile_ms(50), 10);
  EXPECT_EQ(s.percentile_ms(95), 19);
  EXPECT_EQ(s.percentile_ms(100), 20);
  EXPECT_EQ(s.percentile_ms(0), 1);
}

TEST(Fps, Errors) {
  auto noop = [](const Tensor&) {};
  double t = 0;
  Clock frozen = [] { return 1.0; };
  Clock back = [&] { return t -= 1.0; };
  EXPECT_THROW(measure_fps(noop, {1, 3, 4, 4}, 0, 0, frozen), ContractError);
  EXPECT_THROW(measure_fps(noop, {2, 3, 4, 4}, 0, 5, frozen), ContractError);
  EXPECT_THROW(measure_fps(noop, {1, 3, 4, 4}, 0, 5, frozen), ContractError);
  EXPECT_THROW(measure_fps(noop, {1, 3, 4, 4}, 0, 5, back), ContractError);
}

TEST(Fps, StatsFile) {
  TempDir dir;
  FpsStats s;
  s.n_frames = 2;
  s.total_seconds = 0.5;
  s.fps = 4;
  s.per_frame_ms = {250, 250};
  write_fps_stats(dir / "fps.txt", s);
  KeyValues kv = read_key_values(dir / "fps.txt");
  EXPECT_EQ(kv.at("n_frames"), "2");
  EXPECT_EQ(kv.at("fps"), "4.000000");
  EXPECT_EQ(kv.at("p95_ms"), "250.000000");
}

TEST(EvaluateDataset, PerfectWhenMasksMatchPrediction) {
  std::mt19937_64 rng(5);
  TransRUPNet model(ModelConfig::tiny(), 0);
  std::vector<Sample> data;
  for (int i = 0; i < 2; ++i) {
    Tensor img = Tensor::uniform({3, 32, 32}, 0, 1, rng);
    Tensor mask = reshape(model.predict_mask(reshape(img, {1, 3, 32, 32}), 0.5f), {1, 32, 32});
    data.push_back({img, mask, "s" + std::to_string(i)});
  }
  MetricReport r = evaluate_dataset(model, data, 0.5f);
  EXPECT_EQ(r.ids, (std::vector<std::string>{"s0", "s1"}));
  EXPECT_NEAR(r.aggregate.dice, 1.0, 1e-9);
  EXPECT_NEAR(r.aggregate.f2, 1.0, 1e-9);
}
