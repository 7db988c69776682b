#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "trup/trainer.hpp"

using namespace trup;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.lr = 1e-3f;
  cfg.batch_size = 2;
  cfg.seed = 4;
  return cfg;
}

std::vector<std::vector<float>> snapshot(const TransRUPNet& m) {
  std::vector<std::vector<float>> out;
  const ParamSet set = m.param_set();
  for (const auto& nt : set.params) out.push_back(nt.tensor.to_vector());
  for (const auto& nt : set.buffers) out.push_back(nt.tensor.to_vector());
  return out;
}

}  // namespace

TEST(Adam, MatchesReferenceRecurrence) {
  Tensor p({3}, std::vector<float>{1.0f, -2.0f, 0.5f});
  std::vector<Tensor> params = {p};
  OptimState st = OptimState::init(params, 0.01f);
  std::vector<double> theta = {1.0, -2.0, 0.5}, m(3, 0), v(3, 0);
  const std::vector<std::vector<float>> grads = {{0.3f, -1.0f, 0.0f}, {0.1f, 2.0f, -0.5f}, {-0.2f, 0.5f, 4.0f}};
  for (std::size_t step = 0; step < grads.size(); ++step) {
    adam_step(params, {Tensor({3}, grads[step])}, st);
    const double t = static_cast<double>(step + 1);
    for (int j = 0; j < 3; ++j) {
      const double g = grads[step][j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      theta[j] -= 0.01 * (m[j] / (1 - std::pow(0.9, t))) / (std::sqrt(v[j] / (1 - std::pow(0.999, t))) + 1e-8);
      EXPECT_NEAR(p.at(j), theta[j], 1e-6);
    }
  }
  EXPECT_EQ(st.t, 3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p({2}, std::vector<float>{0.0f, 0.0f});
  std::vector<Tensor> params = {p};
  OptimState st = OptimState::init(params, 0.1f);
  adam_step(params, {Tensor({2}, std::vector<float>{5.0f, -0.01f})}, st);
  EXPECT_NEAR(p.at(0), -0.1f, 1e-6);
  EXPECT_NEAR(p.at(1), 0.1f, 1e-4);
}

TEST(Adam, MinimisesQuadratic) {
  Tensor p({4}, std::vector<float>{3, -3, 1, 0});
  const std::vector<float> c = {1, 2, -1, 0.5f};
  std::vector<Tensor> params = {p};
  OptimState st = OptimState::init(params, 0.05f);
  for (int it = 0; it < 2000; ++it) {
    Tensor g({4});
    for (int j = 0; j < 4; ++j) g.mutable_data()[j] = 2 * (p.at(j) - c[j]);
    adam_step(params, {g}, st);
  }
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(p.at(j), c[j], 1e-2);
}

TEST(Adam, NonFiniteGradientLeavesStateUntouched) {
  Tensor a({2}, 1.0f), b({1}, 2.0f);
  std::vector<Tensor> params = {a, b};
  OptimState st = OptimState::init(params, 0.1f);
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_THROW(adam_step(params, {Tensor({2}, 1.0f), Tensor({1}, inf)}, st), NumericError);
  EXPECT_EQ(a.to_vector(), (std::vector<float>{1, 1}));
  EXPECT_EQ(st.t, 0);
  EXPECT_EQ(st.m[0].to_vector(), (std::vector<float>{0, 0}));
}

TEST(Adam, Errors) {
  std::vector<Tensor> params = {Tensor({2})};
  OptimState st = OptimState::init(params, 0.1f);
  EXPECT_THROW(adam_step(params, {}, st), ContractError);
  EXPECT_THROW(adam_step(params, {Tensor({3})}, st), ShapeError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_EQ(c.lr, 1e-4f);
  EXPECT_EQ(c.batch_size, 8);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ContractError);
  c = TrainConfig{};
  c.lr = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(TrainEpoch, KeepsPartialBatchAndLogsEveryStep) {
  const auto data = synth_dataset(3, 32, 1);
  TrainingState st = start_training(ModelConfig::tiny(), tiny_train_config());
  std::vector<int64_t> steps;
  EpochStats s = train_epoch(st.model, st.optim, data, tiny_train_config(), st.rng, 1,
                             [&](int epoch, int64_t step, double loss) {
                               EXPECT_EQ(epoch, 1);
                               EXPECT_TRUE(std::isfinite(loss));
                               EXPECT_GT(loss, 0.0);
                               steps.push_back(step);
                             });
  EXPECT_EQ(steps, (std::vector<int64_t>{1, 2}));
  EXPECT_EQ(s.batch_losses.size(), 2u);
  EXPECT_NEAR(s.mean_loss, (s.batch_losses[0] + s.batch_losses[1]) / 2, 1e-12);
  EXPECT_EQ(st.optim.t, 2);
}

TEST(TrainEpoch, ZeroLearningRateKeepsWeights) {
  const auto data = synth_dataset(2, 32, 2);
  TrainConfig cfg = tiny_train_config();
  cfg.lr = 0;
  TrainingState st = start_training(ModelConfig::tiny(), cfg);
  std::vector<std::vector<float>> before;
  for (const Tensor& p : trainable_params(st.model)) before.push_back(p.to_vector());
  train_epoch(st.model, st.optim, data, cfg, st.rng);
  const auto after = trainable_params(st.model);
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i].to_vector(), before[i]);
}

TEST(TrainEpoch, Errors) {
  TrainingState st = start_training(ModelConfig::tiny(), tiny_train_config());
  EXPECT_THROW(train_epoch(st.model, st.optim, {}, tiny_train_config(), st.rng), ContractError);
  OptimState wrong = OptimState::init({Tensor({1})}, 0.1f);
  EXPECT_THROW(train_epoch(st.model, wrong, synth_dataset(1, 32, 0), tiny_train_config(), st.rng), ContractError);
}

TEST(Training, SameSeedSameTrace) {
  const auto data = synth_dataset(4, 32, 3);
  auto run = [&] {
    TrainingState st = start_training(ModelConfig::tiny(), tiny_train_config());
    std::vector<double> losses;
    for (int e = 0; e < 2; ++e) {
      auto s = train_epoch(st.model, st.optim, data, tiny_train_config(), st.rng, e + 1);
      losses.insert(losses.end(), s.batch_losses.begin(), s.batch_losses.end());
    }
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, CheckpointRestoreContinuesBitwise) {
  TempDir dir;
  const auto data = synth_dataset(3, 32, 5);
  const TrainConfig cfg = tiny_train_config();
  TrainingState a = start_training(ModelConfig::tiny(), cfg);
  train_epoch(a.model, a.optim, data, cfg, a.rng, 1);
  a.epochs_done = 1;
  checkpoint(a, dir.path());

  TrainingState b = restore(dir.path());
  EXPECT_EQ(b.epochs_done, 1);
  EXPECT_EQ(b.optim.t, a.optim.t);
  EXPECT_EQ(b.optim.lr, a.optim.lr);
  EXPECT_EQ(snapshot(b.model), snapshot(a.model));

  const EpochStats sa = train_epoch(a.model, a.optim, data, cfg, a.rng, 2);
  const EpochStats sb = train_epoch(b.model, b.optim, data, cfg, b.rng, 2);
  EXPECT_EQ(sa.batch_losses, sb.batch_losses);
  EXPECT_EQ(snapshot(b.model), snapshot(a.model));
  for (std::size_t i = 0; i < a.optim.m.size(); ++i) EXPECT_EQ(a.optim.v[i].to_vector(), b.optim.v[i].to_vector());
}

TEST(Training, RestoreErrors) {
  TempDir dir;
  TrainingState st = start_training(ModelConfig::tiny(), tiny_train_config());
  checkpoint(st, dir.path());
  EXPECT_NO_THROW(restore(dir.path()));
  write_file(dir / "optim.txt", "t=abc\n");
  EXPECT_THROW(restore(dir.path()), CheckpointError);
  checkpoint(st, dir.path());
  std::filesystem::remove(dir / "rng.txt");
  EXPECT_THROW(restore(dir.path()), CheckpointError);
  checkpoint(st, dir.path());
  std::filesystem::remove_all(dir / "optim");
  EXPECT_THROW(restore(dir.path()), CheckpointError);
}
