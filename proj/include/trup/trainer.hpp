#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "trup/data.hpp"
#include "trup/model.hpp"

namespace trup {

struct TrainConfig {
  float lr = 1e-4f;
  int batch_size = 8;
  int epochs = 1;
  uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
  bool augment = true;

  void validate() const;
};

/// Adam moments and hyperparameters. beta1 = 0.9, beta2 = 0.999 and
/// eps = 1e-8 unless overridden.
struct OptimState {
  std::vector<Tensor> m, v;
  int64_t t = 0;
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  static OptimState init(const std::vector<Tensor>& params, float lr);
};

/// One bias-corrected Adam update of `params` in place. Throws NumericError
/// before touching anything if a gradient is non-finite.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimState& state);

/// Learnable tensors of `model` in checkpoint order.
std::vector<Tensor> trainable_params(const TransRUPNet& model);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0;
  std::vector<double> batch_losses;
};

/// Called after every optimizer step with (epoch, global step, batch loss).
using StepLogger = std::function<void(int, int64_t, double)>;

/// Shuffle, batch (last partial batch kept), augment, forward in train mode,
/// BCE + dice, backward and one Adam step per batch.
EpochStats train_epoch(TransRUPNet& model, OptimState& optim, const std::vector<Sample>& dataset,
                       const TrainConfig& cfg, std::mt19937_64& rng, int epoch = 0, const StepLogger& log = {});

/// Everything needed to continue training exactly where it stopped.
struct TrainingState {
  TransRUPNet model;
  OptimState optim;
  std::mt19937_64 rng;
  int epochs_done = 0;
};

TrainingState start_training(const ModelConfig& model_cfg, const TrainConfig& cfg);

/// Checkpoint bundle: model (config.txt, manifest.txt, tensors/), optimizer
/// moments under optim/, optim.txt and rng.txt.
void checkpoint(const TrainingState& state, const std::filesystem::path& dir);
TrainingState restore(const std::filesystem::path& dir);

}  // namespace trup
