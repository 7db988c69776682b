#include "trup/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "trup/checkpoint.hpp"
#include "trup/loss_metrics.hpp"
#include "trup/random.hpp"

namespace trup {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (epochs < 0) throw ContractError("train config: epochs must be >= 0");
  if (!(lr >= 0.0f) || !std::isfinite(lr)) throw ContractError("train config: lr must be finite and >= 0");
  if (checkpoint_every < 0) throw ContractError("train config: checkpoint_every must be >= 0");
}

OptimState OptimState::init(const std::vector<Tensor>& params, float lr) {
  OptimState s;
  s.lr = lr;
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw ContractError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    detail::check_finite("adam_step gradient", grads[i].data());
  }
  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * gj);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * gj * gj);
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] = static_cast<float>(theta[j] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

std::vector<Tensor> trainable_params(const TransRUPNet& model) {
  std::vector<Tensor> out;
  for (const auto& nt : model.param_set().params) out.push_back(nt.tensor);
  return out;
}

EpochStats train_epoch(TransRUPNet& model, OptimState& optim, const std::vector<Sample>& dataset,
                       const TrainConfig& cfg, std::mt19937_64& rng, int epoch, const StepLogger& log) {
  cfg.validate();
  if (dataset.empty()) throw ContractError("train_epoch: empty dataset");
  std::vector<Tensor> params = trainable_params(model);
  if (optim.m.size() != params.size()) throw ContractError("train_epoch: optimizer state does not match model");
  optim.lr = cfg.lr;

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

  EpochStats stats;
  stats.epoch = epoch;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < order.size(); start += bs) {
    std::vector<Sample> batch;
    for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
      const Sample& s = dataset[order[k]];
      batch.push_back(cfg.augment ? augment(s, rng) : s);
    }
    SampleBatch sb = make_batch(batch);

    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = combined_loss(model.forward(sb.images, Mode::kTrain), sb.masks);
    }
    backward(loss, tape);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const Tensor& p : params) grads.push_back(p.grad_tensor());
    adam_step(params, grads, optim);
    for (Tensor& p : params) p.zero_grad();

    stats.batch_losses.push_back(loss.item());
    if (log) log(epoch, optim.t, loss.item());
  }
  double total = 0.0;
  for (double l : stats.batch_losses) total += l;
  stats.mean_loss = total / static_cast<double>(stats.batch_losses.size());
  return stats;
}

TrainingState start_training(const ModelConfig& model_cfg, const TrainConfig& cfg) {
  cfg.validate();
  TransRUPNet model(model_cfg, derive_seed(cfg.seed, "init"));
  OptimState optim = OptimState::init(trainable_params(model), cfg.lr);
  return {std::move(model), std::move(optim), std::mt19937_64(derive_seed(cfg.seed, "train")), 0};
}

namespace {

std::string hex_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", static_cast<double>(v));
  return buf;
}

float parse_float(const KeyValues& kv, const std::string& key) {
  const std::string& s = require_key(kv, key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("optim state: bad value for " + key);
  return static_cast<float>(v);
}

ParamSet moment_set(const TrainingState& state) {
  ParamSet set;
  const ParamSet model_set = state.model.param_set();
  if (model_set.params.size() != state.optim.m.size()) throw ContractError("checkpoint: optimizer does not match model");
  for (std::size_t i = 0; i < model_set.params.size(); ++i) {
    set.params.push_back({"m." + model_set.params[i].name, state.optim.m[i]});
    set.params.push_back({"v." + model_set.params[i].name, state.optim.v[i]});
  }
  return set;
}

}  // namespace

void checkpoint(const TrainingState& state, const fs::path& dir) {
  state.model.save(dir);
  save_param_set(dir / "optim", moment_set(state));
  write_key_values(dir / "optim.txt", {{"t", std::to_string(state.optim.t)},
                                       {"lr", hex_float(state.optim.lr)},
                                       {"beta1", hex_float(state.optim.beta1)},
                                       {"beta2", hex_float(state.optim.beta2)},
                                       {"eps", hex_float(state.optim.eps)},
                                       {"epochs_done", std::to_string(state.epochs_done)}});
  std::ofstream os(dir / "rng.txt");
  if (!os) throw FormatError("cannot write " + (dir / "rng.txt").string());
  os << state.rng << '\n';
}

TrainingState restore(const fs::path& dir) {
  TransRUPNet model = TransRUPNet::load(dir);
  TrainingState state{std::move(model), {}, {}, 0};
  state.optim = OptimState::init(trainable_params(state.model), 0.0f);
  try {
    const KeyValues kv = read_key_values(dir / "optim.txt");
    state.optim.t = std::stoll(require_key(kv, "t"));
    state.optim.lr = parse_float(kv, "lr");
    state.optim.beta1 = parse_float(kv, "beta1");
    state.optim.beta2 = parse_float(kv, "beta2");
    state.optim.eps = parse_float(kv, "eps");
    state.epochs_done = std::stoi(require_key(kv, "epochs_done"));
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  } catch (const std::logic_error&) {
    throw CheckpointError("optim.txt: malformed integer");
  }
  ParamSet moments = moment_set(state);
  load_param_set(dir / "optim", moments);

  std::ifstream is(dir / "rng.txt");
  if (!is || !(is >> state.rng)) throw CheckpointError("cannot read rng state from " + (dir / "rng.txt").string());
  return state;
}

}  // namespace trup
