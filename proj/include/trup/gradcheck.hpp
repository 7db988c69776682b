#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trup/tensor.hpp"

namespace trup {

struct GradcheckOptions {
  float step = 3e-3f;        // scaled per element by max(1, |x_i|)
  double tolerance = 1e-2;   // on |g_a - g_n| / max(1, |g_a|, |g_n|)
  int max_checks_per_leaf = 64;
  int model_param_samples = 100;
  // Difference passes replay the ReLU/max pattern of the unperturbed pass.
  // Needed for deep nets, where any practical step crosses some kink.
  bool freeze_kinks = false;
};

struct GradcheckResult {
  std::string op;
  double max_error = 0;  // worst |g_a - g_n| / max(1, |g_a|, |g_n|)
  int64_t checked = 0;   // scalar entries compared
  bool passed = false;
  double seconds = 0;  // wall time of the check
};

/// Worst relative disagreement between two gradient vectors.
double gradient_error(std::span<const double> analytic, std::span<const double> numeric);

/// Backpropagates `loss_fn()` into `leaves`, then compares against central
/// differences on (at most `max_checks_per_leaf` sampled) entries of each
/// leaf. `loss_fn` must read the leaves through the handles it captured.
GradcheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> leaves, uint64_t seed, const GradcheckOptions& opt = {});

/// Every differentiable op of the library plus the encoder and the full tiny
/// model, with inputs drawn from `seed`.
std::vector<GradcheckResult> run_gradcheck_suite(uint64_t seed, const GradcheckOptions& opt = {});

}  // namespace trup
