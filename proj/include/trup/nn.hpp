#pragma once

#include <random>
#include <string>
#include <vector>

#include "trup/tensor.hpp"

namespace trup {

enum class Mode { kTrain, kEval };

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using NamedTensors = std::vector<NamedTensor>;

/// Learnable tensors and non-learnable state (BN running statistics) of a
/// module, in a fixed order that defines checkpoint layout.
struct ParamSet {
  NamedTensors params;
  NamedTensors buffers;
};

// ---- parameter records --------------------------------------------------------

struct Conv2dParams {
  Tensor weight;  // [C_out x C_in x k x k]
  Tensor bias;    // [C_out]
  int stride = 1;
  int padding = 0;

  /// Weights uniform in +-1/sqrt(fan_in), zero bias.
  static Conv2dParams init(int c_in, int c_out, int kernel, int stride, int padding, std::mt19937_64& rng);
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  int in_channels() const { return static_cast<int>(weight.dim(1)); }
  int out_channels() const { return static_cast<int>(weight.dim(0)); }
  void collect(const std::string& prefix, ParamSet& out) const;
};

struct BatchNorm2dParams {
  Tensor gamma, beta;               // [C], learnable
  Tensor running_mean, running_var;  // [C], updated in train mode
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BatchNorm2dParams init(int channels);
  void collect(const std::string& prefix, ParamSet& out) const;
};

struct LinearParams {
  Tensor weight;  // [D_out x D_in]
  Tensor bias;    // [D_out]

  static LinearParams init(int d_in, int d_out, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamSet& out) const;
};

struct LayerNormParams {
  Tensor gamma, beta;  // [D]
  float eps = 1e-6f;

  static LayerNormParams init(int dim);
  void collect(const std::string& prefix, ParamSet& out) const;
};

// ---- kernels ------------------------------------------------------------------

/// 2-D cross-correlation plus bias. x: [B x C_in x H x W].
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

/// Train mode normalises with per-channel batch mean and biased variance and
/// updates the running statistics in `p`; eval mode uses the running stats.
Tensor batch_norm2d(const Tensor& x, BatchNorm2dParams& p, Mode mode);

enum class Activation { kRelu, kGelu, kSigmoid };

Tensor activation(Activation kind, const Tensor& x);
inline Tensor relu(const Tensor& x) { return activation(Activation::kRelu, x); }
/// tanh approximation, sqrt(2/pi) = 0.7978845608.
inline Tensor gelu(const Tensor& x) { return activation(Activation::kGelu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::kSigmoid, x); }

/// Bilinear upsampling with half-pixel centres: the source coordinate of
/// output row i is (i + 0.5) * H / out_h - 0.5, clamped to [0, H - 1].
Tensor bilinear_upsample(const Tensor& x, int64_t out_h, int64_t out_w);

/// Same interpolation on one raw plane, without the upsampling-only
/// restriction. Used for resizing images on load.
void resize_bilinear_plane(const float* in, int64_t h, int64_t w, float* out, int64_t out_h, int64_t out_w);

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int64_t start, int64_t count);

/// Normalise over the last axis with biased variance, then scale and shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gamma, p.beta, p.eps); }

/// x [.. x D_in] -> x W^T + b.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
inline Tensor linear(const Tensor& x, const LinearParams& p) { return linear(x, p.weight, p.bias); }

}  // namespace trup
