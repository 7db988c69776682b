#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "trup/encoder.hpp"
#include "trup/nn.hpp"
#include "trup/serialize.hpp"

namespace trup {

struct ModelConfig {
  int64_t input_h = 256;
  int64_t input_w = 256;
  int in_channels = 3;
  int reduce_channels = 64;
  int residual_kernel = 3;
  float threshold = 0.5f;
  EncoderConfig encoder{
      StageConfig{32, 2, 1, 8, 4, 4},
      StageConfig{64, 2, 2, 4, 2, 4},
      StageConfig{160, 2, 5, 2, 2, 4},
  };

  /// 256x256 input, stage dims 32/64/160, 64 reduction channels.
  static ModelConfig standard();
  /// 64x64 input, stage dims 16/32/64, depth 1, 16 reduction channels.
  static ModelConfig toy();
  /// 32x32 input, stage dims 8/16/32, depth 1, 8 reduction channels; SR
  /// ratios 4/2/1 so any multiple of 16 is a valid input size.
  static ModelConfig tiny();
  static ModelConfig preset(const std::string& name);

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
};

struct ConvBnParams {
  Conv2dParams conv;
  BatchNorm2dParams bn;

  static ConvBnParams init(int c_in, int c_out, int kernel, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamSet& out) const;
};

/// conv-BN-ReLU-conv-BN main path; identity shortcut when channel counts
/// match, otherwise 1x1 conv + BN; ReLU after the sum.
struct ResidualBlockParams {
  Conv2dParams conv1;
  BatchNorm2dParams bn1;
  Conv2dParams conv2;
  BatchNorm2dParams bn2;
  std::optional<ConvBnParams> shortcut;

  static ResidualBlockParams init(int c_in, int c_out, int kernel, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamSet& out) const;
};

struct TransRUPNetParams {
  EncoderParams encoder;
  std::array<ConvBnParams, 3> reduce;
  std::array<ResidualBlockParams, 4> up;
  std::array<ResidualBlockParams, 2> decoder;
  ResidualBlockParams head;
  Conv2dParams out;

  /// Conv/linear weights uniform in +-1/sqrt(fan_in), zero biases, BN and
  /// LN with gamma = 1, beta = 0. Deterministic in `seed`.
  static TransRUPNetParams init(const ModelConfig& cfg, uint64_t seed);
  ParamSet param_set() const;
};

Tensor residual_block(const Tensor& x, ResidualBlockParams& p, Mode mode);
/// 1x1 conv -> BN -> ReLU down to reduce_channels.
Tensor reduce_block(const Tensor& e, ConvBnParams& p, Mode mode);
/// Bilinear upsampling to (out_h, out_w), then a residual block.
Tensor up_block(const Tensor& x, int64_t out_h, int64_t out_w, ResidualBlockParams& p, Mode mode);
/// x2 bilinear upsampling, channel concat (upsampled first, skip second),
/// then a residual block. `concat_out` receives the pre-residual concat.
Tensor decoder_block(const Tensor& x, const Tensor& skip, ResidualBlockParams& p, Mode mode,
                     Tensor* concat_out = nullptr);

/// Intermediate tensors of one forward pass.
struct ForwardTrace {
  EncoderOutput encoder;
  std::array<Tensor, 3> reduced;
  std::array<Tensor, 4> up;
  std::array<Tensor, 2> decoded;
  Tensor head_input;  // concat of the four up-block outputs
  Tensor logits;
};

class TransRUPNet {
 public:
  TransRUPNet(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  TransRUPNetParams& params() { return params_; }
  const TransRUPNetParams& params() const { return params_; }

  /// Probabilities [B x 1 x H x W]. Any H, W accepted by the encoder is
  /// valid; ModelConfig's input size is the size data is loaded at.
  Tensor forward(const Tensor& x, Mode mode, ForwardTrace* trace = nullptr);

  /// Eval-mode forward, then 1 where probability >= threshold else 0.
  Tensor predict_mask(const Tensor& x, float threshold);

  ParamSet param_set() const { return params_.param_set(); }

  /// `config.txt` (key=value) plus the tensor bundle.
  void save(const std::filesystem::path& dir) const;
  static TransRUPNet load(const std::filesystem::path& dir);

 private:
  ModelConfig cfg_;
  TransRUPNetParams params_;
};

}  // namespace trup
