#pragma once

#include <array>
#include <filesystem>
#include <random>
#include <vector>

#include "trup/nn.hpp"

namespace trup {

/// One pyramid stage: patch embedding followed by `depth` transformer blocks
/// with spatial-reduction attention.
struct StageConfig {
  int embed_dim = 32;
  int depth = 2;
  int num_heads = 1;
  int sr_ratio = 8;
  int patch_stride = 4;
  int mlp_ratio = 4;

  void validate() const;
};

using EncoderConfig = std::array<StageConfig, 3>;

struct PatchEmbedParams {
  Conv2dParams proj;  // kernel = stride = patch_stride
  LayerNormParams norm;
};

struct AttentionParams {
  LinearParams q, k, v, proj;
  Conv2dParams sr;  // kernel = stride = sr_ratio; unused when sr_ratio == 1
  LayerNormParams sr_norm;
};

struct BlockParams {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  LinearParams fc1, fc2;
};

struct StageParams {
  PatchEmbedParams embed;
  std::vector<BlockParams> blocks;
};

struct EncoderParams {
  std::array<StageParams, 3> stages;

  static EncoderParams init(const EncoderConfig& cfg, int in_channels, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamSet& out) const;
};

struct EncoderOutput {
  Tensor e1;  // [B x d1 x H/4  x W/4]
  Tensor e2;  // [B x d2 x H/8  x W/8]
  Tensor e3;  // [B x d3 x H/16 x W/16]
};

struct PatchTokens {
  Tensor tokens;  // [B x N x D], layer-normed
  int64_t h = 0, w = 0;
};

/// [B x C x H x W] -> [B x HW x C]
Tensor map_to_tokens(const Tensor& x);
/// [B x HW x C] -> [B x C x H x W]
Tensor tokens_to_map(const Tensor& tokens, int64_t h, int64_t w);

PatchTokens patch_embed(const Tensor& x, const StageConfig& cfg, const PatchEmbedParams& p);

/// Multi-head attention whose keys and values come from the token grid
/// reduced by an sr_ratio-strided conv plus layer norm. If `attention_out`
/// is non-null it receives the softmax weights [B x heads x N x M].
Tensor sra_attention(const Tensor& tokens, int64_t h, int64_t w, const StageConfig& cfg, const AttentionParams& p,
                     Tensor* attention_out = nullptr);

/// Pre-norm residual block: x + attn(LN(x)), then x + MLP(LN(x)).
Tensor transformer_block(const Tensor& tokens, int64_t h, int64_t w, const StageConfig& cfg, const BlockParams& p);

/// Checks H, W divisibility for every stage (patch strides and SR ratios).
void validate_encoder_input(const EncoderConfig& cfg, int64_t h, int64_t w);

EncoderOutput encoder_forward(const Tensor& x, const EncoderConfig& cfg, const EncoderParams& p);

/// Replaces the `encoder.*` tensors of `params` with those stored in the
/// checkpoint directory `dir`. Shapes must match the manifest exactly.
void load_pretrained(EncoderParams& params, const std::filesystem::path& dir);

}  // namespace trup
