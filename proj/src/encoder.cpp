#include "trup/encoder.hpp"

#include <cmath>

#include "trup/checkpoint.hpp"

namespace trup {

void StageConfig::validate() const {
  if (embed_dim < 1 || depth < 0 || num_heads < 1 || sr_ratio < 1 || patch_stride < 1 || mlp_ratio < 1) {
    throw ContractError("stage config: sizes must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw ContractError("stage config: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                        std::to_string(num_heads));
  }
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, int in_channels, std::mt19937_64& rng) {
  EncoderParams p;
  int channels = in_channels;
  for (std::size_t s = 0; s < cfg.size(); ++s) {
    const StageConfig& c = cfg[s];
    c.validate();
    const int d = c.embed_dim;
    StageParams& sp = p.stages[s];
    sp.embed.proj = Conv2dParams::init(channels, d, c.patch_stride, c.patch_stride, 0, rng);
    sp.embed.norm = LayerNormParams::init(d);
    for (int b = 0; b < c.depth; ++b) {
      BlockParams bp;
      bp.norm1 = LayerNormParams::init(d);
      bp.attn.q = LinearParams::init(d, d, rng);
      bp.attn.k = LinearParams::init(d, d, rng);
      bp.attn.v = LinearParams::init(d, d, rng);
      bp.attn.proj = LinearParams::init(d, d, rng);
      if (c.sr_ratio > 1) {
        bp.attn.sr = Conv2dParams::init(d, d, c.sr_ratio, c.sr_ratio, 0, rng);
        bp.attn.sr_norm = LayerNormParams::init(d);
      }
      bp.norm2 = LayerNormParams::init(d);
      bp.fc1 = LinearParams::init(d, d * c.mlp_ratio, rng);
      bp.fc2 = LinearParams::init(d * c.mlp_ratio, d, rng);
      sp.blocks.push_back(std::move(bp));
    }
    channels = d;
  }
  return p;
}

void EncoderParams::collect(const std::string& prefix, ParamSet& out) const {
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    stages[s].embed.proj.collect(sp + ".embed.proj", out);
    stages[s].embed.norm.collect(sp + ".embed.norm", out);
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      const BlockParams& bp = stages[s].blocks[b];
      const std::string bpfx = sp + ".block" + std::to_string(b);
      bp.norm1.collect(bpfx + ".norm1", out);
      bp.attn.q.collect(bpfx + ".attn.q", out);
      bp.attn.k.collect(bpfx + ".attn.k", out);
      bp.attn.v.collect(bpfx + ".attn.v", out);
      bp.attn.proj.collect(bpfx + ".attn.proj", out);
      if (bp.attn.sr.weight.defined()) {
        bp.attn.sr.collect(bpfx + ".attn.sr", out);
        bp.attn.sr_norm.collect(bpfx + ".attn.sr_norm", out);
      }
      bp.norm2.collect(bpfx + ".norm2", out);
      bp.fc1.collect(bpfx + ".mlp.fc1", out);
      bp.fc2.collect(bpfx + ".mlp.fc2", out);
    }
  }
}

Tensor map_to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("map_to_tokens: expected B x C x H x W");
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  return permute(reshape(x, {b, c, n}), {0, 2, 1});
}

Tensor tokens_to_map(const Tensor& tokens, int64_t h, int64_t w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw ShapeError("tokens_to_map: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " token grid");
  }
  const int64_t b = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {b, c, h, w});
}

PatchTokens patch_embed(const Tensor& x, const StageConfig& cfg, const PatchEmbedParams& p) {
  if (x.rank() != 4) throw ShapeError("patch_embed: expected B x C x H x W input");
  const int64_t s = cfg.patch_stride;
  if (x.dim(2) % s != 0 || x.dim(3) % s != 0) {
    throw ShapeError("patch_embed: " + shape_str(x.shape()) + " not divisible by patch stride " + std::to_string(s));
  }
  Tensor y = conv2d(x, p.proj);
  PatchTokens out;
  out.h = y.dim(2);
  out.w = y.dim(3);
  out.tokens = layer_norm(map_to_tokens(y), p.norm);
  return out;
}

Tensor sra_attention(const Tensor& tokens, int64_t h, int64_t w, const StageConfig& cfg, const AttentionParams& p,
                     Tensor* attention_out) {
  if (tokens.rank() != 3) throw ShapeError("sra_attention: expected B x N x D tokens");
  const int64_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  if (n != h * w) throw ShapeError("sra_attention: token count does not match grid");
  if (h % cfg.sr_ratio != 0 || w % cfg.sr_ratio != 0) {
    throw ShapeError("sra_attention: grid " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by sr_ratio " + std::to_string(cfg.sr_ratio));
  }
  if (d % cfg.num_heads != 0) throw ShapeError("sra_attention: embed dim not divisible by heads");
  const int64_t heads = cfg.num_heads, dh = d / heads;

  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {b, t.dim(1), heads, dh}), {0, 2, 1, 3});  // [B x heads x L x dh]
  };

  Tensor q = split_heads(linear(tokens, p.q));
  Tensor kv_src = tokens;
  if (cfg.sr_ratio > 1) {
    Tensor reduced = conv2d(tokens_to_map(tokens, h, w), p.sr);
    kv_src = layer_norm(map_to_tokens(reduced), p.sr_norm);
  }
  Tensor k = split_heads(linear(kv_src, p.k));
  Tensor v = split_heads(linear(kv_src, p.v));

  Tensor scores = mul(matmul(q, transpose(k, -1, -2)), static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor attn = softmax(scores);
  if (attention_out) *attention_out = attn;
  Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, n, d});
  return linear(ctx, p.proj);
}

Tensor transformer_block(const Tensor& tokens, int64_t h, int64_t w, const StageConfig& cfg, const BlockParams& p) {
  Tensor x = add(tokens, sra_attention(layer_norm(tokens, p.norm1), h, w, cfg, p.attn));
  Tensor mlp = linear(gelu(linear(layer_norm(x, p.norm2), p.fc1)), p.fc2);
  return add(x, mlp);
}

void validate_encoder_input(const EncoderConfig& cfg, int64_t h, int64_t w) {
  if (h % 16 != 0 || w % 16 != 0) {
    throw ShapeError("encoder: input " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by 16");
  }
  for (const StageConfig& c : cfg) {
    c.validate();
    if (h % c.patch_stride != 0 || w % c.patch_stride != 0) throw ShapeError("encoder: patch stride does not divide input");
    h /= c.patch_stride;
    w /= c.patch_stride;
    if (h % c.sr_ratio != 0 || w % c.sr_ratio != 0) {
      throw ShapeError("encoder: stage grid " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by sr_ratio " + std::to_string(c.sr_ratio));
    }
  }
}

EncoderOutput encoder_forward(const Tensor& x, const EncoderConfig& cfg, const EncoderParams& p) {
  if (x.rank() != 4) throw ShapeError("encoder: expected B x C x H x W input");
  validate_encoder_input(cfg, x.dim(2), x.dim(3));
  std::array<Tensor, 3> maps;
  Tensor cur = x;
  for (std::size_t s = 0; s < cfg.size(); ++s) {
    PatchTokens pt = patch_embed(cur, cfg[s], p.stages[s].embed);
    Tensor t = pt.tokens;
    for (const BlockParams& bp : p.stages[s].blocks) t = transformer_block(t, pt.h, pt.w, cfg[s], bp);
    maps[s] = tokens_to_map(t, pt.h, pt.w);
    cur = maps[s];
  }
  return {maps[0], maps[1], maps[2]};
}

void load_pretrained(EncoderParams& params, const std::filesystem::path& dir) {
  ParamSet set;
  params.collect("encoder", set);
  load_param_set(dir, set, "encoder.");
}

}  // namespace trup
