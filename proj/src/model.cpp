#include "trup/model.hpp"

#include "trup/checkpoint.hpp"

namespace trup {

// ---- config -------------------------------------------------------------------

ModelConfig ModelConfig::standard() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.input_h = c.input_w = 64;
  c.reduce_channels = 16;
  c.encoder = {StageConfig{16, 1, 1, 8, 4, 4}, StageConfig{32, 1, 2, 4, 2, 4}, StageConfig{64, 1, 4, 2, 2, 4}};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_h = c.input_w = 32;
  c.reduce_channels = 8;
  c.encoder = {StageConfig{8, 1, 1, 4, 4, 4}, StageConfig{16, 1, 2, 2, 2, 4}, StageConfig{32, 1, 4, 1, 2, 4}};
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "standard") return standard();
  if (name == "toy") return toy();
  if (name == "tiny") return tiny();
  throw ContractError("unknown model preset '" + name + "' (expected standard, toy or tiny)");
}

void ModelConfig::validate() const {
  if (reduce_channels < 1) throw ContractError("model config: reduce_channels must be >= 1");
  if (in_channels < 1) throw ContractError("model config: in_channels must be >= 1");
  if (residual_kernel < 1 || residual_kernel % 2 == 0) throw ContractError("model config: residual_kernel must be odd");
  if (!(threshold > 0.0f && threshold < 1.0f)) throw ContractError("model config: threshold must lie in (0,1)");
  validate_encoder_input(encoder, input_h, input_w);
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_key_values() const {
  std::vector<std::pair<std::string, std::string>> kv = {
      {"input_h", std::to_string(input_h)},
      {"input_w", std::to_string(input_w)},
      {"in_channels", std::to_string(in_channels)},
      {"reduce_channels", std::to_string(reduce_channels)},
      {"residual_kernel", std::to_string(residual_kernel)},
      {"threshold", std::to_string(threshold)},
  };
  for (std::size_t s = 0; s < encoder.size(); ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    const StageConfig& c = encoder[s];
    kv.emplace_back(p + "embed_dim", std::to_string(c.embed_dim));
    kv.emplace_back(p + "depth", std::to_string(c.depth));
    kv.emplace_back(p + "num_heads", std::to_string(c.num_heads));
    kv.emplace_back(p + "sr_ratio", std::to_string(c.sr_ratio));
    kv.emplace_back(p + "patch_stride", std::to_string(c.patch_stride));
    kv.emplace_back(p + "mlp_ratio", std::to_string(c.mlp_ratio));
  }
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  auto get_int = [&](const std::string& key) {
    const std::string& v = require_key(kv, key);
    try {
      return std::stoll(v);
    } catch (const std::exception&) {
      throw FormatError("config: '" + key + "' is not an integer: " + v);
    }
  };
  ModelConfig c;
  c.input_h = get_int("input_h");
  c.input_w = get_int("input_w");
  c.in_channels = static_cast<int>(get_int("in_channels"));
  c.reduce_channels = static_cast<int>(get_int("reduce_channels"));
  c.residual_kernel = static_cast<int>(get_int("residual_kernel"));
  try {
    c.threshold = std::stof(require_key(kv, "threshold"));
  } catch (const std::invalid_argument&) {
    throw FormatError("config: bad threshold");
  }
  for (std::size_t s = 0; s < c.encoder.size(); ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    StageConfig& st = c.encoder[s];
    st.embed_dim = static_cast<int>(get_int(p + "embed_dim"));
    st.depth = static_cast<int>(get_int(p + "depth"));
    st.num_heads = static_cast<int>(get_int(p + "num_heads"));
    st.sr_ratio = static_cast<int>(get_int(p + "sr_ratio"));
    st.patch_stride = static_cast<int>(get_int(p + "patch_stride"));
    st.mlp_ratio = static_cast<int>(get_int(p + "mlp_ratio"));
  }
  c.validate();
  return c;
}

// ---- params -------------------------------------------------------------------

ConvBnParams ConvBnParams::init(int c_in, int c_out, int kernel, std::mt19937_64& rng) {
  return {Conv2dParams::init(c_in, c_out, kernel, 1, kernel / 2, rng), BatchNorm2dParams::init(c_out)};
}

void ConvBnParams::collect(const std::string& prefix, ParamSet& out) const {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

ResidualBlockParams ResidualBlockParams::init(int c_in, int c_out, int kernel, std::mt19937_64& rng) {
  ResidualBlockParams p;
  p.conv1 = Conv2dParams::init(c_in, c_out, kernel, 1, kernel / 2, rng);
  p.bn1 = BatchNorm2dParams::init(c_out);
  p.conv2 = Conv2dParams::init(c_out, c_out, kernel, 1, kernel / 2, rng);
  p.bn2 = BatchNorm2dParams::init(c_out);
  if (c_in != c_out) p.shortcut = ConvBnParams::init(c_in, c_out, 1, rng);
  return p;
}

void ResidualBlockParams::collect(const std::string& prefix, ParamSet& out) const {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
  if (shortcut) shortcut->collect(prefix + ".shortcut", out);
}

TransRUPNetParams TransRUPNetParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  TransRUPNetParams p;
  const int rc = cfg.reduce_channels;
  const int k = cfg.residual_kernel;
  p.encoder = EncoderParams::init(cfg.encoder, cfg.in_channels, rng);
  for (std::size_t i = 0; i < p.reduce.size(); ++i) p.reduce[i] = ConvBnParams::init(cfg.encoder[i].embed_dim, rc, 1, rng);
  for (auto& u : p.up) u = ResidualBlockParams::init(rc, rc, k, rng);
  for (auto& d : p.decoder) d = ResidualBlockParams::init(2 * rc, rc, k, rng);
  p.head = ResidualBlockParams::init(4 * rc, 4 * rc, k, rng);
  p.out = Conv2dParams::init(4 * rc, 1, 1, 1, 0, rng);
  return p;
}

ParamSet TransRUPNetParams::param_set() const {
  ParamSet set;
  encoder.collect("encoder", set);
  for (std::size_t i = 0; i < reduce.size(); ++i) reduce[i].collect("reduce" + std::to_string(i + 1), set);
  for (std::size_t i = 0; i < up.size(); ++i) up[i].collect("up" + std::to_string(i + 1), set);
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("decoder" + std::to_string(i + 1), set);
  head.collect("head.residual", set);
  out.collect("head.out", set);
  return set;
}

// ---- blocks -------------------------------------------------------------------

Tensor residual_block(const Tensor& x, ResidualBlockParams& p, Mode mode) {
  Tensor main = relu(batch_norm2d(conv2d(x, p.conv1), p.bn1, mode));
  main = batch_norm2d(conv2d(main, p.conv2), p.bn2, mode);
  Tensor skip = p.shortcut ? batch_norm2d(conv2d(x, p.shortcut->conv), p.shortcut->bn, mode) : x;
  return relu(add(main, skip));
}

Tensor reduce_block(const Tensor& e, ConvBnParams& p, Mode mode) {
  return relu(batch_norm2d(conv2d(e, p.conv), p.bn, mode));
}

Tensor up_block(const Tensor& x, int64_t out_h, int64_t out_w, ResidualBlockParams& p, Mode mode) {
  return residual_block(bilinear_upsample(x, out_h, out_w), p, mode);
}

Tensor decoder_block(const Tensor& x, const Tensor& skip, ResidualBlockParams& p, Mode mode, Tensor* concat_out) {
  if (x.rank() != 4 || skip.rank() != 4) throw ShapeError("decoder_block: expected 4-D inputs");
  if (skip.dim(0) != x.dim(0) || skip.dim(2) != 2 * x.dim(2) || skip.dim(3) != 2 * x.dim(3)) {
    throw ShapeError("decoder_block: skip " + shape_str(skip.shape()) + " is not twice the size of " +
                     shape_str(x.shape()));
  }
  Tensor cat = concat_channels({bilinear_upsample(x, skip.dim(2), skip.dim(3)), skip});
  if (concat_out) *concat_out = cat;
  return residual_block(cat, p, mode);
}

// ---- model --------------------------------------------------------------------

TransRUPNet::TransRUPNet(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), params_(TransRUPNetParams::init(cfg_, seed)) {
  for (auto& nt : param_set().params) nt.tensor.requires_grad_(true);
}

Tensor TransRUPNet::forward(const Tensor& x, Mode mode, ForwardTrace* trace) {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
    throw ShapeError("forward: expected B x " + std::to_string(cfg_.in_channels) + " x H x W input, got " +
                     shape_str(x.shape()));
  }
  const int64_t h = x.dim(2), w = x.dim(3);
  EncoderOutput enc = encoder_forward(x, cfg_.encoder, params_.encoder);
  const std::array<Tensor, 3> feats = {enc.e1, enc.e2, enc.e3};

  std::array<Tensor, 3> r;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = reduce_block(feats[i], params_.reduce[i], mode);

  std::array<Tensor, 4> u;
  for (std::size_t i = 0; i < r.size(); ++i) u[i] = up_block(r[i], h, w, params_.up[i], mode);
  Tensor d1 = decoder_block(r[2], r[1], params_.decoder[0], mode);
  Tensor d2 = decoder_block(d1, r[0], params_.decoder[1], mode);
  u[3] = up_block(d2, h, w, params_.up[3], mode);

  Tensor cat = concat_channels({u[0], u[1], u[2], u[3]});
  Tensor logits = conv2d(residual_block(cat, params_.head, mode), params_.out);
  Tensor y = sigmoid(logits);
  if (trace) {
    trace->encoder = enc;
    trace->reduced = r;
    trace->up = u;
    trace->decoded = {d1, d2};
    trace->head_input = cat;
    trace->logits = logits;
  }
  return y;
}

Tensor TransRUPNet::predict_mask(const Tensor& x, float threshold) {
  if (!(threshold > 0.0f && threshold < 1.0f)) throw ContractError("predict_mask: threshold must lie in (0,1)");
  Tensor y = forward(x, Mode::kEval);
  std::vector<float> mask(static_cast<std::size_t>(y.numel()));
  auto yd = y.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = yd[i] >= threshold ? 1.0f : 0.0f;
  return Tensor(y.shape(), std::move(mask));
}

void TransRUPNet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_key_values(dir / "config.txt", cfg_.to_key_values());
  save_param_set(dir, param_set());
}

TransRUPNet TransRUPNet::load(const std::filesystem::path& dir) {
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_key_values(read_key_values(dir / "config.txt"));
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("model config: ") + e.what());
  }
  TransRUPNet model(cfg, 0);
  ParamSet set = model.param_set();
  load_param_set(dir, set);
  return model;
}

}  // namespace trup
