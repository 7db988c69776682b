#include "trup/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "trup/encoder.hpp"
#include "trup/loss_metrics.hpp"
#include "trup/model.hpp"
#include "trup/nn.hpp"
#include "trup/random.hpp"

namespace trup {

double gradient_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw ContractError("gradient_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double scale = std::max({1.0, std::fabs(a), std::fabs(n)});
    worst = std::max(worst, std::fabs(a - n) / scale);
  }
  return worst;
}

namespace {

/// Central difference at one entry of `leaf`, dividing by the realised float
/// step. With a replaying `pattern`, every pass stays on the linear piece of
/// the unperturbed point.
double central_difference(const std::function<Tensor()>& loss_fn, Tensor& leaf, int64_t index, KinkPattern* pattern,
                          const GradcheckOptions& opt) {
  float& v = leaf.mutable_data()[static_cast<std::size_t>(index)];
  const float orig = v;
  auto eval = [&](float target) {
    v = target;
    std::optional<KinkPatternScope> scope;
    if (pattern) {
      pattern->start_replay();
      scope.emplace(*pattern);
    }
    return static_cast<double>(loss_fn().item());
  };
  const float h = opt.step * std::max(1.0f, std::fabs(orig));
  const double f_plus = eval(orig + h);
  const double up = v;
  const double f_minus = eval(orig - h);
  const double down = v;
  v = orig;
  return (f_plus - f_minus) / (up - down);
}

GradcheckResult run_check(const std::string& name, const std::function<Tensor()>& loss_fn, std::vector<Tensor>& leaves,
                          uint64_t seed, const GradcheckOptions& opt, int64_t total_budget) {
  const auto start = std::chrono::steady_clock::now();
  for (Tensor& leaf : leaves) {
    leaf.requires_grad_(true);
    leaf.zero_grad();
  }
  Tape tape;
  Tensor loss;
  std::optional<KinkPattern> pattern;
  if (opt.freeze_kinks) pattern.emplace();
  {
    TapeScope scope(tape);
    std::optional<KinkPatternScope> record;
    if (pattern) record.emplace(*pattern);
    loss = loss_fn();
  }
  backward(loss, tape);

  // Entries to compare, as (leaf, flat index).
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int64_t>> picks(leaves.size());
  if (total_budget > 0) {
    std::vector<int64_t> offsets{0};
    for (const Tensor& leaf : leaves) offsets.push_back(offsets.back() + leaf.numel());
    const int64_t total = offsets.back();
    std::vector<int64_t> flat(static_cast<std::size_t>(total));
    std::iota(flat.begin(), flat.end(), 0);
    const int64_t n = std::min(total, total_budget);
    for (int64_t i = 0; i < n; ++i) {
      std::swap(flat[i], flat[i + uniform_index(rng, static_cast<uint64_t>(total - i))]);
      auto leaf = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat[i]) - offsets.begin() - 1);
      picks[leaf].push_back(flat[i] - offsets[leaf]);
    }
  } else {
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      const int64_t numel = leaves[l].numel();
      std::vector<int64_t> idx(static_cast<std::size_t>(numel));
      std::iota(idx.begin(), idx.end(), 0);
      const int64_t n = std::min<int64_t>(numel, opt.max_checks_per_leaf);
      for (int64_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, static_cast<uint64_t>(numel - i))]);
      idx.resize(static_cast<std::size_t>(n));
      picks[l] = std::move(idx);
    }
  }

  std::vector<double> analytic, numeric;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    if (picks[l].empty()) continue;
    const std::vector<float> g = leaves[l].has_grad() ? std::vector<float>(leaves[l].grad().begin(), leaves[l].grad().end())
                                                      : std::vector<float>(static_cast<std::size_t>(leaves[l].numel()), 0.0f);
    for (int64_t i : picks[l]) {
      analytic.push_back(g[static_cast<std::size_t>(i)]);
      numeric.push_back(central_difference(loss_fn, leaves[l], i, pattern ? &*pattern : nullptr, opt));
    }
  }
  for (Tensor& leaf : leaves) leaf.zero_grad();

  GradcheckResult r;
  r.op = name;
  r.checked = static_cast<int64_t>(analytic.size());
  r.max_error = gradient_error(analytic, numeric);
  r.passed = r.max_error <= opt.tolerance;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Weighted sum with fixed random weights, so every output element carries a
/// distinct gradient.
Tensor weighted_sum(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

/// Pushes entries within `margin` of `kink` away from it; central differences
/// are meaningless across a kink.
void avoid_kink(Tensor& t, float kink, float margin) {
  for (float& v : t.mutable_data()) {
    if (std::fabs(v - kink) < margin) v = v < kink ? kink - margin : kink + margin;
  }
}

}  // namespace

GradcheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> leaves, uint64_t seed, const GradcheckOptions& opt) {
  return run_check(name, loss_fn, leaves, seed, opt, 0);
}

std::vector<GradcheckResult> run_gradcheck_suite(uint64_t seed, const GradcheckOptions& opt) {
  std::mt19937_64 rng(seed);
  std::vector<GradcheckResult> results;
  auto randn = [&](Shape s) { return Tensor::randn(std::move(s), rng); };
  auto check = [&](const std::string& name, std::vector<Tensor> leaves, const std::function<Tensor()>& fn,
                   int64_t budget = 0) {
    results.push_back(run_check(name, fn, leaves, derive_seed(seed, name), opt, budget));
  };
  GradcheckOptions deep_opt = opt;
  deep_opt.freeze_kinks = true;
  auto check_deep = [&](const std::string& name, std::vector<Tensor> leaves, const std::function<Tensor()>& fn) {
    results.push_back(run_check(name, fn, leaves, derive_seed(seed, name), deep_opt, opt.model_param_samples));
  };

  {
    Tensor a = randn({2, 3, 4}), b = randn({4, 5}), w = randn({2, 3, 5});
    check("matmul", {a, b}, [=] { return weighted_sum(matmul(a, b), w); });
  }
  {
    Tensor a = randn({3, 4}), b = randn({3, 4}), w = randn({3, 4});
    check("add", {a, b}, [=] { return weighted_sum(add(a, b), w); });
    check("sub", {a, b}, [=] { return weighted_sum(sub(a, b), w); });
    check("mul", {a, b}, [=] { return weighted_sum(mul(a, b), w); });
    Tensor s = randn({1});
    check("mul_scalar_tensor", {a, s}, [=] { return weighted_sum(mul(a, s), w); });
    check("add_scalar", {a}, [=] { return weighted_sum(add(a, 0.75f), w); });
    check("mul_scalar", {a}, [=] { return weighted_sum(mul(a, -1.5f), w); });
  }
  {
    Tensor a = randn({3, 4}), w = randn({3, 4});
    avoid_kink(a, 0.25f, 0.05f);
    check("max_with_scalar", {a}, [=] { return weighted_sum(max_with_scalar(a, 0.25f), w); });
  }
  {
    Tensor a = randn({2, 3, 4}), w1 = randn({2, 4}), w2 = randn({3});
    check("sum", {a}, [=] { return weighted_sum(sum(a, {1}), w1); });
    check("mean", {a}, [=] { return weighted_sum(mean(a, {0, 2}), w2); });
  }
  {
    Tensor a = randn({2, 3, 4}), b = randn({2, 2, 4}), w = randn({4, 2, 4});
    check("layout", {a, b}, [=] {
      Tensor c = concat({narrow(a, 1, 1, 2), b}, 1);     // [2 x 4 x 4]
      Tensor p = permute(reshape(c, {2, 4, 2, 2}), {1, 0, 3, 2});  // [4 x 2 x 2 x 2]
      return weighted_sum(reshape(p, {4, 2, 4}), w);
    });
  }
  {
    Tensor a = randn({3, 5}), w = randn({3, 5});
    check("softmax", {a}, [=] { return weighted_sum(softmax(a), w); });
  }
  {
    Tensor x = randn({2, 3, 5, 5});
    Conv2dParams c3{randn({4, 3, 3, 3}), randn({4}), 1, 1};
    check("conv2d_3x3", {x, c3.weight, c3.bias}, [=, w = randn({2, 4, 5, 5})] { return weighted_sum(conv2d(x, c3), w); });
    Tensor x6 = randn({2, 3, 6, 6});
    Conv2dParams c2{randn({4, 3, 2, 2}), randn({4}), 2, 0};
    check("conv2d_strided", {x6, c2.weight, c2.bias},
          [=, w = randn({2, 4, 3, 3})] { return weighted_sum(conv2d(x6, c2), w); });
    Conv2dParams c1{randn({5, 3, 1, 1}), randn({5}), 1, 0};
    check("conv2d_1x1", {x, c1.weight, c1.bias}, [=, w = randn({2, 5, 5, 5})] { return weighted_sum(conv2d(x, c1), w); });
  }
  {
    Tensor x = randn({2, 3, 4, 4}), w = randn({2, 3, 4, 4});
    BatchNorm2dParams bn = BatchNorm2dParams::init(3);
    bn.gamma = randn({3});
    bn.beta = randn({3});
    check("batch_norm2d_train", {x, bn.gamma, bn.beta}, [=]() mutable { return weighted_sum(batch_norm2d(x, bn, Mode::kTrain), w); });
    BatchNorm2dParams ev = bn;
    ev.running_mean = randn({3});
    ev.running_var = Tensor::uniform({3}, 0.5f, 2.0f, rng);
    check("batch_norm2d_eval", {x, ev.gamma, ev.beta}, [=]() mutable { return weighted_sum(batch_norm2d(x, ev, Mode::kEval), w); });
  }
  {
    Tensor a = randn({4, 5}), w = randn({4, 5});
    avoid_kink(a, 0.0f, 0.05f);
    check("relu", {a}, [=] { return weighted_sum(relu(a), w); });
    Tensor b = randn({4, 5});
    check("gelu", {b}, [=] { return weighted_sum(gelu(b), w); });
    check("sigmoid", {b}, [=] { return weighted_sum(sigmoid(b), w); });
  }
  {
    Tensor x = randn({1, 2, 3, 5}), w = randn({1, 2, 7, 11});
    check("bilinear_upsample", {x}, [=] { return weighted_sum(bilinear_upsample(x, 7, 11), w); });
  }
  {
    Tensor a = randn({2, 2, 3, 3}), b = randn({2, 3, 3, 3}), w = randn({2, 5, 3, 3});
    check("concat_channels", {a, b}, [=] { return weighted_sum(concat_channels({a, b}), w); });
  }
  {
    Tensor x = randn({3, 6}), g = randn({6}), b = randn({6}), w = randn({3, 6});
    check("layer_norm", {x, g, b}, [=] { return weighted_sum(layer_norm(x, g, b, 1e-6f), w); });
  }
  {
    Tensor x = randn({2, 3, 4}), wt = randn({5, 4}), b = randn({5}), w = randn({2, 3, 5});
    check("linear", {x, wt, b}, [=] { return weighted_sum(linear(x, wt, b), w); });
  }
  {
    // Away from 0 and 1, where log curvature would swamp the difference quotient.
    Tensor p = Tensor::uniform({2, 1, 4, 4}, 0.15f, 0.85f, rng);
    Tensor y({2, 1, 4, 4});
    for (float& v : y.mutable_data()) v = uniform01(rng) < 0.5 ? 0.0f : 1.0f;
    check("bce_loss", {p}, [=] { return bce_loss(p, y); });
    check("dice_loss", {p}, [=] { return dice_loss(p, y); });
    check("combined_loss", {p}, [=] { return combined_loss(p, y); });
  }
  {
    StageConfig cfg{8, 1, 2, 2, 2, 2};
    Tensor img = randn({2, 3, 8, 8});
    PatchEmbedParams pe{Conv2dParams::init(3, 8, 2, 2, 0, rng), LayerNormParams::init(8)};
    pe.norm.gamma = randn({8});
    check("patch_embed", {img, pe.proj.weight, pe.proj.bias, pe.norm.gamma},
          [=, w = randn({2, 16, 8})] { return weighted_sum(patch_embed(img, cfg, pe).tokens, w); });

    EncoderParams enc = EncoderParams::init({cfg, StageConfig{8, 1, 1, 1, 2, 2}, StageConfig{8, 1, 1, 1, 2, 2}}, 3, rng);
    const BlockParams& block = enc.stages[0].blocks[0];
    const AttentionParams& attn = block.attn;
    Tensor tokens = randn({2, 16, 8}), w = randn({2, 16, 8});
    check("sra_attention",
          {tokens, attn.q.weight, attn.k.weight, attn.v.weight, attn.proj.weight, attn.proj.bias, attn.sr.weight,
           attn.sr_norm.gamma},
          [=] { return weighted_sum(sra_attention(tokens, 4, 4, cfg, attn), w); });
    check("transformer_block", {tokens, block.norm1.gamma, block.fc1.weight, block.fc2.weight, block.fc2.bias},
          [=] { return weighted_sum(transformer_block(tokens, 4, 4, cfg, block), w); });
  }
  {
    ModelConfig tiny = ModelConfig::tiny();
    EncoderParams enc = EncoderParams::init(tiny.encoder, 3, rng);
    Tensor x = randn({1, 3, 32, 32});
    Tensor w1 = randn({1, 8, 8, 8}), w2 = randn({1, 16, 4, 4}), w3 = randn({1, 32, 2, 2});
    ParamSet set;
    enc.collect("encoder", set);
    std::vector<Tensor> leaves{x};
    for (const auto& nt : set.params) leaves.push_back(nt.tensor);
    check(
        "encoder", leaves,
        [=] {
          EncoderOutput out = encoder_forward(x, tiny.encoder, enc);
          return add(add(weighted_sum(out.e1, w1), weighted_sum(out.e2, w2)), weighted_sum(out.e3, w3));
        },
        opt.model_param_samples);
  }
  {
    Tensor x = randn({2, 4, 6, 6}), w = randn({2, 6, 6, 6});
    ResidualBlockParams rb = ResidualBlockParams::init(4, 6, 3, rng);
    ParamSet set;
    rb.collect("rb", set);
    std::vector<Tensor> leaves{x};
    for (const auto& nt : set.params) leaves.push_back(nt.tensor);
    check_deep("residual_block", leaves, [=]() mutable { return weighted_sum(residual_block(x, rb, Mode::kTrain), w); });
  }
  {
    auto model = std::make_shared<TransRUPNet>(ModelConfig::tiny(), derive_seed(seed, "model"));
    Tensor x = Tensor::uniform({2, 3, 32, 32}, 0.0f, 1.0f, rng), w = randn({2, 1, 32, 32});
    std::vector<Tensor> leaves;
    for (const auto& nt : model->param_set().params) leaves.push_back(nt.tensor);
    check_deep("model", leaves, [=] { return weighted_sum(model->forward(x, Mode::kTrain), w); });
  }
  return results;
}

}  // namespace trup
