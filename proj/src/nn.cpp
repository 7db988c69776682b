#include "trup/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <memory>

#include "trup/random.hpp"

namespace trup {

using detail::make_result;

// ---- parameter records --------------------------------------------------------

Conv2dParams Conv2dParams::init(int c_in, int c_out, int kernel, int stride, int padding, std::mt19937_64& rng) {
  if (c_in < 1 || c_out < 1 || kernel < 1 || stride < 1 || padding < 0) {
    throw ContractError("conv2d: invalid layer geometry");
  }
  const float bound = 1.0f / std::sqrt(static_cast<float>(c_in * kernel * kernel));
  Conv2dParams p;
  p.weight = Tensor::uniform({c_out, c_in, kernel, kernel}, -bound, bound, rng);
  p.bias = Tensor::zeros({c_out});
  p.stride = stride;
  p.padding = padding;
  return p;
}

void Conv2dParams::collect(const std::string& prefix, ParamSet& out) const {
  out.params.push_back({prefix + ".weight", weight});
  out.params.push_back({prefix + ".bias", bias});
}

BatchNorm2dParams BatchNorm2dParams::init(int channels) {
  BatchNorm2dParams p;
  p.gamma = Tensor::ones({channels});
  p.beta = Tensor::zeros({channels});
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::ones({channels});
  return p;
}

void BatchNorm2dParams::collect(const std::string& prefix, ParamSet& out) const {
  out.params.push_back({prefix + ".gamma", gamma});
  out.params.push_back({prefix + ".beta", beta});
  out.buffers.push_back({prefix + ".running_mean", running_mean});
  out.buffers.push_back({prefix + ".running_var", running_var});
}

LinearParams LinearParams::init(int d_in, int d_out, std::mt19937_64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(d_in));
  return {Tensor::uniform({d_out, d_in}, -bound, bound, rng), Tensor::zeros({d_out})};
}

void LinearParams::collect(const std::string& prefix, ParamSet& out) const {
  out.params.push_back({prefix + ".weight", weight});
  out.params.push_back({prefix + ".bias", bias});
}

LayerNormParams LayerNormParams::init(int dim) { return {Tensor::ones({dim}), Tensor::zeros({dim})}; }

void LayerNormParams::collect(const std::string& prefix, ParamSet& out) const {
  out.params.push_back({prefix + ".gamma", gamma});
  out.params.push_back({prefix + ".beta", beta});
}

// ---- conv2d -------------------------------------------------------------------

namespace {

struct ConvGeometry {
  int64_t batch, c_in, h, w, c_out, k, stride, pad, out_h, out_w;

  int64_t col_rows() const { return c_in * k * k; }
  bool is_pointwise() const { return k == 1 && stride == 1 && pad == 0; }
  /// Output rows per im2col tile, keeping the column buffer around 16 MB.
  int64_t tile_rows() const {
    const int64_t budget = int64_t{1} << 22;
    return std::clamp<int64_t>(budget / std::max<int64_t>(1, col_rows() * out_w), 1, out_h);
  }
};

// col[(c*k + ki)*k + kj][(oy - r0)*out_w + ox] = x[c][oy*s - p + ki][ox*s - p + kj]
void im2col(const ConvGeometry& g, const float* x, int64_t r0, int64_t r1, float* col) {
  const int64_t n = (r1 - r0) * g.out_w;
  for (int64_t c = 0; c < g.c_in; ++c) {
    const float* plane = x + c * g.h * g.w;
    for (int64_t ki = 0; ki < g.k; ++ki) {
      for (int64_t kj = 0; kj < g.k; ++kj) {
        float* dst = col + ((c * g.k + ki) * g.k + kj) * n;
        // Output columns whose source lies inside the row: [lo, hi).
        const int64_t off = kj - g.pad;
        const int64_t lo = std::clamp<int64_t>((-off + g.stride - 1) / g.stride, 0, g.out_w);
        const int64_t last = g.w - 1 - off;
        const int64_t hi = last < 0 ? lo : std::clamp<int64_t>(last / g.stride + 1, lo, g.out_w);
        for (int64_t oy = r0; oy < r1; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          float* row = dst + (oy - r0) * g.out_w;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(row, g.out_w, 0.0f);
            continue;
          }
          const float* src = plane + iy * g.w + off;
          std::fill_n(row, lo, 0.0f);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, row + lo);
          } else {
            for (int64_t ox = lo; ox < hi; ++ox) row[ox] = src[ox * g.stride];
          }
          std::fill(row + hi, row + g.out_w, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, int64_t r0, int64_t r1, float* dx) {
  const int64_t n = (r1 - r0) * g.out_w;
  for (int64_t c = 0; c < g.c_in; ++c) {
    float* plane = dx + c * g.h * g.w;
    for (int64_t ki = 0; ki < g.k; ++ki) {
      for (int64_t kj = 0; kj < g.k; ++kj) {
        const float* src = col + ((c * g.k + ki) * g.k + kj) * n;
        for (int64_t oy = r0; oy < r1; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const float* row = src + (oy - r0) * g.out_w;
          float* dst = plane + iy * g.w;
          for (int64_t ox = 0; ox < g.out_w; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) throw ShapeError("conv2d: expected B x C x H x W input, got " + shape_str(x.shape()));
  if (p.weight.rank() != 4 || p.weight.dim(2) != p.weight.dim(3)) throw ShapeError("conv2d: weight must be square");
  if (x.dim(1) != p.weight.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(p.weight.dim(1)));
  }
  if (p.bias.shape() != Shape{p.weight.dim(0)}) throw ShapeError("conv2d: bias shape mismatch");
  if (p.stride < 1 || p.padding < 0) throw ContractError("conv2d: invalid stride/padding");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), p.weight.dim(0), p.weight.dim(2), p.stride, p.padding, 0, 0};
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) throw ShapeError("conv2d: kernel larger than padded input");
  g.out_h = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.out_w = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const int64_t in_plane = g.c_in * g.h * g.w;
  const int64_t out_plane = g.out_h * g.out_w;
  const int64_t krows = g.col_rows();
  const int64_t tile = g.tile_rows();
  std::vector<float> out(static_cast<std::size_t>(g.batch * g.c_out * out_plane));
  // Scratch is fully overwritten by im2col, so skip zero-initialisation.
  auto col = std::make_unique_for_overwrite<float[]>(g.is_pointwise() ? 0 : static_cast<std::size_t>(krows * tile * g.out_w));
  const float* xd = x.data().data();
  const float* wd = p.weight.data().data();
  auto bd = p.bias.data();

  for (int64_t b = 0; b < g.batch; ++b) {
    float* ob = out.data() + b * g.c_out * out_plane;
    for (int64_t co = 0; co < g.c_out; ++co) std::fill_n(ob + co * out_plane, out_plane, bd[co]);
    for (int64_t r0 = 0; r0 < g.out_h; r0 += tile) {
      const int64_t r1 = std::min(g.out_h, r0 + tile);
      const int n = static_cast<int>((r1 - r0) * g.out_w);
      const float* src;
      int ldb;
      if (g.is_pointwise()) {
        src = xd + b * in_plane + r0 * g.w;
        ldb = static_cast<int>(g.h * g.w);
      } else {
        im2col(g, xd + b * in_plane, r0, r1, col.get());
        src = col.get();
        ldb = n;
      }
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(g.c_out), n, static_cast<int>(krows),
                  1.0f, wd, static_cast<int>(krows), src, ldb, 1.0f, ob + r0 * g.out_w, static_cast<int>(out_plane));
    }
  }

  Tensor weight = p.weight;
  Tensor bias = p.bias;
  return make_result(
      "conv2d", {g.batch, g.c_out, g.out_h, g.out_w}, std::move(out), {x, weight, bias},
      [x, weight, g](std::span<const float> grad, std::span<std::vector<float>* const> pg) {
        const int64_t in_plane = g.c_in * g.h * g.w;
        const int64_t out_plane = g.out_h * g.out_w;
        const int64_t krows = g.col_rows();
        const int64_t tile = g.tile_rows();
        const float* xd = x.data().data();
        const float* wd = weight.data().data();
        std::unique_ptr<float[]> col, dcol;
        if (!g.is_pointwise()) {
          const auto size = static_cast<std::size_t>(krows * tile * g.out_w);
          if (pg[1]) col = std::make_unique_for_overwrite<float[]>(size);
          if (pg[0]) dcol = std::make_unique_for_overwrite<float[]>(size);
        }
        for (int64_t b = 0; b < g.batch; ++b) {
          const float* gb = grad.data() + b * g.c_out * out_plane;
          if (pg[2]) {
            auto& gbias = *pg[2];
            for (int64_t co = 0; co < g.c_out; ++co) {
              double s = 0.0;
              for (int64_t i = 0; i < out_plane; ++i) s += gb[co * out_plane + i];
              gbias[co] += static_cast<float>(s);
            }
          }
          for (int64_t r0 = 0; r0 < g.out_h; r0 += tile) {
            const int64_t r1 = std::min(g.out_h, r0 + tile);
            const int n = static_cast<int>((r1 - r0) * g.out_w);
            const float* gt = gb + r0 * g.out_w;
            if (pg[1]) {
              const float* src;
              int lds;
              if (g.is_pointwise()) {
                src = xd + b * in_plane + r0 * g.w;
                lds = static_cast<int>(g.h * g.w);
              } else {
                im2col(g, xd + b * in_plane, r0, r1, col.get());
                src = col.get();
                lds = n;
              }
              cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(g.c_out), static_cast<int>(krows), n,
                          1.0f, gt, static_cast<int>(out_plane), src, lds, 1.0f, pg[1]->data(),
                          static_cast<int>(krows));
            }
            if (pg[0]) {
              float* dx = pg[0]->data() + b * in_plane;
              if (g.is_pointwise()) {
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(krows), n,
                            static_cast<int>(g.c_out), 1.0f, wd, static_cast<int>(krows), gt,
                            static_cast<int>(out_plane), 1.0f, dx + r0 * g.w, static_cast<int>(g.h * g.w));
              } else {
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(krows), n,
                            static_cast<int>(g.c_out), 1.0f, wd, static_cast<int>(krows), gt,
                            static_cast<int>(out_plane), 0.0f, dcol.get(), n);
                col2im_add(g, dcol.get(), r0, r1, dx);
              }
            }
          }
        }
      });
}

// ---- batch norm ---------------------------------------------------------------

Tensor batch_norm2d(const Tensor& x, BatchNorm2dParams& p, Mode mode) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d: expected B x C x H x W input, got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (p.gamma.shape() != Shape{channels}) throw ShapeError("batch_norm2d: channel count mismatch");
  const int64_t count = batch * plane;
  if (mode == Mode::kTrain && count < 2) {
    throw ContractError("batch_norm2d: train mode needs at least 2 values per channel");
  }
  auto xd = x.data();
  auto gamma = p.gamma.data();
  auto beta = p.beta.data();
  auto xhat = std::make_shared<std::vector<float>>(xd.size());
  auto inv_std = std::make_shared<std::vector<float>>(channels);
  std::vector<float> out(xd.size());

  for (int64_t c = 0; c < channels; ++c) {
    double mu, var;
    if (mode == Mode::kTrain) {
      double s = 0.0, ss = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const float* src = xd.data() + (b * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) s += src[i];
      }
      mu = s / static_cast<double>(count);
      for (int64_t b = 0; b < batch; ++b) {
        const float* src = xd.data() + (b * channels + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = src[i] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(count);
      auto rm = p.running_mean.mutable_data();
      auto rv = p.running_var.mutable_data();
      rm[c] = static_cast<float>((1.0 - p.momentum) * rm[c] + p.momentum * mu);
      rv[c] = static_cast<float>((1.0 - p.momentum) * rv[c] + p.momentum * var);
    } else {
      mu = p.running_mean.data()[c];
      var = p.running_var.data()[c];
    }
    const double istd = 1.0 / std::sqrt(var + p.eps);
    (*inv_std)[c] = static_cast<float>(istd);
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t off = (b * channels + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const float xh = static_cast<float>((xd[off + i] - mu) * istd);
        (*xhat)[off + i] = xh;
        out[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }

  const bool train = mode == Mode::kTrain;
  Tensor g_param = p.gamma;
  return make_result(
      "batch_norm2d", x.shape(), std::move(out), {x, p.gamma, p.beta},
      [g_param, xhat, inv_std, batch, channels, plane, train](std::span<const float> g,
                                                             std::span<std::vector<float>* const> pg) {
        auto gamma = g_param.data();
        const double n = static_cast<double>(batch * plane);
        for (int64_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t off = (b * channels + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
            }
          }
          if (pg[1]) (*pg[1])[c] += static_cast<float>(sum_gx);
          if (pg[2]) (*pg[2])[c] += static_cast<float>(sum_g);
          if (!pg[0]) continue;
          auto& dx = *pg[0];
          const double scale = static_cast<double>(gamma[c]) * (*inv_std)[c];
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t off = (b * channels + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              double d = g[off + i];
              if (train) d -= (sum_g + (*xhat)[off + i] * sum_gx) / n;
              dx[off + i] += static_cast<float>(scale * d);
            }
          }
        }
      });
}

// ---- activations --------------------------------------------------------------

namespace {

constexpr float kGeluC = 0.7978845608f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
constexpr float kSigmoidMax = 1.0f - 0x1.0p-24f;  // largest float below 1

float sigmoid_scalar(float v) {
  float y;
  if (v >= 0.0f) {
    y = 1.0f / (1.0f + std::exp(-v));
  } else {
    const float e = std::exp(v);
    y = e / (1.0f + e);
  }
  return std::clamp(y, FLT_MIN, kSigmoidMax);
}

}  // namespace

Tensor activation(Activation kind, const Tensor& x) {
  auto xd = x.data();
  std::vector<float> out(xd.size());
  const char* name = "relu";
  switch (kind) {
    case Activation::kRelu:
      if (KinkPattern* pattern = active_kink_pattern()) {
        for (std::size_t i = 0; i < xd.size(); ++i) out[i] = pattern->side(xd[i] > 0.0f) ? xd[i] : 0.0f;
      } else {
        for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
      }
      break;
    case Activation::kGelu:
      name = "gelu";
      for (std::size_t i = 0; i < xd.size(); ++i) {
        const float v = xd[i];
        out[i] = 0.5f * v * (1.0f + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
      }
      break;
    case Activation::kSigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < xd.size(); ++i) out[i] = sigmoid_scalar(xd[i]);
      break;
  }
  std::shared_ptr<std::vector<float>> y;
  if (kind == Activation::kSigmoid) y = std::make_shared<std::vector<float>>(out);
  return make_result(name, x.shape(), std::move(out), {x},
                     [x, y, kind](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto xd = x.data();
                       auto& gx = *pg[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         float d = 0.0f;
                         switch (kind) {
                           case Activation::kRelu:
                             d = xd[i] > 0.0f ? 1.0f : 0.0f;
                             break;
                           case Activation::kGelu: {
                             const float v = xd[i];
                             const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                             d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
                             break;
                           }
                           case Activation::kSigmoid:
                             d = (*y)[i] * (1.0f - (*y)[i]);
                             break;
                         }
                         gx[i] += g[i] * d;
                       }
                     });
}

// ---- bilinear -----------------------------------------------------------------

namespace {

struct AxisTaps {
  std::vector<int64_t> lo, hi;
  std::vector<float> frac;
};

AxisTaps axis_taps(int64_t in, int64_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<int64_t>(std::floor(src));
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<float>(src - static_cast<double>(lo));
  }
  return t;
}

void interpolate_plane(const AxisTaps& ty, const AxisTaps& tx, const float* in, int64_t w, float* out) {
  const auto oh = static_cast<int64_t>(ty.lo.size());
  const auto ow = static_cast<int64_t>(tx.lo.size());
  for (int64_t i = 0; i < oh; ++i) {
    const float* r0 = in + ty.lo[i] * w;
    const float* r1 = in + ty.hi[i] * w;
    const float fy = ty.frac[i];
    for (int64_t j = 0; j < ow; ++j) {
      const float fx = tx.frac[j];
      const float top = r0[tx.lo[j]] * (1.0f - fx) + r0[tx.hi[j]] * fx;
      const float bot = r1[tx.lo[j]] * (1.0f - fx) + r1[tx.hi[j]] * fx;
      out[i * ow + j] = top * (1.0f - fy) + bot * fy;
    }
  }
}

}  // namespace

void resize_bilinear_plane(const float* in, int64_t h, int64_t w, float* out, int64_t out_h, int64_t out_w) {
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1) throw ShapeError("resize: zero-sized plane");
  interpolate_plane(axis_taps(h, out_h), axis_taps(w, out_w), in, w, out);
}

Tensor bilinear_upsample(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 4) throw ShapeError("bilinear_upsample: expected B x C x H x W input, got " + shape_str(x.shape()));
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: output dims must be positive");
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w) throw ContractError("bilinear_upsample: output smaller than input");
  auto ty = std::make_shared<AxisTaps>(axis_taps(h, out_h));
  auto tx = std::make_shared<AxisTaps>(axis_taps(w, out_w));
  auto xd = x.data();
  std::vector<float> out(static_cast<std::size_t>(planes * out_h * out_w));
  for (int64_t p = 0; p < planes; ++p) interpolate_plane(*ty, *tx, xd.data() + p * h * w, w, out.data() + p * out_h * out_w);
  return make_result("bilinear_upsample", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                     [ty, tx, planes, h, w, out_h, out_w](std::span<const float> g,
                                                          std::span<std::vector<float>* const> pg) {
                       auto& gx = *pg[0];
                       for (int64_t p = 0; p < planes; ++p) {
                         float* dst = gx.data() + p * h * w;
                         const float* gp = g.data() + p * out_h * out_w;
                         for (int64_t i = 0; i < out_h; ++i) {
                           const float fy = ty->frac[i];
                           float* r0 = dst + ty->lo[i] * w;
                           float* r1 = dst + ty->hi[i] * w;
                           for (int64_t j = 0; j < out_w; ++j) {
                             const float fx = tx->frac[j];
                             const float v = gp[i * out_w + j];
                             r0[tx->lo[j]] += v * (1.0f - fy) * (1.0f - fx);
                             r0[tx->hi[j]] += v * (1.0f - fy) * fx;
                             r1[tx->lo[j]] += v * fy * (1.0f - fx);
                             r1[tx->hi[j]] += v * fy * fx;
                           }
                         }
                       }
                     });
}

// ---- channels -----------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) {
    if (x.rank() != 4) throw ShapeError("concat_channels: inputs must be B x C x H x W");
    if (x.dim(0) != xs[0].dim(0) || x.dim(2) != xs[0].dim(2) || x.dim(3) != xs[0].dim(3)) {
      throw ShapeError("concat_channels: " + shape_str(x.shape()) + " does not match " + shape_str(xs[0].shape()));
    }
  }
  if (xs.size() == 1) return xs[0];
  return concat(xs, 1);
}

Tensor slice_channels(const Tensor& x, int64_t start, int64_t count) {
  if (x.rank() != 4) throw ShapeError("slice_channels: input must be B x C x H x W");
  return narrow(x, 1, start, count);
}

// ---- layer norm / linear ------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const int64_t d = x.dim(-1);
  if (d < 2) throw ContractError("layer_norm: normalised axis must have at least 2 elements");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layer_norm: gamma/beta shape mismatch");
  const int64_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<float>>(xd.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  std::vector<float> out(xd.size());
  for (int64_t r = 0; r < rows; ++r) {
    const float* src = xd.data() + r * d;
    double s = 0.0, ss = 0.0;
    for (int64_t i = 0; i < d; ++i) s += src[i];
    const double mu = s / static_cast<double>(d);
    for (int64_t i = 0; i < d; ++i) ss += (src[i] - mu) * (src[i] - mu);
    const double istd = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    (*inv_std)[r] = static_cast<float>(istd);
    for (int64_t i = 0; i < d; ++i) {
      const float xh = static_cast<float>((src[i] - mu) * istd);
      (*xhat)[r * d + i] = xh;
      out[r * d + i] = gd[i] * xh + bd[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [gamma, xhat, inv_std, rows, d](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto gd = gamma.data();
                       std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
                       for (int64_t r = 0; r < rows; ++r) {
                         const float* gr = g.data() + r * d;
                         const float* xh = xhat->data() + r * d;
                         double sum_dy = 0.0, sum_dyx = 0.0;
                         for (int64_t i = 0; i < d; ++i) {
                           dgamma[i] += static_cast<double>(gr[i]) * xh[i];
                           dbeta[i] += gr[i];
                           const double dy = static_cast<double>(gr[i]) * gd[i];
                           sum_dy += dy;
                           sum_dyx += dy * xh[i];
                         }
                         if (!pg[0]) continue;
                         float* dx = pg[0]->data() + r * d;
                         const double istd = (*inv_std)[r];
                         for (int64_t i = 0; i < d; ++i) {
                           const double dy = static_cast<double>(gr[i]) * gd[i];
                           dx[i] += static_cast<float>(istd * (dy - (sum_dy + xh[i] * sum_dyx) / static_cast<double>(d)));
                         }
                       }
                       for (int64_t i = 0; i < d; ++i) {
                         if (pg[1]) (*pg[1])[i] += static_cast<float>(dgamma[i]);
                         if (pg[2]) (*pg[2])[i] += static_cast<float>(dbeta[i]);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 1 || weight.rank() != 2) throw ShapeError("linear: bad operand ranks");
  const int64_t d_in = x.dim(-1), d_out = weight.dim(0);
  if (weight.dim(1) != d_in) {
    throw ShapeError("linear: input dim " + std::to_string(d_in) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.shape() != Shape{d_out}) throw ShapeError("linear: bias shape mismatch");
  const int64_t rows = x.numel() / d_in;
  std::vector<float> out(static_cast<std::size_t>(rows * d_out));
  auto bd = bias.data();
  for (int64_t r = 0; r < rows; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * d_out);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(rows), static_cast<int>(d_out),
              static_cast<int>(d_in), 1.0f, x.data().data(), static_cast<int>(d_in), weight.data().data(),
              static_cast<int>(d_in), 1.0f, out.data(), static_cast<int>(d_out));
  Shape shape = x.shape();
  shape.back() = d_out;
  return make_result("linear", std::move(shape), std::move(out), {x, weight, bias},
                     [x, weight, rows, d_in, d_out](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       const int m = static_cast<int>(rows), k = static_cast<int>(d_in), n = static_cast<int>(d_out);
                       if (pg[0]) {
                         cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, k, n, 1.0f, g.data(), n,
                                     weight.data().data(), k, 1.0f, pg[0]->data(), k);
                       }
                       if (pg[1]) {
                         cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, k, m, 1.0f, g.data(), n,
                                     x.data().data(), k, 1.0f, pg[1]->data(), k);
                       }
                       if (pg[2]) {
                         for (int64_t c = 0; c < d_out; ++c) {
                           double s = 0.0;
                           for (int64_t r = 0; r < rows; ++r) s += g[r * d_out + c];
                           (*pg[2])[c] += static_cast<float>(s);
                         }
                       }
                     });
}

}  // namespace trup
