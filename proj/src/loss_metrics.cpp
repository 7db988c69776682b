#include "trup/loss_metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>


namespace trup {

using detail::make_result;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bce_loss");
  auto p = pred.data();
  auto y = target.data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), double{kBceClamp}, 1.0 - kBceClamp);
    total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
  }
  return make_result("bce_loss", {}, {static_cast<float>(total / n)}, {pred, target},
                     [pred, target, n](std::span<const float> g, std::span<std::vector<float>* const> pg) {
                       auto p = pred.data();
                       auto y = target.data();
                       for (std::size_t i = 0; i < p.size(); ++i) {
                         const double pi = p[i];
                         const double dldp = (pi < kBceClamp || pi > 1.0 - kBceClamp)
                                                 ? 0.0
                                                 : (-y[i] / pi + (1.0 - y[i]) / (1.0 - pi));
                         const double dldy = -std::log(std::clamp(pi, double{kBceClamp}, 1.0 - kBceClamp)) +
                                             std::log(1.0 - std::clamp(pi, double{kBceClamp}, 1.0 - kBceClamp));
                         if (pg[0]) (*pg[0])[i] += static_cast<float>(g[0] * dldp / n);
                         if (pg[1]) (*pg[1])[i] += static_cast<float>(g[0] * dldy / n);
                       }
                     });
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth) {
  require_same_shape(pred, target, "dice_loss");
  const int64_t images = pred.rank() <= 1 ? 1 : pred.dim(0);
  const int64_t per = pred.numel() / images;
  auto p = pred.data();
  auto y = target.data();
  struct Sums {
    double inter, denom;
  };
  auto sums = std::make_shared<std::vector<Sums>>(images);
  double total = 0.0;
  for (int64_t b = 0; b < images; ++b) {
    double inter = 0.0, ps = 0.0, ys = 0.0;
    for (int64_t i = b * per; i < (b + 1) * per; ++i) {
      inter += static_cast<double>(p[i]) * y[i];
      ps += p[i];
      ys += y[i];
    }
    const double denom = ps + ys + smooth;
    (*sums)[b] = {inter, denom};
    // Empty prediction and target with no smoothing: perfect agreement.
    total += denom > 0.0 ? 1.0 - (2.0 * inter + smooth) / denom : 0.0;
  }
  return make_result("dice_loss", {}, {static_cast<float>(total / static_cast<double>(images))}, {pred, target},
                     [pred, target, sums, images, per, smooth](std::span<const float> g,
                                                              std::span<std::vector<float>* const> pg) {
                       auto p = pred.data();
                       auto y = target.data();
                       const double scale = g[0] / static_cast<double>(images);
                       for (int64_t b = 0; b < images; ++b) {
                         const auto [inter, denom] = (*sums)[b];
                         if (!(denom > 0.0)) continue;
                         const double num = 2.0 * inter + smooth;
                         const double d2 = denom * denom;
                         for (int64_t i = b * per; i < (b + 1) * per; ++i) {
                           // d/dp of -(2I + s)/D, with dI/dp = y, dD/dp = 1 (and symmetrically for y).
                           if (pg[0]) (*pg[0])[i] += static_cast<float>(scale * -(2.0 * y[i] * denom - num) / d2);
                           if (pg[1]) (*pg[1])[i] += static_cast<float>(scale * -(2.0 * p[i] * denom - num) / d2);
                         }
                       }
                     });
}

Tensor combined_loss(const Tensor& pred, const Tensor& target) {
  return add(bce_loss(pred, target), dice_loss(pred, target));
}

ConfusionCounts binary_counts(const Tensor& pred_mask, const Tensor& gt_mask) {
  require_same_shape(pred_mask, gt_mask, "binary_counts");
  auto p = pred_mask.data();
  auto g = gt_mask.data();
  ConfusionCounts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float pv = p[i], gv = g[i];
    if ((pv != 0.0f && pv != 1.0f) || (gv != 0.0f && gv != 1.0f)) {
      throw ContractError("binary_counts: masks must contain only 0 and 1");
    }
    if (pv == 1.0f) {
      ++(gv == 1.0f ? c.tp : c.fp);
    } else {
      ++(gv == 1.0f ? c.fn : c.tn);
    }
  }
  return c;
}

SegmentationScores metrics_from_counts(int64_t tp, int64_t fp, int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw ContractError("metrics_from_counts: negative count");
  const double t = static_cast<double>(tp), f_p = static_cast<double>(fp), f_n = static_cast<double>(fn);
  const double e = kMetricEps;
  SegmentationScores s;
  s.dice = (2.0 * t + e) / (2.0 * t + f_p + f_n + e);
  s.iou = (t + e) / (t + f_p + f_n + e);
  s.recall = (t + e) / (t + f_n + e);
  s.precision = (t + e) / (t + f_p + e);
  s.f2 = (5.0 * s.precision * s.recall + e) / (4.0 * s.precision + s.recall + e);
  return s;
}

MetricReport evaluate_masks(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                            std::vector<std::string> ids) {
  if (preds.empty()) throw ContractError("evaluate: empty dataset");
  if (preds.size() != gts.size()) throw ContractError("evaluate: prediction and ground-truth counts differ");
  if (ids.empty()) {
    for (std::size_t i = 0; i < preds.size(); ++i) ids.push_back(std::to_string(i));
  }
  if (ids.size() != preds.size()) throw ContractError("evaluate: id count differs from image count");
  MetricReport r;
  r.ids = std::move(ids);
  r.n_images = preds.size();
  for (std::size_t i = 0; i < preds.size(); ++i) r.per_image.push_back(metrics_from_counts(binary_counts(preds[i], gts[i])));
  // Fixed-order accumulation keeps aggregates reproducible.
  SegmentationScores sum;
  for (const auto& s : r.per_image) {
    sum.dice += s.dice;
    sum.iou += s.iou;
    sum.recall += s.recall;
    sum.precision += s.precision;
    sum.f2 += s.f2;
  }
  const double n = static_cast<double>(r.n_images);
  r.aggregate = {sum.dice / n, sum.iou / n, sum.recall / n, sum.precision / n, sum.f2 / n};
  return r;
}

MetricReport evaluate_dataset(TransRUPNet& model, const std::vector<Sample>& dataset, float threshold) {
  if (dataset.empty()) throw ContractError("evaluate_dataset: empty dataset");
  std::vector<Tensor> preds, gts;
  std::vector<std::string> ids;
  for (const Sample& s : dataset) {
    Shape batch_shape = s.image.shape();
    batch_shape.insert(batch_shape.begin(), 1);
    Tensor mask = model.predict_mask(reshape(s.image, batch_shape), threshold);
    preds.push_back(reshape(mask, s.mask.shape()));
    gts.push_back(s.mask);
    ids.push_back(s.id);
  }
  return evaluate_masks(preds, gts, std::move(ids));
}

void write_report_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  auto row = [&](const std::string& name, const SegmentationScores& s) {
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f\n", s.dice, s.iou, s.recall, s.precision, s.f2);
    os << name << buf;
  };
  os << "image,dice,iou,recall,precision,f2\n";
  for (std::size_t i = 0; i < report.per_image.size(); ++i) row(report.ids[i], report.per_image[i]);
  row("AGGREGATE", report.aggregate);
}

// ---- throughput ---------------------------------------------------------------

double FpsStats::percentile_ms(double q) const {
  if (per_frame_ms.empty()) return 0.0;
  std::vector<double> sorted = per_frame_ms;
  std::sort(sorted.begin(), sorted.end());
  const double rank = std::ceil(q / 100.0 * static_cast<double>(sorted.size()));
  const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(sorted.size()))) - 1;
  return sorted[idx];
}

Clock monotonic_clock() {
  return [] {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
  };
}

FpsStats measure_fps(const std::function<void(const Tensor&)>& forward_fn, const Shape& input_shape, int n_warmup,
                     int n_timed, const Clock& clock) {
  if (n_timed < 1) throw ContractError("measure_fps: n_timed must be >= 1");
  if (n_warmup < 0) throw ContractError("measure_fps: n_warmup must be >= 0");
  if (input_shape.empty() || input_shape[0] != 1) throw ContractError("measure_fps: input must have batch size 1");
  std::mt19937_64 rng(0);
  const Tensor input = Tensor::uniform(input_shape, 0.0f, 1.0f, rng);
  for (int i = 0; i < n_warmup; ++i) forward_fn(input);

  FpsStats stats;
  stats.n_frames = n_timed;
  stats.per_frame_ms.reserve(n_timed);
  const double start = clock();
  double prev = start;
  for (int i = 0; i < n_timed; ++i) {
    forward_fn(input);
    const double now = clock();
    if (now < prev) throw ContractError("measure_fps: clock went backwards");
    stats.per_frame_ms.push_back((now - prev) * 1e3);
    prev = now;
  }
  stats.total_seconds = prev - start;
  if (!(stats.total_seconds > 0.0)) throw ContractError("measure_fps: clock did not advance");
  stats.fps = static_cast<double>(n_timed) / stats.total_seconds;
  return stats;
}

void write_fps_stats(const std::filesystem::path& path, const FpsStats& stats) {
  auto fmt = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  write_key_values(path, {{"n_frames", std::to_string(stats.n_frames)},
                          {"total_seconds", fmt(stats.total_seconds)},
                          {"fps", fmt(stats.fps)},
                          {"p50_ms", fmt(stats.percentile_ms(50))},
                          {"p95_ms", fmt(stats.percentile_ms(95))}});
}

}  // namespace trup
