#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "trup/data.hpp"
#include "trup/model.hpp"
#include "trup/tensor.hpp"

namespace trup {

inline constexpr float kBceClamp = 1e-7f;
inline constexpr double kMetricEps = 1e-7;

// ---- training loss ------------------------------------------------------------

/// Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& pred, const Tensor& target);

/// Soft dice loss 1 - (2 sum(p y) + smooth) / (sum p + sum y + smooth),
/// computed per image (leading axis) and averaged. Rank <= 1 inputs are a
/// single image.
Tensor dice_loss(const Tensor& pred, const Tensor& target, float smooth = 1.0f);

/// bce_loss + dice_loss with unit weights.
Tensor combined_loss(const Tensor& pred, const Tensor& target);

// ---- evaluation metrics -------------------------------------------------------

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Pixelwise confusion counts of two {0,1} masks of the same shape.
ConfusionCounts binary_counts(const Tensor& pred_mask, const Tensor& gt_mask);

struct SegmentationScores {
  double dice = 0, iou = 0, recall = 0, precision = 0, f2 = 0;
};

/// Epsilon-guarded scores; an image with no positives in either mask scores
/// 1 on every metric.
SegmentationScores metrics_from_counts(int64_t tp, int64_t fp, int64_t fn);
inline SegmentationScores metrics_from_counts(const ConfusionCounts& c) { return metrics_from_counts(c.tp, c.fp, c.fn); }

struct MetricReport {
  std::vector<std::string> ids;
  std::vector<SegmentationScores> per_image;
  SegmentationScores aggregate;  // arithmetic means: mDSC, mIoU, recall, precision, F2
  std::size_t n_images = 0;
};

/// Per-image scores for paired masks, then their means.
MetricReport evaluate_masks(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                            std::vector<std::string> ids = {});

/// predict_mask on each sample, then evaluate_masks.
MetricReport evaluate_dataset(TransRUPNet& model, const std::vector<Sample>& dataset, float threshold);

/// CSV with header `image,dice,iou,recall,precision,f2` and a final
/// `AGGREGATE` row.
void write_report_csv(const std::filesystem::path& path, const MetricReport& report);

// ---- throughput ---------------------------------------------------------------

struct FpsStats {
  int64_t n_frames = 0;
  double total_seconds = 0;
  double fps = 0;
  std::vector<double> per_frame_ms;

  /// Nearest-rank percentile of per-frame latency, q in [0, 100].
  double percentile_ms(double q) const;
};

/// Returns the current time in seconds. Must be non-decreasing.
using Clock = std::function<double()>;

Clock monotonic_clock();

/// Runs `n_warmup` untimed then `n_timed` timed calls of `forward_fn` on a
/// fixed batch-1 input of `input_shape`; fps = n_timed / total_seconds.
FpsStats measure_fps(const std::function<void(const Tensor&)>& forward_fn, const Shape& input_shape, int n_warmup,
                     int n_timed, const Clock& clock);

/// key=value: n_frames, total_seconds, fps, p50_ms, p95_ms.
void write_fps_stats(const std::filesystem::path& path, const FpsStats& stats);

}  // namespace trup
