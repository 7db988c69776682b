#include "trup/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "trup/data.hpp"
#include "trup/gradcheck.hpp"
#include "trup/loss_metrics.hpp"
#include "trup/model.hpp"
#include "trup/trainer.hpp"

namespace trup::cli {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct SynthArgs {
  std::size_t n = 8;
  int64_t size = 256;
  std::string out;
  uint64_t seed = 0;
};

int synth_data(const SynthArgs& a, std::ostream& err) {
  if (a.size < 1) throw ContractError("synth-data: --size must be positive");
  save_dataset_dir(a.out, synth_dataset(a.n, a.size, a.seed));
  err << "wrote " << a.n << " samples of " << a.size << "x" << a.size << " to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out;
  int epochs = 1;
  float lr = 1e-4f;
  int batch = 8;
  std::optional<int64_t> size;
  uint64_t seed = 0;
  std::string preset = "standard";
  int checkpoint_every = 0;
  bool no_augment = false;
  bool resume = false;
};

int train(const TrainArgs& a, std::ostream& err) {
  ModelConfig mcfg = ModelConfig::preset(a.preset);
  if (a.size) mcfg.input_h = mcfg.input_w = *a.size;
  mcfg.validate();
  TrainConfig tcfg;
  tcfg.lr = a.lr;
  tcfg.batch_size = a.batch;
  tcfg.epochs = a.epochs;
  tcfg.seed = a.seed;
  tcfg.checkpoint_every = a.checkpoint_every;
  tcfg.augment = !a.no_augment;
  tcfg.validate();

  const std::vector<Sample> data = load_dataset_dir(a.data, mcfg.input_h);
  err << "loaded " << data.size() << " samples from " << a.data << "\n";

  const fs::path out = a.out;
  fs::create_directories(out);
  const bool resuming = a.resume && fs::exists(out / "optim.txt");
  TrainingState state = resuming ? restore(out) : start_training(mcfg, tcfg);
  if (resuming) {
    if (state.model.config().input_h != mcfg.input_h) throw CheckpointError("resume: checkpoint input size differs");
    err << "resuming after epoch " << state.epochs_done << "\n";
  }

  std::ofstream log(out / "train_log.csv", resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw FormatError("cannot write " + (out / "train_log.csv").string());
  if (!resuming) log << "epoch,step,loss\n";
  auto logger = [&](int epoch, int64_t step, double loss) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%lld,%.9g\n", epoch, static_cast<long long>(step), loss);
    log << buf;
  };

  while (state.epochs_done < tcfg.epochs) {
    const int epoch = state.epochs_done + 1;
    EpochStats stats = train_epoch(state.model, state.optim, data, tcfg, state.rng, epoch, logger);
    state.epochs_done = epoch;
    log.flush();
    err << "epoch " << epoch << "/" << tcfg.epochs << " loss " << fixed(stats.mean_loss) << "\n";
    if (tcfg.checkpoint_every > 0 && epoch % tcfg.checkpoint_every == 0) checkpoint(state, out);
  }
  checkpoint(state, out);
  err << "checkpoint written to " << out.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, ckpt, out = "report.csv";
  std::optional<float> threshold;
};

int evaluate(const EvalArgs& a, std::ostream& err) {
  TransRUPNet model = TransRUPNet::load(a.ckpt);
  const std::vector<Sample> data = load_dataset_dir(a.data, model.config().input_h);
  const MetricReport r = evaluate_dataset(model, data, a.threshold.value_or(model.config().threshold));
  write_report_csv(a.out, r);
  err << "mDSC " << fixed(r.aggregate.dice, 4) << " mIoU " << fixed(r.aggregate.iou, 4) << " recall "
      << fixed(r.aggregate.recall, 4) << " precision " << fixed(r.aggregate.precision, 4) << " F2 "
      << fixed(r.aggregate.f2, 4) << " over " << r.n_images << " images\n";
  return 0;
}

struct PredictArgs {
  std::string ckpt, image, out = "mask.pgm";
  std::optional<float> threshold;
};

int predict(const PredictArgs& a, std::ostream& err) {
  TransRUPNet model = TransRUPNet::load(a.ckpt);
  const int64_t t = model.config().input_h;
  const Tensor image = load_image(a.image, t);
  const Tensor mask = model.predict_mask(reshape(image, {1, 3, t, t}), a.threshold.value_or(model.config().threshold));
  write_pgm(a.out, reshape(mask, {1, t, t}));
  err << "wrote " << a.out << "\n";
  return 0;
}

struct BenchArgs {
  std::string ckpt, preset = "standard", out = "fps.txt";
  std::optional<int64_t> size;
  int warmup = 10, frames = 100;
  uint64_t seed = 0;
};

int bench(const BenchArgs& a, std::ostream& err) {
  std::optional<TransRUPNet> model;
  if (!a.ckpt.empty()) {
    model.emplace(TransRUPNet::load(a.ckpt));
  } else {
    ModelConfig cfg = ModelConfig::preset(a.preset);
    if (a.size) cfg.input_h = cfg.input_w = *a.size;
    model.emplace(cfg, a.seed);
  }
  const int64_t h = a.size.value_or(model->config().input_h);
  validate_encoder_input(model->config().encoder, h, h);
  const FpsStats s = measure_fps([&](const Tensor& x) { model->forward(x, Mode::kEval); },
                                 {1, model->config().in_channels, h, h}, a.warmup, a.frames, monotonic_clock());
  write_fps_stats(a.out, s);
  err << fixed(s.fps, 2) << " fps over " << s.n_frames << " frames (p50 " << fixed(s.percentile_ms(50), 2)
      << " ms, p95 " << fixed(s.percentile_ms(95), 2) << " ms)\n";
  return 0;
}

int gradcheck(uint64_t seed, std::ostream& out) {
  bool all = true;
  for (const GradcheckResult& r : run_gradcheck_suite(seed)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-22s max_rel_err %.3e  checked %5lld  %7.3fs  %s\n", r.op.c_str(), r.max_error,
                  static_cast<long long>(r.checked), r.seconds, r.passed ? "ok" : "FAIL");
    out << buf;
    all = all && r.passed;
  }
  return all ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Polyp segmentation: data synthesis, training, evaluation and benchmarking", "trup"};
  app.require_subcommand(1, 1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic image/mask dataset");
  synth->add_option("--n", sa.n, "Number of samples")->capture_default_str();
  synth->add_option("--size", sa.size, "Image side in pixels")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Random seed")->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--data", ta.data, "Dataset directory (images/, masks/)")->required();
  tr->add_option("--out", ta.out, "Checkpoint directory")->required();
  tr->add_option("--epochs", ta.epochs, "Total epochs")->capture_default_str();
  tr->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--batch", ta.batch, "Batch size")->capture_default_str();
  tr->add_option("--size", ta.size, "Input side (default: preset's)");
  tr->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
  tr->add_option("--preset", ta.preset, "Model preset: standard, toy or tiny")->capture_default_str();
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint period in epochs (0: end only)")
      ->capture_default_str();
  tr->add_flag("--no-augment", ta.no_augment, "Disable flips, rotations and brightness jitter");
  tr->add_flag("--resume", ta.resume, "Continue from the checkpoint in --out");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint directory")->required();
  ev->add_option("--out", ea.out, "Report CSV")->capture_default_str();
  ev->add_option("--threshold", ea.threshold, "Mask threshold (default: checkpoint's)");

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Predict the mask of one image");
  pr->add_option("--ckpt", pa.ckpt, "Checkpoint directory")->required();
  pr->add_option("--image", pa.image, "Input P6 PPM")->required();
  pr->add_option("--out", pa.out, "Output P5 PGM")->capture_default_str();
  pr->add_option("--threshold", pa.threshold, "Mask threshold (default: checkpoint's)");

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "Measure single-image inference throughput");
  auto* ckpt_opt = be->add_option("--ckpt", ba.ckpt, "Checkpoint directory");
  be->add_option("--preset", ba.preset, "Randomly initialised preset when no checkpoint is given")
      ->capture_default_str()
      ->excludes(ckpt_opt);
  be->add_option("--size", ba.size, "Input side (default: model's)");
  be->add_option("--warmup", ba.warmup, "Untimed frames")->capture_default_str();
  be->add_option("--frames", ba.frames, "Timed frames")->capture_default_str();
  be->add_option("--seed", ba.seed, "Initialisation seed for --preset")->capture_default_str();
  be->add_option("--out", ba.out, "Output key=value file")->capture_default_str();

  uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--seed", gc_seed, "Random seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return synth_data(sa, err);
    if (tr->parsed()) return train(ta, err);
    if (ev->parsed()) return evaluate(ea, err);
    if (pr->parsed()) return predict(pa, err);
    if (be->parsed()) return bench(ba, err);
    if (gc->parsed()) return gradcheck(gc_seed, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace trup::cli
