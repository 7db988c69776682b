#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "trup/tensor.hpp"

namespace trup {

struct Sample {
  Tensor image;  // [3 x H x W], values in [0,1]
  Tensor mask;   // [1 x H x W], values in {0,1}
  std::string id;
};

struct SampleBatch {
  Tensor images;  // [B x 3 x H x W]
  Tensor masks;   // [B x 1 x H x W]
};

SampleBatch make_batch(const std::vector<Sample>& samples);

// ---- PPM / PGM ----------------------------------------------------------------

/// 8-bit raster with interleaved channels (1 for P5, 3 for P6).
struct Raster {
  int64_t width = 0, height = 0, channels = 0;
  std::vector<uint8_t> pixels;
};

/// Reads binary P6 or P5 with maxval 255.
Raster read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Raster& raster);

/// [3 x H x W] in [0,1] -> P6, rounding v * 255.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// [1 x H x W] in [0,1] -> P5, rounding v * 255.
void write_pgm(const std::filesystem::path& path, const Tensor& mask);

/// P6 image bilinearly resized to target x target, values in [0,1].
Tensor load_image(const std::filesystem::path& image_path, int64_t target_size);

/// Decodes an image/mask pair: the image as in load_image; the mask is
/// nearest-neighbour resized and binarised at pixel >= 128.
Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path, int64_t target_size);

/// `images/<stem>.ppm` paired with `masks/<stem>.pgm`, ordered by stem.
std::vector<Sample> load_dataset_dir(const std::filesystem::path& dir, int64_t target_size);
void save_dataset_dir(const std::filesystem::path& dir, const std::vector<Sample>& samples);

// ---- augmentation -------------------------------------------------------------

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;  // counter-clockwise quarter turns, 0..3
  float brightness = 1.0f;
};

AugmentParams draw_augment(std::mt19937_64& rng);
/// Geometric transforms hit image and mask alike; brightness only the image.
Sample apply_augment(const Sample& s, const AugmentParams& a);
inline Sample augment(const Sample& s, std::mt19937_64& rng) { return apply_augment(s, draw_augment(rng)); }

// ---- splitting ----------------------------------------------------------------

struct SplitSpec {
  std::size_t train_n = 880;
  std::size_t val_n = 60;
  std::size_t test_n = 60;
  uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<Sample> train, val, test;
};

DatasetSplit split_dataset(const std::vector<Sample>& samples, const SplitSpec& spec);
/// `train.txt`, `val.txt`, `test.txt`, one id per line.
void write_split_manifest(const std::filesystem::path& dir, const DatasetSplit& split);

// ---- synthetic polyps ---------------------------------------------------------

struct Ellipse {
  double cx = 0, cy = 0;  // pixel units; pixel (row i, col j) has centre (j + 0.5, i + 0.5)
  double a = 1, b = 1;    // semi-axes
  double angle = 0;       // radians
  bool contains(double x, double y) const;
};

struct SynthSample {
  Sample sample;
  std::vector<Ellipse> ellipses;
};

/// Low-frequency noise background plus 1-3 filled ellipses, each with its
/// own colour bias; mask = union of ellipse interiors. Image values are
/// quantised to k/255 so the PPM round trip is exact.
SynthSample synth_sample(int64_t size, uint64_t seed, std::string id);
std::vector<Sample> synth_dataset(std::size_t n, int64_t size, uint64_t seed);

}  // namespace trup
