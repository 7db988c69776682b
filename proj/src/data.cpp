#include "trup/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "trup/nn.hpp"
#include "trup/random.hpp"

namespace trup {

namespace fs = std::filesystem;

SampleBatch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: no samples");
  std::vector<Tensor> images, masks;
  for (const Sample& s : samples) {
    if (s.image.shape() != samples[0].image.shape() || s.mask.shape() != samples[0].mask.shape()) {
      throw DataError("make_batch: sample '" + s.id + "' differs in size from '" + samples[0].id + "'");
    }
    Shape is = s.image.shape(), ms = s.mask.shape();
    is.insert(is.begin(), 1);
    ms.insert(ms.begin(), 1);
    images.push_back(Tensor(is, s.image.to_vector()));
    masks.push_back(Tensor(ms, s.mask.to_vector()));
  }
  if (samples.size() == 1) return {images[0], masks[0]};
  return {concat(images, 0), concat(masks, 0)};
}

// ---- PNM ----------------------------------------------------------------------

namespace {

int64_t read_header_int(std::istream& is, const fs::path& path) {
  int c = is.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string comment;
      std::getline(is, comment);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
    c = is.peek();
  }
  int64_t v = 0;
  bool any = false;
  while (std::isdigit(is.peek())) {
    v = v * 10 + (is.get() - '0');
    any = true;
    if (v > (int64_t{1} << 20)) throw FormatError(path.string() + ": header value too large");
  }
  if (!any) throw FormatError(path.string() + ": malformed PNM header");
  return v;
}

uint8_t to_byte(float v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

Raster read_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[2] = {0, 0};
  is.read(magic, 2);
  Raster r;
  if (magic[0] == 'P' && magic[1] == '6') {
    r.channels = 3;
  } else if (magic[0] == 'P' && magic[1] == '5') {
    r.channels = 1;
  } else {
    throw FormatError(path.string() + ": not a binary PPM/PGM file");
  }
  r.width = read_header_int(is, path);
  r.height = read_header_int(is, path);
  const int64_t maxval = read_header_int(is, path);
  if (r.width < 1 || r.height < 1) throw FormatError(path.string() + ": zero image size");
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  if (!std::isspace(is.get())) throw FormatError(path.string() + ": malformed PNM header");
  r.pixels.resize(static_cast<std::size_t>(r.width * r.height * r.channels));
  if (!is.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()))) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return r;
}

void write_pnm(const fs::path& path, const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) throw ContractError("write_pnm: channels must be 1 or 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << (raster.channels == 3 ? "P6" : "P5") << '\n' << raster.width << ' ' << raster.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(raster.pixels.data()), static_cast<std::streamsize>(raster.pixels.size()));
}

namespace {

Raster raster_from_planes(const Tensor& t, int64_t channels) {
  if (t.rank() != 3 || t.dim(0) != channels) {
    throw ShapeError("expected a " + std::to_string(channels) + " x H x W tensor, got " + shape_str(t.shape()));
  }
  Raster r{t.dim(2), t.dim(1), channels, {}};
  auto d = t.data();
  const int64_t plane = r.width * r.height;
  r.pixels.resize(static_cast<std::size_t>(plane * channels));
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t i = 0; i < plane; ++i) r.pixels[i * channels + c] = to_byte(d[c * plane + i]);
  }
  return r;
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor& image) { write_pnm(path, raster_from_planes(image, 3)); }
void write_pgm(const fs::path& path, const Tensor& mask) { write_pnm(path, raster_from_planes(mask, 1)); }

namespace {

Tensor image_from_raster(const Raster& img, int64_t t) {
  const int64_t h = img.height, w = img.width;
  const int64_t plane = h * w;
  std::vector<float> image(static_cast<std::size_t>(3 * t * t));
  std::vector<float> src(static_cast<std::size_t>(plane));
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < plane; ++i) src[i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
    if (h == t && w == t) {
      std::copy(src.begin(), src.end(), image.begin() + c * t * t);
    } else {
      resize_bilinear_plane(src.data(), h, w, image.data() + c * t * t, t, t);
    }
  }
  return Tensor({3, t, t}, std::move(image));
}

}  // namespace

Tensor load_image(const fs::path& image_path, int64_t target_size) {
  if (target_size < 1) throw ContractError("load_image: target size must be positive");
  Raster img = read_pnm(image_path);
  if (img.channels != 3) throw FormatError(image_path.string() + ": image must be a P6 PPM");
  return image_from_raster(img, target_size);
}

Sample load_sample(const fs::path& image_path, const fs::path& mask_path, int64_t target_size) {
  if (target_size < 1) throw ContractError("load_sample: target size must be positive");
  Raster img = read_pnm(image_path);
  Raster msk = read_pnm(mask_path);
  if (img.channels != 3) throw FormatError(image_path.string() + ": image must be a P6 PPM");
  if (msk.channels != 1) throw FormatError(mask_path.string() + ": mask must be a P5 PGM");
  if (img.width != msk.width || img.height != msk.height) {
    throw DataError("image " + image_path.string() + " and mask " + mask_path.string() + " differ in size");
  }
  const int64_t h = img.height, w = img.width, t = target_size;
  Tensor image = image_from_raster(img, t);

  std::vector<float> mask(static_cast<std::size_t>(t * t));
  for (int64_t i = 0; i < t; ++i) {
    const int64_t si = std::min(h - 1, static_cast<int64_t>((static_cast<double>(i) + 0.5) * h / t));
    for (int64_t j = 0; j < t; ++j) {
      const int64_t sj = std::min(w - 1, static_cast<int64_t>((static_cast<double>(j) + 0.5) * w / t));
      mask[i * t + j] = msk.pixels[si * w + sj] >= 128 ? 1.0f : 0.0f;
    }
  }
  return {image, Tensor({1, t, t}, std::move(mask)), image_path.stem().string()};
}

std::vector<Sample> load_dataset_dir(const fs::path& dir, int64_t target_size) {
  const fs::path images = dir / "images";
  const fs::path masks = dir / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw DataError(dir.string() + ": expected images/ and masks/ subdirectories");
  }
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".ppm") stems.push_back(entry.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DataError(images.string() + ": no .ppm images");
  std::vector<Sample> out;
  for (const auto& stem : stems) {
    const fs::path mask_path = masks / (stem + ".pgm");
    if (!fs::exists(mask_path)) throw DataError("missing mask " + mask_path.string());
    out.push_back(load_sample(images / (stem + ".ppm"), mask_path, target_size));
  }
  return out;
}

void save_dataset_dir(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const Sample& s : samples) {
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_pgm(dir / "masks" / (s.id + ".pgm"), s.mask);
  }
}

// ---- augmentation -------------------------------------------------------------

AugmentParams draw_augment(std::mt19937_64& rng) {
  AugmentParams a;
  a.hflip = uniform01(rng) < 0.5;
  a.vflip = uniform01(rng) < 0.5;
  a.rot90 = static_cast<int>(uniform_index(rng, 4));
  a.brightness = static_cast<float>(uniform(rng, 0.8, 1.2));
  return a;
}

namespace {

// Applies the geometric part of `a` to every plane of a [C x H x W] tensor.
Tensor transform_planes(const Tensor& t, const AugmentParams& a) {
  const int64_t channels = t.dim(0);
  int64_t h = t.dim(1), w = t.dim(2);
  std::vector<float> cur = t.to_vector();
  if (a.hflip || a.vflip) {
    std::vector<float> next(cur.size());
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          const int64_t si = a.vflip ? h - 1 - i : i;
          const int64_t sj = a.hflip ? w - 1 - j : j;
          next[(c * h + i) * w + j] = cur[(c * h + si) * w + sj];
        }
      }
    }
    cur.swap(next);
  }
  for (int k = 0; k < (a.rot90 % 4 + 4) % 4; ++k) {
    // Counter-clockwise quarter turn: out[i][j] = in[j][w - 1 - i], out is w x h.
    std::vector<float> next(cur.size());
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t i = 0; i < w; ++i) {
        for (int64_t j = 0; j < h; ++j) next[(c * w + i) * h + j] = cur[(c * h + j) * w + (w - 1 - i)];
      }
    }
    cur.swap(next);
    std::swap(h, w);
  }
  return Tensor({channels, h, w}, std::move(cur));
}

}  // namespace

Sample apply_augment(const Sample& s, const AugmentParams& a) {
  Sample out{transform_planes(s.image, a), transform_planes(s.mask, a), s.id};
  if (a.brightness != 1.0f) {
    for (float& v : out.image.mutable_data()) v = std::clamp(v * a.brightness, 0.0f, 1.0f);
  }
  return out;
}

// ---- splitting ----------------------------------------------------------------

DatasetSplit split_dataset(const std::vector<Sample>& samples, const SplitSpec& spec) {
  if (spec.train_n + spec.val_n + spec.test_n != samples.size()) {
    throw ContractError("split_dataset: split sizes sum to " + std::to_string(spec.train_n + spec.val_n + spec.test_n) +
                        " but dataset has " + std::to_string(samples.size()) + " samples");
  }
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  DatasetSplit out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& part = k < spec.train_n ? out.train : (k < spec.train_n + spec.val_n ? out.val : out.test);
    part.push_back(samples[order[k]]);
  }
  return out;
}

void write_split_manifest(const fs::path& dir, const DatasetSplit& split) {
  fs::create_directories(dir);
  auto write = [&](const char* name, const std::vector<Sample>& part) {
    std::ofstream os(dir / name);
    if (!os) throw FormatError("cannot write split manifest in " + dir.string());
    for (const Sample& s : part) os << s.id << '\n';
  };
  write("train.txt", split.train);
  write("val.txt", split.val);
  write("test.txt", split.test);
}

// ---- synthetic polyps ---------------------------------------------------------

bool Ellipse::contains(double x, double y) const {
  const double dx = x - cx, dy = y - cy;
  const double u = dx * std::cos(angle) + dy * std::sin(angle);
  const double v = -dx * std::sin(angle) + dy * std::cos(angle);
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

SynthSample synth_sample(int64_t size, uint64_t seed, std::string id) {
  if (size < 16 || size % 16 != 0) throw ContractError("synth: size must be a positive multiple of 16");
  std::mt19937_64 rng(seed);
  const int64_t plane = size * size;

  // Mucosa-like background: base tint plus a bilinearly upsampled 4x4 noise grid.
  constexpr float kBase[3] = {0.80f, 0.55f, 0.50f};
  std::vector<float> image(static_cast<std::size_t>(3 * plane));
  std::vector<float> noise(static_cast<std::size_t>(plane));
  for (int c = 0; c < 3; ++c) {
    float grid[16];
    for (float& g : grid) g = static_cast<float>(uniform(rng, -0.12, 0.12));
    resize_bilinear_plane(grid, 4, 4, noise.data(), size, size);
    for (int64_t i = 0; i < plane; ++i) image[c * plane + i] = kBase[c] + noise[i];
  }

  SynthSample out;
  const int count = 1 + static_cast<int>(uniform_index(rng, 3));
  const double s = static_cast<double>(size);
  for (int e = 0; e < count; ++e) {
    Ellipse el;
    el.cx = uniform(rng, 0.2, 0.8) * s;
    el.cy = uniform(rng, 0.2, 0.8) * s;
    el.a = uniform(rng, 0.08, 0.22) * s;
    el.b = uniform(rng, 0.08, 0.22) * s;
    el.angle = uniform(rng, 0.0, std::numbers::pi);
    float tint[3] = {0.55f, 0.25f, 0.20f};
    for (float& t : tint) t += static_cast<float>(uniform(rng, -0.08, 0.08));
    for (int64_t i = 0; i < size; ++i) {
      for (int64_t j = 0; j < size; ++j) {
        if (!el.contains(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) continue;
        for (int c = 0; c < 3; ++c) image[c * plane + i * size + j] = tint[c] + 0.5f * (image[c * plane + i * size + j] - kBase[c]);
      }
    }
    out.ellipses.push_back(el);
  }

  std::vector<float> mask(static_cast<std::size_t>(plane), 0.0f);
  for (int64_t i = 0; i < size; ++i) {
    for (int64_t j = 0; j < size; ++j) {
      for (const Ellipse& el : out.ellipses) {
        if (el.contains(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) {
          mask[i * size + j] = 1.0f;
          break;
        }
      }
    }
  }
  for (float& v : image) v = static_cast<float>(to_byte(v)) / 255.0f;
  out.sample = {Tensor({3, size, size}, std::move(image)), Tensor({1, size, size}, std::move(mask)), std::move(id)};
  return out;
}

std::vector<Sample> synth_dataset(std::size_t n, int64_t size, uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    out.push_back(synth_sample(size, derive_seed(seed, i), id).sample);
  }
  return out;
}

}  // namespace trup
