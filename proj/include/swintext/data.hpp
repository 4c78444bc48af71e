#pragma once

// Grayscale rasters, PGM codec, the quadrant-prompt synthetic dataset and the
// on-disk dataset layout:
//   {split}/images/*.pgm   {split}/masks/*.pgm   {split}/prompts.tsv

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/tensor.hpp"
#include "swintext/text.hpp"

namespace swintext {

/// Row-major single-channel raster with values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h, fill) {}

  float& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::string encode_pgm(const Image& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

/// Binary P5 with maxval 255. Header comments are accepted.
inline Image decode_pgm(const std::string& bytes, const std::string& what = "PGM") {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError(what + ": expected P5 magic", 0);
  pos = 2;
  std::size_t number_at = 0;
  auto next_number = [&](const char* field) -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    number_at = start;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw FormatError(what + ": " + field + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(what + ": missing " + field, start);
    return v;
  };
  const std::size_t w = next_number("width");
  const std::size_t h = next_number("height");
  const std::size_t maxval = next_number("maxval");
  const std::size_t maxval_at = number_at;
  if (maxval != 255) throw FormatError(what + ": maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (w == 0 || h == 0) throw FormatError(what + ": empty raster", maxval_at);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(what + ": missing whitespace after header", pos);
  }
  ++pos;
  if (bytes.size() - pos < w * h) {
    throw FormatError(what + ": truncated payload, need " + std::to_string(w * h) + " bytes, have " +
                          std::to_string(bytes.size() - pos),
                      bytes.size());
  }
  Image img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  return img;
}

inline Image read_pgm(const std::string& path) { return decode_pgm(detail::read_file_bytes(path), path); }

/// Any nonzero byte becomes 1.
inline Image read_mask_pgm(const std::string& path) {
  Image m = read_pgm(path);
  for (auto& v : m.pixels) v = v > 0.0f ? 1.0f : 0.0f;
  return m;
}

inline void write_pgm(const std::string& path, const Image& img) { detail::write_file_bytes(path, encode_pgm(img)); }

/// Half-pixel-centered bilinear resampling with edge clamping.
inline Image resize_bilinear(const Image& in, std::size_t width, std::size_t height) {
  if (in.width == width && in.height == height) return in;
  if (in.pixels.empty() || width == 0 || height == 0) throw UsageError("cannot resize an empty image");
  Image out(width, height);
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out, std::size_t& lo, std::size_t& hi, double& f) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
    lo = static_cast<std::size_t>(s);
    hi = std::min(lo + 1, n_in - 1);
    f = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, in.height, height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, in.width, width, x0, x1, fx);
      const double v = (1 - fy) * ((1 - fx) * in.at(x0, y0) + fx * in.at(x1, y0)) +
                       fy * ((1 - fx) * in.at(x0, y1) + fx * in.at(x1, y1));
      out.at(x, y) = static_cast<float>(v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SegSample {
  std::string name;
  Image image;
  Image mask;  // values in {0, 1}
  std::string prompt;
};

struct Dataset {
  std::vector<SegSample> train, val, test;

  std::vector<SegSample>& split(const std::string& s) {
    if (s == "train") return train;
    if (s == "val") return val;
    if (s == "test") return test;
    throw UsageError("unknown split '" + s + "'");
  }
  const std::vector<SegSample>& split(const std::string& s) const { return const_cast<Dataset*>(this)->split(s); }
};

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"train", "val", "test"};
  return names;
}

// ---------------------------------------------------------------------------
// Synthetic task: bright blobs in two to four image quadrants. The prompt
// names a strict subset of the occupied quadrants and the mask covers only
// those blobs, so the image alone does not determine the answer.

enum Quadrant : int { kUpperLeft = 0, kUpperRight = 1, kLowerLeft = 2, kLowerRight = 3 };

inline const char* quadrant_phrase(int q) {
  static const char* names[] = {"upper left lung", "upper right lung", "lower left lung", "lower right lung"};
  return names[q];
}

inline std::string count_word(std::size_t n) {
  static const char* words[] = {"zero", "one", "two", "three", "four"};
  return n < 5 ? words[n] : std::to_string(n);
}

/// "Bilateral pulmonary infection, two infected areas, upper left lung and
/// upper right lung".
inline std::string quadrant_prompt(const std::vector<int>& quadrants) {
  bool left = false, right = false;
  for (int q : quadrants) (q % 2 == 0 ? left : right) = true;
  std::string p = (left && right) ? "Bilateral" : "Unilateral";
  p += " pulmonary infection, " + count_word(quadrants.size()) + " infected area" +
       (quadrants.size() == 1 ? "" : "s") + ", ";
  for (std::size_t i = 0; i < quadrants.size(); ++i) {
    if (i > 0) p += (i + 1 == quadrants.size()) ? " and " : ", ";
    p += quadrant_phrase(quadrants[i]);
  }
  return p;
}

/// Quadrants named in a prompt, in index order.
inline std::vector<int> prompt_quadrants(const std::string& prompt) {
  const std::string p = normalize_prompt(prompt);
  std::vector<int> out;
  for (int q = 0; q < 4; ++q)
    if (p.find(quadrant_phrase(q)) != std::string::npos) out.push_back(q);
  return out;
}

struct SynthOptions {
  std::size_t size = 64;
  double noise = 0.01;
  double background = 0.1;
  double peak = 0.9;
  double min_radius = 1.0 / 12.0;  // blob radius range, fraction of the image side
  double max_radius = 1.0 / 7.0;
  double train_frac = 0.70;
  double val_frac = 0.15;
};

/// Super-Gaussian profile, 0.5 at r == radius.
inline double blob_profile(double r, double radius) {
  const double u = r / radius;
  return std::exp(-(u * u * u * u) * std::numbers::ln2);
}

inline SegSample synth_sample(std::size_t index, std::uint64_t seed, const SynthOptions& opt) {
  if (opt.size < 32) throw ConfigError("synthetic images need size >= 32, got " + std::to_string(opt.size));
  if (!(opt.min_radius > 0.0) || opt.max_radius < opt.min_radius || opt.max_radius > 0.15) {
    throw ConfigError("blob radius range must satisfy 0 < min <= max <= 0.15 of the image side");
  }
  Rng rng(mix_seed({seed, index, 0x5e6}));
  const double s = static_cast<double>(opt.size);
  const double half = s / 2.0;

  std::vector<int> order{0, 1, 2, 3};
  for (std::size_t i = 3; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  const std::size_t occupied = 2 + rng.below(3);
  const std::size_t prompted = 1 + rng.below(occupied - 1);
  std::vector<int> occ(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(occupied));
  std::vector<int> named(occ.begin(), occ.begin() + static_cast<std::ptrdiff_t>(prompted));
  std::sort(named.begin(), named.end());

  struct Blob {
    double cx, cy, radius;
    bool target;
  };
  std::vector<Blob> blobs;
  for (std::size_t i = 0; i < occ.size(); ++i) {
    const int q = occ[i];
    const double radius = rng.uniform(s * opt.min_radius, s * opt.max_radius);
    const double margin = 1.6 * radius;
    const double ox = (q % 2) * half, oy = (q / 2) * half;
    blobs.push_back({ox + rng.uniform(margin, half - margin), oy + rng.uniform(margin, half - margin), radius,
                     i < prompted});
  }

  SegSample out;
  char name[32];
  std::snprintf(name, sizeof name, "sample_%04zu", index);
  out.name = name;
  out.prompt = quadrant_prompt(named);
  out.image = Image(opt.size, opt.size);
  out.mask = Image(opt.size, opt.size);
  for (std::size_t y = 0; y < opt.size; ++y)
    for (std::size_t x = 0; x < opt.size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double g = 0.0;
      bool in_target = false;
      for (const auto& b : blobs) {
        const double v = blob_profile(std::hypot(px - b.cx, py - b.cy), b.radius);
        g = std::max(g, v);
        if (b.target && v > 0.5) in_target = true;
      }
      const double v = opt.background + (opt.peak - opt.background) * g + opt.noise * rng.uniform(-1.0, 1.0);
      out.image.at(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      out.mask.at(x, y) = in_target ? 1.0f : 0.0f;
    }
  return out;
}

/// n samples split train/val/test by the fractions in `opt`, in index order.
inline Dataset synth_generate(std::size_t n, std::uint64_t seed, const SynthOptions& opt = {}) {
  if (opt.train_frac < 0 || opt.val_frac < 0 || opt.train_frac + opt.val_frac > 1.0) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  const auto n_train = static_cast<std::size_t>(std::lround(opt.train_frac * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::lround(opt.val_frac * static_cast<double>(n))));
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = synth_sample(i, seed, opt);
    (i < n_train ? d.train : i < n_train + n_val ? d.val : d.test).push_back(std::move(s));
  }
  return d;
}

/// Reads the prompt, keeps bright pixels in the named quadrants.
inline Image prompt_oracle_mask(const Image& image, const std::string& prompt, float threshold = 0.5f) {
  Image m(image.width, image.height);
  const auto quads = prompt_quadrants(prompt);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const int q = (y >= image.height / 2 ? 2 : 0) + (x >= image.width / 2 ? 1 : 0);
      if (std::find(quads.begin(), quads.end(), q) != quads.end() && image.at(x, y) > threshold) m.at(x, y) = 1.0f;
    }
  return m;
}

// ---------------------------------------------------------------------------

inline void write_dataset(const std::string& root, const Dataset& d) {
  namespace fs = std::filesystem;
  for (const auto& split : split_names()) {
    const auto& samples = d.split(split);
    if (samples.empty()) continue;
    const fs::path dir = fs::path(root) / split;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::string tsv;
    for (const auto& s : samples) {
      write_pgm((dir / "images" / (s.name + ".pgm")).string(), s.image);
      write_pgm((dir / "masks" / (s.name + ".pgm")).string(), s.mask);
      tsv += s.name + ".pgm\t" + s.prompt + "\n";
    }
    detail::write_file_bytes((dir / "prompts.tsv").string(), tsv);
  }
}

/// Loads one split. Throws UsageError naming the missing path.
inline std::vector<SegSample> read_split(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / split;
  const fs::path tsv = dir / "prompts.tsv";
  if (!fs::exists(tsv)) throw UsageError("missing " + tsv.string());
  std::ifstream in(tsv);
  std::vector<SegSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(tsv.string() + ":" + std::to_string(lineno) + ": expected filename<TAB>prompt", 0);
    }
    SegSample s;
    const std::string file = line.substr(0, tab);
    s.name = fs::path(file).stem().string();
    s.prompt = line.substr(tab + 1);
    const auto img_path = dir / "images" / file;
    const auto mask_path = dir / "masks" / file;
    if (!fs::exists(img_path)) throw UsageError("missing " + img_path.string());
    if (!fs::exists(mask_path)) throw UsageError("missing " + mask_path.string());
    s.image = read_pgm(img_path.string());
    s.mask = read_mask_pgm(mask_path.string());
    if (s.image.width != s.mask.width || s.image.height != s.mask.height) {
      throw ShapeError("image and mask sizes differ for " + file);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Loads whichever splits exist; a root without train/prompts.tsv is an error.
inline Dataset read_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  Dataset d;
  d.train = read_split(root, "train");
  for (const auto& split : {"val", "test"})
    if (fs::exists(fs::path(root) / split / "prompts.tsv")) d.split(split) = read_split(root, split);
  return d;
}

/// Stacks samples into [B, channels, H, W] (grayscale replicated) and
/// [B, 1, H, W] masks.
template <class T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<const SegSample*>& samples, std::size_t channels) {
  if (samples.empty()) throw UsageError("empty batch");
  const std::size_t w = samples[0]->image.width, h = samples[0]->image.height, hw = w * h;
  std::vector<T> img(samples.size() * channels * hw), mask(samples.size() * hw);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = *samples[b];
    if (s.image.width != w || s.image.height != h) throw ShapeError("batch images differ in size");
    for (std::size_t c = 0; c < channels; ++c)
      std::copy(s.image.pixels.begin(), s.image.pixels.end(), img.begin() + static_cast<std::ptrdiff_t>((b * channels + c) * hw));
    std::copy(s.mask.pixels.begin(), s.mask.pixels.end(), mask.begin() + static_cast<std::ptrdiff_t>(b * hw));
  }
  return {Tensor<T>({samples.size(), channels, h, w}, std::move(img)), Tensor<T>({samples.size(), 1, h, w}, std::move(mask))};
}

}  // namespace swintext
