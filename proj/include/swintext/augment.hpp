#pragma once

// Random flips, rotation and intensity scaling. Geometry is shared between
// image and mask; the mask is resampled nearest-neighbor so it stays binary.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "swintext/config.hpp"
#include "swintext/data.hpp"
#include "swintext/nn.hpp"

namespace swintext {

inline Image flip_horizontal(const Image& in) {
  Image out(in.width, in.height);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) out.at(x, y) = in.at(in.width - 1 - x, y);
  return out;
}

inline Image flip_vertical(const Image& in) {
  Image out(in.width, in.height);
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) out.at(x, y) = in.at(x, in.height - 1 - y);
  return out;
}

/// Rotation by `degrees` about the image center; samples falling outside are
/// zero.
inline Image rotate(const Image& in, double degrees, bool nearest) {
  Image out(in.width, in.height);
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = 0.5 * static_cast<double>(in.width), cy = 0.5 * static_cast<double>(in.height);
  auto px = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(in.width) || y >= static_cast<long>(in.height)) return 0.0;
    return in.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  for (std::size_t y = 0; y < in.height; ++y)
    for (std::size_t x = 0; x < in.width; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double sx = c * dx + s * dy + cx - 0.5, sy = -s * dx + c * dy + cy - 0.5;
      if (nearest) {
        out.at(x, y) = static_cast<float>(px(std::lround(sx), std::lround(sy)));
        continue;
      }
      const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      const double v = (1 - fy) * ((1 - fx) * px(x0, y0) + fx * px(x0 + 1, y0)) +
                       fy * ((1 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1));
      out.at(x, y) = static_cast<float>(v);
    }
  return out;
}

inline SegSample augment(const SegSample& sample, const AugmentConfig& cfg, Rng& rng) {
  SegSample out = sample;
  if (!cfg.enabled) return out;
  if (rng.uniform() < cfg.flip_prob) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  if (rng.uniform() < cfg.flip_prob) {
    out.image = flip_vertical(out.image);
    out.mask = flip_vertical(out.mask);
  }
  if (cfg.rotate_deg > 0.0) {
    const double angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg);
    out.image = rotate(out.image, angle, false);
    out.mask = rotate(out.mask, angle, true);
  }
  if (cfg.intensity_lo != 1.0 || cfg.intensity_hi != 1.0) {
    const auto k = static_cast<float>(rng.uniform(cfg.intensity_lo, cfg.intensity_hi));
    for (auto& v : out.image.pixels) v = std::clamp(v * k, 0.0f, 1.0f);
  }
  return out;
}

}  // namespace swintext
