#pragma once

// Upsampling path: PatchExpand, ConvFuse skip fusion, bottleneck fusion and
// the segmentation head.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/swin.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

/// Linear C -> 2C, then each token's 2C vector becomes a 2x2 block of C/2
/// channels: [B, g*g, C] -> [B, 4*g*g, C/2].
template <class T>
struct PatchExpand {
  std::size_t grid = 0;
  std::size_t channels = 0;
  Linear<T> expand;

  static PatchExpand create(ParamStore<T>& store, const std::string& name, std::size_t grid, std::size_t channels,
                            Rng& rng) {
    if (channels % 2 != 0) throw ConfigError("PatchExpand needs an even channel count, got " + std::to_string(channels));
    PatchExpand p;
    p.grid = grid;
    p.channels = channels;
    p.expand = Linear<T>::create(store, name + ".expand", channels, 2 * channels, rng, false);
    return p;
  }

  std::size_t out_grid() const { return 2 * grid; }
  std::size_t out_channels() const { return channels / 2; }

  /// Pixel-shuffle of [B, g*g, 2C] into [B, (2g)^2, C/2].
  Tensor<T> shuffle(const Tensor<T>& x) const {
    const std::size_t batch = x.dim(0), g = grid, half = channels / 2, wide = 2 * channels, g2 = 2 * g;
    std::vector<std::size_t> idx(batch * g2 * g2 * half);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < g2; ++y)
        for (std::size_t xx = 0; xx < g2; ++xx) {
          const std::size_t src = (b * g + y / 2) * g + xx / 2;
          const std::size_t part = (y % 2) * 2 + (xx % 2);
          for (std::size_t c = 0; c < half; ++c) idx[o++] = src * wide + part * half + c;
        }
    return gather(x, std::move(idx), {batch, g2 * g2, half});
  }

  Tensor<T> operator()(const Tensor<T>& y) const {
    if (y.rank() != 3 || y.dim(1) != grid * grid || y.dim(2) != channels) {
      throw ShapeError("PatchExpand expects [B," + std::to_string(grid * grid) + "," + std::to_string(channels) +
                       "], got " + shape_str(y.shape()));
    }
    return shuffle(expand(y));
  }
};

/// phi([S, U]): conv3x3(2C->C)+GN+ReLU, conv3x3(C->C)+GN+ReLU. With the
/// bypass on, returns S + U and the convolutions are never touched.
template <class T>
struct ConvFuse {
  std::size_t channels = 0;
  bool enabled = true;
  Conv2d<T> conv1, conv2;
  GroupNorm<T> norm1, norm2;

  static ConvFuse create(ParamStore<T>& store, const std::string& name, std::size_t channels, bool enabled,
                         Rng& rng) {
    ConvFuse f;
    f.channels = channels;
    f.enabled = enabled;
    const std::size_t groups = norm_groups(channels);
    f.conv1 = Conv2d<T>::create(store, name + ".conv1", 2 * channels, channels, 3, rng);
    f.norm1 = GroupNorm<T>::create(store, name + ".norm1", channels, groups, 1e-5);
    f.conv2 = Conv2d<T>::create(store, name + ".conv2", channels, channels, 3, rng);
    f.norm2 = GroupNorm<T>::create(store, name + ".norm2", channels, groups, 1e-5);
    return f;
  }

  Tensor<T> operator()(const Tensor<T>& skip, const Tensor<T>& up) const {
    if (skip.rank() != 4 || skip.shape() != up.shape() || skip.dim(1) != channels) {
      throw ShapeError("ConvFuse expects two [B," + std::to_string(channels) + ",h,w] maps, got " +
                       shape_str(skip.shape()) + " and " + shape_str(up.shape()));
    }
    if (!enabled) return add(skip, up);
    auto h = relu(norm1(conv1(concat<T>({skip, up}, 1))));
    return relu(norm2(conv2(h)));
  }
};

/// Bilinear x2, 1x1 conv to one channel. Returns logits.
template <class T>
struct SegmentationHead {
  Conv2d<T> conv;

  static SegmentationHead create(ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng,
                                 double prior = 0.5) {
    SegmentationHead h{Conv2d<T>::create(store, name + ".conv", channels, 1, 1, rng)};
    h.conv.bias.mutable_data()[0] = static_cast<T>(std::log(prior / (1.0 - prior)));
    return h;
  }

  Tensor<T> operator()(const Tensor<T>& y0_map) const { return conv(upsample_bilinear2x(y0_map)); }
};

/// Optional hook applied to decoder tokens at each level that has an encoder
/// counterpart (level index = encoder stage index).
template <class T>
using DecoderHook = std::function<Tensor<T>(const Tensor<T>&, std::size_t)>;

template <class T>
struct DecoderOutput {
  Tensor<T> logits;                 // [B, 1, H, W]
  std::vector<std::size_t> grids;   // token grid at each level, bottleneck first
  std::vector<std::size_t> widths;  // channel width at each level
};

template <class T>
class Decoder {
 public:
  Decoder() = default;

  Decoder(const ModelConfig& cfg, ParamStore<T>& store, Rng& rng) : specs_(cfg.stages()) {
    const std::size_t last = specs_.size() - 1;
    bottleneck_ = ConvFuse<T>::create(store, "decoder.bottleneck", specs_[last].channels, cfg.use_convfuse, rng);
    for (std::size_t s = last; s-- > 0;) {
      const std::string id = std::to_string(s + 1);
      expands_.push_back(PatchExpand<T>::create(store, "decoder.expand" + id, specs_[s + 1].grid,
                                                specs_[s + 1].channels, rng));
      fuses_.push_back(ConvFuse<T>::create(store, "decoder.fuse" + id, specs_[s].channels, cfg.use_convfuse, rng));
    }
    std::size_t grid = specs_[0].grid, channels = specs_[0].channels;
    for (std::size_t i = 0; i < cfg.final_expands(); ++i) {
      finals_.push_back(
          PatchExpand<T>::create(store, "decoder.final_expand" + std::to_string(i), grid, channels, rng));
      grid *= 2;
      channels /= 2;
    }
    head_ = SegmentationHead<T>::create(store, "decoder.head", channels, rng, cfg.head_prior);
  }

  const ConvFuse<T>& bottleneck() const { return bottleneck_; }
  std::size_t num_skip_fusions() const { return fuses_.size(); }

  /// Z^_S fused with S_S, re-tokenized.
  Tensor<T> bottleneck_fuse(const Tensor<T>& z_last, const Tensor<T>& s_last) const {
    const std::size_t grid = specs_.back().grid;
    return map_to_tokens(bottleneck_(s_last, tokens_to_map(z_last, grid)));
  }

  /// `guided` are the stage tokens after text guidance, `skips` the raw
  /// encoder maps. Skip maps for the upper levels come from the guided tokens.
  DecoderOutput<T> operator()(const std::vector<Tensor<T>>& guided, const std::vector<Tensor<T>>& skips,
                              const DecoderHook<T>& hook = {}) const {
    if (guided.size() != specs_.size() || skips.size() != specs_.size()) {
      throw ShapeError("decoder expects " + std::to_string(specs_.size()) + " stage outputs");
    }
    DecoderOutput<T> out;
    const std::size_t last = specs_.size() - 1;
    Tensor<T> y = bottleneck_fuse(guided[last], skips[last]);
    out.grids.push_back(specs_[last].grid);
    out.widths.push_back(specs_[last].channels);
    for (std::size_t i = 0; i < expands_.size(); ++i) {
      const std::size_t s = last - 1 - i;
      const auto u = expands_[i](y);
      const auto skip = tokens_to_map(guided[s], specs_[s].grid);
      y = map_to_tokens(fuses_[i](skip, tokens_to_map(u, specs_[s].grid)));
      if (hook) y = hook(y, s);
      out.grids.push_back(specs_[s].grid);
      out.widths.push_back(specs_[s].channels);
    }
    std::size_t grid = specs_[0].grid;
    for (const auto& f : finals_) {
      y = f(y);
      grid = f.out_grid();
      out.grids.push_back(grid);
      out.widths.push_back(f.out_channels());
    }
    out.logits = head_(tokens_to_map(y, grid));
    return out;
  }

 private:
  std::vector<StageSpec> specs_;
  ConvFuse<T> bottleneck_;
  std::vector<PatchExpand<T>> expands_;
  std::vector<ConvFuse<T>> fuses_;
  std::vector<PatchExpand<T>> finals_;
  SegmentationHead<T> head_;
};

}  // namespace swintext
