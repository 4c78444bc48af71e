#pragma once

// Hierarchical shifted-window encoder: patch embedding, W-MSA / SW-MSA blocks
// with relative position bias and cyclic-shift masks, and patch merging.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

/// Multiply-accumulate tallies of the attention matmuls (QK^T and AV).
struct AttentionMacs {
  std::uint64_t window_scores = 0;
  std::uint64_t window_aggregate = 0;
  std::uint64_t cross_scores = 0;
  std::uint64_t cross_aggregate = 0;

  void reset() { *this = AttentionMacs{}; }
};

inline AttentionMacs& attention_macs() {
  static thread_local AttentionMacs macs;
  return macs;
}

// ---------------------------------------------------------------------------
// Index maps for token rearrangements. Token grids are stored as [B, H*W, C]
// (equivalently [B, H, W, C]) in row-major order.

/// out[b, i, j] = x[b, (i - shift) mod H, (j - shift) mod W]  (torch.roll semantics).
inline std::vector<std::size_t> roll_index(std::size_t batch, std::size_t grid, std::size_t channels,
                                           std::ptrdiff_t shift) {
  std::vector<std::size_t> idx(batch * grid * grid * channels);
  const auto g = static_cast<std::ptrdiff_t>(grid);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::ptrdiff_t i = 0; i < g; ++i)
      for (std::ptrdiff_t j = 0; j < g; ++j) {
        const auto si = static_cast<std::size_t>(((i - shift) % g + g) % g);
        const auto sj = static_cast<std::size_t>(((j - shift) % g + g) % g);
        const std::size_t base = ((b * grid + si) * grid + sj) * channels;
        for (std::size_t c = 0; c < channels; ++c) idx[o++] = base + c;
      }
  return idx;
}

/// Windows laid out as [(b, wy, wx), (ty, tx), c].
inline std::vector<std::size_t> window_partition_index(std::size_t batch, std::size_t grid, std::size_t channels,
                                                       std::size_t window) {
  const std::size_t nw = grid / window;
  std::vector<std::size_t> idx(batch * grid * grid * channels);
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t wy = 0; wy < nw; ++wy)
      for (std::size_t wx = 0; wx < nw; ++wx)
        for (std::size_t ty = 0; ty < window; ++ty)
          for (std::size_t tx = 0; tx < window; ++tx) {
            const std::size_t base = ((b * grid + wy * window + ty) * grid + wx * window + tx) * channels;
            for (std::size_t c = 0; c < channels; ++c) idx[o++] = base + c;
          }
  return idx;
}

inline std::vector<std::size_t> invert_index(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

inline void check_window(std::size_t grid, std::size_t window) {
  if (window == 0 || grid % window != 0) {
    throw ConfigError("grid " + std::to_string(grid) + " is not divisible by window " + std::to_string(window));
  }
}

/// x[B, H, W, C] -> windows[B * (H/M) * (W/M), M*M, C].
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 4 || x.dim(1) != x.dim(2)) {
    throw ShapeError("window_partition expects a square map [B,H,W,C], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), grid = x.dim(1), c = x.dim(3);
  check_window(grid, window);
  const std::size_t nw = (grid / window) * (grid / window);
  return gather(x, window_partition_index(batch, grid, c, window), {batch * nw, window * window, c});
}

/// Exact inverse of window_partition.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t batch, std::size_t grid, std::size_t window) {
  check_window(grid, window);
  const std::size_t c = windows.dim(-1);
  if (windows.numel() != batch * grid * grid * c) {
    throw ShapeError("window_reverse: " + shape_str(windows.shape()) + " does not tile a " + std::to_string(grid) +
                     "x" + std::to_string(grid) + " grid of batch " + std::to_string(batch));
  }
  return gather(windows, invert_index(window_partition_index(batch, grid, c, window)), {batch, grid, grid, c});
}

/// Region label of every cell of the shifted grid: cells that came from
/// different sides of the wrap-around seam get different labels.
inline std::vector<int> shift_region_labels(std::size_t grid, std::size_t window, std::size_t shift) {
  std::vector<int> labels(grid * grid, 0);
  if (shift == 0) return labels;
  auto band = [&](std::size_t i) { return i < grid - window ? 0 : (i < grid - shift ? 1 : 2); };
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j) labels[i * grid + j] = band(i) * 3 + band(j);
  return labels;
}

/// Additive mask [num_windows, M*M, M*M]: 0 inside a region, -inf across.
template <class T>
Tensor<T> build_shift_mask(std::size_t grid, std::size_t window, std::size_t shift) {
  check_window(grid, window);
  const auto labels = shift_region_labels(grid, window, shift);
  const std::size_t nw_side = grid / window, t2 = window * window;
  std::vector<T> mask(nw_side * nw_side * t2 * t2, T(0));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t wy = 0; wy < nw_side; ++wy)
    for (std::size_t wx = 0; wx < nw_side; ++wx) {
      const std::size_t w = wy * nw_side + wx;
      for (std::size_t a = 0; a < t2; ++a)
        for (std::size_t b = 0; b < t2; ++b) {
          const int la = labels[(wy * window + a / window) * grid + wx * window + a % window];
          const int lb = labels[(wy * window + b / window) * grid + wx * window + b % window];
          if (la != lb) mask[(w * t2 + a) * t2 + b] = neg_inf;
        }
    }
  return Tensor<T>({nw_side * nw_side, t2, t2}, std::move(mask));
}

/// For each token pair (i, j) of an MxM window, the row of the relative
/// position bias table ((2M-1)^2 rows) holding their offset.
inline std::vector<std::size_t> relative_position_index(std::size_t window) {
  const std::size_t t2 = window * window, span = 2 * window - 1;
  std::vector<std::size_t> idx(t2 * t2);
  for (std::size_t a = 0; a < t2; ++a)
    for (std::size_t b = 0; b < t2; ++b) {
      const std::size_t dy = a / window + window - 1 - b / window;
      const std::size_t dx = a % window + window - 1 - b % window;
      idx[a * t2 + b] = dy * span + dx;
    }
  return idx;
}

// ---------------------------------------------------------------------------

template <class T>
struct WindowAttention {
  std::size_t channels = 0;
  std::size_t heads = 1;
  std::size_t window = 1;
  Linear<T> qkv;
  Linear<T> proj;
  Tensor<T> rel_table;  // [(2M-1)^2, heads]
  IndexMap bias_index;  // table -> [heads, M*M, M*M]

  static WindowAttention create(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                std::size_t heads, std::size_t window, Rng& rng) {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError(std::to_string(heads) + " heads do not divide " + std::to_string(channels) + " channels");
    }
    WindowAttention a;
    a.channels = channels;
    a.heads = heads;
    a.window = window;
    a.qkv = Linear<T>::create(store, name + ".qkv", channels, 3 * channels, rng);
    a.proj = Linear<T>::create(store, name + ".proj", channels, channels, rng);
    const std::size_t span = 2 * window - 1;
    a.rel_table = store.trunc_normal(name + ".relative_position_bias_table", {span * span, heads}, rng);
    const auto rel = relative_position_index(window);
    const std::size_t t2 = window * window;
    std::vector<std::size_t> idx(heads * t2 * t2);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t p = 0; p < t2 * t2; ++p) idx[h * t2 * t2 + p] = rel[p] * heads + h;
    a.bias_index = std::make_shared<const std::vector<std::size_t>>(std::move(idx));
    return a;
  }

  /// Relative position bias expanded to [heads, M*M, M*M].
  Tensor<T> bias() const {
    const std::size_t t2 = window * window;
    return gather(rel_table, bias_index, {heads, t2, t2});
  }

  /// Multi-head attention inside each window of a [B, H*W, C] token grid.
  /// With shift > 0 the grid is rolled by -shift first and `mask`
  /// ([num_windows, M*M, M*M]) blocks pairs from different regions. The result
  /// is rolled back. `weights` optionally receives the softmax output
  /// [B, windows, heads, M*M, M*M].
  Tensor<T> operator()(const Tensor<T>& x, std::size_t grid, std::size_t shift, const Tensor<T>& mask,
                       Tensor<T>* weights = nullptr) const {
    if (x.rank() != 3 || x.dim(1) != grid * grid || x.dim(2) != channels) {
      throw ShapeError("window attention expects [B, " + std::to_string(grid * grid) + ", " +
                       std::to_string(channels) + "], got " + shape_str(x.shape()));
    }
    check_window(grid, window);
    const std::size_t batch = x.dim(0), c = channels, d = c / heads, t2 = window * window;
    const std::size_t nw = (grid / window) * (grid / window);
    const std::size_t groups = batch * nw;

    Tensor<T> h = x;
    if (shift) h = gather(h, roll_index(batch, grid, c, -static_cast<std::ptrdiff_t>(shift)), x.shape());
    h = gather(h, window_partition_index(batch, grid, c, window), {groups, t2, c});

    const Tensor<T> packed = qkv(h);  // [groups, t2, 3c]
    auto split = [&](std::size_t part, bool transposed) {
      std::vector<std::size_t> idx(groups * heads * t2 * d);
      std::size_t o = 0;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t hd = 0; hd < heads; ++hd) {
          if (!transposed) {
            for (std::size_t t = 0; t < t2; ++t)
              for (std::size_t e = 0; e < d; ++e) idx[o++] = (g * t2 + t) * 3 * c + part * c + hd * d + e;
          } else {
            for (std::size_t e = 0; e < d; ++e)
              for (std::size_t t = 0; t < t2; ++t) idx[o++] = (g * t2 + t) * 3 * c + part * c + hd * d + e;
          }
        }
      Shape s = transposed ? Shape{batch, nw, heads, d, t2} : Shape{batch, nw, heads, t2, d};
      return gather(packed, std::move(idx), std::move(s));
    };
    const auto q = split(0, false);
    const auto kt = split(1, true);
    const auto v = split(2, false);

    Tensor<T> scores;
    {
      MacScope scope(attention_macs().window_scores);
      scores = matmul(q, kt);
    }
    scores = scale(scores, T(1) / std::sqrt(static_cast<T>(d)));
    scores = add(scores, bias());
    if (mask.defined()) scores = add(scores, reshape(mask, {nw, 1, t2, t2}));
    const auto attn = softmax(scores, -1);
    if (weights) *weights = attn;

    Tensor<T> out;
    {
      MacScope scope(attention_macs().window_aggregate);
      out = matmul(attn, v);  // [B, nw, heads, t2, d]
    }
    std::vector<std::size_t> merge(groups * t2 * c);
    {
      std::size_t o = 0;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t t = 0; t < t2; ++t)
          for (std::size_t hd = 0; hd < heads; ++hd)
            for (std::size_t e = 0; e < d; ++e) merge[o++] = ((g * heads + hd) * t2 + t) * d + e;
    }
    out = gather(out, std::move(merge), {groups, t2, c});
    out = proj(out);
    out = gather(out, invert_index(window_partition_index(batch, grid, c, window)), x.shape());
    if (shift) out = gather(out, roll_index(batch, grid, c, static_cast<std::ptrdiff_t>(shift)), x.shape());
    return out;
  }
};

/// Pre-norm transformer block over windows: Z += WMSA(LN(Z)); Z += MLP(LN(Z)).
template <class T>
struct SwinBlock {
  std::size_t grid = 0;
  std::size_t shift = 0;
  LayerNorm<T> norm1;
  WindowAttention<T> attn;
  LayerNorm<T> norm2;
  Mlp<T> mlp;
  Tensor<T> mask;  // [num_windows, M*M, M*M] for shifted blocks

  static SwinBlock create(ParamStore<T>& store, const std::string& name, const StageSpec& spec,
                          std::size_t block_index, std::size_t mlp_ratio, double eps, Rng& rng) {
    SwinBlock b;
    b.grid = spec.grid;
    b.shift = block_index % 2 == 1 ? spec.shift : 0;
    b.norm1 = LayerNorm<T>::create(store, name + ".norm1", spec.channels, eps);
    b.attn = WindowAttention<T>::create(store, name + ".attn", spec.channels, spec.heads, spec.window, rng);
    b.norm2 = LayerNorm<T>::create(store, name + ".norm2", spec.channels, eps);
    b.mlp = Mlp<T>::create(store, name + ".mlp", spec.channels, mlp_ratio, rng);
    if (b.shift) b.mask = build_shift_mask<T>(spec.grid, spec.window, b.shift);
    return b;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto z = add(x, attn(norm1(x), grid, shift, mask));
    return add(z, mlp(norm2(z)));
  }
};

/// Non-overlapping PxP patches -> linear projection -> LayerNorm.
template <class T>
struct PatchEmbed {
  std::size_t patch = 4;
  std::size_t in_channels = 3;
  Linear<T> proj;
  LayerNorm<T> norm;

  static PatchEmbed create(ParamStore<T>& store, const std::string& name, std::size_t in_channels,
                           std::size_t patch, std::size_t channels, double eps, Rng& rng) {
    PatchEmbed p;
    p.patch = patch;
    p.in_channels = in_channels;
    p.proj = Linear<T>::create(store, name + ".proj", in_channels * patch * patch, channels, rng);
    p.norm = LayerNorm<T>::create(store, name + ".norm", channels, eps);
    return p;
  }

  /// [B, Cin, H, W] -> patch vectors [B, N, Cin*P*P] ordered (c, py, px).
  Tensor<T> unfold(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_channels) {
      throw ShapeError("patch_embed expects [B," + std::to_string(in_channels) + ",H,W], got " + shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (h % patch != 0 || w % patch != 0) {
      throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch size " +
                        std::to_string(patch));
    }
    const std::size_t gh = h / patch, gw = w / patch, k = in_channels * patch * patch;
    std::vector<std::size_t> idx(batch * gh * gw * k);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < gh; ++i)
        for (std::size_t j = 0; j < gw; ++j)
          for (std::size_t c = 0; c < in_channels; ++c)
            for (std::size_t py = 0; py < patch; ++py)
              for (std::size_t px = 0; px < patch; ++px)
                idx[o++] = ((b * in_channels + c) * h + i * patch + py) * w + j * patch + px;
    return gather(x, std::move(idx), {batch, gh * gw, k});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return norm(proj(unfold(x))); }
};

/// 2x2 neighborhood concat (4C) -> LayerNorm -> Linear(4C -> 2C, no bias).
template <class T>
struct PatchMerging {
  std::size_t grid = 0;
  std::size_t channels = 0;
  LayerNorm<T> norm;
  Linear<T> reduction;

  static PatchMerging create(ParamStore<T>& store, const std::string& name, std::size_t grid,
                             std::size_t channels, double eps, Rng& rng) {
    if (grid % 2 != 0) throw ConfigError("patch merging needs an even grid, got " + std::to_string(grid));
    PatchMerging m;
    m.grid = grid;
    m.channels = channels;
    m.norm = LayerNorm<T>::create(store, name + ".norm", 4 * channels, eps);
    m.reduction = Linear<T>::create(store, name + ".reduction", 4 * channels, 2 * channels, rng, false);
    return m;
  }

  /// [B, H*W, C] -> [B, (H/2)*(W/2), 4C]; neighbor order (0,0), (1,0), (0,1), (1,1).
  Tensor<T> gather_neighborhoods(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(1) != grid * grid || x.dim(2) != channels) {
      throw ShapeError("patch_merge expects [B, " + std::to_string(grid * grid) + ", " + std::to_string(channels) +
                       "], got " + shape_str(x.shape()));
    }
    const std::size_t batch = x.dim(0), half = grid / 2, c = channels;
    static constexpr std::size_t offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    std::vector<std::size_t> idx(batch * half * half * 4 * c);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < half; ++i)
        for (std::size_t j = 0; j < half; ++j)
          for (const auto& off : offsets) {
            const std::size_t base = ((b * grid + 2 * i + off[0]) * grid + 2 * j + off[1]) * c;
            for (std::size_t ch = 0; ch < c; ++ch) idx[o++] = base + ch;
          }
    return gather(x, std::move(idx), {batch, half * half, 4 * c});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return reduction(norm(gather_neighborhoods(x))); }
};

/// [B, H*W, C] tokens -> [B, C, H, W] map.
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t grid) {
  if (tokens.rank() != 3 || tokens.dim(1) != grid * grid) {
    throw ShapeError("tokens " + shape_str(tokens.shape()) + " do not form a " + std::to_string(grid) + "x" +
                     std::to_string(grid) + " grid");
  }
  return reshape(permute(tokens, {0, 2, 1}), {tokens.dim(0), tokens.dim(2), grid, grid});
}

/// [B, C, H, W] map -> [B, H*W, C] tokens.
template <class T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  if (map.rank() != 4) throw ShapeError("expected a [B,C,H,W] map, got " + shape_str(map.shape()));
  return permute(reshape(map, {map.dim(0), map.dim(1), map.dim(2) * map.dim(3)}), {0, 2, 1});
}

template <class T>
struct EncoderStage {
  StageSpec spec;
  std::vector<SwinBlock<T>> blocks;
};

/// Stage outputs Z_s and their map form S_s.
template <class T>
struct EncoderOutput {
  std::vector<Tensor<T>> tokens;
  std::vector<Tensor<T>> skips;
};

template <class T>
class SwinEncoder {
 public:
  SwinEncoder() = default;

  SwinEncoder(const ModelConfig& cfg, ParamStore<T>& store, Rng& rng) : specs_(cfg.stages()) {
    embed_ = PatchEmbed<T>::create(store, "encoder.patch_embed", cfg.in_channels, cfg.patch_size,
                                   cfg.base_channels, cfg.ln_eps, rng);
    for (std::size_t s = 0; s < specs_.size(); ++s) {
      const std::string prefix = "encoder.stage" + std::to_string(s + 1);
      EncoderStage<T> stage;
      stage.spec = specs_[s];
      for (std::size_t b = 0; b < specs_[s].depth; ++b) {
        stage.blocks.push_back(SwinBlock<T>::create(store, prefix + ".block" + std::to_string(b), specs_[s], b,
                                                    cfg.mlp_ratio, cfg.ln_eps, rng));
      }
      stages_.push_back(std::move(stage));
      if (s + 1 < specs_.size()) {
        merges_.push_back(PatchMerging<T>::create(store, prefix + ".merge", specs_[s].grid, specs_[s].channels,
                                                  cfg.ln_eps, rng));
      }
    }
  }

  const std::vector<StageSpec>& stages() const { return specs_; }
  const PatchEmbed<T>& patch_embed() const { return embed_; }
  const EncoderStage<T>& stage(std::size_t s) const { return stages_.at(s); }
  const PatchMerging<T>& merge(std::size_t s) const { return merges_.at(s); }

  EncoderOutput<T> operator()(const Tensor<T>& image) const {
    EncoderOutput<T> out;
    Tensor<T> z = embed_(image);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) z = merges_[s - 1](z);
      for (const auto& block : stages_[s].blocks) z = block(z);
      out.tokens.push_back(z);
      out.skips.push_back(tokens_to_map(z, specs_[s].grid));
    }
    return out;
  }

 private:
  std::vector<StageSpec> specs_;
  PatchEmbed<T> embed_;
  std::vector<EncoderStage<T>> stages_;
  std::vector<PatchMerging<T>> merges_;
};

}  // namespace swintext
