#pragma once

// Text embeddings and text-guided refinement of encoder tokens.
//
// Embeddings come either from a CTXE file written by an external exporter, or
// from a deterministic stub keyed by the normalized prompt. They are frozen:
// only the projector and the guidance blocks are trainable.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/swin.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

/// Trim, lowercase (ASCII) and collapse internal whitespace runs to one space.
inline std::string normalize_prompt(const std::string& prompt) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : prompt) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(ch)));
  }
  return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct SplitMix64 {
  std::uint64_t state;

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform_open() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }
};

/// Pooled embedding of one prompt. The token form is the same vector as a
/// length-1 sequence.
struct TextEmbedding {
  std::string prompt;
  std::vector<double> pooled;

  std::size_t dim() const { return pooled.size(); }

  template <class T>
  Tensor<T> tokens() const {
    return Tensor<T>({1, 1, pooled.size()}, std::vector<T>(pooled.begin(), pooled.end()));
  }
};

/// Deterministic unit-norm stand-in for a frozen text tower: standard normals
/// from splitmix64 seeded with FNV-1a(normalized prompt) XOR seed.
inline TextEmbedding stub_encode(const std::string& prompt, std::size_t dim, std::uint64_t seed) {
  const std::string norm = normalize_prompt(prompt);
  if (norm.empty()) throw UsageError("cannot embed an empty prompt");
  if (dim == 0) throw UsageError("embedding dim must be positive");
  SplitMix64 rng{fnv1a64(norm) ^ seed};
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < dim; i += 2) {
    const double r = std::sqrt(-2.0 * std::log(rng.uniform_open()));
    const double theta = 2.0 * std::numbers::pi * rng.uniform_open();
    v[i] = r * std::cos(theta);
    if (i + 1 < dim) v[i + 1] = r * std::sin(theta);
  }
  double norm2 = 0.0;
  for (double x : v) norm2 += x * x;
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v) x *= inv;
  return {norm, std::move(v)};
}

// ---------------------------------------------------------------------------
// CTXE embedding files (little-endian):
//   "CTXE" | u32 version=1 | u32 count | u32 dim
//   count x ( u32 byte length | UTF-8 prompt | dim x f32 )

struct EmbeddingRecord {
  std::string prompt;
  std::vector<float> values;
};

struct EmbeddingTable {
  std::uint32_t dim = 0;
  std::vector<EmbeddingRecord> records;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const std::string& field) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated while reading " + field + " (need " + std::to_string(n) +
                            " bytes, have " + std::to_string(remaining()) + ")",
                        pos_);
    }
  }

  std::uint32_t u32(const std::string& field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32(const std::string& field) { return std::bit_cast<float>(u32(field)); }

  std::string take(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const { throw FormatError(what_ + ": " + msg, at); }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'", 0);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("short write to '" + path + "'");
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

inline std::string encode_ctxe(const EmbeddingTable& table) {
  std::string out = "CTXE";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(table.records.size()));
  detail::put_u32(out, table.dim);
  for (const auto& r : table.records) {
    if (r.values.size() != table.dim) {
      throw UsageError("embedding for '" + r.prompt + "' has " + std::to_string(r.values.size()) +
                       " values, table dim is " + std::to_string(table.dim));
    }
    detail::put_u32(out, static_cast<std::uint32_t>(r.prompt.size()));
    out += r.prompt;
    for (float f : r.values) detail::put_f32(out, f);
  }
  return out;
}

inline EmbeddingTable decode_ctxe(const std::string& bytes) {
  detail::ByteReader in(bytes, "CTXE");
  if (bytes.size() < 4) in.fail("file too short for magic", 0);
  if (bytes.compare(0, 4, "CTXE") != 0) in.fail("bad magic, expected \"CTXE\"", 0);
  in.take(4, "magic");
  const auto version_at = in.offset();
  const auto version = in.u32("version");
  if (version != 1) in.fail("unsupported version " + std::to_string(version), version_at);
  const auto count = in.u32("record count");
  const auto dim_at = in.offset();
  EmbeddingTable table;
  table.dim = in.u32("dim");
  if (table.dim == 0 && count > 0) in.fail("dim is zero", dim_at);
  std::map<std::string, std::size_t> seen;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto rec_at = in.offset();
    const auto len = in.u32("prompt length");
    EmbeddingRecord rec;
    rec.prompt = in.take(len, "prompt");
    in.need(std::size_t{4} * table.dim, "embedding values");
    rec.values.resize(table.dim);
    for (auto& f : rec.values) f = in.f32("embedding value");
    if (!seen.emplace(rec.prompt, r).second) in.fail("duplicate prompt '" + rec.prompt + "'", rec_at);
    table.records.push_back(std::move(rec));
  }
  if (!in.done()) in.fail(std::to_string(in.remaining()) + " trailing bytes after last record", in.offset());
  return table;
}

inline void write_ctxe(const std::string& path, const EmbeddingTable& table) {
  detail::write_file_bytes(path, encode_ctxe(table));
}

inline EmbeddingTable read_ctxe(const std::string& path) { return decode_ctxe(detail::read_file_bytes(path)); }

/// Maps prompts to frozen pooled embeddings.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  virtual TextEmbedding resolve(const std::string& prompt) const = 0;
};

class StubEmbeddingProvider : public EmbeddingProvider {
 public:
  StubEmbeddingProvider(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  std::size_t dim() const override { return dim_; }
  TextEmbedding resolve(const std::string& prompt) const override { return stub_encode(prompt, dim_, seed_); }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

class FileEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit FileEmbeddingProvider(EmbeddingTable table, bool l2_normalize = false)
      : dim_(table.dim), normalize_(l2_normalize) {
    for (auto& r : table.records) by_prompt_[normalize_prompt(r.prompt)] = std::move(r.values);
  }

  static FileEmbeddingProvider load(const std::string& path, bool l2_normalize = false) {
    return FileEmbeddingProvider(read_ctxe(path), l2_normalize);
  }

  std::size_t dim() const override { return dim_; }
  std::size_t size() const { return by_prompt_.size(); }

  TextEmbedding resolve(const std::string& prompt) const override {
    const std::string key = normalize_prompt(prompt);
    auto it = by_prompt_.find(key);
    if (it == by_prompt_.end()) {
      throw ResolutionError("no embedding for prompt '" + key + "'; nearest keys: " + nearest(key, 3));
    }
    TextEmbedding e{key, std::vector<double>(it->second.begin(), it->second.end())};
    if (normalize_) {
      double n2 = 0.0;
      for (double v : e.pooled) n2 += v * v;
      if (n2 > 0.0)
        for (double& v : e.pooled) v /= std::sqrt(n2);
    }
    return e;
  }

  std::string nearest(const std::string& key, std::size_t k) const {
    std::vector<std::pair<std::size_t, std::string>> scored;
    for (const auto& [p, _] : by_prompt_) scored.emplace_back(detail::edit_distance(key, p), p);
    std::sort(scored.begin(), scored.end());
    std::string out;
    for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) out += (i ? ", '" : "'") + scored[i].second + "'";
    return out.empty() ? "<none>" : out;
  }

 private:
  std::size_t dim_;
  bool normalize_;
  std::map<std::string, std::vector<float>> by_prompt_;
};

/// Stack pooled embeddings into a frozen [B, D_t] tensor.
template <class T>
Tensor<T> embedding_batch(const std::vector<TextEmbedding>& embeddings) {
  if (embeddings.empty()) throw UsageError("empty embedding batch");
  const std::size_t d = embeddings.front().dim();
  std::vector<T> v;
  v.reserve(embeddings.size() * d);
  for (const auto& e : embeddings) {
    if (e.dim() != d) throw ShapeError("embedding dims differ within a batch");
    v.insert(v.end(), e.pooled.begin(), e.pooled.end());
  }
  return Tensor<T>({embeddings.size(), d}, std::move(v));
}

// ---------------------------------------------------------------------------

/// Z~_t = Z_t W_t, then a per-stage adapter D_v -> C_s where the widths differ.
template <class T>
struct TextProjector {
  Tensor<T> weight;                        // [D_t, D_v]
  std::map<std::size_t, Tensor<T>> adapters;  // stage -> [D_v, C_s]

  static TextProjector create(ParamStore<T>& store, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    TextProjector p;
    const std::size_t dv = cfg.effective_visual_dim();
    p.weight = store.trunc_normal(name + ".weight", {cfg.text_dim, dv}, rng);
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
      const std::size_t c = cfg.stage_channels(s);
      if (c != dv) p.adapters[s] = store.trunc_normal(name + ".adapter" + std::to_string(s + 1), {dv, c}, rng);
    }
    return p;
  }

  /// [B, D_t] or [B, 1, D_t] embeddings -> text tokens [B, 1, C_s].
  Tensor<T> operator()(const Tensor<T>& embedding, std::size_t stage) const {
    const std::size_t batch = embedding.dim(0);
    if (embedding.dim(-1) != weight.dim(0)) {
      throw ShapeError("text embedding " + shape_str(embedding.shape()) + " does not match projector input dim " +
                       std::to_string(weight.dim(0)));
    }
    auto z = matmul(reshape(embedding, {batch, 1, embedding.dim(-1)}), weight);
    auto it = adapters.find(stage);
    if (it != adapters.end()) z = matmul(z, it->second);
    return z;
  }
};

/// Vision queries attend to text keys/values:
///   Z' = LN(Z + Attn(Z W_Q, Z_t W_K, Z_t W_V) W_O);  Z'' = Z' + MLP(LN(Z')).
template <class T>
struct CrossAttentionBlock {
  std::size_t channels = 0;
  std::size_t heads = 1;
  Linear<T> wq, wk, wv, wo;
  LayerNorm<T> norm1, norm2;
  Mlp<T> mlp;

  static CrossAttentionBlock create(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                    std::size_t heads, std::size_t mlp_ratio, double eps, Rng& rng) {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError(std::to_string(heads) + " heads do not divide " + std::to_string(channels) + " channels");
    }
    CrossAttentionBlock b;
    b.channels = channels;
    b.heads = heads;
    b.wq = Linear<T>::create(store, name + ".q", channels, channels, rng);
    b.wk = Linear<T>::create(store, name + ".k", channels, channels, rng);
    b.wv = Linear<T>::create(store, name + ".v", channels, channels, rng);
    b.wo = Linear<T>::create(store, name + ".out", channels, channels, rng);
    b.norm1 = LayerNorm<T>::create(store, name + ".norm1", channels, eps);
    b.norm2 = LayerNorm<T>::create(store, name + ".norm2", channels, eps);
    b.mlp = Mlp<T>::create(store, name + ".mlp", channels, mlp_ratio, rng);
    return b;
  }

  /// Attention output before the residual, [B, N, C]. `weights` receives the
  /// softmax over text tokens, [B, heads, N, T].
  Tensor<T> attend(const Tensor<T>& z, const Tensor<T>& text, Tensor<T>* weights = nullptr) const {
    if (z.rank() != 3 || z.dim(2) != channels || text.rank() != 3 || text.dim(2) != channels ||
        text.dim(0) != z.dim(0)) {
      throw ShapeError("cross attention expects Z[B,N," + std::to_string(channels) + "] and text[B,T," +
                       std::to_string(channels) + "], got " + shape_str(z.shape()) + " and " + shape_str(text.shape()));
    }
    const std::size_t batch = z.dim(0), n = z.dim(1), t = text.dim(1), c = channels, d = c / heads;
    auto split_heads = [&](const Tensor<T>& x, std::size_t len, bool transposed) {
      std::vector<std::size_t> idx(batch * heads * len * d);
      std::size_t o = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
          if (!transposed) {
            for (std::size_t i = 0; i < len; ++i)
              for (std::size_t e = 0; e < d; ++e) idx[o++] = (b * len + i) * c + h * d + e;
          } else {
            for (std::size_t e = 0; e < d; ++e)
              for (std::size_t i = 0; i < len; ++i) idx[o++] = (b * len + i) * c + h * d + e;
          }
        }
      Shape s = transposed ? Shape{batch, heads, d, len} : Shape{batch, heads, len, d};
      return gather(x, std::move(idx), std::move(s));
    };
    const auto q = split_heads(wq(z), n, false);
    const auto kt = split_heads(wk(text), t, true);
    const auto v = split_heads(wv(text), t, false);
    Tensor<T> scores;
    {
      MacScope scope(attention_macs().cross_scores);
      scores = matmul(q, kt);  // [B, heads, N, T]
    }
    const auto attn = softmax(scale(scores, T(1) / std::sqrt(static_cast<T>(d))), -1);
    if (weights) *weights = attn;
    Tensor<T> out;
    {
      MacScope scope(attention_macs().cross_aggregate);
      out = matmul(attn, v);  // [B, heads, N, d]
    }
    std::vector<std::size_t> merge(batch * n * c);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t e = 0; e < d; ++e) merge[o++] = ((b * heads + h) * n + i) * d + e;
    return wo(gather(out, std::move(merge), {batch, n, c}));
  }

  Tensor<T> operator()(const Tensor<T>& z, const Tensor<T>& text, Tensor<T>* weights = nullptr) const {
    const auto refined = norm1(add(z, attend(z, text, weights)));
    return add(refined, mlp(norm2(refined)));
  }
};

/// Broadcast the text token to every spatial token, concatenate, map 2C -> C.
template <class T>
struct ConcatFusion {
  Linear<T> proj;

  static ConcatFusion create(ParamStore<T>& store, const std::string& name, std::size_t channels, Rng& rng) {
    return {Linear<T>::create(store, name + ".proj", 2 * channels, channels, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& z, const Tensor<T>& text) const {
    if (z.rank() != 3 || text.rank() != 3 || text.dim(1) != 1 || text.dim(2) != z.dim(2) || text.dim(0) != z.dim(0)) {
      throw ShapeError("concat fusion expects Z[B,N,C] and text[B,1,C], got " + shape_str(z.shape()) + " and " +
                       shape_str(text.shape()));
    }
    const std::size_t batch = z.dim(0), n = z.dim(1), c = z.dim(2);
    std::vector<std::size_t> idx(batch * n * c);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < c; ++e) idx[(b * n + i) * c + e] = b * c + e;
    const auto tiled = gather(text, std::move(idx), z.shape());
    return proj(concat<T>({z, tiled}, -1));
  }
};

/// Applies text guidance to the encoder stage tokens according to the
/// ablation flags.
template <class T>
class TextGuidance {
 public:
  TextGuidance() = default;

  TextGuidance(const ModelConfig& cfg, ParamStore<T>& store, Rng& rng, const std::string& prefix = "guidance")
      : cfg_(cfg) {
    // Only the path selected by the ablation flags owns parameters.
    if (!cfg.use_text) return;
    projector_ = TextProjector<T>::create(store, prefix + ".text_proj", cfg, rng);
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
      const std::size_t c = cfg.stage_channels(s);
      const std::string id = std::to_string(s + 1);
      if (cfg.use_cross_attention) {
        cross_.push_back(CrossAttentionBlock<T>::create(store, prefix + ".cross" + id, c, cross_attention_heads(c),
                                                        cfg.mlp_ratio, cfg.ln_eps, rng));
      } else {
        concat_.push_back(ConcatFusion<T>::create(store, prefix + ".concat" + id, c, rng));
      }
    }
  }

  const TextProjector<T>& projector() const { return projector_; }
  const CrossAttentionBlock<T>& cross(std::size_t s) const { return cross_.at(s); }
  const ConcatFusion<T>& concat_fusion(std::size_t s) const { return concat_.at(s); }

  /// Guide the tokens of one stage (or decoder level with the same width).
  /// `weights` receives the cross-attention softmax when that path runs.
  Tensor<T> apply_stage(const Tensor<T>& z, const Tensor<T>& embedding, std::size_t stage,
                        Tensor<T>* weights = nullptr) const {
    if (!cfg_.use_text) return z;
    const auto text = projector_(embedding, stage);
    if (!cfg_.use_cross_attention) return concat_[stage](z, text);
    return cross_[stage](z, text, weights);
  }

  std::vector<Tensor<T>> operator()(const std::vector<Tensor<T>>& tokens, const Tensor<T>& embedding,
                                    std::vector<Tensor<T>>* weights = nullptr) const {
    std::vector<Tensor<T>> out;
    for (std::size_t s = 0; s < tokens.size(); ++s) {
      Tensor<T> w;
      out.push_back(apply_stage(tokens[s], embedding, s, &w));
      if (weights) weights->push_back(w);
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  TextProjector<T> projector_;
  std::vector<CrossAttentionBlock<T>> cross_;
  std::vector<ConcatFusion<T>> concat_;
};

}  // namespace swintext
