#pragma once

// Full network: encoder -> text guidance -> bottleneck fusion -> decoder ->
// sigmoid mask.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/decoder.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/swin.hpp"
#include "swintext/tensor.hpp"
#include "swintext/text.hpp"

namespace swintext {

template <class T>
struct ModelOutput {
  Tensor<T> logits;                      // [B, 1, H, W]
  Tensor<T> probs;                       // sigmoid(logits)
  std::vector<Tensor<T>> stage_tokens;   // raw Z_s
  std::vector<Tensor<T>> guided_tokens;  // after text guidance
  std::vector<Tensor<T>> cross_weights;  // per stage; undefined when cross attention is off
  std::vector<std::size_t> decoder_grids;
  std::vector<std::size_t> decoder_widths;
};

template <class T>
class SwinTextUNet {
 public:
  SwinTextUNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed({seed, 0x5717}));
    encoder_ = SwinEncoder<T>(cfg_, store_, rng);
    guidance_ = TextGuidance<T>(cfg_, store_, rng);
    decoder_ = Decoder<T>(cfg_, store_, rng);
    if (cfg_.decoder_guidance) {
      decoder_guidance_.emplace(cfg_, store_, rng, "decoder_guidance");
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const SwinEncoder<T>& encoder() const { return encoder_; }
  const TextGuidance<T>& guidance() const { return guidance_; }
  const Decoder<T>& decoder() const { return decoder_; }

  /// image [B, C_in, H, W]; embedding [B, D_t] (frozen, ignored when text is off).
  ModelOutput<T> forward(const Tensor<T>& image, const Tensor<T>& embedding) const {
    check_input(image, embedding);
    ModelOutput<T> out;
    auto enc = encoder_(image);
    out.stage_tokens = enc.tokens;
    for (std::size_t s = 0; s < enc.tokens.size(); ++s) {
      Tensor<T> w;
      out.guided_tokens.push_back(guidance_.apply_stage(enc.tokens[s], embedding, s, &w));
      out.cross_weights.push_back(w);
    }
    DecoderHook<T> hook;
    if (decoder_guidance_ && cfg_.use_text) {
      hook = [&](const Tensor<T>& y, std::size_t s) { return decoder_guidance_->apply_stage(y, embedding, s); };
    }
    auto dec = decoder_(out.guided_tokens, enc.skips, hook);
    out.logits = dec.logits;
    out.probs = sigmoid(dec.logits);
    out.decoder_grids = std::move(dec.grids);
    out.decoder_widths = std::move(dec.widths);
    return out;
  }

  Tensor<T> operator()(const Tensor<T>& image, const Tensor<T>& embedding) const {
    return forward(image, embedding).probs;
  }

 private:
  void check_input(const Tensor<T>& image, const Tensor<T>& embedding) const {
    if (image.rank() != 4 || image.dim(1) != cfg_.in_channels || image.dim(2) != cfg_.image_size ||
        image.dim(3) != cfg_.image_size) {
      throw ShapeError("model expects images [B," + std::to_string(cfg_.in_channels) + "," +
                       std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
                       shape_str(image.shape()));
    }
    if (!cfg_.use_text) return;
    if (!embedding.defined() || embedding.rank() != 2 || embedding.dim(0) != image.dim(0) ||
        embedding.dim(1) != cfg_.text_dim) {
      throw ShapeError("model expects text embeddings [" + std::to_string(image.dim(0)) + "," +
                       std::to_string(cfg_.text_dim) + "], got " +
                       (embedding.defined() ? shape_str(embedding.shape()) : std::string("none")));
    }
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  SwinEncoder<T> encoder_;
  TextGuidance<T> guidance_;
  Decoder<T> decoder_;
  std::optional<TextGuidance<T>> decoder_guidance_;
};

}  // namespace swintext
