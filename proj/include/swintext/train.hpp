#pragma once

// Epoch loop: augment, forward, hybrid loss, backward, AdamW, per-epoch
// metrics CSV, loss plot and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "swintext/augment.hpp"
#include "swintext/checkpoint.hpp"
#include "swintext/config.hpp"
#include "swintext/data.hpp"
#include "swintext/loss.hpp"
#include "swintext/model.hpp"
#include "swintext/optim.hpp"
#include "swintext/text.hpp"

namespace swintext {

inline std::unique_ptr<EmbeddingProvider> make_provider(const RunConfig& cfg) {
  if (cfg.embeddings.empty()) return std::make_unique<StubEmbeddingProvider>(cfg.model.text_dim, cfg.text_seed);
  auto p = std::make_unique<FileEmbeddingProvider>(FileEmbeddingProvider::load(cfg.embeddings, cfg.normalize_embeddings));
  if (p->dim() != cfg.model.text_dim) {
    throw ConfigError("embedding file '" + cfg.embeddings + "' has dim " + std::to_string(p->dim()) +
                      " but text_dim is " + std::to_string(cfg.model.text_dim));
  }
  return p;
}

/// Prompt -> frozen embedding, resolved once up front.
class EmbeddingCache {
 public:
  EmbeddingCache(const EmbeddingProvider& provider, const std::vector<const std::vector<SegSample>*>& splits) {
    for (const auto* split : splits)
      for (const auto& s : *split) {
        const auto key = normalize_prompt(s.prompt);
        if (!table_.count(key)) table_.emplace(key, provider.resolve(s.prompt));
      }
  }

  const TextEmbedding& get(const std::string& prompt) const {
    auto it = table_.find(normalize_prompt(prompt));
    if (it == table_.end()) throw ResolutionError("prompt was not resolved: '" + prompt + "'");
    return it->second;
  }

  std::size_t size() const { return table_.size(); }
  const std::map<std::string, TextEmbedding>& entries() const { return table_; }

 private:
  std::map<std::string, TextEmbedding> table_;
};

template <class T>
Tensor<T> embeddings_for(const EmbeddingCache& cache, const std::vector<const SegSample*>& samples) {
  std::vector<TextEmbedding> e;
  for (const auto* s : samples) e.push_back(cache.get(s->prompt));
  return embedding_batch<T>(e);
}

struct EvalResult {
  double loss = 0.0;
  double dice = 0.0;  // mean over images
  double iou = 0.0;
  std::vector<DiceIou> per_image;
};

/// Adds per-image overlap scores of a [B,1,H,W] probability batch.
template <class T>
void accumulate_metrics(const Tensor<T>& probs, const Tensor<T>& target, std::vector<DiceIou>& out) {
  const std::size_t batch = probs.dim(0), hw = probs.numel() / batch;
  for (std::size_t b = 0; b < batch; ++b) {
    out.push_back(dice_iou_metrics(probs.data().subspan(b * hw, hw), target.data().subspan(b * hw, hw)));
  }
}

inline void summarize(EvalResult& r) {
  double d = 0.0, i = 0.0;
  for (const auto& m : r.per_image) {
    d += m.dice;
    i += m.iou;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, r.per_image.size()));
  r.dice = d / n;
  r.iou = i / n;
}

template <class T>
EvalResult evaluate(const SwinTextUNet<T>& model, const std::vector<SegSample>& samples, const EmbeddingCache& cache,
                    const LossConfig& loss_cfg, std::size_t batch_size) {
  NoGradGuard no_grad;
  EvalResult r;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const SegSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
    auto [image, mask] = make_batch<T>(batch, model.config().in_channels);
    const auto probs = model(image, embeddings_for<T>(cache, batch));
    loss_sum += static_cast<double>(hybrid_loss(probs, mask, loss_cfg).item()) * static_cast<double>(batch.size());
    accumulate_metrics(probs, mask, r.per_image);
  }
  r.loss = samples.empty() ? 0.0 : loss_sum / static_cast<double>(samples.size());
  summarize(r);
  return r;
}

/// Probability map for one grayscale image.
template <class T>
Image predict(const SwinTextUNet<T>& model, const Image& image, const TextEmbedding& embedding) {
  NoGradGuard no_grad;
  SegSample s{"", image, Image(image.width, image.height), ""};
  auto [x, _] = make_batch<T>({&s}, model.config().in_channels);
  const auto probs = model(x, embedding_batch<T>({embedding}));
  Image out(image.width, image.height);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = static_cast<float>(probs.data()[i]);
  return out;
}

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0, dice = 0.0, iou = 0.0, lr = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,split,loss,dice,iou,lr\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.split.c_str(), r.loss, r.dice, r.iou,
                  r.lr);
    out += buf;
  }
  return out;
}

/// Line chart of loss per epoch, one polyline per split.
inline std::string loss_plot_svg(const std::vector<MetricsRow>& rows) {
  const double W = 640, H = 400, L = 60, R = 20, Tp = 30, B = 50;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double max_epoch = 1, max_loss = 1e-12;
  for (const auto& r : rows) {
    if (!std::isfinite(r.loss)) continue;
    series[r.split].emplace_back(static_cast<double>(r.epoch), r.loss);
    max_epoch = std::max(max_epoch, static_cast<double>(r.epoch));
    max_loss = std::max(max_loss, r.loss);
  }
  auto sx = [&](double e) { return L + (W - L - R) * e / max_epoch; };
  auto sy = [&](double l) { return H - B - (H - Tp - B) * l / max_loss; };
  char buf[512];
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, Tp, L, H - B);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n"
                "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"end\">%.3g</text>\n"
                "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"end\">0</text>\n"
                "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">%g</text>\n",
                (L + W - R) / 2, H - 15, L - 6, Tp + 4, max_loss, L - 6, H - B + 4, W - R, H - B + 18, max_epoch);
  svg += buf;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::size_t k = 0;
  for (const auto& [split, pts] : series) {
    const char* color = colors[k % 4];
    svg += std::string("<polyline fill=\"none\" stroke=\"") + color + "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [e, l] : pts) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx(e), sy(l));
      svg += buf;
    }
    svg += "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\" fill=\"%s\">%s loss</text>\n", W - R - 90,
                  Tp + 14.0 * static_cast<double>(k), color, split.c_str());
    svg += buf;
    ++k;
  }
  svg += "</svg>\n";
  return svg;
}

struct TrainOptions {
  std::string out_dir;  // empty: keep everything in memory
  bool eval_val_each_epoch = true;
  bool eval_test_at_end = true;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::string csv;
  std::string last_checkpoint;  // encoded bytes
  std::string best_checkpoint;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  double final_train_dice = 0.0;
  EvalResult final_train_eval;
  EvalResult test;
  bool has_test = false;
  std::string variant;
  std::size_t parameter_count = 0;
  std::shared_ptr<SwinTextUNet<float>> model;
};

/// Trains a fresh model on `data.train` (float32). Deterministic given the
/// run config: sample order and augmentation draws depend only on (seed,
/// epoch, sample index).
inline TrainResult train(const Dataset& data, const RunConfig& cfg, const TrainOptions& opt = {}) {
  using T = float;
  namespace fs = std::filesystem;
  cfg.validate();
  if (data.train.empty()) throw UsageError("training split is empty");
  auto log = [&](const std::string& msg) {
    if (opt.log) opt.log(msg);
  };

  const auto provider = make_provider(cfg);
  const EmbeddingCache cache(*provider, {&data.train, &data.val, &data.test});

  auto model_ptr = std::make_shared<SwinTextUNet<T>>(cfg.model, cfg.seed);
  auto& model = *model_ptr;
  AdamW<T> optimizer(cfg.optim);
  const std::string config_text = serialize_config(cfg);

  TrainResult result;
  result.variant = ablation_variant_name(cfg.model);
  result.parameter_count = model.params().total_elements();
  log("variant: " + result.variant + " | " + stage_variant_name(cfg.model.num_stages) + " | " +
      std::to_string(result.parameter_count) + " parameters | " + std::to_string(cache.size()) + " prompts");

  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
  auto write = [&](const std::string& file, const std::string& bytes) {
    if (!opt.out_dir.empty()) detail::write_file_bytes((fs::path(opt.out_dir) / file).string(), bytes);
  };

  std::string last_good = encode_checkpoint(make_checkpoint(model.params(), config_text));
  double best_score = -1.0;
  const std::size_t n = data.train.size();

  for (std::size_t epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.schedule);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed({cfg.seed, epoch, 0x5f1}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EvalResult train_eval;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<SegSample> augmented;
      for (std::size_t i = start; i < std::min(n, start + cfg.batch_size); ++i) {
        Rng aug_rng(mix_seed({cfg.seed, epoch, order[i], 0xa06}));
        augmented.push_back(augment(data.train[order[i]], cfg.augment, aug_rng));
      }
      std::vector<const SegSample*> batch;
      for (const auto& s : augmented) batch.push_back(&s);
      auto [image, mask] = make_batch<T>(batch, cfg.model.in_channels);
      const auto emb = embeddings_for<T>(cache, batch);

      model.params().zero_grad();
      const auto probs = model(image, emb);
      const auto loss = hybrid_loss(probs, mask, cfg.loss);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        write("last_good.stun", last_good);
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + "; last good checkpoint kept");
      }
      backward(loss);
      optimizer.step(model.params(), lr);
      loss_sum += lv * static_cast<double>(batch.size());
      accumulate_metrics(probs, mask, train_eval.per_image);
    }
    train_eval.loss = loss_sum / static_cast<double>(n);
    summarize(train_eval);
    if (epoch == 0) result.initial_train_loss = train_eval.loss;
    result.final_train_loss = train_eval.loss;
    result.final_train_dice = train_eval.dice;
    result.rows.push_back({epoch, "train", train_eval.loss, train_eval.dice, train_eval.iou, lr});

    last_good = encode_checkpoint(make_checkpoint(model.params(), config_text));
    double score = train_eval.dice;
    char buf[256];
    std::snprintf(buf, sizeof buf, "epoch %zu lr %.3g train loss %.5f dice %.4f iou %.4f", epoch, lr, train_eval.loss,
                  train_eval.dice, train_eval.iou);
    std::string line = buf;
    if (!data.val.empty() && (opt.eval_val_each_epoch || epoch + 1 == cfg.schedule.epochs)) {
      const auto v = evaluate(model, data.val, cache, cfg.loss, cfg.batch_size);
      result.rows.push_back({epoch, "val", v.loss, v.dice, v.iou, lr});
      score = v.dice;
      std::snprintf(buf, sizeof buf, " | val loss %.5f dice %.4f", v.loss, v.dice);
      line += buf;
    }
    if (score > best_score) {
      best_score = score;
      result.best_checkpoint = last_good;
    }
    log(line);
  }

  const std::size_t last_epoch = cfg.schedule.epochs - 1;
  result.final_train_eval = evaluate(model, data.train, cache, cfg.loss, cfg.batch_size);
  if (!data.test.empty() && opt.eval_test_at_end) {
    result.test = evaluate(model, data.test, cache, cfg.loss, cfg.batch_size);
    result.has_test = true;
    result.rows.push_back({last_epoch, "test", result.test.loss, result.test.dice, result.test.iou,
                           lr_at(last_epoch, cfg.schedule)});
    char buf[160];
    std::snprintf(buf, sizeof buf, "test loss %.5f dice %.4f iou %.4f", result.test.loss, result.test.dice,
                  result.test.iou);
    log(buf);
  }

  result.csv = metrics_csv(result.rows);
  result.last_checkpoint = last_good;
  write("metrics.csv", result.csv);
  write("loss.svg", loss_plot_svg(result.rows));
  write("last.stun", result.last_checkpoint);
  write("best.stun", result.best_checkpoint);
  write("variant.txt", result.variant + "\n" + stage_variant_name(cfg.model.num_stages) + "\n");
  result.model = model_ptr;
  return result;
}

}  // namespace swintext
