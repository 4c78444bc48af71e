// One PASS/FAIL line per acceptance criterion. Pass criterion numbers as
// arguments to run a subset, e.g. `acceptance 3 4`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>

#include "swintext/swintext.hpp"

using namespace swintext;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool report(int id, bool pass, const std::string& detail) {
  std::printf("AC%-2d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return pass;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

template <class Fn>
bool throws_format(Fn&& fn, std::string* msg = nullptr) {
  try {
    fn();
  } catch (const FormatError& e) {
    if (msg) *msg = e.what();
    return true;
  }
  return false;
}

bool ac1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t n = 0, tight_failures = 0;
  std::string worst_name;
  verify::gradcheck_suite(20, 0.0, [&](const verify::CheckResult& r) {
    ++n;
    if (!r.passed) ++tight_failures;
    if (r.max_error >= worst) {
      worst = r.max_error;
      worst_name = r.name;
    }
  });
  const double secs = seconds_since(t0);
  const bool pass = worst <= 1e-4 && secs < 600.0;
  return report(1, pass,
                std::to_string(n) + " checks x 20 seeds, worst rel err " + fmt("%.2e", worst) + " (" + worst_name +
                    "), " + std::to_string(tight_failures) + " above per-op tolerance, " + fmt("%.1fs", secs));
}

bool ac2() {
  const ModelConfig cfg;
  const auto specs = cfg.stages();
  const std::vector<std::pair<std::size_t, std::size_t>> want{{56, 96}, {28, 192}, {14, 384}, {7, 768}};
  bool ok = specs.size() == 4;
  for (std::size_t s = 0; ok && s < 4; ++s) ok = specs[s].grid == want[s].first && specs[s].channels == want[s].second;

  SwinTextUNet<float> model(cfg, 0);
  NoGradGuard ng;
  const auto out = model.forward(Tensor<float>::full({1, 3, 224, 224}, 0.5f),
                                 embedding_batch<float>({stub_encode("left lung", cfg.text_dim, 0)}));
  for (std::size_t s = 0; s < 4; ++s) {
    const Shape shape{1, want[s].first * want[s].first, want[s].second};
    ok = ok && out.stage_tokens[s].shape() == shape && out.guided_tokens[s].shape() == shape;
  }
  ok = ok && out.decoder_grids == std::vector<std::size_t>{7, 14, 28, 56, 112};
  ok = ok && out.logits.shape() == Shape{1, 1, 224, 224};
  std::string chain;
  for (auto g : out.decoder_grids) chain += (chain.empty() ? "" : "->") + std::to_string(g);
  return report(2, ok,
                "stages " + shape_str(out.stage_tokens[0].shape()) + " " + shape_str(out.stage_tokens[1].shape()) + " " +
                    shape_str(out.stage_tokens[2].shape()) + " " + shape_str(out.stage_tokens[3].shape()) +
                    ", decoder " + chain + ", logits " + shape_str(out.logits.shape()));
}

bool ac3() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) worst = std::max(worst, verify::attention_oracle_error(s, 8, 4, 2));
  return report(3, worst <= 1e-10, "8x8 grid, M=4, shift 2, 20 seeds, max abs diff " + fmt("%.2e", worst));
}

bool ac4() {
  const auto r = verify::measure_attention_macs<float>(56, 7, 32, 1);
  bool ok = r.windowed * 64 == r.global;
  for (auto [g, m] : {std::pair<std::size_t, std::size_t>{8, 4}, {16, 4}, {28, 7}, {12, 3}}) {
    const auto x = verify::measure_attention_macs<float>(g, m, 8, 2);
    ok = ok && x.windowed * g * g == x.global * m * m;
  }
  return report(4, ok,
                "56x56, M=7: windowed " + std::to_string(r.windowed) + " / global " + std::to_string(r.global) +
                    " = " + fmt("1/%.0f", static_cast<double>(r.global) / static_cast<double>(r.windowed)) +
                    "; M^2/HW exact on 4 more grids");
}

bool ac5() {
  const auto cfg = toy_run_config().model;
  SwinTextUNet<double> model(cfg, 5);
  Rng rng(5);
  const auto img = verify::random_tensor({2, 3, cfg.image_size, cfg.image_size}, rng, 0, 1);
  const auto emb_a = embedding_batch<double>({stub_encode("upper left lung", cfg.text_dim, 0),
                                              stub_encode("lower right lung", cfg.text_dim, 0)});
  const auto emb_b = embedding_batch<double>({stub_encode("heart", cfg.text_dim, 0),
                                              stub_encode("both lungs", cfg.text_dim, 0)});
  NoGradGuard ng;
  const auto out = model.forward(img, emb_a);
  std::size_t weights = 0;
  bool all_one = out.cross_weights.size() == cfg.num_stages;
  for (const auto& w : out.cross_weights)
    for (double v : w.data()) {
      all_one = all_one && v == 1.0;
      ++weights;
    }

  auto max_diff = [](const Tensor<double>& a, const Tensor<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
    return d;
  };
  const double guided_diff = max_diff(out.probs, model(img, emb_b));

  auto no_text = cfg;
  no_text.use_text = false;
  SwinTextUNet<double> plain(no_text, 5);
  const double off_diff = max_diff(plain(img, emb_a), plain(img, emb_b));

  // Zeroed text projection: every prompt maps to the same (zero) text token.
  for (const auto& [name, p] : model.params().all()) {
    if (name.rfind("guidance.text_proj", 0) != 0) continue;
    Tensor<double> t = p;
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  const double zeroed_diff = max_diff(model(img, emb_a), model(img, emb_b));

  const bool ok = all_one && weights > 0 && off_diff == 0.0 && zeroed_diff == 0.0 && guided_diff > 0.0;
  return report(5, ok,
                std::to_string(weights) + " weights all exactly 1: " + (all_one ? "yes" : "no") +
                    fmt("; prompt diff without text %.1e, zeroed projection %.1e (guided %.1e)", off_diff, zeroed_diff,
                        guided_diff));
}

bool ac6() {
  bool ok = true;
  std::string detail;
  for (const auto& r : verify::metrics_suite()) {
    if (r.name == "mac_ratio_56_m7") continue;
    ok = ok && r.passed;
    detail += (detail.empty() ? "" : ", ") + r.name + fmt(" %.1e", r.max_error);
  }
  return report(6, ok, detail);
}

bool ac7() {
  const auto t0 = Clock::now();
  RunConfig cfg = toy_run_config();
  SynthOptions so;
  so.size = cfg.model.image_size;
  so.train_frac = 1.0;
  so.val_frac = 0.0;
  const auto data = synth_generate(4, 7, so);
  const auto r = train(data, cfg);
  const double secs = seconds_since(t0);
  const double dice = r.final_train_eval.dice;
  return report(7, dice >= 0.95 && secs < 900.0,
                fmt("64x64 toy, 4 samples, %.0f epochs: train Dice %.4f, %.1fs", static_cast<double>(cfg.schedule.epochs),
                    dice, secs));
}

double ablation_run(const ModelConfig& model, std::uint64_t seed, std::string* variant = nullptr) {
  RunConfig cfg = ablation_run_config();
  cfg.model = model;
  cfg.seed = seed;
  SynthOptions so;
  so.size = cfg.model.image_size;
  so.train_frac = 0.8;
  so.val_frac = 0.0;
  const auto data = synth_generate(320, 1000 + seed, so);
  const auto r = train(data, cfg);
  if (variant) *variant = r.variant;
  return r.test.dice;
}

bool ac8() {
  const auto t0 = Clock::now();
  const ModelConfig full = ablation_run_config().model;
  ModelConfig no_text = full, no_fuse = full, concat = full;
  no_text.use_text = false;
  no_fuse.use_convfuse = false;
  concat.use_cross_attention = false;
  std::vector<double> gaps;
  std::string per_seed;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double a = ablation_run(full, s), b = ablation_run(no_text, s);
    gaps.push_back(a - b);
    per_seed += fmt(" %.3f/%.3f", a, b);
    std::printf("     seed %llu: full %.4f, w/o text %.4f\n", static_cast<unsigned long long>(s), a, b);
    std::fflush(stdout);
  }
  std::vector<double> sorted = gaps;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[2];

  std::string fuse_name, concat_name;
  const double fuse_dice = ablation_run(no_fuse, 0, &fuse_name);
  const double concat_dice = ablation_run(concat, 0, &concat_name);
  const bool ran = std::isfinite(fuse_dice) && std::isfinite(concat_dice) && fuse_name == "w/o ConvFuse" &&
                   concat_name == "w/o Cross-Attention";
  const bool ok = median >= 0.10 && ran;
  return report(8, ok,
                fmt("median held-out Dice gap %.4f (full/w-o-text:", median) + per_seed + "); " + fuse_name +
                    fmt(" %.4f, ", fuse_dice) + concat_name + fmt(" %.4f; %.0fs", concat_dice, seconds_since(t0)));
}

bool ac9() {
  RunConfig cfg = ablation_run_config();
  cfg.schedule.epochs = 2;
  cfg.seed = 9;
  SynthOptions so;
  so.size = cfg.model.image_size;
  const auto data = synth_generate(12, 9, so);
  const auto root = fs::temp_directory_path() / "swintext_acceptance_det";
  fs::remove_all(root);
  TrainOptions oa, ob;
  oa.out_dir = (root / "a").string();
  ob.out_dir = (root / "b").string();
  train(data, cfg, oa);
  train(data, cfg, ob);
  bool ok = true;
  std::size_t bytes = 0;
  for (const char* f : {"metrics.csv", "last.stun", "best.stun"}) {
    const auto a = detail::read_file_bytes((root / "a" / f).string());
    const auto b = detail::read_file_bytes((root / "b" / f).string());
    ok = ok && a == b && !a.empty();
    bytes += a.size();
  }
  fs::remove_all(root);
  return report(9, ok, "two seeded runs: metrics.csv, last.stun, best.stun identical (" + std::to_string(bytes) +
                           " bytes compared)");
}

bool ac10() {
  EmbeddingTable table;
  table.dim = 512;
  for (const char* p : {"upper left lung", "lower right lung", "bilateral"}) {
    const auto e = stub_encode(p, 512, 0);
    table.records.push_back({p, std::vector<float>(e.pooled.begin(), e.pooled.end())});
  }
  const auto ctxe = encode_ctxe(table);
  bool ok = encode_ctxe(decode_ctxe(ctxe)) == ctxe;

  SwinTextUNet<float> model(toy_run_config().model, 3);
  const auto stun = encode_checkpoint(make_checkpoint(model.params(), serialize_config(toy_run_config())));
  const auto back = decode_checkpoint(stun);
  ok = ok && encode_checkpoint(back) == stun;
  SwinTextUNet<float> other(toy_run_config().model, 4);
  load_into(back, other.params());
  ok = ok && encode_checkpoint(make_checkpoint(other.params(), serialize_config(toy_run_config()))) == stun;

  std::size_t rejected = 0;
  std::string sample;
  for (const std::string* bytes : {&ctxe, &stun}) {
    std::string bad = *bytes;
    bad[0] ^= 0x20;
    const bool is_ctxe = bytes == &ctxe;
    auto decode = [&](const std::string& b) {
      if (is_ctxe) decode_ctxe(b);
      else decode_checkpoint(b);
    };
    rejected += throws_format([&] { decode(bad); }, is_ctxe ? &sample : nullptr);
    rejected += throws_format([&] { decode(bytes->substr(0, bytes->size() / 2)); });
    rejected += throws_format([&] { decode(bytes->substr(0, 3)); });
    rejected += throws_format([&] { decode(*bytes + "x"); });
  }
  ok = ok && rejected == 8;
  return report(10, ok,
                "CTXE " + std::to_string(ctxe.size()) + " B and STUN " + std::to_string(stun.size()) +
                    " B re-encode identically; " + std::to_string(rejected) + "/8 corruptions rejected (e.g. \"" +
                    sample + "\")");
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  bool (*checks[])() = {ac1, ac2, ac3, ac4, ac5, ac6, ac7, ac8, ac9, ac10};
  bool all = true;
  for (int id = 1; id <= 10; ++id) {
    if (!only.empty() && !only.count(id)) continue;
    try {
      all = checks[id - 1]() && all;
    } catch (const std::exception& e) {
      all = report(id, false, std::string("threw: ") + e.what()) && all;
    }
  }
  return all ? 0 : 1;
}
