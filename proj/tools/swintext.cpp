// swintext command-line tool: train, infer, eval, verify, bench, gen-data,
// params. Exit codes: 0 success, 1 validation or runtime failure, 2 usage.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "swintext/swintext.hpp"

namespace fs = std::filesystem;
using namespace swintext;

namespace {

// Bad input data or results: exit 1.
struct Failure : Error {
  using Error::Error;
};

// Flag values the parser cannot check on its own: exit 2.
struct BadUsage : Error {
  using Error::Error;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SWINTEXT_SEED")) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw BadUsage(std::string("SWINTEXT_SEED is not an integer: '") + env + "'");
    return v;
  }
  return fallback;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, emb_file;
  std::optional<std::uint64_t> seed;
  bool no_text = false, no_convfuse = false, no_crossattn = false, quiet = false;
  std::optional<std::size_t> stages, epochs;
};

RunConfig apply_variant_flags(RunConfig cfg, bool no_text, bool no_convfuse, bool no_crossattn,
                              const std::optional<std::size_t>& stages) {
  if (no_text) cfg.model.use_text = false;
  if (no_convfuse) cfg.model.use_convfuse = false;
  if (no_crossattn) cfg.model.use_cross_attention = false;
  if (stages) cfg.model = with_stages(cfg.model, *stages);
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config_file(a.config);
  cfg = apply_variant_flags(cfg, a.no_text, a.no_convfuse, a.no_crossattn, a.stages);
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  if (a.epochs) cfg.schedule.epochs = *a.epochs;
  if (!a.emb_file.empty()) cfg.embeddings = a.emb_file;
  cfg.validate();

  const Dataset data = read_dataset(a.data);
  for (const auto& split : split_names())
    for (const auto& s : data.split(split))
      if (s.image.width != cfg.model.image_size || s.image.height != cfg.model.image_size) {
        throw Failure(split + "/" + s.name + " is " + std::to_string(s.image.width) + "x" +
                      std::to_string(s.image.height) + " but image_size is " + std::to_string(cfg.model.image_size));
      }

  TrainOptions opt;
  opt.out_dir = a.out;
  if (!a.quiet) opt.log = [](const std::string& line) { std::cout << line << std::endl; };
  const auto r = train(data, cfg, opt);
  std::cout << "variant: " << r.variant << "\n";
  std::cout << "wrote " << (fs::path(a.out) / "metrics.csv").string() << ", loss.svg, last.stun, best.stun\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string ckpt, image, text, emb_file, out, prob_out;
};

int run_infer(const InferArgs& a) {
  const auto ck = read_checkpoint(a.ckpt);
  RunConfig cfg = parse_config(ck.config);
  if (!a.emb_file.empty()) cfg.embeddings = a.emb_file;
  SwinTextUNet<float> model(cfg.model, cfg.seed);
  load_into(ck, model.params());

  const auto provider = make_provider(cfg);
  const auto embedding = provider->resolve(a.text);
  const Image original = read_pgm(a.image);
  const std::size_t side = cfg.model.image_size;
  const Image input = resize_bilinear(original, side, side);
  const Image probs = resize_bilinear(predict(model, input, embedding), original.width, original.height);

  Image mask(probs.width, probs.height);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = probs.pixels[i] >= 0.5f ? 1.0f : 0.0f;
  write_pgm(a.out, mask);
  if (!a.prob_out.empty()) write_pgm(a.prob_out, probs);
  std::size_t fg = 0;
  for (float v : mask.pixels) fg += v > 0.0f;
  std::cout << "wrote " << a.out << " (" << mask.width << "x" << mask.height << ", " << fg << " foreground pixels)\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, csv;
};

std::map<std::string, fs::path> pgm_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Failure("not a directory: " + dir);
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") out[e.path().filename().string()] = e.path();
  return out;
}

int run_eval(const EvalArgs& a) {
  const auto pred = pgm_files(a.pred), gt = pgm_files(a.gt);
  if (pred.empty() && gt.empty()) throw Failure("no .pgm files in " + a.pred + " or " + a.gt);
  std::vector<std::string> missing;
  for (const auto& [name, _] : gt)
    if (!pred.count(name)) missing.push_back(a.pred + "/" + name);
  for (const auto& [name, _] : pred)
    if (!gt.count(name)) missing.push_back(a.gt + "/" + name);
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " unpaired file(s):";
    for (const auto& m : missing) msg += "\n  missing " + m;
    throw Failure(msg);
  }

  std::string csv = "image,dice,iou,tp,fp,fn\n";
  std::vector<std::string> lines;
  double dice_sum = 0.0, iou_sum = 0.0;
  std::size_t width = 5;
  for (const auto& [name, _] : gt) width = std::max(width, name.size());
  char buf[512];
  for (const auto& [name, gt_path] : gt) {
    const Image p = read_mask_pgm(pred.at(name).string()), g = read_mask_pgm(gt_path.string());
    if (p.width != g.width || p.height != g.height) throw Failure(name + ": prediction and ground truth sizes differ");
    const auto c = overlap_counts(p.pixels, g.pixels);
    dice_sum += c.dice();
    iou_sum += c.iou();
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%zu,%zu,%zu\n", name.c_str(), c.dice(), c.iou(),
                  static_cast<std::size_t>(c.tp), static_cast<std::size_t>(c.fp), static_cast<std::size_t>(c.fn));
    csv += buf;
    std::snprintf(buf, sizeof buf, "%-*s  %7.4f  %7.4f", static_cast<int>(width), name.c_str(), c.dice(), c.iou());
    lines.push_back(buf);
  }
  const double n = static_cast<double>(gt.size());
  std::snprintf(buf, sizeof buf, "mean,%.9g,%.9g,,,\n", dice_sum / n, iou_sum / n);
  csv += buf;

  std::snprintf(buf, sizeof buf, "%-*s  %7s  %7s", static_cast<int>(width), "image", "dice", "iou");
  std::cout << buf << "\n";
  for (const auto& l : lines) std::cout << l << "\n";
  std::snprintf(buf, sizeof buf, "%-*s  %7.4f  %7.4f", static_cast<int>(width), "mean", dice_sum / n, iou_sum / n);
  std::cout << buf << "\n";
  if (!a.csv.empty()) {
    detail::write_file_bytes(a.csv, csv);
    std::cout << "wrote " << a.csv << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all";
  std::size_t seeds = 20;
  double fault = 0.0;
};

int run_verify(const VerifyArgs& a) {
  bool ok = true;
  std::size_t count = 0;
  auto report = [&](const verify::CheckResult& r) {
    std::cout << verify::format_result(r) << std::endl;
    ok = ok && r.passed;
    ++count;
  };
  const bool all = a.suite == "all";
  if (all || a.suite == "metrics")
    for (const auto& r : verify::metrics_suite()) report(r);
  if (all || a.suite == "attention-oracle")
    for (const auto& r : verify::attention_oracle_suite(a.seeds)) report(r);
  if (all || a.suite == "gradcheck") verify::gradcheck_suite(a.seeds, a.fault, report);
  std::cout << (ok ? "all " + std::to_string(count) + " checks passed" : "FAILED") << "\n";
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::vector<std::size_t> grids{56}, windows{7};
  std::size_t repeat = 3, channels = 32, heads = 1;
};

int run_bench(const BenchArgs& a) {
  if (a.repeat == 0) throw BadUsage("--repeat must be positive");
  std::cout << "grid,window,tokens,windowed_macs,global_macs,ratio,expected_ratio,windowed_ms,global_ms\n";
  for (std::size_t grid : a.grids)
    for (std::size_t m : a.windows) {
      if (m == 0 || m > grid || grid % m != 0) {
        throw BadUsage("window " + std::to_string(m) + " must divide grid " + std::to_string(grid));
      }
      Rng rng(7);
      ParamStore<float> store;
      auto local = WindowAttention<float>::create(store, "local", a.channels, a.heads, m, rng);
      auto global = WindowAttention<float>::create(store, "global", a.channels, a.heads, grid, rng);
      std::vector<float> v(grid * grid * a.channels);
      for (auto& e : v) e = static_cast<float>(rng.uniform(-1.0, 1.0));
      const Tensor<float> x({1, grid * grid, a.channels}, std::move(v));
      NoGradGuard no_grad;
      auto& macs = attention_macs();
      auto time_ms = [&](const WindowAttention<float>& attn, std::uint64_t& count) {
        double best = 1e300;
        for (std::size_t r = 0; r < a.repeat; ++r) {
          macs.reset();
          const auto t0 = std::chrono::steady_clock::now();
          attn(x, grid, 0, {});
          best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
          count = macs.window_scores + macs.window_aggregate;
        }
        return best;
      };
      std::uint64_t wm = 0, gm = 0;
      const double wt = time_ms(local, wm), gt = time_ms(global, gm);
      macs.reset();
      std::printf("%zu,%zu,%zu,%llu,%llu,%.9g,%.9g,%.3f,%.3f\n", grid, m, grid * grid,
                  static_cast<unsigned long long>(wm), static_cast<unsigned long long>(gm),
                  static_cast<double>(wm) / static_cast<double>(gm),
                  static_cast<double>(m * m) / static_cast<double>(grid * grid), wt, gt);
    }
  return 0;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t n = 100, size = 64;
  std::optional<std::uint64_t> seed;
  double train_frac = 0.70, val_frac = 0.15;
};

int run_gen(const GenArgs& a) {
  SynthOptions opt;
  opt.size = a.size;
  opt.train_frac = a.train_frac;
  opt.val_frac = a.val_frac;
  const auto d = synth_generate(a.n, resolve_seed(a.seed, 0), opt);
  write_dataset(a.out, d);
  std::cout << "wrote " << a.out << ": " << d.train.size() << " train, " << d.val.size() << " val, " << d.test.size()
            << " test (" << a.size << "x" << a.size << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ParamsArgs {
  std::string config;
  bool no_text = false, no_convfuse = false, no_crossattn = false, list = false;
  std::optional<std::size_t> stages;
};

int run_params(const ParamsArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config_file(a.config);
  cfg = apply_variant_flags(cfg, a.no_text, a.no_convfuse, a.no_crossattn, a.stages);
  const auto& m = cfg.model;
  std::cout << ablation_variant_name(m) << " | " << stage_variant_name(m.num_stages) << "\n";
  std::printf("%-7s %6s %7s %8s %5s %6s %5s\n", "stage", "grid", "tokens", "channels", "depth", "window", "heads");
  for (std::size_t s = 0; s < m.num_stages; ++s) {
    const auto spec = m.stages()[s];
    std::printf("%-7zu %6zu %7zu %8zu %5zu %6zu %5zu\n", s + 1, spec.grid, spec.tokens(), spec.channels, spec.depth,
                spec.window, spec.heads);
  }
  // Decoder widths: one level per stage, then the final PatchExpand steps.
  std::string chain, widths;
  const auto specs = m.stages();
  for (std::size_t s = specs.size(); s-- > 0;) {
    chain += (chain.empty() ? "" : " -> ") + std::to_string(specs[s].grid);
    widths += (widths.empty() ? "" : " -> ") + std::to_string(specs[s].channels);
  }
  std::size_t g = specs[0].grid, c = specs[0].channels;
  for (std::size_t i = 0; i < m.final_expands(); ++i) {
    g *= 2;
    c /= 2;
    chain += " -> " + std::to_string(g);
    widths += " -> " + std::to_string(c);
  }
  std::cout << "decoder grids:  " << chain << "\n";
  std::cout << "decoder widths: " << widths << "\n";

  SwinTextUNet<float> model(m, cfg.seed);
  std::map<std::string, std::size_t> groups;
  for (const auto& [name, p] : model.params().all()) groups[name.substr(0, name.find('.'))] += p.numel();
  for (const auto& [name, n] : groups) std::printf("%-18s %12zu\n", name.c_str(), n);
  std::printf("%-18s %12zu\n", "total", model.params().total_elements());
  if (a.list)
    for (const auto& [name, p] : model.params().all()) std::cout << name << " " << shape_str(p.shape()) << "\n";
  return 0;
}

void add_variant_flags(CLI::App* cmd, bool& no_text, bool& no_convfuse, bool& no_crossattn,
                       std::optional<std::size_t>& stages) {
  cmd->add_flag("--no-text", no_text, "Drop text guidance (w/o Text Guidance)");
  cmd->add_flag("--no-convfuse", no_convfuse, "Replace ConvFuse with additive skips (w/o ConvFuse)");
  cmd->add_flag("--no-crossattn", no_crossattn, "Fuse text by concatenation instead of cross-attention");
  cmd->add_option("--stages", stages, "Encoder stages")->check(CLI::IsMember({3, 4, 5}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided Swin U-Net segmentation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset directory");
  train_cmd->add_option("--config", ta.config, "Config file (key: value)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", ta.data, "Dataset root with train/ [val/] [test/]")->required();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--seed", ta.seed, "Run seed (falls back to SWINTEXT_SEED, then the config)");
  train_cmd->add_option("--epochs", ta.epochs, "Override the configured epoch count");
  train_cmd->add_option("--emb-file", ta.emb_file, "CTXE embedding file instead of the stub encoder");
  train_cmd->add_flag("--quiet", ta.quiet, "Only print the summary");
  add_variant_flags(train_cmd, ta.no_text, ta.no_convfuse, ta.no_crossattn, ta.stages);

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "Segment one image given a prompt");
  infer_cmd->add_option("--ckpt", ia.ckpt, "Checkpoint (.stun)")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--image", ia.image, "Input PGM")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--text", ia.text, "Prompt")->required();
  infer_cmd->add_option("--emb-file", ia.emb_file, "CTXE embedding file");
  infer_cmd->add_option("--out", ia.out, "Output mask PGM (threshold 0.5)")->required();
  infer_cmd->add_option("--prob-out", ia.prob_out, "Optional probability map PGM");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Dice/IoU of predicted masks against ground truth");
  eval_cmd->add_option("--pred", ea.pred, "Directory of predicted mask PGMs")->required();
  eval_cmd->add_option("--gt", ea.gt, "Directory of ground-truth mask PGMs")->required();
  eval_cmd->add_option("--csv", ea.csv, "Write per-image CSV here");

  VerifyArgs va;
  auto* verify_cmd = app.add_subcommand("verify", "Run gradient, attention and metric self-checks");
  verify_cmd->add_option("--suite", va.suite, "Suite to run")
      ->check(CLI::IsMember({"gradcheck", "attention-oracle", "metrics", "all"}));
  verify_cmd->add_option("--seeds", va.seeds, "Random seeds per check")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--fault", va.fault, "Scale analytic gradients by (1 + fault)")->group("");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Attention MAC counts and timings, windowed vs global");
  bench_cmd->add_option("--grid", ba.grids, "Token grid side(s)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--window", ba.windows, "Window side(s)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--repeat", ba.repeat, "Timed repetitions (best is reported)");
  bench_cmd->add_option("--channels", ba.channels, "Channels");
  bench_cmd->add_option("--heads", ba.heads, "Attention heads");

  GenArgs ga;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write the synthetic quadrant dataset");
  gen_cmd->add_option("--out", ga.out, "Dataset root")->required();
  gen_cmd->add_option("-n,--count", ga.n, "Number of samples");
  gen_cmd->add_option("--size", ga.size, "Image side in pixels (>= 32)");
  gen_cmd->add_option("--seed", ga.seed, "Generator seed (falls back to SWINTEXT_SEED)");
  gen_cmd->add_option("--train-frac", ga.train_frac, "Training fraction");
  gen_cmd->add_option("--val-frac", ga.val_frac, "Validation fraction");

  ParamsArgs pa;
  auto* params_cmd = app.add_subcommand("params", "Print stage shapes and parameter counts");
  params_cmd->add_option("--config", pa.config, "Config file")->check(CLI::ExistingFile);
  params_cmd->add_flag("--list", pa.list, "List every parameter tensor");
  add_variant_flags(params_cmd, pa.no_text, pa.no_convfuse, pa.no_crossattn, pa.stages);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*infer_cmd) return run_infer(ia);
    if (*eval_cmd) return run_eval(ea);
    if (*verify_cmd) return run_verify(va);
    if (*bench_cmd) return run_bench(ba);
    if (*gen_cmd) return run_gen(ga);
    if (*params_cmd) return run_params(pa);
  } catch (const BadUsage& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
