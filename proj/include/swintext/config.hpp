#pragma once

// Run configuration: model architecture, loss, optimizer, schedule and
// augmentation, with a flat `key: value` text form used on disk and inside
// checkpoints.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "swintext/errors.hpp"

namespace swintext {

/// Per-stage geometry derived from a ModelConfig.
struct StageSpec {
  std::size_t channels = 0;
  std::size_t depth = 0;
  std::size_t heads = 0;
  std::size_t grid = 0;    // H_s == W_s
  std::size_t window = 0;  // effective window min(M, grid)
  std::size_t shift = 0;   // shift for odd blocks; 0 when the window covers the grid

  std::size_t tokens() const { return grid * grid; }
};

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

/// Channels per ConvFuse group norm: 8 groups, or one per channel below 8.
inline std::size_t norm_groups(std::size_t channels) { return channels < 8 ? channels : 8; }

/// Cross-attention heads, keeping the head width at 32 or more.
inline std::size_t cross_attention_heads(std::size_t channels) { return channels / 32 > 0 ? channels / 32 : 1; }

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  std::size_t patch_size = 4;
  std::size_t window_size = 7;
  std::size_t num_stages = 4;
  std::size_t base_channels = 96;
  std::vector<std::size_t> depths;  // empty: Swin-T convention
  std::vector<std::size_t> heads;   // empty: max(1, C_s / 32)
  std::size_t mlp_ratio = 4;
  std::size_t text_dim = 512;
  std::size_t visual_dim = 0;  // 0: channel width of the last stage
  std::size_t text_tokens = 1;
  double ln_eps = 1e-5;
  bool use_text = true;
  bool use_cross_attention = true;
  bool use_convfuse = true;
  bool decoder_guidance = false;
  double head_prior = 0.5;  // initial foreground probability; the head bias starts at logit(head_prior)

  std::size_t stage_channels(std::size_t s) const { return base_channels << s; }
  std::size_t last_channels() const { return stage_channels(num_stages - 1); }
  std::size_t effective_visual_dim() const { return visual_dim ? visual_dim : last_channels(); }

  std::vector<std::size_t> effective_depths() const {
    if (!depths.empty()) return depths;
    static const std::vector<std::size_t> swin_t{2, 2, 6, 2};
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < num_stages; ++s) out.push_back(s < swin_t.size() ? swin_t[s] : 2);
    return out;
  }

  std::vector<std::size_t> effective_heads() const {
    if (!heads.empty()) return heads;
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < num_stages; ++s) out.push_back(cross_attention_heads(stage_channels(s)));
    return out;
  }

  /// PatchExpand steps after the last skip fusion so that Y_0 sits at H/2.
  std::size_t final_expands() const {
    std::size_t n = 0;
    for (std::size_t p = patch_size; p > 2; p /= 2) ++n;
    return n;
  }

  std::size_t head_channels() const { return base_channels >> final_expands(); }

  std::vector<StageSpec> stages() const {
    validate();
    const auto d = effective_depths();
    const auto h = effective_heads();
    std::vector<StageSpec> out;
    std::size_t grid = image_size / patch_size;
    for (std::size_t s = 0; s < num_stages; ++s) {
      StageSpec spec;
      spec.channels = stage_channels(s);
      spec.depth = d[s];
      spec.heads = h[s];
      spec.grid = grid;
      spec.window = window_size < grid ? window_size : grid;
      spec.shift = spec.window < grid ? spec.window / 2 : 0;
      out.push_back(spec);
      grid /= 2;
    }
    return out;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (num_stages < 1) fail("num_stages must be at least 1");
    if (patch_size < 2 || !is_power_of_two(patch_size)) {
      fail("patch_size must be a power of two >= 2, got " + std::to_string(patch_size));
    }
    if (window_size < 1) fail("window_size must be positive");
    if (base_channels < 2) fail("base_channels must be at least 2");
    if (in_channels < 1) fail("in_channels must be positive");
    if (mlp_ratio < 1) fail("mlp_ratio must be positive");
    if (text_dim < 1) fail("text_dim must be positive");
    if (text_tokens != 1) fail("text_tokens must be 1 (pooled embedding unsqueezed to one token)");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
    if (!(head_prior > 0.0 && head_prior < 1.0)) fail("head_prior must lie strictly between 0 and 1");
    const std::size_t factor = patch_size << (num_stages - 1);
    if (image_size == 0 || image_size % factor != 0) {
      fail("image_size " + std::to_string(image_size) + " must be divisible by patch_size * 2^(num_stages-1) = " +
           std::to_string(patch_size) + " * " + std::to_string(std::size_t{1} << (num_stages - 1)) + " = " +
           std::to_string(factor));
    }
    if (!depths.empty() && depths.size() != num_stages) {
      fail("depths lists " + std::to_string(depths.size()) + " stages but num_stages is " + std::to_string(num_stages));
    }
    if (!heads.empty() && heads.size() != num_stages) {
      fail("heads lists " + std::to_string(heads.size()) + " stages but num_stages is " + std::to_string(num_stages));
    }
    const auto d = effective_depths();
    const auto h = effective_heads();
    std::size_t grid = image_size / patch_size;
    for (std::size_t s = 0; s < num_stages; ++s) {
      const std::size_t c = stage_channels(s);
      const std::string tag = "stage " + std::to_string(s + 1) + ": ";
      if (d[s] == 0 || d[s] % 2 != 0) fail(tag + "depth " + std::to_string(d[s]) + " must be even and positive");
      if (h[s] == 0 || c % h[s] != 0) {
        fail(tag + std::to_string(h[s]) + " heads do not divide " + std::to_string(c) + " channels");
      }
      const std::size_t m = window_size < grid ? window_size : grid;
      if (grid % m != 0) {
        fail(tag + "grid " + std::to_string(grid) + " is not divisible by window " + std::to_string(m));
      }
      if (c % cross_attention_heads(c) != 0) {
        fail(tag + "cross-attention heads do not divide " + std::to_string(c) + " channels");
      }
      const std::size_t groups = norm_groups(c);
      if (c % groups != 0) fail(tag + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " norm groups");
      grid /= 2;
    }
    if (base_channels % (std::size_t{1} << (final_expands() + 1)) != 0) {
      fail("base_channels " + std::to_string(base_channels) + " cannot be halved " +
           std::to_string(final_expands() + 1) + " times by the final PatchExpand steps and head");
    }
  }
};

struct LossConfig {
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
  double eps = 1e-6;

  void validate() const {
    if (lambda_dice < 0.0 || lambda_ce < 0.0) throw ConfigError("loss weights must be nonnegative");
    if (!(lambda_dice + lambda_ce > 0.0)) throw ConfigError("lambda_dice + lambda_ce must be positive");
  }
};

struct ScheduleConfig {
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  double warmup_frac = 0.1;
  std::size_t epochs = 100;

  std::size_t warmup_epochs() const {
    return static_cast<std::size_t>(warmup_frac * static_cast<double>(epochs) + 0.5);
  }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(base_lr > 0.0) || min_lr < 0.0 || min_lr > base_lr) throw ConfigError("need 0 <= min_lr <= lr, lr > 0");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) throw ConfigError("warmup_frac must lie in [0, 1)");
  }
};

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double eps = 1e-8;
};

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;
  double rotate_deg = 15.0;
  double intensity_lo = 0.9;
  double intensity_hi = 1.1;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  ScheduleConfig schedule;
  OptimConfig optim;
  AugmentConfig augment;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::uint64_t text_seed = 0;
  std::string embeddings;  // CTXE path; empty selects the deterministic stub
  bool normalize_embeddings = false;

  void validate() const {
    model.validate();
    loss.validate();
    schedule.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }
};

/// Switch to the 3-, 4- or 5-stage variant of a configuration. Five stages
/// halve the patch size so the deepest grid matches the 4-stage model.
inline ModelConfig with_stages(ModelConfig cfg, std::size_t stages) {
  if (stages < 3 || stages > 5) throw ConfigError("stage variant must be 3, 4 or 5, got " + std::to_string(stages));
  if (stages == cfg.num_stages) return cfg;
  if (stages == 5 && cfg.num_stages != 5) cfg.patch_size /= 2;
  if (cfg.num_stages == 5 && stages != 5) cfg.patch_size *= 2;
  auto resize = [stages](std::vector<std::size_t>& v, std::size_t fill) {
    if (!v.empty()) v.resize(stages, fill);
  };
  std::vector<std::size_t> old_heads = cfg.heads;
  resize(cfg.depths, 2);
  if (!cfg.heads.empty()) {
    cfg.heads.resize(stages);
    for (std::size_t s = old_heads.size(); s < stages; ++s) cfg.heads[s] = cfg.heads[s - 1] * 2;
  }
  cfg.num_stages = stages;
  return cfg;
}

inline std::string stage_variant_name(std::size_t stages) {
  return stages == 4 ? "4-Stage (Ours)" : std::to_string(stages) + "-Stage";
}

inline std::string ablation_variant_name(const ModelConfig& m) {
  if (!m.use_text) return "w/o Text Guidance";
  if (!m.use_cross_attention) return "w/o Cross-Attention";
  if (!m.use_convfuse) return "w/o ConvFuse";
  return "Full SwinTextUNet";
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct ConfigField {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config key '" + key + "': expected a nonnegative integer, got '" + v + "'");
  return static_cast<std::size_t>(out);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_size(key, item));
  }
  return out;
}

inline std::vector<std::pair<std::string, ConfigField>> config_fields(RunConfig& c) {
  std::vector<std::pair<std::string, ConfigField>> f;
  auto size_field = [&](const char* key, std::size_t& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = parse_size(key, v); },
                       [&ref] { return std::to_string(ref); }}});
  };
  auto u64_field = [&](const char* key, std::uint64_t& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = parse_size(key, v); },
                       [&ref] { return std::to_string(ref); }}});
  };
  auto double_field = [&](const char* key, double& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = parse_double(key, v); },
                       [&ref] { return fmt_double(ref); }}});
  };
  auto bool_field = [&](const char* key, bool& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = parse_bool(key, v); },
                       [&ref] { return std::string(ref ? "true" : "false"); }}});
  };
  auto list_field = [&](const char* key, std::vector<std::size_t>& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = parse_sizes(key, v); },
                       [&ref] { return join_sizes(ref); }}});
  };
  auto string_field = [&](const char* key, std::string& ref) {
    f.push_back({key, {[&ref](const std::string& v) {
                         ref = v;
                         if (ref.size() >= 2 && ref.front() == '"' && ref.back() == '"') ref = ref.substr(1, ref.size() - 2);
                       },
                       [&ref] { return '"' + ref + '"'; }}});
  };
  auto& m = c.model;
  size_field("image_size", m.image_size);
  size_field("in_channels", m.in_channels);
  size_field("patch_size", m.patch_size);
  size_field("window_size", m.window_size);
  size_field("num_stages", m.num_stages);
  size_field("base_channels", m.base_channels);
  list_field("depths", m.depths);
  list_field("heads", m.heads);
  size_field("mlp_ratio", m.mlp_ratio);
  size_field("text_dim", m.text_dim);
  size_field("visual_dim", m.visual_dim);
  size_field("text_tokens", m.text_tokens);
  double_field("ln_eps", m.ln_eps);
  bool_field("use_text", m.use_text);
  bool_field("use_cross_attention", m.use_cross_attention);
  bool_field("use_convfuse", m.use_convfuse);
  bool_field("decoder_guidance", m.decoder_guidance);
  double_field("head_prior", m.head_prior);
  double_field("lambda_dice", c.loss.lambda_dice);
  double_field("lambda_ce", c.loss.lambda_ce);
  double_field("loss_eps", c.loss.eps);
  double_field("lr", c.schedule.base_lr);
  double_field("min_lr", c.schedule.min_lr);
  double_field("warmup_frac", c.schedule.warmup_frac);
  size_field("epochs", c.schedule.epochs);
  double_field("beta1", c.optim.beta1);
  double_field("beta2", c.optim.beta2);
  double_field("weight_decay", c.optim.weight_decay);
  double_field("adam_eps", c.optim.eps);
  bool_field("augment", c.augment.enabled);
  double_field("aug_flip_prob", c.augment.flip_prob);
  double_field("aug_rotate_deg", c.augment.rotate_deg);
  double_field("aug_intensity_lo", c.augment.intensity_lo);
  double_field("aug_intensity_hi", c.augment.intensity_hi);
  size_field("batch_size", c.batch_size);
  u64_field("seed", c.seed);
  u64_field("text_seed", c.text_seed);
  string_field("embeddings", c.embeddings);
  bool_field("normalize_embeddings", c.normalize_embeddings);
  return f;
}

}  // namespace detail

/// Parse a flat `key: value` document ('#' starts a comment). Missing keys keep
/// their defaults; unknown keys and invalid combinations are rejected.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  auto fields = detail::config_fields(cfg);
  std::map<std::string, detail::ConfigField*> by_name;
  for (auto& [k, f] : fields) by_name[k] = &f;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto sep = line.find(':');
    if (sep == std::string::npos) sep = line.find('=');
    if (sep == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key: value', got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, sep));
    const std::string value = detail::trim(line.substr(sep + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (seen.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    it->second->set(value);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(serialize_config(c)) reproduces c.
inline std::string serialize_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  auto fields = detail::config_fields(copy);
  std::string out;
  for (auto& [k, f] : fields) out += k + ": " + f.get() + "\n";
  return out;
}

/// Small single-core setup: 64x64 input, C1 = 16, 4x4 windows, depth 2 per
/// stage, 64-dim text. No augmentation.
inline RunConfig toy_run_config() {
  RunConfig c;
  c.model.image_size = 64;
  c.model.window_size = 4;
  c.model.base_channels = 16;
  c.model.depths = {2, 2, 2, 2};
  c.model.text_dim = 64;
  c.model.head_prior = 0.05;
  c.schedule.base_lr = 3e-3;
  c.schedule.min_lr = 1e-6;
  c.schedule.epochs = 200;
  c.batch_size = 2;
  c.augment.enabled = false;
  return c;
}

/// toy_run_config at 32x32 for the multi-seed ablation runs.
inline RunConfig ablation_run_config() {
  RunConfig c = toy_run_config();
  c.model.image_size = 32;
  c.schedule.epochs = 20;
  c.batch_size = 8;
  return c;
}

}  // namespace swintext
