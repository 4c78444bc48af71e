#pragma once

// Self-checks: central finite-difference gradient checks, a brute-force
// shifted-window attention oracle, loss/metric identities and attention MAC
// ratios. Used by the test suite and by `swintext verify`.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "swintext/decoder.hpp"
#include "swintext/loss.hpp"
#include "swintext/model.hpp"
#include "swintext/nn.hpp"
#include "swintext/ops.hpp"
#include "swintext/swin.hpp"
#include "swintext/text.hpp"

namespace swintext::verify {

struct CheckResult {
  std::string suite;
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string note;
};

inline std::string format_result(const CheckResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "[%s] %-16s %-40s max err %.3e (tol %.1e)%s%s", r.passed ? "PASS" : "FAIL",
                r.suite.c_str(), r.name.c_str(), r.max_error, r.tolerance, r.note.empty() ? "" : "  ",
                r.note.c_str());
  return buf;
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-3;         // denominator floor of the relative error
  std::size_t max_elements = 0;  // per leaf; 0 checks every element
  double fault = 0.0;          // relative perturbation of analytic gradients (self-test)
};

/// Relative error |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences of `loss_fn` for every
/// element of every leaf. When a difference straddles a kink of a piecewise
/// op the estimate is retried with a 10x smaller step.
inline double gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> leaves,
                        const GradcheckOptions& opt = {}, std::uint64_t seed = 0) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) {
    std::vector<double> g(l.numel(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), g.begin());
    for (auto& v : g) v *= 1.0 + opt.fault;
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  auto numeric_at = [&](Tensor<double>& leaf, std::size_t i, double eps) {
    auto data = leaf.mutable_data();
    const double orig = data[i];
    data[i] = orig + eps;
    const double fp = loss_fn().item();
    data[i] = orig - eps;
    const double fm = loss_fn().item();
    data[i] = orig;
    return (fp - fm) / (2.0 * eps);
  };

  Rng pick(mix_seed({seed, 0x6c}));
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    std::vector<std::size_t> elems(leaf.numel());
    for (std::size_t i = 0; i < elems.size(); ++i) elems[i] = i;
    if (opt.max_elements && elems.size() > opt.max_elements) {
      for (std::size_t i = 0; i < opt.max_elements; ++i) std::swap(elems[i], elems[i + pick.below(elems.size() - i)]);
      elems.resize(opt.max_elements);
    }
    for (std::size_t i : elems) {
      double err = relative_error(analytic[k][i], numeric_at(leaf, i, opt.eps), opt.floor);
      if (err > opt.tolerance) err = std::min(err, relative_error(analytic[k][i], numeric_at(leaf, i, opt.eps * 0.1), opt.floor));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Random tensor with entries uniform in [lo, hi], optionally with random sign.
inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool random_sign = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
    if (random_sign && rng.uniform() < 0.5) x = -x;
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

/// sum(y * r) for a fixed random r: a scalar that depends on every output.
inline Tensor<double> project(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(mix_seed({seed, 0x9e}));
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

struct OpCase {
  std::string name;
  /// Builds leaves and a loss over them for one seed; shapes are drawn from the seed.
  std::function<std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>(std::uint64_t)> build;
  double tolerance = 1e-4;
  double eps = 1e-5;
};

/// Micro configuration used for whole-model checks: 16x16 input, two stages,
/// 2x2 windows (the first stage has a shifted block), two heads.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.image_size = 16;
  c.in_channels = 3;
  c.patch_size = 4;
  c.window_size = 2;
  c.num_stages = 2;
  c.base_channels = 4;
  c.depths = {2, 2};
  c.heads = {2, 2};
  c.mlp_ratio = 2;
  c.text_dim = 8;
  return c;
}

namespace detail {
inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }
}  // namespace detail

inline std::vector<OpCase> op_cases() {
  using TD = Tensor<double>;
  using Built = std::pair<std::function<TD()>, std::vector<TD>>;
  using detail::draw;
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<Built(std::uint64_t)> build, double tol = 1e-4) {
    cases.push_back({std::move(name), std::move(build), tol});
  };

  // Unary ops on a random [r, c] input with an even column count.
  auto unary_case = [&](std::string name, std::function<TD(const TD&)> f, double lo, double hi, bool sign) {
    add_case(name, [=](std::uint64_t s) -> Built {
      Rng rng(s);
      TD x = random_tensor({draw(rng, 1, 4), 2 * draw(rng, 1, 3)}, rng, lo, hi, sign);
      return {[=] { return project(f(x), s); }, {x}};
    });
  };
  unary_case("relu", [](const TD& x) { return relu(x); }, 0.05, 1.0, true);
  unary_case("gelu", [](const TD& x) { return gelu(x); }, -3.0, 3.0, false);
  unary_case("sigmoid", [](const TD& x) { return sigmoid(x); }, -4.0, 4.0, false);
  unary_case("log", [](const TD& x) { return log(x); }, 0.2, 2.0, false);
  unary_case("clamp", [](const TD& x) { return clamp(x, -0.5, 0.5); }, 0.05, 1.0, true);
  unary_case("scale", [](const TD& x) { return scale(x, 1.7); }, -1.0, 1.0, false);
  unary_case("add_scalar", [](const TD& x) { return add_scalar(x, 0.3); }, -1.0, 1.0, false);
  unary_case("sum", [](const TD& x) { return scale(sum(mul(x, x)), 0.5); }, -1.0, 1.0, false);
  unary_case("mean", [](const TD& x) { return mean(mul(x, x)); }, -1.0, 1.0, false);
  unary_case("reshape", [](const TD& x) { return reshape(x, {x.numel() / 2, 2}); }, -1.0, 1.0, false);
  unary_case("permute", [](const TD& x) { return permute(reshape(x, {x.dim(0), x.dim(1) / 2, 2}), {2, 0, 1}); }, -1.0,
             1.0, false);
  unary_case("transpose_last", [](const TD& x) { return transpose_last(x); }, -1.0, 1.0, false);
  unary_case("softmax", [](const TD& x) { return softmax(x, -1); }, -2.0, 2.0, false);
  unary_case("softmax_axis0", [](const TD& x) { return softmax(x, 0); }, -2.0, 2.0, false);

  // Broadcasting elementwise ops: b's shape is a's with some axes set to 1 or dropped.
  auto broadcast_case = [&](std::string name, std::function<TD(const TD&, const TD&)> f) {
    add_case(name, [=](std::uint64_t s) -> Built {
      Rng rng(s);
      Shape sa{draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4)}, sb = sa;
      for (auto& d : sb)
        if (rng.uniform() < 0.5) d = 1;
      if (rng.uniform() < 0.5) sb.erase(sb.begin());
      TD a = random_tensor(sa, rng), b = random_tensor(sb, rng);
      return {[=] { return project(f(a, b), s); }, {a, b}};
    });
  };
  broadcast_case("add_broadcast", [](const TD& a, const TD& b) { return add(a, b); });
  broadcast_case("sub_broadcast", [](const TD& a, const TD& b) { return sub(a, b); });
  broadcast_case("mul_broadcast", [](const TD& a, const TD& b) { return mul(a, b); });
  broadcast_case("attention_mask_add", [](const TD& a, const TD& b) { return softmax(add(a, b), -1); });
  add_case("div", [](std::uint64_t s) -> Built {
    Rng rng(s);
    Shape sh{draw(rng, 1, 4), draw(rng, 1, 5)};
    TD a = random_tensor(sh, rng), b = random_tensor(sh, rng, 0.5, 2.0, true);
    return {[=] { return project(div(a, b), s); }, {a, b}};
  });
  add_case("concat_channels", [](std::uint64_t s) -> Built {
    Rng rng(s);
    const std::size_t batch = draw(rng, 1, 2), h = draw(rng, 1, 3), w = draw(rng, 1, 3);
    TD a = random_tensor({batch, draw(rng, 1, 3), h, w}, rng), b = random_tensor({batch, draw(rng, 1, 3), h, w}, rng);
    return {[=] { return project(concat<double>({a, b}, 1), s); }, {a, b}};
  });

  auto matmul_case = [&](std::string name, bool shared_rhs) {
    add_case(name, [=](std::uint64_t s) -> Built {
      Rng rng(s);
      const std::size_t t = draw(rng, 1, 3), m = draw(rng, 1, 4), k = draw(rng, 1, 5), n = draw(rng, 1, 4);
      TD a = random_tensor({t, m, k}, rng);
      TD b = shared_rhs ? random_tensor({k, n}, rng) : random_tensor({t, k, n}, rng);
      return {[=] { return project(matmul(a, b), s); }, {a, b}};
    }, 1e-6);
  };
  matmul_case("matmul_batched", false);
  matmul_case("matmul_shared_rhs", true);
  add_case("matmul_sum", [](std::uint64_t s) -> Built {
    Rng rng(s);
    const std::size_t m = draw(rng, 1, 5), k = draw(rng, 1, 5), n = draw(rng, 1, 5);
    TD a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    return {[=] { return sum(matmul(a, b)); }, {a, b}};
  }, 1e-6);

  add_case("linear", [](std::uint64_t s) -> Built {
    Rng rng(s);
    const std::size_t in = draw(rng, 1, 5), out = draw(rng, 1, 5);
    TD x = random_tensor({draw(rng, 1, 2), draw(rng, 1, 4), in}, rng), w = random_tensor({in, out}, rng),
       b = random_tensor({out}, rng);
    return {[=] { return project(linear(x, w, b), s); }, {x, w, b}};
  }, 1e-5);
  add_case("layer_norm", [](std::uint64_t s) -> Built {
    Rng rng(s);
    const std::size_t c = draw(rng, 2, 8);
    TD x = random_tensor({draw(rng, 1, 2), draw(rng, 1, 4), c}, rng, -2, 2), g = random_tensor({c}, rng),
       b = random_tensor({c}, rng);
    return {[=] { return project(layer_norm(x, g, b, 1e-5), s); }, {x, g, b}};
  }, 1e-5);
  add_case("group_norm", [](std::uint64_t s) -> Built {
    Rng rng(s);
    const std::size_t groups = draw(rng, 1, 2), c = groups * draw(rng, 1, 3);
    TD x = random_tensor({draw(rng, 1, 2), c, draw(rng, 2, 3), draw(rng, 2, 3)}, rng, -2, 2),
       g = random_tensor({c}, rng), b = random_tensor({c}, rng);
    return {[=] { return project(group_norm(x, groups, g, b, 1e-5), s); }, {x, g, b}};
  });
  for (std::size_t k : {1, 3}) {
    add_case("conv2d_" + std::to_string(k) + "x" + std::to_string(k), [k](std::uint64_t s) -> Built {
      Rng rng(s);
      const std::size_t cin = draw(rng, 1, 3), cout = draw(rng, 1, 3);
      TD x = random_tensor({draw(rng, 1, 2), cin, draw(rng, 2, 5), draw(rng, 2, 5)}, rng),
         w = random_tensor({cout, cin, k, k}, rng), b = random_tensor({cout}, rng);
      return {[=] { return project(conv2d(x, w, b, k / 2), s); }, {x, w, b}};
    }, 1e-5);
  }
  add_case("upsample_bilinear2x", [](std::uint64_t s) -> Built {
    Rng rng(s);
    TD x = random_tensor({draw(rng, 1, 2), draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4)}, rng);
    return {[=] { return project(upsample_bilinear2x(x), s); }, {x}};
  });

  // Layers. Parameters come from a ParamStore and are all checked; `make`
  // draws its own sizes and returns the input shape it expects.
  using Make = std::function<std::pair<Shape, std::function<TD(const TD&)>>(ParamStore<double>&, Rng&)>;
  auto layer_case = [&](std::string name, Make make) {
    add_case(name, [=](std::uint64_t s) -> Built {
      Rng rng(s);
      ParamStore<double> store;
      auto [input, fn] = make(store, rng);
      TD x = random_tensor(input, rng);
      std::vector<TD> leaves{x};
      for (const auto& [_, p] : store.all()) leaves.push_back(p);
      // Perturb norm affine parameters away from identity.
      for (auto& p : leaves) {
        auto d = p.mutable_data();
        for (auto& v : d) v += rng.uniform(-0.3, 0.3);
      }
      return {[fn = fn, x, s] { return project(fn(x), s); }, leaves};
    });
  };
  layer_case("window_attention_shifted", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t heads = draw(rng, 1, 2), c = heads * draw(rng, 1, 2), grid = 2 * draw(rng, 1, 2);
    auto a = WindowAttention<double>::create(st, "a", c, heads, 2, rng);
    auto mask = build_shift_mask<double>(grid, 2, 1);
    return std::pair{Shape{draw(rng, 1, 2), grid * grid, c},
                     std::function<TD(const TD&)>([=](const TD& x) { return a(x, grid, 1, mask); })};
  });
  layer_case("swin_block_pair", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t heads = draw(rng, 1, 2), c = 4 * heads;
    StageSpec spec{c, 2, heads, 4, 2, 1};
    auto b0 = SwinBlock<double>::create(st, "b0", spec, 0, 2, 1e-5, rng);
    auto b1 = SwinBlock<double>::create(st, "b1", spec, 1, 2, 1e-5, rng);
    return std::pair{Shape{1, 16, c}, std::function<TD(const TD&)>([=](const TD& x) { return b1(b0(x)); })};
  });
  layer_case("patch_embed", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = draw(rng, 2, 4), side = 2 * draw(rng, 1, 2);
    auto e = PatchEmbed<double>::create(st, "e", 3, 2, c, 1e-5, rng);
    return std::pair{Shape{draw(rng, 1, 2), 3, side, side}, std::function<TD(const TD&)>([=](const TD& x) { return e(x); })};
  });
  layer_case("patch_merging", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = draw(rng, 1, 3), grid = 2 * draw(rng, 1, 2);
    auto m = PatchMerging<double>::create(st, "m", grid, c, 1e-5, rng);
    return std::pair{Shape{draw(rng, 1, 2), grid * grid, c},
                     std::function<TD(const TD&)>([=](const TD& x) { return m(x); })};
  });
  layer_case("patch_expand", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = 2 * draw(rng, 1, 2), grid = draw(rng, 1, 3);
    auto p = PatchExpand<double>::create(st, "p", grid, c, rng);
    return std::pair{Shape{draw(rng, 1, 2), grid * grid, c},
                     std::function<TD(const TD&)>([=](const TD& x) { return p(x); })};
  });
  layer_case("conv_fuse", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = 2 * draw(rng, 1, 2), h = draw(rng, 2, 3), w = draw(rng, 2, 3), batch = draw(rng, 1, 2);
    auto f = ConvFuse<double>::create(st, "f", c, true, rng);
    Rng r2(rng.next_u64());
    TD up = random_tensor({batch, c, h, w}, r2);
    return std::pair{Shape{batch, c, h, w}, std::function<TD(const TD&)>([=](const TD& x) { return f(x, up); })};
  });
  layer_case("text_projection", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t dt = draw(rng, 2, 6), dv = draw(rng, 2, 6);
    auto w = st.trunc_normal("w_t", {dt, dv}, rng, 0.5);
    return std::pair{Shape{draw(rng, 1, 3), dt}, std::function<TD(const TD&)>([=](const TD& x) { return matmul(x, w); })};
  });
  layer_case("cross_attention", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t heads = draw(rng, 1, 2), c = 4 * heads, batch = draw(rng, 1, 2), tokens = draw(rng, 1, 3);
    auto blk = CrossAttentionBlock<double>::create(st, "c", c, heads, 2, 1e-5, rng);
    Rng r2(rng.next_u64());
    // Several text tokens exercise the softmax; one token is the degenerate case.
    TD text = random_tensor({batch, tokens, c}, r2);
    return std::pair{Shape{batch, draw(rng, 2, 5), c},
                     std::function<TD(const TD&)>([=](const TD& x) { return blk(x, text); })};
  });
  layer_case("concat_fusion", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = draw(rng, 2, 4), batch = draw(rng, 1, 2);
    auto f = ConcatFusion<double>::create(st, "c", c, rng);
    Rng r2(rng.next_u64());
    TD text = random_tensor({batch, 1, c}, r2);
    return std::pair{Shape{batch, draw(rng, 2, 5), c},
                     std::function<TD(const TD&)>([=](const TD& x) { return f(x, text); })};
  });
  layer_case("segmentation_head", [](ParamStore<double>& st, Rng& rng) {
    const std::size_t c = draw(rng, 1, 3);
    auto h = SegmentationHead<double>::create(st, "h", c, rng);
    return std::pair{Shape{draw(rng, 1, 2), c, draw(rng, 2, 4), draw(rng, 2, 4)},
                     std::function<TD(const TD&)>([=](const TD& x) { return h(x); })};
  });
  // Cross-attention with the text side as a leaf too.
  add_case("cross_attention_text_grad", [](std::uint64_t s) -> Built {
    Rng rng(s);
    ParamStore<double> st;
    const std::size_t c = 4, batch = draw(rng, 1, 2);
    auto blk = CrossAttentionBlock<double>::create(st, "c", c, 2, 2, 1e-5, rng);
    TD x = random_tensor({batch, draw(rng, 2, 4), c}, rng), text = random_tensor({batch, draw(rng, 1, 3), c}, rng);
    return {[=] { return project(blk(x, text), s); }, {x, text}};
  });

  // Losses on probabilities away from the clamp.
  auto masks = [](Rng& rng, const Shape& sh) {
    std::vector<double> y(shape_numel(sh));
    for (auto& v : y) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    return TD(sh, y);
  };
  auto loss_case = [&](std::string name, std::function<TD(const TD&, const TD&)> f, double tol) {
    add_case(name, [=](std::uint64_t s) -> Built {
      Rng rng(s);
      const Shape sh{draw(rng, 1, 2), 1, draw(rng, 2, 5), draw(rng, 2, 5)};
      TD p = random_tensor(sh, rng, 0.05, 0.95);
      TD t = masks(rng, sh);
      return {[=] { return f(p, t); }, {p}};
    }, tol);
  };
  loss_case("dice_loss", [](const TD& p, const TD& t) { return dice_loss(p, t); }, 1e-4);
  loss_case("ce_loss", [](const TD& p, const TD& t) { return ce_loss(p, t); }, 1e-5);
  loss_case("hybrid_loss", [](const TD& p, const TD& t) { return hybrid_loss(p, t, LossConfig{}); }, 1e-4);
  add_case("hybrid_loss_wrt_logits", [=](std::uint64_t s) -> Built {
    Rng rng(s);
    const Shape sh{draw(rng, 1, 2), 1, draw(rng, 2, 5), draw(rng, 2, 5)};
    TD z = random_tensor(sh, rng, -3, 3);
    TD t = masks(rng, sh);
    return {[=] { return hybrid_loss(sigmoid(z), t, LossConfig{}); }, {z}};
  });
  return cases;
}

/// Whole micro model: every parameter, hybrid loss against a random mask.
inline std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>> micro_model_case(
    std::uint64_t seed, ModelConfig cfg = micro_config()) {
  auto model = std::make_shared<SwinTextUNet<double>>(cfg, seed);
  Rng rng(mix_seed({seed, 0x3c}));
  // Move every parameter off its initial value so norms and biases are generic.
  for (const auto& [_, p] : model->params().all()) {
    Tensor<double> t = p;
    for (auto& v : t.mutable_data()) v += rng.uniform(-0.2, 0.2);
  }
  auto image = random_tensor({2, cfg.in_channels, cfg.image_size, cfg.image_size}, rng, 0.0, 1.0);
  auto emb = random_tensor({2, cfg.text_dim}, rng);
  std::vector<double> y(2 * cfg.image_size * cfg.image_size);
  for (auto& v : y) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  Tensor<double> target({2, 1, cfg.image_size, cfg.image_size}, y);
  std::vector<Tensor<double>> leaves;
  for (const auto& [_, p] : model->params().all()) leaves.push_back(p);
  return {[model, image, emb, target] { return hybrid_loss(model->forward(image, emb).probs, target, LossConfig{}); },
          leaves};
}

inline std::vector<CheckResult> gradcheck_suite(std::size_t seeds = 20, double fault = 0.0,
                                                const std::function<void(const CheckResult&)>& report = {}) {
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, auto&& build, double eps, double tol) {
    GradcheckOptions opt;
    opt.fault = fault;
    opt.eps = eps;
    opt.tolerance = tol;
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      auto [fn, leaves] = build(mix_seed({s, 0x67}));
      worst = std::max(worst, gradcheck(fn, leaves, opt, s));
    }
    CheckResult r{"gradcheck", name, worst, tol, worst <= tol, std::to_string(seeds) + " seeds"};
    if (report) report(r);
    out.push_back(r);
  };
  for (const auto& c : op_cases()) run(c.name, c.build, c.eps, c.tolerance);
  run("micro_model_full", [](std::uint64_t s) { return micro_model_case(s); }, 1e-4, 1e-4);
  return out;
}

// ---------------------------------------------------------------------------
// Brute-force shifted-window attention.

/// Direct evaluation of (S)W-MSA on x[B, G*G, C] with explicit loops. A query
/// at original position p attends to key q when both land in the same window
/// after rolling the grid by -shift and neither pair crosses the wrap-around
/// seam (on each axis, both or neither of the coordinates are < shift).
inline std::vector<double> naive_window_attention(const WindowAttention<double>& a, const Tensor<double>& x,
                                                  std::size_t grid, std::size_t shift) {
  const std::size_t batch = x.dim(0), c = a.channels, h = a.heads, d = c / h, m = a.window, n = grid * grid;
  const auto xv = x.data();
  const auto wqkv = a.qkv.weight.data(), bqkv = a.qkv.bias.data();
  const auto wp = a.proj.weight.data(), bp = a.proj.bias.data();
  const auto table = a.rel_table.data();
  std::vector<double> qkv(batch * n * 3 * c);
  for (std::size_t t = 0; t < batch * n; ++t)
    for (std::size_t o = 0; o < 3 * c; ++o) {
      double acc = bqkv[o];
      for (std::size_t i = 0; i < c; ++i) acc += xv[t * c + i] * wqkv[i * 3 * c + o];
      qkv[t * 3 * c + o] = acc;
    }
  auto shifted = [&](std::size_t p) { return (p + grid - shift) % grid; };
  std::vector<double> heads_out(batch * n * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t qi = 0; qi < n; ++qi) {
      const std::size_t qy = qi / grid, qx = qi % grid, sqy = shifted(qy), sqx = shifted(qx);
      for (std::size_t hd = 0; hd < h; ++hd) {
        std::vector<std::pair<std::size_t, double>> scores;
        for (std::size_t ki = 0; ki < n; ++ki) {
          const std::size_t ky = ki / grid, kx = ki % grid, sky = shifted(ky), skx = shifted(kx);
          if (sqy / m != sky / m || sqx / m != skx / m) continue;
          if ((qy < shift) != (ky < shift) || (qx < shift) != (kx < shift)) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e)
            dot += qkv[(b * n + qi) * 3 * c + hd * d + e] * qkv[(b * n + ki) * 3 * c + c + hd * d + e];
          const std::size_t dy = sqy % m + m - 1 - sky % m, dx = sqx % m + m - 1 - skx % m;
          scores.emplace_back(ki, dot / std::sqrt(static_cast<double>(d)) + table[(dy * (2 * m - 1) + dx) * h + hd]);
        }
        double mx = -1e300, z = 0.0;
        for (const auto& [_, sc] : scores) mx = std::max(mx, sc);
        for (const auto& [_, sc] : scores) z += std::exp(sc - mx);
        for (const auto& [ki, sc] : scores) {
          const double p = std::exp(sc - mx) / z;
          for (std::size_t e = 0; e < d; ++e)
            heads_out[(b * n + qi) * c + hd * d + e] += p * qkv[(b * n + ki) * 3 * c + 2 * c + hd * d + e];
        }
      }
    }
  std::vector<double> out(batch * n * c);
  for (std::size_t t = 0; t < batch * n; ++t)
    for (std::size_t o = 0; o < c; ++o) {
      double acc = bp[o];
      for (std::size_t i = 0; i < c; ++i) acc += heads_out[t * c + i] * wp[i * c + o];
      out[t * c + o] = acc;
    }
  return out;
}

/// Max |library - oracle| over random inputs on a grid x grid token map.
inline double attention_oracle_error(std::uint64_t seed, std::size_t grid = 8, std::size_t window = 4,
                                     std::size_t shift = 2, std::size_t channels = 8, std::size_t heads = 2) {
  Rng rng(mix_seed({seed, 0xa7}));
  ParamStore<double> store;
  auto a = WindowAttention<double>::create(store, "attn", channels, heads, window, rng);
  for (const auto& [_, p] : store.all()) {
    Tensor<double> t = p;
    for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  }
  auto x = random_tensor({2, grid * grid, channels}, rng);
  NoGradGuard no_grad;
  const Tensor<double> mask = shift ? build_shift_mask<double>(grid, window, shift) : Tensor<double>();
  const auto got = a(x, grid, shift, mask);
  const auto want = naive_window_attention(a, x, grid, shift);
  double err = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) err = std::max(err, std::abs(got.data()[i] - want[i]));
  return err;
}

inline std::vector<CheckResult> attention_oracle_suite(std::size_t seeds = 20) {
  std::vector<CheckResult> out;
  struct Case {
    const char* name;
    std::size_t grid, window, shift;
  };
  for (const auto& c : {Case{"sw_msa_8x8_m4", 8, 4, 2}, Case{"w_msa_8x8_m4", 8, 4, 0}, Case{"sw_msa_12x12_m4_s1", 12, 4, 1},
                        Case{"sw_msa_6x6_m3", 6, 3, 1}}) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) worst = std::max(worst, attention_oracle_error(s, c.grid, c.window, c.shift));
    out.push_back({"attention", c.name, worst, 1e-10, worst <= 1e-10, std::to_string(seeds) + " seeds"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention MAC accounting.

struct MacReport {
  std::uint64_t windowed = 0;  // QK^T + AV
  std::uint64_t global = 0;
};

/// Runs one windowed and one global (window == grid) attention over a random
/// [1, grid*grid, channels] map and reads the instrumented counters.
template <class T = float>
MacReport measure_attention_macs(std::size_t grid, std::size_t window, std::size_t channels = 32,
                                 std::size_t heads = 1) {
  Rng rng(7);
  ParamStore<T> store;
  auto local = WindowAttention<T>::create(store, "local", channels, heads, window, rng);
  auto global = WindowAttention<T>::create(store, "global", channels, heads, grid, rng);
  std::vector<T> v(grid * grid * channels);
  for (auto& e : v) e = static_cast<T>(rng.uniform(-1.0, 1.0));
  Tensor<T> x({1, grid * grid, channels}, std::move(v));
  NoGradGuard no_grad;
  MacReport r;
  auto& macs = attention_macs();
  macs.reset();
  local(x, grid, 0, {});
  r.windowed = macs.window_scores + macs.window_aggregate;
  macs.reset();
  global(x, grid, 0, {});
  r.global = macs.window_scores + macs.window_aggregate;
  macs.reset();
  return r;
}

inline std::vector<CheckResult> metrics_suite() {
  std::vector<CheckResult> out;
  Rng rng(11);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    std::vector<float> a(256), b(256);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (auto& v : a) v = rng.uniform() < pa ? 1.0f : 0.0f;
    for (auto& v : b) v = rng.uniform() < pb ? 1.0f : 0.0f;
    const auto m = dice_iou_metrics(a, b);
    worst = std::max(worst, std::abs(m.dice - 2.0 * m.iou / (1.0 + m.iou)));
  }
  out.push_back({"metrics", "dice_iou_identity", worst, 1e-12, worst <= 1e-12, "100 random mask pairs"});

  Tensor<double> half = Tensor<double>::full({1, 1, 8, 8}, 0.5);
  std::vector<double> y(64);
  for (auto& v : y) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const double ce = ce_loss(half, Tensor<double>({1, 1, 8, 8}, y)).item();
  const double ce_err = std::abs(ce - std::numbers::ln2);
  out.push_back({"metrics", "ce_at_half_is_ln2", ce_err, 1e-9, ce_err <= 1e-9, ""});

  y.assign(64, 0.0);
  for (std::size_t i = 0; i < 20; ++i) y[i * 3] = 1.0;
  Tensor<double> mask({1, 1, 8, 8}, y);
  const double dl = dice_loss(mask, mask).item();
  out.push_back({"metrics", "perfect_dice_loss", std::abs(dl), 1e-9, std::abs(dl) <= 1e-9, ""});

  const auto mr = measure_attention_macs<float>(56, 7, 8, 1);
  const bool exact = mr.windowed * 64 == mr.global;
  out.push_back({"metrics", "mac_ratio_56_m7", exact ? 0.0 : 1.0, 0.0, exact,
                 std::to_string(mr.windowed) + "/" + std::to_string(mr.global)});
  return out;
}

}  // namespace swintext::verify
