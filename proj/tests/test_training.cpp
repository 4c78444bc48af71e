#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "swintext/augment.hpp"
#include "swintext/train.hpp"
#include "swintext/verify.hpp"

using namespace swintext;
using TD = Tensor<double>;

namespace {

TD mask4(std::vector<double> v) { return TD({1, 1, 2, 2}, std::move(v)); }

RunConfig quick_config(std::size_t epochs) {
  RunConfig c = ablation_run_config();
  c.schedule.epochs = epochs;
  c.batch_size = 4;
  return c;
}

Dataset quick_data() {
  SynthOptions o;
  o.size = 32;
  return synth_generate(8, 3, o);
}

}  // namespace

TEST(DiceLoss, HalfOverlapExample) {
  const double got = dice_loss(mask4({1, 0, 1, 0}), mask4({1, 1, 0, 0})).item();
  EXPECT_NEAR(got, 1.0 - (2.0 + 1e-6) / (4.0 + 1e-6), 1e-15);
}

TEST(DiceLoss, PerfectPredictionIsZero) {
  EXPECT_NEAR(dice_loss(mask4({1, 0, 0, 1}), mask4({1, 0, 0, 1})).item(), 0.0, 1e-12);
  EXPECT_NEAR(dice_loss(mask4({0, 0, 0, 0}), mask4({0, 0, 0, 0})).item(), 0.0, 1e-12);
}

TEST(DiceLoss, SumsOverWholeBatch) {
  TD p({2, 1, 1, 2}, {1, 0, 0, 0}), y({2, 1, 1, 2}, {1, 0, 1, 0});
  EXPECT_NEAR(dice_loss(p, y).item(), 1.0 - (2.0 + 1e-6) / (3.0 + 1e-6), 1e-15);
}

TEST(CrossEntropy, HalfProbabilityIsLogTwo) {
  EXPECT_NEAR(ce_loss(mask4({0.5, 0.5, 0.5, 0.5}), mask4({1, 0, 1, 0})).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ClampKeepsSaturatedPredictionsFinite) {
  const double v = ce_loss(mask4({0, 1, 0, 1}), mask4({1, 0, 1, 0})).item();
  EXPECT_NEAR(v, -std::log(1e-7), 1e-6);
}

TEST(HybridLoss, WeightedSum) {
  const TD p = mask4({0.9, 0.2, 0.6, 0.1}), y = mask4({1, 0, 1, 0});
  LossConfig c;
  c.lambda_dice = 0.3;
  c.lambda_ce = 2.0;
  const auto t = hybrid_loss_terms(p, y, c);
  EXPECT_NEAR(t.total.item(), 0.3 * dice_loss(p, y).item() + 2.0 * ce_loss(p, y).item(), 1e-15);
  c.lambda_ce = 0.0;
  c.lambda_dice = 0.0;
  EXPECT_THROW(hybrid_loss(p, y, c), ConfigError);
}

TEST(Loss, ShapeMismatchIsShapeError) {
  EXPECT_THROW(dice_loss(mask4({1, 0, 1, 0}), TD::zeros({1, 1, 4, 1})), ShapeError);
}

TEST(Metrics, WorkedExamples) {
  const auto a = dice_iou_metrics(std::vector<double>{1, 1, 0, 0}, std::vector<double>{1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(a.dice, 0.5);
  EXPECT_DOUBLE_EQ(a.iou, 1.0 / 3.0);
  const auto b = dice_iou_metrics(std::vector<double>{1, 1, 0}, std::vector<double>{1, 0, 0});
  EXPECT_DOUBLE_EQ(b.dice, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(b.iou, 0.5);
  const auto e = dice_iou_metrics(std::vector<double>{0, 0}, std::vector<double>{0, 0});
  EXPECT_EQ(e.dice, 1.0);
  EXPECT_EQ(e.iou, 1.0);
  const auto d = dice_iou_metrics(std::vector<double>{1, 0}, std::vector<double>{0, 1});
  EXPECT_EQ(d.dice, 0.0);
  EXPECT_EQ(d.iou, 0.0);
}

TEST(Metrics, ThresholdIsInclusiveAtHalf) {
  const auto c = overlap_counts(std::vector<double>{0.5, 0.4999}, std::vector<double>{1, 1});
  EXPECT_EQ(c.tp, 1u);
  EXPECT_EQ(c.fn, 1u);
}

TEST(Metrics, RandomMasksSatisfyIdentities) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform();
      y[i] = rng.below(2);
    }
    const auto m = dice_iou_metrics(p, y), r = dice_iou_metrics(y, p);
    EXPECT_NEAR(m.dice, 2 * m.iou / (1 + m.iou), 1e-12);
    EXPECT_LE(m.iou, m.dice + 1e-15);
    EXPECT_DOUBLE_EQ(m.dice, r.dice);
    EXPECT_GE(m.dice, 0.0);
    EXPECT_LE(m.dice, 1.0);
  }
}

TEST(Metrics, SizeMismatchIsShapeError) {
  EXPECT_THROW(overlap_counts(std::vector<double>{1}, std::vector<double>{1, 0}), ShapeError);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  TD p = store.add("p", TD({2}, {1.0, -1.0}));
  OptimConfig oc;
  oc.weight_decay = 0.0;
  AdamW<double> opt(oc);
  backward(sum(mul(p, TD({2}, {2.0, -0.5}))));
  opt.step(store, 0.1);
  EXPECT_NEAR(p.data()[0], 0.9, 1e-8);
  EXPECT_NEAR(p.data()[1], -0.9, 1e-7);
}

TEST(AdamW, DecayIsDecoupled) {
  ParamStore<double> store;
  TD p = store.add("p", TD({1}, {2.0}));
  OptimConfig oc;
  oc.weight_decay = 0.5;
  AdamW<double> opt(oc);
  backward(scale(sum(p), 0.0));
  opt.step(store, 0.1);
  EXPECT_NEAR(p.item(), 2.0 * (1.0 - 0.05), 1e-12);
}

TEST(AdamW, MinimizesQuadratic) {
  ParamStore<double> store;
  TD p = store.add("p", TD({3}, {1.0, -2.0, 3.0}));
  OptimConfig oc;
  oc.weight_decay = 0.0;
  AdamW<double> opt(oc);
  for (int i = 0; i < 2000; ++i) {
    store.zero_grad();
    backward(sum(mul(p, p)));
    opt.step(store, 1e-2);
  }
  for (double v : p.data()) EXPECT_LT(std::abs(v), 0.05);
  EXPECT_EQ(opt.steps(), 2000u);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  ParamStore<double> store;
  TD ok = store.add("encoder.ok", TD({1}, {1.0}));
  TD bad = store.add("decoder.head.conv.bias", TD({1}, {1.0}));
  backward(add(sum(ok), sum(mul(bad, TD({1}, {std::numeric_limits<double>::quiet_NaN()})))));
  AdamW<double> opt;
  try {
    opt.step(store, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.head.conv.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(ok.item(), 1.0);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Schedule, WarmupThenCosine) {
  ScheduleConfig s;
  s.base_lr = 1e-3;
  s.min_lr = 1e-5;
  s.epochs = 21;
  s.warmup_frac = 0.1;
  ASSERT_EQ(s.warmup_epochs(), 2u);
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(2, s), 1e-3);
  EXPECT_NEAR(lr_at(11, s), 0.5 * (1e-3 + 1e-5), 1e-15);
  EXPECT_NEAR(lr_at(20, s), 1e-5, 1e-15);
  for (std::size_t e = 3; e < 21; ++e) EXPECT_LE(lr_at(e, s), lr_at(e - 1, s));
}

TEST(Schedule, InvalidConfigsRejected) {
  ScheduleConfig s;
  s.epochs = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = {};
  s.min_lr = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Augment, DisabledIsIdentity) {
  SynthOptions o;
  o.size = 32;
  const auto s = synth_sample(0, 1, o);
  AugmentConfig c;
  c.enabled = false;
  Rng rng(1);
  const auto a = augment(s, c, rng);
  EXPECT_EQ(a.image.pixels, s.image.pixels);
  EXPECT_EQ(a.mask.pixels, s.mask.pixels);
}

TEST(Augment, GeometryIsSharedAndMaskStaysBinary) {
  SynthOptions o;
  o.size = 32;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = synth_sample(seed, 2, o);
    s.image = s.mask;
    AugmentConfig flips;
    flips.flip_prob = 1.0;
    flips.rotate_deg = 0.0;
    flips.intensity_lo = flips.intensity_hi = 1.0;
    Rng rng(seed);
    const auto f = augment(s, flips, rng);
    EXPECT_EQ(f.image.pixels, f.mask.pixels);
    EXPECT_EQ(flip_vertical(flip_horizontal(f.mask)).pixels, s.mask.pixels);

    AugmentConfig full;
    Rng rng2(seed);
    const auto r = augment(synth_sample(seed, 2, o), full, rng2);
    for (float v : r.mask.pixels) EXPECT_TRUE(v == 0.0f || v == 1.0f);
    for (float v : r.image.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, ZeroRotationIsExact) {
  Image img(4, 4);
  for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = static_cast<float>(i) / 16.0f;
  EXPECT_EQ(rotate(img, 0.0, false).pixels, img.pixels);
  EXPECT_EQ(rotate(img, 0.0, true).pixels, img.pixels);
}

TEST(Training, EmbeddingsStayFrozen) {
  auto cfg = verify::micro_config();
  SwinTextUNet<double> model(cfg, 1);
  Rng rng(2);
  TD emb = verify::random_tensor({1, cfg.text_dim}, rng);
  const auto before = emb.values();
  backward(mean(model(verify::random_tensor({1, 3, 16, 16}, rng, 0, 1), emb)));
  EXPECT_FALSE(emb.has_grad());
  EXPECT_EQ(emb.values(), before);
  for (const auto& [name, p] : model.params().all())
    EXPECT_EQ(name.find("text_encoder"), std::string::npos) << name;
}

TEST(Training, ShortRunReducesLoss) {
  const auto r = train(quick_data(), quick_config(6));
  EXPECT_LT(r.final_train_loss, r.initial_train_loss);
  EXPECT_EQ(r.variant, "Full SwinTextUNet");
  EXPECT_TRUE(r.has_test);
  EXPECT_EQ(r.csv.substr(0, r.csv.find('\n')), "epoch,split,loss,dice,iou,lr");
}

TEST(Training, BitwiseDeterministic) {
  const auto data = quick_data();
  const auto a = train(data, quick_config(2)), b = train(data, quick_config(2));
  EXPECT_EQ(a.csv, b.csv);
  EXPECT_EQ(a.last_checkpoint, b.last_checkpoint);
  EXPECT_EQ(a.best_checkpoint, b.best_checkpoint);
}

TEST(Training, SeedChangesInitialization) {
  const auto data = quick_data();
  auto c = quick_config(1);
  const auto a = train(data, c);
  c.seed = 1;
  EXPECT_NE(train(data, c).last_checkpoint, a.last_checkpoint);
}

TEST(Training, VariantNamesLogged) {
  const auto data = quick_data();
  auto c = quick_config(1);
  c.model.use_convfuse = false;
  EXPECT_EQ(train(data, c).variant, "w/o ConvFuse");
  c.model.use_convfuse = true;
  c.model.use_cross_attention = false;
  EXPECT_EQ(train(data, c).variant, "w/o Cross-Attention");
  c.model.use_text = false;
  EXPECT_EQ(train(data, c).variant, "w/o Text Guidance");
}

TEST(Training, EmptyTrainSplitIsUsageError) {
  EXPECT_THROW(train(Dataset{}, quick_config(1)), UsageError);
}
