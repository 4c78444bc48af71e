#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "swintext/model.hpp"
#include "swintext/text.hpp"
#include "swintext/verify.hpp"

using namespace swintext;
using TD = Tensor<double>;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

EmbeddingTable small_table() {
  EmbeddingTable t;
  t.dim = 3;
  t.records.push_back({"left lung", {1.0f, 0.0f, -2.5f}});
  t.records.push_back({"right lung", {0.0f, 0.5f, 0.25f}});
  t.records.push_back({"heart", {3.0f, 4.0f, 0.0f}});
  return t;
}

std::size_t fail_offset(const std::string& bytes) {
  try {
    decode_ctxe(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected FormatError";
  return 0;
}

ModelConfig guided_micro(bool use_text, bool cross) {
  auto c = verify::micro_config();
  c.use_text = use_text;
  c.use_cross_attention = cross;
  return c;
}

}  // namespace

TEST(Prompt, NormalizationFoldsCaseAndWhitespace) {
  EXPECT_EQ(normalize_prompt("  Left\tLUNG  "), "left lung");
  EXPECT_EQ(normalize_prompt("a  b"), "a b");
}

TEST(StubEncoder, DeterministicUnitNorm) {
  const auto a = stub_encode("left lung", 512, 0), b = stub_encode("left lung", 512, 0);
  EXPECT_EQ(a.pooled, b.pooled);
  EXPECT_NEAR(std::sqrt(dot(a.pooled, a.pooled)), 1.0, 1e-12);
  EXPECT_EQ(stub_encode("LEFT  lung", 512, 0).pooled, a.pooled);
}

TEST(StubEncoder, DistinctPromptsAreNotParallel) {
  const auto a = stub_encode("left lung", 512, 0), b = stub_encode("right lung", 512, 0);
  EXPECT_LT(std::abs(dot(a.pooled, b.pooled)), 0.999);
  EXPECT_NE(stub_encode("left lung", 512, 1).pooled, a.pooled);
}

TEST(StubEncoder, OddDimension) {
  const auto a = stub_encode("x", 7, 3);
  EXPECT_EQ(a.dim(), 7u);
  EXPECT_NEAR(dot(a.pooled, a.pooled), 1.0, 1e-12);
}

TEST(StubEncoder, EmptyPromptIsUsageError) {
  EXPECT_THROW(stub_encode("", 8, 0), UsageError);
  EXPECT_THROW(stub_encode("   ", 8, 0), UsageError);
}

TEST(Ctxe, RoundTripIsBitExact) {
  const auto t = small_table();
  const auto back = decode_ctxe(encode_ctxe(t));
  ASSERT_EQ(back.records.size(), 3u);
  EXPECT_EQ(back.dim, 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.records[i].prompt, t.records[i].prompt);
    EXPECT_EQ(std::memcmp(back.records[i].values.data(), t.records[i].values.data(), 12), 0);
  }
  EXPECT_EQ(encode_ctxe(back), encode_ctxe(t));
}

TEST(Ctxe, LayoutIsLittleEndian) {
  EmbeddingTable t;
  t.dim = 1;
  t.records.push_back({"ab", {1.0f}});
  const std::string b = encode_ctxe(t);
  const std::string want("CTXE\x01\0\0\0\x01\0\0\0\x01\0\0\0\x02\0\0\0ab\0\0\x80\x3f", 26);
  EXPECT_EQ(b, want);
}

TEST(Ctxe, FullSizeStubTableRoundTrips) {
  EmbeddingTable t;
  t.dim = 512;
  for (const char* p : {"left lung", "right lung", "both lungs"}) {
    const auto e = stub_encode(p, 512, 0);
    t.records.push_back({p, std::vector<float>(e.pooled.begin(), e.pooled.end())});
  }
  const auto path = (std::filesystem::temp_directory_path() / "swintext_test_512.ctxe").string();
  write_ctxe(path, t);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 3 * 4 * 512 + 4 * 3 + 9 + 10 + 10);
  const auto p = FileEmbeddingProvider::load(path);
  EXPECT_EQ(p.dim(), 512u);
  const auto e = p.resolve("Right Lung");
  EXPECT_EQ(e.pooled[7], static_cast<double>(t.records[1].values[7]));
  std::filesystem::remove(path);
}

TEST(Ctxe, CorruptionsReportOffsets) {
  const std::string good = encode_ctxe(small_table());
  EXPECT_EQ(fail_offset(""), 0u);
  EXPECT_EQ(fail_offset("CTX"), 0u);
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_EQ(fail_offset(bad), 0u);
  bad = good;
  bad[4] = 2;
  EXPECT_EQ(fail_offset(bad), 4u);
  // Cut inside the first record's values: header 16, length 4, "left lung" 9.
  EXPECT_EQ(fail_offset(good.substr(0, 16 + 4 + 9 + 5)), 29u);
  EXPECT_EQ(fail_offset(good + "zz"), good.size());
}

TEST(Ctxe, DuplicatePromptRejected) {
  auto t = small_table();
  t.records.push_back(t.records[0]);
  EXPECT_THROW(decode_ctxe(encode_ctxe(t)), FormatError);
}

TEST(Ctxe, MissingFileIsFormatError) { EXPECT_THROW(read_ctxe("/nonexistent/x.ctxe"), FormatError); }

TEST(FileProvider, UnknownPromptListsNearestKeys) {
  FileEmbeddingProvider p(small_table());
  try {
    p.resolve("left lungs");
    FAIL() << "expected ResolutionError";
  } catch (const ResolutionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'left lung'"), std::string::npos) << msg;
    EXPECT_LT(msg.find("'left lung'"), msg.find("'right lung'")) << msg;
  }
}

TEST(FileProvider, OptionalNormalization) {
  FileEmbeddingProvider raw(small_table()), unit(small_table(), true);
  EXPECT_EQ(raw.resolve("heart").pooled, (std::vector<double>{3, 4, 0}));
  const auto u = unit.resolve("heart").pooled;
  EXPECT_NEAR(u[0], 0.6, 1e-15);
  EXPECT_NEAR(u[1], 0.8, 1e-15);
}

TEST(EmbeddingBatch, StacksAndChecksDims) {
  const auto b = embedding_batch<double>({stub_encode("a", 4, 0), stub_encode("b", 4, 0)});
  EXPECT_EQ(b.shape(), (Shape{2, 4}));
  EXPECT_THROW(embedding_batch<double>({stub_encode("a", 4, 0), stub_encode("b", 5, 0)}), ShapeError);
  EXPECT_THROW(embedding_batch<double>({}), UsageError);
}

TEST(TextProjector, IdentityAndZeroWeights) {
  auto cfg = verify::micro_config();
  cfg.text_dim = cfg.last_channels();
  Rng rng(1);
  ParamStore<double> store;
  auto p = TextProjector<double>::create(store, "p", cfg, rng);
  const std::size_t d = cfg.text_dim;
  auto w = p.weight.mutable_data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) w[i * d + j] = i == j;
  TD e = verify::random_tensor({2, d}, rng);
  const auto last = cfg.num_stages - 1;
  const auto y = p(e, last);
  EXPECT_EQ(y.shape(), (Shape{2, 1, d}));
  EXPECT_EQ(y.values(), e.values());
  for (auto& v : w) v = 0.0;
  const auto zero = p(e, last);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(p(verify::random_tensor({2, d + 1}, rng), last), ShapeError);
}

TEST(CrossAttention, SingleTextTokenGetsWeightOne) {
  Rng rng(2);
  ParamStore<double> store;
  auto blk = CrossAttentionBlock<double>::create(store, "x", 8, 2, 2, 1e-5, rng);
  TD z = verify::random_tensor({2, 16, 8}, rng), text = verify::random_tensor({2, 1, 8}, rng);
  TD w;
  const auto y = blk(z, text, &w);
  EXPECT_EQ(y.shape(), z.shape());
  EXPECT_EQ(w.shape(), (Shape{2, 2, 16, 1}));
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(CrossAttention, SingleTokenOutputIsProjectedValueForEveryQuery) {
  Rng rng(3);
  ParamStore<double> store;
  auto blk = CrossAttentionBlock<double>::create(store, "x", 4, 1, 2, 1e-5, rng);
  TD z = verify::random_tensor({1, 5, 4}, rng), text = verify::random_tensor({1, 1, 4}, rng);
  const auto a = blk.attend(z, text);
  const auto want = blk.wo(blk.wv(text));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a.at({0, i, c}), want.at({0, 0, c}), 1e-12);
}

TEST(CrossAttention, WeightsSumToOneOverTextTokens) {
  Rng rng(4);
  ParamStore<double> store;
  auto blk = CrossAttentionBlock<double>::create(store, "x", 8, 2, 2, 1e-5, rng);
  TD z = verify::random_tensor({1, 6, 8}, rng), text = verify::random_tensor({1, 3, 8}, rng);
  TD w;
  blk.attend(z, text, &w);
  for (std::size_t r = 0; r < 2 * 6; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < 3; ++t) s += w.data()[r * 3 + t];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossAttention, MacsScaleWithBatchTokensTextAndWidth) {
  Rng rng(5);
  auto macs = [&](std::size_t b, std::size_t n, std::size_t t, std::size_t c) {
    ParamStore<float> store;
    auto blk = CrossAttentionBlock<float>::create(store, "x", c, 1, 2, 1e-5, rng);
    NoGradGuard ng;
    attention_macs().reset();
    blk.attend(Tensor<float>::zeros({b, n, c}), Tensor<float>::zeros({b, t, c}));
    const auto m = attention_macs().cross_scores + attention_macs().cross_aggregate;
    attention_macs().reset();
    return m;
  };
  const auto base = macs(1, 16, 1, 8);
  EXPECT_EQ(base, 2u * 16 * 1 * 8);
  EXPECT_EQ(macs(2, 16, 1, 8), 2 * base);
  EXPECT_EQ(macs(1, 64, 1, 8), 4 * base);
  EXPECT_EQ(macs(1, 16, 3, 8), 3 * base);
  EXPECT_EQ(macs(1, 16, 1, 32), 4 * base);
}

TEST(CrossAttention, HeadCountMustDivideWidth) {
  Rng rng(1);
  ParamStore<double> store;
  EXPECT_THROW(CrossAttentionBlock<double>::create(store, "x", 6, 4, 2, 1e-5, rng), ConfigError);
}

TEST(ConcatFusion, KeepsTokenShape) {
  Rng rng(6);
  ParamStore<double> store;
  auto f = ConcatFusion<double>::create(store, "c", 8, rng);
  const auto y = f(verify::random_tensor({2, 16, 8}, rng), verify::random_tensor({2, 1, 8}, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 16, 8}));
  EXPECT_THROW(f(verify::random_tensor({2, 16, 8}, rng), verify::random_tensor({2, 2, 8}, rng)), ShapeError);
}

TEST(TextGuidance, DisabledPathIsIdentityAndOwnsNoParameters) {
  Rng rng(7);
  ParamStore<double> store;
  TextGuidance<double> g(guided_micro(false, true), store, rng);
  EXPECT_EQ(store.total_elements(), 0u);
  TD z = verify::random_tensor({1, 16, 4}, rng);
  EXPECT_EQ(g.apply_stage(z, verify::random_tensor({1, 8}, rng), 0).values(), z.values());
}

TEST(TextGuidance, PathOwnsOnlyItsParameters) {
  Rng rng(8);
  ParamStore<double> cross_store, concat_store;
  TextGuidance<double> cross(guided_micro(true, true), cross_store, rng);
  TextGuidance<double> cat(guided_micro(true, false), concat_store, rng);
  for (const auto& [name, _] : cross_store.all()) EXPECT_EQ(name.find("concat"), std::string::npos) << name;
  for (const auto& [name, _] : concat_store.all()) EXPECT_EQ(name.find("cross"), std::string::npos) << name;
  EXPECT_TRUE(cross_store.contains("guidance.cross1.q.weight"));
  EXPECT_TRUE(concat_store.contains("guidance.concat2.proj.weight"));
}

TEST(Model, WithoutTextOutputIgnoresPrompt) {
  SwinTextUNet<double> model(guided_micro(false, true), 3);
  Rng rng(9);
  TD img = verify::random_tensor({1, 3, 16, 16}, rng, 0, 1);
  const auto a = model(img, verify::random_tensor({1, 8}, rng));
  const auto b = model(img, verify::random_tensor({1, 8}, rng));
  EXPECT_EQ(a.values(), b.values());
}

TEST(Model, WithTextOutputDependsOnPrompt) {
  for (bool cross : {true, false}) {
    SwinTextUNet<double> model(guided_micro(true, cross), 3);
    Rng rng(10);
    TD img = verify::random_tensor({1, 3, 16, 16}, rng, 0, 1);
    const auto a = model(img, verify::random_tensor({1, 8}, rng));
    const auto b = model(img, verify::random_tensor({1, 8}, rng));
    EXPECT_NE(a.values(), b.values()) << (cross ? "cross" : "concat");
  }
}

TEST(Model, CrossWeightsReportedPerStage) {
  SwinTextUNet<double> model(guided_micro(true, true), 3);
  Rng rng(11);
  const auto out = model.forward(verify::random_tensor({2, 3, 16, 16}, rng, 0, 1), verify::random_tensor({2, 8}, rng));
  ASSERT_EQ(out.cross_weights.size(), 2u);
  for (const auto& w : out.cross_weights)
    for (double v : w.data()) EXPECT_EQ(v, 1.0);
}
