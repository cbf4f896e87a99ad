#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dtk/encoders.hpp"
#include "dtk/errors.hpp"
#include "fd_oracle.hpp"

using namespace dtk;
using dtk::testing::central_difference;
using dtk::testing::random_tensor;
using dtk::testing::relative_error;

namespace {

std::size_t enumerate_windows(std::size_t len, std::size_t p, std::size_t s) {
    std::size_t n = 0;
    for (std::size_t start = 0;; start += s) {
        ++n;
        if (start + p >= len) break;
    }
    return n;
}

Tensor<double> ramp(std::size_t len, std::size_t d) {
    std::vector<double> v(len * d);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < d; ++c) v[t * d + c] = double(t) + 0.01 * double(c);
    return Tensor<double>::from({len, d}, std::move(v));
}

ModelConfig encoder_config(std::size_t vocab = 40) {
    ModelConfig c = desk_profile();
    c.backbone.vocab_size = vocab;
    return c;
}

template <typename T>
ParameterStore<T> encoder_store(const ModelConfig& c, std::uint64_t seed) {
    ParameterStore<T> store;
    store.add_layout(temporal_encoder_layout(c), seed);
    store.add_layout(text_encoder_layout(c), seed);
    return store;
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
    return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(Patching, FormulaMatchesEnumeration) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t len = 1 + rng() % 512;
        const std::size_t p = 1 + rng() % len;
        const std::size_t s = 1 + rng() % len;
        ASSERT_EQ(patch_count(len, p, s), enumerate_windows(len, p, s)) << len << " " << p << " " << s;
    }
    EXPECT_EQ(patch_count(250, 25, 25), 10u);
}

TEST(Patching, DefaultShapes) {
    const auto out = patchify(Tensor<double>::zeros({250, 12}), PatchConfig{25, 25});
    EXPECT_EQ(out.shape(), (Shape{10, 300}));
    EXPECT_EQ(patchify(Tensor<double>::zeros({7, 2}), PatchConfig{7, 3}).rows(), 1u);
}

TEST(Patching, OverrunReplicatesLastTimestamp) {
    const auto x = ramp(8, 1);
    const auto out = patchify(x, PatchConfig{3, 2});
    ASSERT_EQ(out.shape(), (Shape{4, 3}));
    const double want[4][3] = {{0, 1, 2}, {2, 3, 4}, {4, 5, 6}, {6, 7, 7}};
    for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(out.at(j, t), want[j][t]);
}

TEST(Patching, WindowsAreFlattenedTimeMajor) {
    const auto x = ramp(6, 3);
    const auto out = patchify(x, PatchConfig{2, 2});
    // token 1 = rows 2,3: [x20 x21 x22 x30 x31 x32]
    EXPECT_EQ(out.at(1, 0), x.at(2, 0));
    EXPECT_EQ(out.at(1, 2), x.at(2, 2));
    EXPECT_EQ(out.at(1, 3), x.at(3, 0));
}

TEST(Patching, NonOverlappingExactTilingIsLossless) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t p = 1 + rng() % 10, k = 1 + rng() % 10, d = 1 + rng() % 4;
        const auto x = random_tensor<double>({p * k, d}, rng);
        const auto out = patchify(x, PatchConfig{p, p});
        ASSERT_EQ(out.rows(), k);
        EXPECT_EQ(values(out), values(x));
    }
}

TEST(Patching, EmptySeriesIsShapeError) {
    EXPECT_THROW(patch_count(0, 3, 2), ShapeError);
    EXPECT_THROW(patchify(Tensor<double>::zeros({0, 2}), PatchConfig{3, 2}), ShapeError);
}

TEST(Tokenize, LowercasesAndSplitsOnPunctuation) {
    EXPECT_EQ(tokenize("Sinus rhythm, ST-elevation!"),
              (std::vector<std::string>{"sinus", "rhythm", "st", "elevation"}));
    EXPECT_TRUE(tokenize("  ,.; ").empty());
}

TEST(VocabTest, OrderedByCountThenToken) {
    const Vocab v = Vocab::build({"b a c", "a b", "a"});
    EXPECT_EQ(v.size(), 5u);
    EXPECT_EQ(v.id("<pad>"), Vocab::kPad);
    EXPECT_EQ(v.id("a"), 2);
    EXPECT_EQ(v.id("b"), 3);
    EXPECT_EQ(v.id("c"), 4);
    EXPECT_EQ(v.id("zzz"), Vocab::kUnk);
    EXPECT_EQ(Vocab::build({"b a c", "a b", "a"}, 4).size(), 4u);
}

TEST(VocabTest, EncodeTruncatesAndFallsBackToUnk) {
    const Vocab v = Vocab::build({"sinus rhythm"});
    EXPECT_EQ(v.encode("Sinus rhythm", 10), (std::vector<std::int32_t>{v.id("sinus"), v.id("rhythm")}));
    EXPECT_EQ(v.encode("", 10), std::vector<std::int32_t>{Vocab::kUnk});
    EXPECT_EQ(v.encode("sinus unknownword", 10)[1], Vocab::kUnk);
    std::string long_text;
    for (int i = 0; i < 600; ++i) long_text += (i % 2 ? "sinus " : "rhythm ");
    const auto ids = v.encode(long_text, 128);
    EXPECT_EQ(ids.size(), 128u);
    EXPECT_EQ(ids[0], v.id("rhythm"));
}

TEST(VocabTest, SaveLoadRoundTrip) {
    const Vocab v = Vocab::build({"normal sinus rhythm", "atrial fibrillation noted"});
    const auto path = std::filesystem::temp_directory_path() / "dtk_test_vocab.tsv";
    v.save(path);
    const Vocab w = Vocab::load(path);
    ASSERT_EQ(w.size(), v.size());
    for (std::int32_t i = 0; i < std::int32_t(v.size()); ++i) EXPECT_EQ(w.token(i), v.token(i));
    {
        std::ofstream out(path, std::ios::app);
        out << "broken line\n";
    }
    EXPECT_THROW(Vocab::load(path), FormatError);
    std::filesystem::remove(path);
}

TEST(TemporalEncoderTest, OutputIsOneRowForAnyLength) {
    const ModelConfig c = encoder_config();
    auto store = encoder_store<float>(c, 3);
    TemporalEncoder<float> enc(c, store);
    std::mt19937_64 rng(3);
    for (std::size_t len : {25u, 250u, 1000u}) {
        EXPECT_EQ(enc.encode(random_tensor<float>({len, 2}, rng)).shape(), (Shape{1, c.backbone.hidden}));
    }
    EXPECT_THROW(enc.encode(Tensor<float>::zeros({10, 3})), ShapeError);
}

TEST(TemporalEncoderTest, FiniteOnDegenerateInputs) {
    const ModelConfig c = encoder_config();
    auto store = encoder_store<float>(c, 4);
    TemporalEncoder<float> enc(c, store);
    for (float v : {0.0f, 3.5f, 1e3f, -1e3f}) {
        EXPECT_NO_THROW(enc.encode(Tensor<float>::full({120, 2}, v)));
    }
    std::vector<float> bad(240, 0.0f);
    bad[17] = std::nanf("");
    EXPECT_THROW(enc.encode(Tensor<float>::from({120, 2}, bad)), NumericError);
}

TEST(TemporalEncoderTest, NoCrossSampleLeakage) {
    const ModelConfig c = encoder_config();
    auto store = encoder_store<float>(c, 5);
    TemporalEncoder<float> enc(c, store);
    std::mt19937_64 rng(5);
    auto a = random_tensor<float>({120, 2}, rng);
    auto b = random_tensor<float>({120, 2}, rng);
    const auto first = values(enc.encode(a));
    enc.encode(b);
    EXPECT_EQ(values(enc.encode(a)), first);
}

TEST(TemporalEncoderTest, FirstConvGradientMatchesFiniteDifferences) {
    ModelConfig c = encoder_config();
    c.conv_widths = {3, 4, 4};
    auto store = encoder_store<double>(c, 6);
    TemporalEncoder<double> enc(c, store);
    std::mt19937_64 rng(6);
    auto x = random_tensor<double>({30, 2}, rng);
    auto probe = random_tensor<double>({1, c.backbone.hidden}, rng);
    Tensor<double> w = store.get("temporal_encoder.block.0.conv.0.w");
    store.zero_grad();
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(sum(mul(enc.encode(x), probe)));
    }
    const auto fd = central_difference<double>(w, [&] { return sum(mul(enc.encode(x), probe)).item(); }, 1e-5);
    EXPECT_LT(relative_error<double>(w.grad(), fd), 1e-6);

    // Single precision at the spec tolerance.
    auto fstore = encoder_store<float>(c, 6);
    TemporalEncoder<float> fenc(c, fstore);
    std::vector<float> xf(x.data().begin(), x.data().end()), pf(probe.data().begin(), probe.data().end());
    auto xt = Tensor<float>::from({30, 2}, xf);
    auto pt = Tensor<float>::from({1, c.backbone.hidden}, pf);
    Tensor<float> wf = fstore.get("temporal_encoder.block.0.conv.0.w");
    {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum(mul(fenc.encode(xt), pt)));
    }
    const auto fdf = central_difference<float>(wf, [&] { return sum(mul(fenc.encode(xt), pt)).item(); }, 1e-2f);
    EXPECT_LT(relative_error<float>(wf.grad(), fdf), 1e-3);
}

TEST(TextEncoderTest, DeterministicAndUnkForEmpty) {
    const ModelConfig c = encoder_config();
    auto store = encoder_store<float>(c, 7);
    TextEncoder<float> enc(c, store);
    const Vocab v = Vocab::build({"irregular rhythm noted"});
    const auto ids = v.encode("irregular rhythm noted", 64);
    EXPECT_EQ(values(enc.encode(ids)), values(enc.encode(ids)));
    const auto empty = v.encode("", 64);
    const auto z = enc.encode(empty);
    EXPECT_EQ(z.shape(), (Shape{1, c.backbone.hidden}));
    EXPECT_EQ(values(z), values(enc.encode(std::vector<std::int32_t>{Vocab::kUnk})));
}

TEST(TextEncoderTest, PooledOutputIgnoresTokenOrder) {
    // No positions and mean pooling: a permutation of the tokens gives the same features.
    const ModelConfig c = encoder_config();
    auto store = encoder_store<double>(c, 8);
    TextEncoder<double> enc(c, store);
    const std::vector<std::int32_t> a = {4, 9, 2, 7}, b = {7, 2, 9, 4};
    EXPECT_LT(relative_error<double>(enc.encode(a).data(), enc.encode(b).data()), 1e-12);
}

TEST(TextEncoderTest, OnlyProjectorReceivesGradient) {
    const ModelConfig c = encoder_config();
    auto store = encoder_store<double>(c, 9);
    TextEncoder<double> enc(c, store);
    const std::vector<std::int32_t> ids = {3, 5, 8};
    std::mt19937_64 rng(9);
    auto probe = random_tensor<double>({1, c.backbone.hidden}, rng);
    store.zero_grad();
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(sum(mul(enc.encode(ids), probe)));
    }
    for (const auto& [name, e] : store.entries()) {
        if (name.rfind("text_encoder.", 0) != 0) continue;
        EXPECT_EQ(e.value.has_grad(), name.find(".proj.") != std::string::npos) << name;
    }
    Tensor<double> pw = store.get("text_encoder.proj.w");
    const auto fd = central_difference<double>(pw, [&] { return sum(mul(enc.encode(ids), probe)).item(); }, 1e-5);
    EXPECT_LT(relative_error<double>(pw.grad(), fd), 1e-6);
}

TEST(EmbedTextTokens, RowsAndTruncation) {
    BackboneConfig cfg{1, 1, 8, 2, 10, 128, 2, 0.0};
    ParameterStore<double> store;
    store.add_layout(backbone_layout(cfg), 1);
    Backbone<double> bb(cfg, store);
    const Vocab v = Vocab::build({"sinus rhythm"});
    const auto two = embed_text_tokens<double>(v.encode("sinus rhythm", 128), bb);
    EXPECT_EQ(two.shape(), (Shape{2, 8}));
    const auto unk = embed_text_tokens<double>(v.encode("bradycardia", 128), bb);
    for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_EQ(unk.at(0, c), bb.token_table().at(Vocab::kUnk, c) + bb.position_table().at(0, c));
    }
    std::vector<std::int32_t> ids(600);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::int32_t(2 + i % 3);
    const auto long_out = embed_text_tokens<double>(ids, bb);
    EXPECT_EQ(long_out.shape(), (Shape{128, 8}));
    EXPECT_EQ(long_out.at(127, 3), bb.token_table().at(std::size_t(ids[127]), 3) + bb.position_table().at(127, 3));
}
