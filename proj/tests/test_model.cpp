#include <gtest/gtest.h>

#include "hybridforge/model.hpp"
#include "support/recurrence.hpp"

using namespace hybridforge;

namespace {

TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
    SeededRng rng(seed);
    TokenBatch tb{batch, seq, {}};
    for (std::size_t i = 0; i < batch * seq; ++i) tb.ids.push_back(static_cast<std::int32_t>(rng.uniform_int(vocab)));
    return tb;
}

template <class T>
Model<T> hybrid_model(const ModelConfig& cfg, const std::string& layout, std::uint64_t seed) {
    auto m = model_init<T>(cfg, seed);
    SeededRng rng(seed + 1);
    const LinearVariant vs[] = {LinearVariant::GLA, LinearVariant::GatedDeltaNet, LinearVariant::UngatedLinear};
    for (std::size_t l = 0, n = 0; l < layout.size(); ++l) {
        if (layout[l] == 'L') m.layers[l].attn = hftest::random_block<T>(vs[n++ % 3], cfg, rng, true);
    }
    return m;
}

ModelConfig mid_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_head = 16;
    c.d_ff = 64;
    c.vocab_size = 64;
    c.max_seq = 128;
    return c;
}

// Independent shape walk over the documented block layout.
std::size_t expected_parameter_count(const ModelConfig& c) {
    std::size_t n = c.vocab_size * c.d_model;  // embedding
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        n += c.d_model;                        // attention norm
        n += 4 * c.d_model * c.d_model;        // Wq Wk Wv Wo
        n += c.d_model;                        // mlp norm
        n += 3 * c.d_model * c.d_ff;           // gate, up, down
    }
    n += c.d_model;                            // final norm
    n += c.d_model * c.vocab_size;             // head
    return n;
}

} // namespace

TEST(ModelInit, SameSeedIsBitIdentical) {
    auto a = model_init<float>(ModelConfig{}, 7);
    auto b = model_init<float>(ModelConfig{}, 7);
    auto c = model_init<float>(ModelConfig{}, 8);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i]->name, pb[i]->name);
        EXPECT_EQ(pa[i]->value, pb[i]->value);
        differs = differs || !(pa[i]->value == pc[i]->value);
    }
    EXPECT_TRUE(differs);
}

TEST(ModelInit, RejectsInconsistentConfig) {
    ModelConfig c;
    c.n_heads = 3;
    EXPECT_THROW(model_init<float>(c, 0), ConfigError);
    c = ModelConfig{};
    c.n_layers = 0;
    EXPECT_THROW(model_init<float>(c, 0), ConfigError);
    c = ModelConfig{};
    c.d_head = 16;
    EXPECT_THROW(model_init<float>(c, 0), ConfigError);
}

TEST(ModelInit, DeskParameterCountMatchesShapeWalk) {
    ModelConfig c;
    auto m = model_init<float>(c, 0);
    EXPECT_EQ(m.parameter_count(), expected_parameter_count(c));
    EXPECT_EQ(m.parameter_count(), 2115712u);
    EXPECT_EQ(m.spec().to_string(), "FFFFFFFF");
    EXPECT_EQ(m.layers[3].full().wq.name, "layers.3.attn.Wq");
}

TEST(ModelInit, OutputProjectionsUseDepthScaledStd) {
    auto m = model_init<double>(ModelConfig{}, 3);
    auto std_of = [](const Tensor<double>& t) {
        double s = 0;
        for (double v : t.storage()) s += v * v;
        return std::sqrt(s / double(t.numel()));
    };
    EXPECT_NEAR(std_of(m.layers[0].full().wq.value), 0.02, 0.001);
    EXPECT_NEAR(std_of(m.layers[0].full().wo.value), 0.02 / 4.0, 0.0003);
    EXPECT_NEAR(std_of(m.layers[0].w_down.value), 0.02 / 4.0, 0.0002);
}

TEST(Forward, OutputShape) {
    auto m = model_init<float>(ModelConfig{}, 1);
    auto logits = forward_full(m, random_tokens(2, 16, 64, 2));
    EXPECT_EQ(logits.shape(), (Shape{2, 16, 64}));
    EXPECT_TRUE(logits.all_finite());
}

TEST(Forward, OutOfRangeTokenIsInputError) {
    auto m = model_init<float>(mid_config(), 1);
    auto tb = random_tokens(1, 8, 64, 3);
    tb.ids[4] = 64;
    EXPECT_THROW(forward_full(m, tb), InputError);
    tb.ids[4] = -1;
    EXPECT_THROW(forward_full(m, tb), InputError);
    auto long_tb = random_tokens(1, 129, 64, 3);
    EXPECT_THROW(forward_full(m, long_tb), InputError);
}

class Layouts : public ::testing::TestWithParam<std::string> {};

TEST_P(Layouts, CausalUnderFutureEdits) {
    const auto cfg = mid_config();
    auto m = hybrid_model<double>(cfg, GetParam(), 4);
    auto tb = random_tokens(1, 24, cfg.vocab_size, 5);
    auto base = forward_full(m, tb);
    for (std::size_t j : {5u, 12u, 23u}) {
        auto edited = tb;
        edited.ids[j] = (edited.ids[j] + 17) % std::int32_t(cfg.vocab_size);
        auto out = forward_full(m, edited);
        for (std::size_t i = 0; i < j * cfg.vocab_size; ++i) ASSERT_EQ(out[i], base[i]) << "edit at " << j;
        bool changed = false;
        for (std::size_t i = j * cfg.vocab_size; i < out.numel(); ++i) changed = changed || out[i] != base[i];
        EXPECT_TRUE(changed);
    }
}

TEST_P(Layouts, BatchedEqualsPerSequence) {
    const auto cfg = mid_config();
    auto m = hybrid_model<float>(cfg, GetParam(), 6);
    auto tb = random_tokens(3, 20, cfg.vocab_size, 7);
    auto batched = forward_full(m, tb);
    for (std::size_t b = 0; b < 3; ++b) {
        TokenBatch one{1, 20, std::vector<std::int32_t>(tb.sequence(b).begin(), tb.sequence(b).end())};
        auto single = forward_full(m, one);
        for (std::size_t i = 0; i < single.numel(); ++i) ASSERT_EQ(single[i], batched[b * single.numel() + i]);
    }
}

TEST_P(Layouts, TapeForwardMatchesGradientFreeForward) {
    const auto cfg = mid_config();
    auto m = hybrid_model<float>(cfg, GetParam(), 8);
    auto tb = random_tokens(2, 12, cfg.vocab_size, 9);
    Tape<float> tape;
    Var logits = forward(tape, m, tb);
    auto ref = forward_full(m, tb);
    EXPECT_EQ(tape.value(logits).storage(), ref.storage());
}

TEST_P(Layouts, DecodeMatchesForwardDouble) {
    const auto cfg = mid_config();
    auto m = hybrid_model<double>(cfg, GetParam(), 10);
    auto tb = random_tokens(1, 64, cfg.vocab_size, 11);
    auto ref = forward_full(m, tb);
    KVCache<double> cache(m);
    for (std::size_t t = 0; t < 64; ++t) {
        auto logits = decode_step(m, cache, tb.ids[t]);
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) ASSERT_NEAR(logits[j], ref[t * cfg.vocab_size + j], 1e-10);
    }
    EXPECT_EQ(cache.length(), 64u);
}

TEST_P(Layouts, DecodeMatchesForwardFloat) {
    ModelConfig cfg;
    cfg.max_seq = 64;
    auto layout = GetParam() + GetParam();
    auto m = hybrid_model<float>(cfg, layout, 12);
    auto tb = random_tokens(1, 64, cfg.vocab_size, 13);
    auto ref = forward_full(m, tb);
    KVCache<float> cache(m);
    for (std::size_t t = 0; t < 64; ++t) {
        auto logits = decode_step(m, cache, tb.ids[t]);
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) ASSERT_NEAR(logits[j], ref[t * cfg.vocab_size + j], 1e-4);
    }
}

TEST_P(Layouts, ChunkedPrefillMatchesForward) {
    const auto cfg = mid_config();
    auto m = hybrid_model<double>(cfg, GetParam(), 14);
    auto tb = random_tokens(1, 40, cfg.vocab_size, 15);
    auto ref = forward_full(m, tb);
    KVCache<double> cache(m);
    std::size_t pos = 0;
    for (std::size_t chunk : {7u, 1u, 20u, 12u}) {
        auto logits = forward_cached(m, cache, std::span<const std::int32_t>(tb.ids.data() + pos, chunk));
        for (std::size_t i = 0; i < chunk; ++i)
            for (std::size_t j = 0; j < cfg.vocab_size; ++j)
                ASSERT_NEAR(logits.at(i, j), ref[(pos + i) * cfg.vocab_size + j], 1e-10);
        pos += chunk;
    }
}

TEST_P(Layouts, CacheGrowthLaw) {
    const auto cfg = mid_config();
    auto m = hybrid_model<float>(cfg, GetParam(), 16);
    KVCache<float> cache(m);
    auto tb = random_tokens(1, 64, cfg.vocab_size, 17);
    forward_cached(m, cache, std::span<const std::int32_t>(tb.ids));
    std::vector<std::size_t> state_sizes;
    for (const auto& l : cache.layers()) state_sizes.push_back(l.state ? l.state->bytes() : 0);
    for (const auto& l : cache.layers())
        for (const auto& k : l.keys) EXPECT_EQ(k.size(), 64u * cfg.d_head);
    decode_step(m, cache, 3);
    for (std::size_t li = 0; li < cache.layers().size(); ++li) {
        const auto& l = cache.layers()[li];
        for (const auto& k : l.keys) EXPECT_EQ(k.size(), 65u * cfg.d_head);
        for (const auto& v : l.values) EXPECT_EQ(v.size(), 65u * cfg.d_head);
        EXPECT_EQ(l.state ? l.state->bytes() : 0, state_sizes[li]);
    }
}

INSTANTIATE_TEST_SUITE_P(Specs, Layouts, ::testing::Values("FFFF", "FLFL", "LLLL", "LFLF"));

TEST(Decode, EmptyCacheSingleToken) {
    auto m = model_init<double>(mid_config(), 18);
    KVCache<double> cache(m);
    auto logits = decode_step(m, cache, 9);
    auto ref = forward_full(m, TokenBatch{1, 1, {9}});
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(logits[j], ref[j], 1e-12);
}

TEST(Decode, KindMismatchIsContractError) {
    const auto cfg = mid_config();
    auto full = model_init<float>(cfg, 19);
    auto hybrid = hybrid_model<float>(cfg, "FLFF", 19);
    KVCache<float> cache(full);
    EXPECT_THROW(decode_step(hybrid, cache, 1), ContractError);
}

TEST(Decode, PastMaxSeqIsInputError) {
    auto cfg = mid_config();
    cfg.max_seq = 4;
    auto m = model_init<float>(cfg, 20);
    KVCache<float> cache(m);
    for (int i = 0; i < 4; ++i) decode_step(m, cache, 1);
    EXPECT_THROW(decode_step(m, cache, 1), InputError);
}

TEST(ForwardHidden, SplitRunMatchesFullRun) {
    const auto cfg = mid_config();
    auto m = hybrid_model<float>(cfg, "FLFL", 21);
    auto tb = random_tokens(2, 10, cfg.vocab_size, 22);
    auto mid = forward_hidden<float>(m, tb, 0, 2);
    auto end = forward_hidden<float>(m, tb, 2, 4, &mid);
    auto logits = forward_head(m, end);
    auto ref = forward_full(m, tb);
    EXPECT_EQ(logits.storage(), ref.storage());
    EXPECT_THROW(forward_hidden<float>(m, tb, 2, 4), ContractError);
}

TEST(ActivationTap, CapturesNormedInputAndSublayerOutput) {
    const auto cfg = mid_config();
    auto m = model_init<double>(cfg, 23);
    auto tb = random_tokens(1, 16, cfg.vocab_size, 24);
    const std::size_t layers[] = {0, 2};
    auto tap = ActivationTap<double>::for_layers(cfg.n_layers, layers);
    forward_full(m, tb, &tap);
    EXPECT_EQ(tap.inputs[0].shape(), (Shape{16, cfg.d_model}));
    EXPECT_EQ(tap.outputs[2].shape(), (Shape{16, cfg.d_model}));
    EXPECT_TRUE(tap.inputs[1].empty());
    // Layer 0 input is RMSNorm(embedding) with unit scale.
    for (std::size_t t = 0; t < 16; ++t) {
        const double* e = m.embed.value.row(static_cast<std::size_t>(tb.ids[t]));
        double ms = 0;
        for (std::size_t j = 0; j < cfg.d_model; ++j) ms += e[j] * e[j];
        const double inv = 1.0 / std::sqrt(ms / double(cfg.d_model) + 1e-6);
        for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_NEAR(tap.inputs[0].at(t, j), e[j] * inv, 1e-12);
    }
    const std::size_t bad[] = {4};
    EXPECT_THROW(ActivationTap<double>::for_layers(cfg.n_layers, bad), IndexError);
}
