#include <gtest/gtest.h>

#include <limits>

#include "hybridforge/kernels.hpp"
#include "support/recurrence.hpp"

using namespace hybridforge;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_head = 16;
    c.d_ff = 64;
    return c;
}

Tensor<double> random_input(std::size_t seq, std::size_t d, SeededRng& rng) {
    Tensor<double> x({seq, d});
    for (auto& v : x.storage()) v = rng.normal();
    return x;
}

class PerVariant : public ::testing::TestWithParam<LinearVariant> {};

} // namespace

TEST(UngatedLinear, SingleTokenNormaliserCancels) {
    SeededRng rng(1);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(LinearVariant::UngatedLinear, cfg, rng);
    auto x = random_input(1, cfg.d_model, rng);
    auto st = RecurrentState<double>::zeros(LinearVariant::UngatedLinear, cfg.n_heads, cfg.d_head);
    auto o = linear_forward_recurrent(w, x, st);
    auto expected = kernels::matmul(kernels::matmul(x, w.wv.value), w.wo.value);
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_NEAR(o[j], expected[j], 1e-12);
}

TEST(GatedDeltaNet, ZeroWriteStrengthFreezesState) {
    SeededRng rng(2);
    const std::size_t H = 2, D = 4, d = H * D;
    auto st = RecurrentState<double>::zeros(LinearVariant::GatedDeltaNet, H, D);
    for (auto& v : st.s) v = rng.normal();
    const auto s0 = st.s;
    std::vector<double> alpha(H, 1.0), beta(H, 0.0), out(d);
    for (int t = 0; t < 10; ++t) {
        std::vector<double> q(d), k(d), v(d);
        for (std::size_t j = 0; j < d; ++j) q[j] = rng.normal(), k[j] = rng.normal(), v[j] = rng.normal();
        scan_step(st, q.data(), k.data(), v.data(), alpha.data(), beta.data(), out.data());
        EXPECT_EQ(st.s, s0);
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t j = 0; j < D; ++j) {
                double ref = 0;
                for (std::size_t i = 0; i < D; ++i) ref += q[h * D + i] * s0[h * D * D + i * D + j];
                EXPECT_NEAR(out[h * D + j], ref, 1e-12);
            }
    }
}

TEST(GatedLinearAttention, UnitDecayIsPlainOuterProductSum) {
    SeededRng rng(3);
    const std::size_t H = 2, D = 4, d = H * D, T = 12;
    auto st = RecurrentState<double>::zeros(LinearVariant::GLA, H, D);
    std::vector<double> alpha(d, 1.0), out(d);
    std::vector<std::vector<double>> ks, vs;
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> q(d), k(d), v(d);
        for (std::size_t j = 0; j < d; ++j) q[j] = rng.normal(), k[j] = rng.normal(), v[j] = rng.normal();
        ks.push_back(k);
        vs.push_back(v);
        scan_step<double>(st, q.data(), k.data(), v.data(), alpha.data(), nullptr, out.data());
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t j = 0; j < D; ++j) {
                double ref = 0;
                for (std::size_t s = 0; s <= t; ++s) {
                    double qk = 0;
                    for (std::size_t i = 0; i < D; ++i) qk += q[h * D + i] * ks[s][h * D + i];
                    ref += qk * vs[s][h * D + j];
                }
                EXPECT_NEAR(out[h * D + j], ref, 1e-10);
            }
    }
}

TEST_P(PerVariant, RecurrentReferenceFoldAgreeOver50Seeds) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const std::size_t seq = 1 + seed % 64;
        auto e = hftest::check_equivalence<double>(GetParam(), seed, seq);
        EXPECT_LE(e.recurrent_vs_reference, 1e-10) << "seed " << seed;
        EXPECT_EQ(e.fold_vs_recurrent, 0.0) << "seed " << seed;
    }
}

TEST_P(PerVariant, SequenceOf32MatchesReference) {
    auto e = hftest::check_equivalence<double>(GetParam(), 99, 32, 16, 2);
    EXPECT_LE(e.recurrent_vs_reference, 1e-10);
}

TEST_P(PerVariant, SinglePrecisionAtModelScale) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto e = hftest::check_equivalence<float>(GetParam(), seed, 64, 32, 4, true);
        EXPECT_LE(e.recurrent_vs_reference, 1e-4);
        EXPECT_EQ(e.fold_vs_recurrent, 0.0);
    }
}

// Large weights push outputs into the hundreds, where float spacing alone
// exceeds an absolute bound; compare relative to the output magnitude.
TEST_P(PerVariant, SinglePrecisionLargeWeightsRelative) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto e = hftest::check_equivalence<float>(GetParam(), seed, 48);
        EXPECT_LE(e.recurrent_vs_reference, 2e-5 * std::max(1.0, e.max_output));
        EXPECT_EQ(e.fold_vs_recurrent, 0.0);
    }
}

TEST_P(PerVariant, ZeroInputGivesZeroOutput) {
    SeededRng rng(4);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(GetParam(), cfg, rng);
    Tensor<double> x({9, cfg.d_model});
    auto st = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    for (double v : linear_forward_recurrent(w, x, st).storage()) EXPECT_EQ(v, 0.0);
    for (double v : linear_forward_reference(w, x).storage()) EXPECT_EQ(v, 0.0);
}

TEST_P(PerVariant, FirstStepMatchesReferenceRow) {
    SeededRng rng(5);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(GetParam(), cfg, rng);
    auto x = random_input(6, cfg.d_model, rng);
    auto ref = linear_forward_reference(w, x);
    auto st = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    auto o = linear_step(w, st, std::span<const double>(x.row(0), cfg.d_model));
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_NEAR(o[j], ref.at(0, j), 1e-12);
}

TEST_P(PerVariant, OutputIsCausal) {
    SeededRng rng(6);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(GetParam(), cfg, rng);
    auto x = random_input(16, cfg.d_model, rng);
    auto s1 = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    auto a = linear_forward_recurrent(w, x, s1);
    for (std::size_t t = 8; t < 16; ++t)
        for (std::size_t j = 0; j < cfg.d_model; ++j) x.at(t, j) = rng.normal();
    auto s2 = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    auto b = linear_forward_recurrent(w, x, s2);
    for (std::size_t t = 0; t < 8; ++t)
        for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(a.at(t, j), b.at(t, j));
}

TEST_P(PerVariant, StateSizeIndependentOfTokens) {
    SeededRng rng(7);
    ModelConfig cfg;
    auto w = hftest::random_block<float>(GetParam(), cfg, rng);
    auto st = RecurrentState<float>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    std::vector<float> x(cfg.d_model);
    std::size_t after10 = 0;
    for (int t = 0; t < 10000; ++t) {
        for (auto& v : x) v = static_cast<float>(rng.normal());
        linear_step(w, st, std::span<const float>(x));
        if (t == 9) after10 = st.bytes();
    }
    EXPECT_EQ(st.bytes(), after10);
    EXPECT_EQ(st.bytes(), state_bytes(GetParam(), cfg, 4));
    EXPECT_TRUE(st.all_finite());
}

TEST_P(PerVariant, StateMismatchIsContractError) {
    SeededRng rng(8);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(GetParam(), cfg, rng);
    auto wrong = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head / 2);
    std::vector<double> x(cfg.d_model, 0.5);
    EXPECT_THROW(linear_step(w, wrong, std::span<const double>(x)), ContractError);
}

TEST_P(PerVariant, NonFiniteStateReportsStep) {
    SeededRng rng(9);
    const auto cfg = small_config();
    auto w = hftest::random_block<double>(GetParam(), cfg, rng);
    auto x = random_input(10, cfg.d_model, rng);
    for (std::size_t j = 0; j < cfg.d_model; ++j) x.at(6, j) = std::numeric_limits<double>::infinity();
    auto st = RecurrentState<double>::zeros(GetParam(), cfg.n_heads, cfg.d_head);
    try {
        linear_forward_recurrent(w, x, st);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_EQ(e.step(), 6u);
    }
}

INSTANTIATE_TEST_SUITE_P(Variants, PerVariant,
                         ::testing::Values(LinearVariant::UngatedLinear, LinearVariant::GLA,
                                           LinearVariant::GatedDeltaNet),
                         [](const auto& info) { return std::string(variant_tag(info.param)); });

TEST(StateBytes, MatchesFormula) {
    ModelConfig cfg;  // heads 4, d_head 32
    EXPECT_EQ(state_bytes(LinearVariant::GLA, cfg, 4), 16384u);
    EXPECT_EQ(state_bytes(LinearVariant::GatedDeltaNet, cfg, 4), 16384u);
    EXPECT_EQ(state_bytes(LinearVariant::UngatedLinear, cfg, 4), 16384u + 512u);
    EXPECT_EQ(state_bytes(LinearVariant::GLA, cfg, 8), 32768u);
}

TEST(VariantTags, RoundTrip) {
    for (auto v : all_variants()) EXPECT_EQ(parse_variant(variant_tag(v)), v);
    EXPECT_EQ(variant_tag(LinearVariant::UngatedLinear), "ungated");
    EXPECT_EQ(variant_tag(LinearVariant::GLA), "gla");
    EXPECT_EQ(variant_tag(LinearVariant::GatedDeltaNet), "gdn");
    EXPECT_THROW(parse_variant("jet"), Error);
}
