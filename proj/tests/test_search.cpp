#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unistd.h>

#include "hybridforge/search.hpp"
#include "json.hpp"
#include "support/rigged.hpp"

using namespace hybridforge;
using hftest::additive_evaluator;
using hftest::random_gains;

namespace {

ModelConfig small_config(std::size_t layers = 4) {
    ModelConfig c;
    c.n_layers = layers;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_head = 8;
    c.d_ff = 32;
    c.vocab_size = 64;
    c.max_seq = 64;
    return c;
}

template <class T>
LinearBlockSet<T> random_blocks(const Model<T>& m, LinearVariant v) {
    LinearBlockSet<T> b(m.layers.size());
    for (std::size_t l = 0; l < b.size(); ++l) {
        b[l] = init_linear_block<T>(v, m.config, 0.05, SeededRng(40 + l), "layers." + std::to_string(l) + ".attn");
    }
    return b;
}

template <class T>
std::uint64_t param_hash(const Parameter<T>& p) {
    return content_hash(p.value);
}

std::size_t binom(std::size_t n, std::size_t k) {
    std::size_t r = 1;
    for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

void check_trace_invariants(const SearchResult& r, std::size_t L, double p_min) {
    double running = r.baseline;
    std::size_t accepted = 0;
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        const auto& it = r.trace[i];
        EXPECT_EQ(it.iter, i + 1);
        EXPECT_EQ(it.candidates.size(), L - i);
        EXPECT_EQ(it.accepted, it.p_star >= p_min);
        for (const auto& [l, s] : it.candidates) running = std::max(running, s);
        for (std::size_t j = 0; j < i; ++j) EXPECT_NE(r.trace[j].chosen, it.chosen);
        if (it.accepted) ++accepted;
        // Only the final iteration can be rejected.
        if (!it.accepted) EXPECT_EQ(i + 1, r.trace.size());
    }
    EXPECT_EQ(r.p_best, running);
    EXPECT_EQ(r.opt_spec.replaced(), accepted);
    EXPECT_EQ(r.accepted(), accepted);
    std::size_t expected = 1;
    for (std::size_t m = 0; m < accepted; ++m) expected += L - m;
    if (!r.trace.empty() && !r.trace.back().accepted) expected += L - accepted;
    EXPECT_EQ(r.evaluations, expected);
    if (r.baseline >= p_min) EXPECT_GE(r.p_opt, p_min);
}

} // namespace

TEST(Evaluator, MemoisesAndCountsMisses) {
    int calls = 0;
    Evaluator ev([&](const HybridSpec& s) { return ++calls, double(s.replaced()); }, 1);
    const auto a = HybridSpec::parse("FFLF", LinearVariant::GLA);
    EXPECT_EQ(ev.score(a), 1.0);
    EXPECT_EQ(ev.score(a), 1.0);
    EXPECT_EQ(ev.misses(), 1u);
    EXPECT_EQ(ev.hits(), 1u);
    ev.score(HybridSpec::parse("FFLF", LinearVariant::GatedDeltaNet));
    ev.score(HybridSpec::parse("LFLF", LinearVariant::GLA));
    EXPECT_EQ(ev.misses(), 3u);
    EXPECT_EQ(calls, 3);
}

TEST(Evaluator, ConcurrentRequestsShareOneComputation) {
    std::atomic<int> calls{0};
    Evaluator ev(
        [&](const HybridSpec&) {
            ++calls;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
            return 0.25;
        },
        1);
    const auto s = HybridSpec::parse("LL", LinearVariant::GLA);
    std::vector<std::thread> pool;
    std::vector<double> got(8);
    for (std::size_t i = 0; i < 8; ++i) pool.emplace_back([&, i] { got[i] = ev.score(s); });
    for (auto& t : pool) t.join();
    EXPECT_EQ(calls.load(), 1);
    EXPECT_EQ(ev.misses(), 1u);
    for (double g : got) EXPECT_EQ(g, 0.25);
}

TEST(Evaluator, FailedScoreIsNotCached) {
    int calls = 0;
    Evaluator ev([&](const HybridSpec&) -> double {
        if (++calls == 1) throw InputError("transient");
        return 1.0;
    }, 1);
    const auto s = HybridSpec::all_full(2);
    EXPECT_THROW(ev.score(s), InputError);
    EXPECT_EQ(ev.score(s), 1.0);
}

TEST(Evaluator, PersistentMemoResumesByFingerprint) {
    const auto path = std::filesystem::temp_directory_path() / ("hf_memo_" + std::to_string(::getpid()) + ".jsonl");
    std::filesystem::remove(path);
    const auto g = random_gains(4, 3);
    {
        auto ev = additive_evaluator(g);
        ev.attach_store(path);
        greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, kNegInf);
        EXPECT_EQ(ev.misses(), 11u);
    }
    {
        auto ev = additive_evaluator(g);
        ev.attach_store(path);
        const auto r = greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, kNegInf);
        EXPECT_EQ(ev.misses(), 0u);
        EXPECT_EQ(r.evaluations, 11u);
        EXPECT_EQ(r.opt_spec.replaced(), 4u);
    }
    {
        Evaluator other([](const HybridSpec&) { return 0.0; }, 0xbeef);
        other.attach_store(path);
        other.score(HybridSpec::all_full(4));
        EXPECT_EQ(other.misses(), 1u);
    }
    // A torn final line is ignored.
    {
        std::ofstream f(path, std::ios::app);
        f << "{\"fingerprint\":\"add\",\"spec\":";
    }
    auto ev = additive_evaluator(g);
    EXPECT_NO_THROW(ev.attach_store(path));
    std::filesystem::remove(path);
}

TEST(Assemble, AllFullIsBitIdenticalToBase) {
    const auto m = model_init<float>(small_config(), 1);
    const auto blocks = random_blocks(m, LinearVariant::GLA);
    const auto a = assemble_hybrid(m, blocks, HybridSpec::all_full(4));
    SeededRng rng(5);
    for (int i = 0; i < 20; ++i) {
        TokenBatch tb{2, 12, {}};
        for (int j = 0; j < 24; ++j) tb.ids.push_back(std::int32_t(rng.uniform_int(64)));
        EXPECT_EQ(forward_full(a, tb), forward_full(m, tb));
    }
}

TEST(Assemble, OnlyReplacedLayerChanges) {
    const auto m = model_init<float>(small_config(), 1);
    const auto blocks = random_blocks(m, LinearVariant::GatedDeltaNet);
    const auto spec = HybridSpec::parse("FFFL", LinearVariant::GatedDeltaNet);
    const auto h = assemble_hybrid(m, blocks, spec);
    EXPECT_EQ(h.spec(), spec);
    auto pm = m.parameters();
    std::map<std::string, std::uint64_t> base;
    for (auto* p : pm) base[p->name] = param_hash(*p);
    for (auto* p : h.parameters()) {
        const bool in_layer3_attn = p->name.rfind("layers.3.attn.", 0) == 0;
        if (!in_layer3_attn) {
            ASSERT_TRUE(base.count(p->name)) << p->name;
            EXPECT_EQ(base[p->name], param_hash(*p)) << p->name;
        }
    }
    EXPECT_EQ(h.layers[3].linear().gate_w.value, blocks[3]->gate_w.value);
}

TEST(Assemble, ReassemblyIsIdempotent) {
    const auto m = model_init<float>(small_config(), 1);
    const auto blocks = random_blocks(m, LinearVariant::GLA);
    const auto spec = HybridSpec::parse("LFLF", LinearVariant::GLA);
    const auto once = assemble_hybrid(m, blocks, spec);
    const auto twice = assemble_hybrid(once, blocks, spec);
    auto a = once.parameters();
    auto b = twice.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
    EXPECT_THROW(assemble_hybrid(once, blocks, HybridSpec::all_full(4)), AssemblyError);
}

TEST(Assemble, MissingOrMismatchedBlocksNameTheLayer) {
    const auto m = model_init<float>(small_config(), 1);
    auto blocks = random_blocks(m, LinearVariant::GLA);
    blocks[2].reset();
    try {
        assemble_hybrid(m, blocks, HybridSpec::parse("FFLF", LinearVariant::GLA));
        FAIL();
    } catch (const AssemblyError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos);
    }
    EXPECT_THROW(assemble_hybrid(m, blocks, HybridSpec::parse("LFFF", LinearVariant::GatedDeltaNet)), AssemblyError);
    EXPECT_THROW(assemble_hybrid(m, blocks, HybridSpec::all_full(3)), AssemblyError);
    EXPECT_THROW(SearchSpace::from_blocks(blocks), AssemblyError);
}

TEST(ModelEvaluator, MatchesDirectEvaluation) {
    const auto m = model_init<float>(small_config(), 2);
    const auto blocks = random_blocks(m, LinearVariant::UngatedLinear);
    TaskSpec ts;
    ts.kind = TaskKind::Mqar;
    ts.n_pairs = 4;
    ts.n_train = 10;
    ts.n_val = 120;
    const auto data = generate_task(ts);
    auto ev = make_model_evaluator(m, blocks, data.val, ts.fingerprint());
    EXPECT_EQ(ev.score(HybridSpec::all_full(4)), evaluate(m, data.val));
    for (std::string s : {"FLFF", "FFFL", "LLLL", "FLLF"}) {
        const auto spec = HybridSpec::parse(s, LinearVariant::UngatedLinear);
        EXPECT_EQ(ev.score(spec), evaluate(assemble_hybrid(m, blocks, spec), data.val)) << s;
    }
    EXPECT_EQ(ev.misses(), 5u);
}

TEST(Greedy, NegativeInfinityReplacesEverythingIn37Evaluations) {
    auto ev = additive_evaluator(random_gains(8, 1));
    const auto r = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), ev, kNegInf);
    EXPECT_EQ(r.opt_spec.to_string(), "LLLLLLLL");
    EXPECT_EQ(r.evaluations, 37u);
    EXPECT_EQ(ev.misses(), 37u);
    EXPECT_EQ(r.trace.size(), 8u);
    check_trace_invariants(r, 8, kNegInf);
}

TEST(Greedy, PositiveInfinityReplacesNothing) {
    const auto g = random_gains(8, 2);
    auto ev = additive_evaluator(g);
    const auto r = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), ev, kPosInf);
    EXPECT_EQ(r.opt_spec, HybridSpec::all_full(8));
    EXPECT_EQ(r.p_opt, r.baseline);
    ASSERT_EQ(r.trace.size(), 1u);
    EXPECT_FALSE(r.trace[0].accepted);
    EXPECT_EQ(r.evaluations, 9u);
    EXPECT_TRUE(r.below_threshold);
    check_trace_invariants(r, 8, kPosInf);
}

TEST(Greedy, ThresholdAboveAllCandidatesHaltsImmediately) {
    auto ev = additive_evaluator({-0.1, -0.2, -0.05, -0.3}, 0.9);
    const auto r = greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, 0.86);
    EXPECT_EQ(r.opt_spec, HybridSpec::all_full(4));
    EXPECT_DOUBLE_EQ(r.p_opt, 0.9);
    EXPECT_FALSE(r.below_threshold);
    check_trace_invariants(r, 4, 0.86);
}

TEST(Greedy, AdditiveGainsAreTakenInDescendingOrder) {
    const std::vector<double> g{0.01, -0.02, 0.05, 0.0, -0.01, 0.03, -0.04, 0.02};
    auto ev = additive_evaluator(g);
    const auto r = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), ev, kNegInf);
    std::vector<std::size_t> order;
    for (const auto& it : r.trace) order.push_back(it.chosen);
    EXPECT_EQ(order, (std::vector<std::size_t>{2, 5, 7, 0, 3, 4, 1, 6}));
    // Best spec keeps every non-negative gain; the zero gain is taken because M_best uses >=.
    EXPECT_EQ(r.best_spec.to_string(), "LFLLFLFL");
    auto ex_ev = additive_evaluator(g);
    EXPECT_EQ(exhaustive_search(SearchSpace::uniform(8, LinearVariant::GLA), ex_ev).score, r.p_best);
}

TEST(Greedy, TiesGoToTheLowestLayer) {
    auto ev = additive_evaluator({0.1, 0.2, 0.2, 0.1});
    const auto r = greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, kNegInf);
    EXPECT_EQ(r.trace[0].chosen, 1u);
    EXPECT_EQ(r.trace[1].chosen, 2u);
    EXPECT_EQ(r.trace[2].chosen, 0u);
}

TEST(Greedy, ThresholdRunsSatisfyInvariants) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto g = random_gains(8, 100 + seed);
        for (double p_min : {0.3, 0.45, 0.5, 0.55}) {
            auto ev = additive_evaluator(g);
            const auto r = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), ev, p_min);
            check_trace_invariants(r, 8, p_min);
        }
    }
}

TEST(Greedy, ParallelCandidatesGiveTheSameResult) {
    const auto g = random_gains(8, 9);
    auto a = additive_evaluator(g);
    auto b = additive_evaluator(g);
    const auto ra = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), a, 0.4, 1);
    const auto rb = greedy_replace(SearchSpace::uniform(8, LinearVariant::GLA), b, 0.4, 4);
    EXPECT_EQ(trace_jsonl(ra.trace), trace_jsonl(rb.trace));
    EXPECT_EQ(ra.evaluations, rb.evaluations);
}

TEST(Greedy, EvaluatorFailureKeepsNothingPartial) {
    int calls = 0;
    Evaluator ev([&](const HybridSpec&) -> double {
        if (++calls > 5) throw InputError("evaluation failed");
        return 0.5;
    }, 1);
    EXPECT_THROW(greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, kNegInf), InputError);
}

TEST(FixedBudget, EndpointsAndPrefixConsistency) {
    const auto g = random_gains(8, 21);
    const auto space = SearchSpace::uniform(8, LinearVariant::GLA);
    auto full_ev = additive_evaluator(g);
    const auto full = greedy_replace(space, full_ev, kNegInf);
    for (std::size_t k = 0; k <= 8; ++k) {
        auto ev = additive_evaluator(g);
        const auto r = greedy_fixed_budget(space, ev, k);
        EXPECT_EQ(r.opt_spec.replaced(), k);
        ASSERT_EQ(r.trace.size(), k);
        for (std::size_t i = 0; i < k; ++i) {
            EXPECT_EQ(r.trace[i].chosen, full.trace[i].chosen);
            EXPECT_EQ(r.trace[i].candidates, full.trace[i].candidates);
        }
    }
    auto ev = additive_evaluator(g);
    EXPECT_EQ(greedy_fixed_budget(space, ev, 0).opt_spec, HybridSpec::all_full(8));
    EXPECT_EQ(greedy_fixed_budget(space, ev, 8).opt_spec.to_string(), "LLLLLLLL");
    EXPECT_THROW(greedy_fixed_budget(space, ev, 9), SpecError);
}

TEST(Importance, UsesExactlyLEvaluationsAndAgreesAtBudgetOne) {
    const auto g = random_gains(8, 5);
    const auto space = SearchSpace::uniform(8, LinearVariant::GLA);
    auto ev = additive_evaluator(g);
    const auto imp = strategy_local_importance(space, ev);
    EXPECT_EQ(ev.misses(), 8u);
    auto sorted = imp.ordering;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
    ASSERT_EQ(imp.specs.size(), 9u);
    for (std::size_t k = 0; k <= 8; ++k) EXPECT_EQ(imp.specs[k].replaced(), k);
    auto gev = additive_evaluator(g);
    EXPECT_EQ(imp.specs[1], greedy_fixed_budget(space, gev, 1).opt_spec);
}

TEST(Uniform, Examples) {
    EXPECT_EQ(strategy_uniform(1, 8).to_string(), "FFFFLFFF");
    EXPECT_EQ(strategy_uniform(8, 8).to_string(), "LLLLLLLL");
    EXPECT_EQ(strategy_uniform(0, 8).to_string(), "FFFFFFFF");
    EXPECT_EQ(strategy_uniform(2, 8).to_string(), "FFLFFFLF");
    for (std::size_t L = 1; L <= 16; ++L) {
        for (std::size_t k = 0; k <= L; ++k) EXPECT_EQ(strategy_uniform(k, L).replaced(), k) << L << " " << k;
    }
    EXPECT_THROW(strategy_uniform(9, 8), SpecError);
}

TEST(Random, DeterministicAndComplete) {
    EXPECT_EQ(strategy_random(3, 8, 11), strategy_random(3, 8, 11));
    for (std::uint64_t s = 0; s < 20; ++s) {
        EXPECT_EQ(strategy_random(8, 8, s).to_string(), "LLLLLLLL");
        EXPECT_EQ(strategy_random(3, 8, s).replaced(), 3u);
    }
}

TEST(Random, LayerFrequencyWithinBinomialBounds) {
    const std::size_t L = 8, k = 3, n = 10000;
    std::vector<std::size_t> hits(L);
    for (std::uint64_t s = 0; s < n; ++s) {
        const auto spec = strategy_random(k, L, s);
        for (std::size_t l = 0; l < L; ++l) hits[l] += spec.kinds[l].is_linear();
    }
    const double p = double(k) / double(L);
    const double sigma = std::sqrt(double(n) * p * (1 - p));
    for (std::size_t l = 0; l < L; ++l) EXPECT_LE(std::abs(double(hits[l]) - double(n) * p), 3 * sigma) << l;
}

TEST(Exhaustive, CountsAndLimits) {
    const auto space = SearchSpace::uniform(6, LinearVariant::GLA);
    for (std::size_t k = 0; k <= 6; ++k) {
        auto ev = additive_evaluator(random_gains(6, k));
        const auto r = exhaustive_search(space, ev, k);
        EXPECT_EQ(r.evaluated, binom(6, k));
        EXPECT_EQ(ev.misses(), binom(6, k));
        EXPECT_EQ(r.spec.replaced(), k);
    }
    auto ev = additive_evaluator(random_gains(6, 1));
    EXPECT_EQ(exhaustive_search(space, ev, 0).spec, HybridSpec::all_full(6));
    EXPECT_EQ(exhaustive_search(space, ev).evaluated, 64u);
    auto big = additive_evaluator(random_gains(13, 1));
    EXPECT_THROW(exhaustive_search(SearchSpace::uniform(13, LinearVariant::GLA), big), SpecError);
}

TEST(Exhaustive, TiesPreferLexicographicallySmallestSpec) {
    Evaluator flat([](const HybridSpec&) { return 1.0; }, 1);
    EXPECT_EQ(exhaustive_search(SearchSpace::uniform(4, LinearVariant::GLA), flat, 2).spec.to_string(), "FFLL");
}

TEST(Exhaustive, MatchesGreedyOnAdditiveObjectivesAtEveryBudget) {
    for (std::size_t L : {4, 8}) {
        const auto space = SearchSpace::uniform(L, LinearVariant::GLA);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto g = random_gains(L, 1000 * L + seed);
            for (std::size_t k = 0; k <= L; ++k) {
                auto a = additive_evaluator(g);
                auto b = additive_evaluator(g);
                EXPECT_EQ(greedy_fixed_budget(space, a, k).opt_spec, exhaustive_search(space, b, k).spec)
                    << "L=" << L << " seed=" << seed << " k=" << k;
            }
        }
    }
}

TEST(Serialisation, TraceLinesHaveTheDocumentedKeys) {
    auto ev = additive_evaluator(random_gains(4, 3));
    const auto r = greedy_replace(SearchSpace::uniform(4, LinearVariant::GLA), ev, 0.45);
    std::istringstream lines(trace_jsonl(r.trace));
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.size(), 5u);
        for (const char* key : {"iter", "candidates", "chosen", "p_star", "accepted"}) EXPECT_TRUE(j.contains(key));
        EXPECT_EQ(j["candidates"][0].size(), 2u);
        ++n;
    }
    EXPECT_EQ(n, r.trace.size());
}

TEST(Serialisation, ResultRoundTrips) {
    const auto space = SearchSpace::uniform(8, LinearVariant::GatedDeltaNet);
    auto ev = additive_evaluator(random_gains(8, 4));
    const auto r = greedy_replace(space, ev, 0.5);
    const auto text = result_json(r);
    const auto j = nlohmann::json::parse(text);
    EXPECT_EQ(j["m_opt"].get<std::string>(), r.opt_spec.to_string());
    const auto back = parse_result_json(text, space);
    EXPECT_EQ(back.best_spec, r.best_spec);
    EXPECT_EQ(back.opt_spec, r.opt_spec);
    EXPECT_EQ(back.p_best, r.p_best);
    EXPECT_EQ(back.p_opt, r.p_opt);
    EXPECT_EQ(trace_jsonl(back.trace), trace_jsonl(r.trace));
    EXPECT_EQ(result_json(back), text);
    EXPECT_THROW(parse_result_json("{}", space), FormatError);
}
