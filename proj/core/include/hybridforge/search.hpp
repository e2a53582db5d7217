#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hybridforge/checkpoint.hpp"
#include "hybridforge/model.hpp"
#include "hybridforge/tasks.hpp"

namespace hybridforge {

// Memoised task metric P(spec; T). Thread-safe: concurrent requests for the
// same spec share one computation, so the miss counter equals the number of
// distinct specs actually scored. Optionally backed by a JSONL file keyed by
// (spec, task fingerprint) so interrupted searches resume without rescoring.
class Evaluator {
public:
    using ScoreFn = std::function<double(const HybridSpec&)>;

    Evaluator(ScoreFn fn, std::uint64_t task_fingerprint);

    double score(const HybridSpec& spec);
    double operator()(const HybridSpec& spec) { return score(spec); }

    std::size_t misses() const noexcept { return misses_.load(); }
    std::size_t hits() const noexcept { return hits_.load(); }
    // Distinct specs served so far, whether computed or restored from the
    // store; a resumed search reports the same count as a fresh one.
    std::size_t distinct() const noexcept { return misses_.load() + restored_.load(); }
    std::uint64_t task_fingerprint() const noexcept { return fingerprint_; }

    // Loads entries with this evaluator's fingerprint from `path` (if it
    // exists) and appends every later miss to it.
    void attach_store(const std::filesystem::path& path);

private:
    ScoreFn fn_;
    std::uint64_t fingerprint_;
    std::mutex mu_;
    std::unordered_map<std::string, std::shared_future<double>> memo_;
    std::optional<std::filesystem::path> store_;
    std::atomic<std::size_t> misses_{0};
    std::atomic<std::size_t> hits_{0};
    std::atomic<std::size_t> restored_{0};
    std::unordered_set<std::string> restored_keys_;  // loaded but not yet requested
};

// Copy of `full_model` with each Linear position of `spec` carrying the
// distilled block. Full positions keep the base weights bit-identically.
// Throws AssemblyError naming the layer when a block is missing or of the
// wrong variant, or when a Full position has no full-attention weights.
template <class T>
Model<T> assemble_hybrid(const Model<T>& full_model, const LinearBlockSet<T>& blocks, const HybridSpec& spec);

// Accuracy of the assembled hybrid on `split`. Hidden states of the base
// model are cached per layer, so a spec is only run from its first Linear
// layer onwards; scores are bit-identical to evaluate(assemble_hybrid(...)).
Evaluator make_model_evaluator(const Model<float>& full_model, const LinearBlockSet<float>& blocks, const Split& split,
                               std::uint64_t task_fingerprint, Metric metric = Metric::Accuracy);

// Layers that may be replaced and the variant each one uses.
struct SearchSpace {
    std::vector<LinearVariant> variants;  // one per layer

    std::size_t n_layers() const noexcept { return variants.size(); }
    static SearchSpace uniform(std::size_t n_layers, LinearVariant v) {
        return SearchSpace{std::vector<LinearVariant>(n_layers, v)};
    }
    // Every layer must have a block; throws AssemblyError otherwise.
    template <class T>
    static SearchSpace from_blocks(const LinearBlockSet<T>& blocks);
};

struct SearchIteration {
    std::size_t iter = 0;  // 1-based
    std::vector<std::pair<std::size_t, double>> candidates;
    std::size_t chosen = 0;
    double p_star = 0;
    bool accepted = false;
};

struct SearchResult {
    HybridSpec best_spec;
    double p_best = 0;
    HybridSpec opt_spec;
    double p_opt = 0;
    double baseline = 0;
    std::vector<SearchIteration> trace;
    std::size_t evaluations = 0;  // distinct specs the search scored (fresh or restored)
    bool below_threshold = false;  // baseline < p_min and nothing reached p_min

    std::size_t accepted() const;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kPosInf = std::numeric_limits<double>::infinity();

// Greedy layer replacement. Each iteration scores every remaining Full
// layer's single swap, picks the best (ties to the lowest index), updates
// M_best when P* >= P_best, and accepts while P* >= p_min.
// Candidates of one iteration are scored on `workers` threads.
SearchResult greedy_replace(const SearchSpace& space, Evaluator& evaluator, double p_min, std::size_t workers = 1);
template <class T>
SearchResult greedy_replace(const Model<T>& full_model, const LinearBlockSet<T>& blocks, Evaluator& evaluator,
                            double p_min, std::size_t workers = 1);

// Same loop with p_min = -inf, stopped after exactly k accepted swaps.
SearchResult greedy_fixed_budget(const SearchSpace& space, Evaluator& evaluator, std::size_t k,
                                 std::size_t workers = 1);

struct ImportanceResult {
    std::vector<std::size_t> ordering;  // most harmless swap first
    std::vector<double> single_scores;  // indexed by layer
    std::vector<HybridSpec> specs;      // specs[k] replaces ordering[0..k); k = 0..L
};

// Scores each single swap on the base model once (L evaluations) and
// replaces layers in descending score order.
ImportanceResult strategy_local_importance(const SearchSpace& space, Evaluator& evaluator);

// Evenly spaced replacement: layers floor((i + 0.5) * L / k), i < k.
HybridSpec strategy_uniform(std::size_t k, std::size_t n_layers, LinearVariant v = LinearVariant::GLA);
HybridSpec strategy_uniform(std::size_t k, const SearchSpace& space);

// Uniform k-subset without replacement.
HybridSpec strategy_random(std::size_t k, std::size_t n_layers, std::uint64_t seed,
                           LinearVariant v = LinearVariant::GLA);
HybridSpec strategy_random(std::size_t k, const SearchSpace& space, std::uint64_t seed);

struct ExhaustiveResult {
    HybridSpec spec;
    double score = 0;
    std::size_t evaluated = 0;  // specs enumerated
};

inline constexpr std::size_t kExhaustiveMaxLayers = 12;

// All 2^L specs, or all C(L, k) when k is given. Ties go to the
// lexicographically smallest spec string ('F' < 'L').
ExhaustiveResult exhaustive_search(const SearchSpace& space, Evaluator& evaluator,
                                   std::optional<std::size_t> k = std::nullopt);

// {"iter":1,"candidates":[[l,score],...],"chosen":l,"p_star":x,"accepted":true} per line.
std::string trace_jsonl(const std::vector<SearchIteration>& trace);
std::string result_json(const SearchResult& r);
SearchResult parse_result_json(const std::string& text, const SearchSpace& space);

} // namespace hybridforge
