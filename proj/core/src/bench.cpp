#include "hybridforge/bench.hpp"

#include <algorithm>
#include <chrono>

#include "hybridforge/error.hpp"
#include "hybridforge/linear_attention.hpp"
#include "hybridforge/rng.hpp"
#include "hybridforge/search.hpp"

namespace hybridforge {

std::size_t cache_bytes(const HybridSpec& spec, const ModelConfig& config, std::size_t context_len,
                        std::size_t dtype_bytes) {
    std::size_t n = 0;
    for (const auto& k : spec.kinds) {
        if (k.is_full()) n += 2 * context_len * config.n_heads * config.d_head * dtype_bytes;
        else n += state_bytes(k.variant, config, dtype_bytes);
    }
    return n;
}

void BenchConfig::validate(std::size_t max_seq) const {
    if (repeats < 3) throw ConfigError("bench.repeats must be >= 3, got " + std::to_string(repeats));
    if (batch != 1) throw ConfigError("bench.batch must be 1 (single-sequence decode)");
    if (gen_tokens == 0) throw ConfigError("bench.gen_tokens must be positive");
    if (context_lengths.empty()) throw ConfigError("bench.context_lengths is empty");
    for (std::size_t c : context_lengths) {
        if (c == 0) throw ConfigError("bench context length must be positive");
        if (c + gen_tokens > max_seq) {
            throw ConfigError("bench context " + std::to_string(c) + " + gen_tokens " + std::to_string(gen_tokens) +
                              " exceeds max_seq " + std::to_string(max_seq));
        }
    }
}

namespace {

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = std::size_t(pos);
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

std::int32_t argmax(const std::vector<float>& logits) {
    return std::int32_t(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Greedy decode of n tokens; returns elapsed seconds.
double timed_decode(const Model<float>& model, KVCache<float>& cache, std::int32_t first, std::size_t n) {
    std::int32_t tok = first;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n; ++i) tok = argmax(decode_step(model, cache, tok));
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr double kMinRunSeconds = 0.010;

} // namespace

BenchRow bench_decode(const Model<float>& model, std::size_t context_len, std::size_t gen_tokens,
                      std::size_t repeats, std::size_t warmup, std::uint64_t seed) {
    const ModelConfig& c = model.config;
    if (repeats < 3) throw ConfigError("bench repeats must be >= 3");
    if (context_len == 0 || gen_tokens == 0) throw InputError("bench needs a positive context and gen_tokens");
    if (context_len + gen_tokens > c.max_seq) {
        throw InputError("context " + std::to_string(context_len) + " + gen_tokens " + std::to_string(gen_tokens) +
                         " exceeds max_seq " + std::to_string(c.max_seq));
    }

    SeededRng rng(seed);
    std::vector<std::int32_t> prompt(context_len);
    for (auto& t : prompt) t = std::int32_t(2 + rng.uniform_int(c.vocab_size - 2));

    KVCache<float> prefilled(model);
    prefilled.reserve(c.max_seq);
    const Tensor<float> logits = forward_cached(model, prefilled, std::span<const std::int32_t>(prompt));
    const float* last = logits.data() + (context_len - 1) * c.vocab_size;
    const auto first = std::int32_t(std::max_element(last, last + c.vocab_size) - last);

    BenchRow row;
    row.spec = model.spec().to_string();
    row.context = context_len;

    std::size_t n = gen_tokens;
    for (std::size_t w = 0; w < warmup; ++w) {
        KVCache<float> cache = prefilled;
        timed_decode(model, cache, first, n);
    }
    while (true) {
        KVCache<float> cache = prefilled;
        const double s = timed_decode(model, cache, first, n);
        if (s >= kMinRunSeconds || context_len + n == c.max_seq) break;
        n = std::min(2 * n, c.max_seq - context_len);
    }
    if (n != gen_tokens) {
        row.note = "gen_tokens raised from " + std::to_string(gen_tokens) + " to " + std::to_string(n) +
                   " for timer resolution";
    }
    row.gen_tokens = n;

    std::vector<double> tps;
    std::size_t measured = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
        KVCache<float> cache = prefilled;
        const double s = timed_decode(model, cache, first, n);
        tps.push_back(double(n) / s);
        measured = std::max(measured, cache.bytes());
    }
    const std::size_t expected = cache_bytes(model.spec(), c, context_len + n, sizeof(float));
    if (measured != expected) {
        throw ContractError("measured cache " + std::to_string(measured) + " bytes != formula " +
                            std::to_string(expected) + " for " + row.spec);
    }
    row.cache_bytes = measured;
    row.tokens_per_sec = quantile(tps, 0.5);
    row.iqr = quantile(tps, 0.75) - quantile(tps, 0.25);
    return row;
}

std::vector<BenchRow> bench_grid(const Model<float>& base, const LinearBlockSet<float>& blocks,
                                 const std::vector<HybridSpec>& specs, const BenchConfig& config) {
    const std::size_t longest = *std::max_element(config.context_lengths.begin(), config.context_lengths.end());
    Model<float> full = base;
    full.config.max_seq = std::max(full.config.max_seq, longest + config.gen_tokens);
    config.validate(full.config.max_seq);

    std::vector<HybridSpec> all{HybridSpec::all_full(base.layers.size())};
    for (const auto& s : specs) {
        if (std::find(all.begin(), all.end(), s) == all.end()) all.push_back(s);
    }
    std::vector<BenchRow> rows;
    for (const auto& spec : all) {
        const Model<float> m = assemble_hybrid(full, blocks, spec);
        for (std::size_t ctx : config.context_lengths) {
            rows.push_back(bench_decode(m, ctx, config.gen_tokens, config.repeats, config.warmup, config.seed));
        }
    }
    for (auto& r : rows) {
        for (const auto& f : rows) {
            if (f.context == r.context && f.spec == rows.front().spec) r.speedup = r.tokens_per_sec / f.tokens_per_sec;
        }
    }
    return rows;
}

} // namespace hybridforge
