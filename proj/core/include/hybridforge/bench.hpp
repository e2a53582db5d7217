#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hybridforge/checkpoint.hpp"
#include "hybridforge/model.hpp"

namespace hybridforge {

// Decode-cache size for `context_len` cached tokens: 2 * ctx * heads * d_head
// bytes per Full layer plus the fixed recurrent state of each Linear layer.
std::size_t cache_bytes(const HybridSpec& spec, const ModelConfig& config, std::size_t context_len,
                        std::size_t dtype_bytes = 4);

struct BenchConfig {
    std::vector<std::size_t> context_lengths{512, 2048, 8192};
    std::size_t gen_tokens = 128;
    std::size_t batch = 1;
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;

    static std::vector<std::size_t> long_context_grid() { return {512, 2048, 16384, 65536}; }
    // repeats >= 3, batch == 1, every context + gen_tokens <= max_seq.
    void validate(std::size_t max_seq) const;
};

struct BenchRow {
    std::string spec;  // "FFLF..." form
    std::size_t context = 0;
    std::size_t gen_tokens = 0;   // tokens actually timed per repeat
    double tokens_per_sec = 0;    // median over repeats
    double iqr = 0;               // interquartile range of tokens/sec
    std::size_t cache_bytes = 0;  // measured after the last decode step
    double speedup = 1.0;         // vs the all-Full row at the same context
    std::string note;             // set when gen_tokens had to grow
};

// Prefills a random context of `context_len` tokens, then times `gen_tokens`
// greedy decode steps per repeat from a copy of that prefilled cache. Runs
// shorter than 10 ms double gen_tokens until they are not, within max_seq.
// Throws ContractError if the measured cache differs from cache_bytes().
BenchRow bench_decode(const Model<float>& model, std::size_t context_len, std::size_t gen_tokens,
                      std::size_t repeats, std::size_t warmup = 1, std::uint64_t seed = 0);

// Benchmarks every spec at every context and fills in speedups. The all-Full
// spec is always measured; `base` is copied with max_seq raised as needed.
std::vector<BenchRow> bench_grid(const Model<float>& base, const LinearBlockSet<float>& blocks,
                                 const std::vector<HybridSpec>& specs, const BenchConfig& config);

} // namespace hybridforge
