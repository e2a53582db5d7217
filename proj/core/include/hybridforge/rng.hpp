#pragma once

#include <cstdint>
#include <vector>

namespace hybridforge {

// Counter-based generator: the i-th draw is a pure function of (key, i).
// split() derives an independent stream, so parallel jobs can each own one
// without coordinating on shared state.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc909ull)) {}

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t uniform_int(std::uint64_t n);

    // Standard normal via Box-Muller. Uses two draws per call; no cached spare.
    double normal();

    SeededRng split(std::uint64_t stream) const {
        SeededRng child;
        child.key_ = mix(key_ ^ mix(stream + 0xbb67ae8584caa73bull));
        return child;
    }

    std::uint64_t counter() const noexcept { return counter_; }

    // k distinct values from [0, n), in selection order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace hybridforge
