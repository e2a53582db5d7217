#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hybridforge/tensor.hpp"

namespace hybridforge {

struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_head = 32;
    std::size_t d_ff = 512;
    std::size_t vocab_size = 64;
    std::size_t max_seq = 512;

    // Throws ConfigError on any inconsistency.
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LinearVariant : std::uint8_t { UngatedLinear = 0, GLA = 1, GatedDeltaNet = 2 };

// Stable serialisation tags: "ungated" | "gla" | "gdn".
std::string_view variant_tag(LinearVariant v);
LinearVariant parse_variant(std::string_view tag);
std::vector<LinearVariant> all_variants();

struct AttentionKind {
    enum class Type : std::uint8_t { Full = 0, Linear = 1 };
    Type type = Type::Full;
    LinearVariant variant = LinearVariant::GLA;  // meaningful only when type == Linear

    static AttentionKind full() { return {}; }
    static AttentionKind linear(LinearVariant v) { return {Type::Linear, v}; }
    bool is_full() const noexcept { return type == Type::Full; }
    bool is_linear() const noexcept { return type == Type::Linear; }
    char code() const noexcept { return is_full() ? 'F' : 'L'; }

    friend bool operator==(const AttentionKind& a, const AttentionKind& b) {
        return a.type == b.type && (a.is_full() || a.variant == b.variant);
    }
};

// Per-layer attention kinds of a (possibly hybrid) model.
struct HybridSpec {
    std::vector<AttentionKind> kinds;

    static HybridSpec all_full(std::size_t n_layers);
    static HybridSpec all_linear(std::size_t n_layers, LinearVariant v);
    // Parses "FFLF..." with one variant applied to every L.
    static HybridSpec parse(std::string_view s, LinearVariant v);

    std::size_t size() const noexcept { return kinds.size(); }
    std::size_t replaced() const;
    // Returns a copy with layer `layer` switched to Linear(v).
    HybridSpec with_linear(std::size_t layer, LinearVariant v) const;
    // "FFLFLFFF"
    std::string to_string() const;
    // Includes variant tags, so specs differing only in variant hash apart.
    std::string canonical() const;
    std::uint64_t hash() const;

    friend bool operator==(const HybridSpec& a, const HybridSpec& b) { return a.kinds == b.kinds; }
};

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull);

template <class T>
struct FullAttentionWeights {
    Parameter<T> wq, wk, wv, wo;  // [d_model x d_model], y = x W
};

// Parameters of one linear-attention sublayer. Gate tensors depend on the variant:
//   GLA: gate_w [d_model x d_model], gate_b [d_model]   (per-head d_head-wide decay)
//   GDN: gate_w, beta_w [d_model x n_heads], gate_b, beta_b [n_heads]
//   UngatedLinear: no gates
template <class T>
struct LinearBlockWeights {
    LinearVariant variant = LinearVariant::GLA;
    std::size_t n_heads = 1;
    Parameter<T> wq, wk, wv, wo;
    Parameter<T> gate_w, gate_b;
    Parameter<T> beta_w, beta_b;

    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
};

} // namespace hybridforge
