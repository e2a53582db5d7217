#include "hybridforge/types.hpp"

#include "hybridforge/error.hpp"

namespace hybridforge {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model == 0 || n_heads == 0 || d_head == 0 || d_ff == 0 || vocab_size == 0 || max_seq == 0) {
        throw ConfigError("model config: all dimensions must be positive and n_layers >= 1");
    }
    if (n_heads * d_head != d_model) {
        throw ConfigError("model config: n_heads (" + std::to_string(n_heads) + ") * d_head (" +
                          std::to_string(d_head) + ") != d_model (" + std::to_string(d_model) + ")");
    }
    if (d_head % 2 != 0) throw ConfigError("model config: d_head must be even for rotary embeddings");
}

std::string_view variant_tag(LinearVariant v) {
    switch (v) {
    case LinearVariant::UngatedLinear: return "ungated";
    case LinearVariant::GLA: return "gla";
    case LinearVariant::GatedDeltaNet: return "gdn";
    }
    return "?";
}

LinearVariant parse_variant(std::string_view tag) {
    if (tag == "ungated") return LinearVariant::UngatedLinear;
    if (tag == "gla") return LinearVariant::GLA;
    if (tag == "gdn") return LinearVariant::GatedDeltaNet;
    throw ConfigError("unknown linear variant '" + std::string(tag) + "' (expected ungated|gla|gdn)");
}

std::vector<LinearVariant> all_variants() {
    return {LinearVariant::UngatedLinear, LinearVariant::GLA, LinearVariant::GatedDeltaNet};
}

HybridSpec HybridSpec::all_full(std::size_t n_layers) { return HybridSpec{std::vector<AttentionKind>(n_layers)}; }

HybridSpec HybridSpec::all_linear(std::size_t n_layers, LinearVariant v) {
    return HybridSpec{std::vector<AttentionKind>(n_layers, AttentionKind::linear(v))};
}

HybridSpec HybridSpec::parse(std::string_view s, LinearVariant v) {
    HybridSpec spec;
    for (char c : s) {
        if (c == 'F') spec.kinds.push_back(AttentionKind::full());
        else if (c == 'L') spec.kinds.push_back(AttentionKind::linear(v));
        else throw SpecError("bad hybrid spec character '" + std::string(1, c) + "' in \"" + std::string(s) + "\"");
    }
    return spec;
}

std::size_t HybridSpec::replaced() const {
    std::size_t n = 0;
    for (const auto& k : kinds) n += k.is_linear();
    return n;
}

HybridSpec HybridSpec::with_linear(std::size_t layer, LinearVariant v) const {
    HybridSpec out = *this;
    out.kinds.at(layer) = AttentionKind::linear(v);
    return out;
}

std::string HybridSpec::to_string() const {
    std::string s;
    s.reserve(kinds.size());
    for (const auto& k : kinds) s.push_back(k.code());
    return s;
}

std::string HybridSpec::canonical() const {
    std::string s;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
        if (i) s.push_back(',');
        if (kinds[i].is_full()) s += "F";
        else s += "L:" + std::string(variant_tag(kinds[i].variant));
    }
    return s;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t HybridSpec::hash() const { return fnv1a(canonical()); }

template <class T>
std::vector<Parameter<T>*> LinearBlockWeights<T>::parameters() {
    std::vector<Parameter<T>*> out{&wq, &wk, &wv, &wo};
    if (variant != LinearVariant::UngatedLinear) {
        out.push_back(&gate_w);
        out.push_back(&gate_b);
    }
    if (variant == LinearVariant::GatedDeltaNet) {
        out.push_back(&beta_w);
        out.push_back(&beta_b);
    }
    return out;
}

template <class T>
std::vector<const Parameter<T>*> LinearBlockWeights<T>::parameters() const {
    auto* self = const_cast<LinearBlockWeights<T>*>(this);
    std::vector<const Parameter<T>*> out;
    for (Parameter<T>* p : self->parameters()) out.push_back(p);
    return out;
}

template struct LinearBlockWeights<float>;
template struct LinearBlockWeights<double>;

} // namespace hybridforge
