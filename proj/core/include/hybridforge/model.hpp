#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "hybridforge/autograd.hpp"
#include "hybridforge/linear_attention.hpp"
#include "hybridforge/types.hpp"

namespace hybridforge {

// Pre-norm residual block:
//   x <- x + Attn(RMSNorm(x)); x <- x + W_down(silu(RMSNorm(x) W_gate) * RMSNorm(x) W_up)
template <class T>
struct Layer {
    Parameter<T> attn_norm;
    std::variant<FullAttentionWeights<T>, LinearBlockWeights<T>> attn;
    Parameter<T> mlp_norm;
    Parameter<T> w_gate, w_up, w_down;

    AttentionKind kind() const;
    const FullAttentionWeights<T>& full() const { return std::get<FullAttentionWeights<T>>(attn); }
    const LinearBlockWeights<T>& linear() const { return std::get<LinearBlockWeights<T>>(attn); }
};

template <class T>
struct Model {
    ModelConfig config;
    Parameter<T> embed;  // [vocab x d_model]
    std::vector<Layer<T>> layers;
    Parameter<T> final_norm;
    Parameter<T> lm_head;  // [d_model x vocab]

    HybridSpec spec() const;
    // Stable order: embed, per layer (attn_norm, attention, mlp_norm, mlp), final_norm, lm_head.
    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
    std::size_t parameter_count() const;
};

// All-Full model. Weights ~ N(0, 0.02); Wo and W_down ~ N(0, 0.02 / sqrt(2 L));
// norm scales 1. Each tensor draws from its own stream keyed by name.
template <class T>
Model<T> model_init(const ModelConfig& config, std::uint64_t seed);

// Standard deviation used for output projections of a config.
double output_init_std(const ModelConfig& config);

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> ids;  // batch-major, batch * seq entries

    std::span<const std::int32_t> sequence(std::size_t b) const { return {ids.data() + b * seq, seq}; }
};

// Per-layer capture of attention-sublayer inputs (normalised hidden state)
// and outputs (before the residual add).
template <class T>
struct ActivationTap {
    std::vector<bool> want;
    std::vector<Tensor<T>> inputs;
    std::vector<Tensor<T>> outputs;

    static ActivationTap for_layers(std::size_t n_layers, std::span<const std::size_t> layers);
};

// Forward pass on the tape; returns logits [batch*seq x vocab]. A non-const
// model records trainable leaves, a const model records read-only ones.
template <class T>
Var forward(Tape<T>& tape, Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap = nullptr);
template <class T>
Var forward(Tape<T>& tape, const Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap = nullptr);

// Embedding lookup followed by layers [first, last), returning the hidden state.
// Split out so callers can resume a forward from a cached intermediate state.
template <class T>
Tensor<T> forward_hidden(const Model<T>& model, const TokenBatch& tokens, std::size_t first_layer,
                         std::size_t last_layer, const Tensor<T>* start = nullptr, ActivationTap<T>* tap = nullptr);
// Final norm and LM head on a hidden state.
template <class T>
Tensor<T> forward_head(const Model<T>& model, const Tensor<T>& hidden);

// Gradient-free forward; logits shaped [batch x seq x vocab].
template <class T>
Tensor<T> forward_full(const Model<T>& model, const TokenBatch& tokens, ActivationTap<T>* tap = nullptr);

template <class T>
struct LayerCache {
    AttentionKind kind;
    std::vector<std::vector<T>> keys;    // per head, [t x d_head], rotated
    std::vector<std::vector<T>> values;  // per head, [t x d_head]
    std::optional<RecurrentState<T>> state;
};

// Decode cache for one sequence. Full layers grow by one entry per token;
// linear layers hold a constant-size RecurrentState.
template <class T>
class KVCache {
public:
    KVCache() = default;
    explicit KVCache(const Model<T>& model);

    std::size_t length() const noexcept { return length_; }
    const HybridSpec& spec() const noexcept { return spec_; }
    // Bytes currently held by keys, values and recurrent states.
    std::size_t bytes() const;
    void reserve(std::size_t tokens);

    std::vector<LayerCache<T>>& layers() noexcept { return layers_; }
    const std::vector<LayerCache<T>>& layers() const noexcept { return layers_; }
    void advance(std::size_t n) noexcept { length_ += n; }

private:
    HybridSpec spec_;
    std::vector<LayerCache<T>> layers_;
    std::size_t head_dim_ = 0;
    std::size_t length_ = 0;
};

// Runs `tokens` through the model on top of `cache` (prefill or decode) and
// returns logits [n x vocab].
template <class T>
Tensor<T> forward_cached(const Model<T>& model, KVCache<T>& cache, std::span<const std::int32_t> tokens);

template <class T>
std::vector<T> decode_step(const Model<T>& model, KVCache<T>& cache, std::int32_t token);

} // namespace hybridforge
