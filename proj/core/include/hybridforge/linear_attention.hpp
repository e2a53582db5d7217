#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hybridforge/autograd.hpp"
#include "hybridforge/rng.hpp"
#include "hybridforge/types.hpp"

namespace hybridforge {

// GLA decay: alpha = max(sigmoid(g)^(1/temperature), min_decay)
inline constexpr double kGlaTemperature = 16.0;
inline constexpr double kGlaMinDecay = 1e-3;
// GDN key normalisation: k / sqrt(|k|^2 + eps)
inline constexpr double kKeyNormEps = 1e-6;
// Ungated normaliser: max(phi(q) . z, eps)
inline constexpr double kNormalizerEps = 1e-6;

// Constant-size decode state of one linear sublayer.
// s holds one [d_head(key) x d_head(value)] matrix per head; z is the
// ungated normaliser, empty for the gated variants.
template <class T>
struct RecurrentState {
    LinearVariant variant = LinearVariant::GLA;
    std::size_t n_heads = 0;
    std::size_t d_head = 0;
    std::vector<T> s;
    std::vector<T> z;

    static RecurrentState zeros(LinearVariant v, std::size_t n_heads, std::size_t d_head);
    std::size_t bytes() const noexcept { return (s.size() + z.size()) * sizeof(T); }
    bool all_finite() const;
};

// Exact byte count of a RecurrentState. Has no sequence-length input.
std::size_t state_bytes(LinearVariant v, const ModelConfig& config, std::size_t dtype_bytes = 4);

// Fresh weights for a sublayer. Projections ~ N(0, 0.02), Wo ~ N(0, out_std);
// gate weights ~ N(0, 0.02) with biases that start decay near 1.
template <class T>
LinearBlockWeights<T> init_linear_block(LinearVariant v, const ModelConfig& config, double out_std, SeededRng rng,
                                        const std::string& prefix = "attn");

// Gate activations from gate logits (elementwise). Ungated ignores both.
//   GLA: alpha = max(exp(log_sigmoid(a) / temperature), min_decay)
//   GDN: alpha = sigmoid(a), beta = sigmoid(b)
template <class T>
void activate_gates(LinearVariant v, std::span<const T> a_logits, std::span<const T> b_logits, std::span<T> alpha,
                    std::span<T> beta);

// One token through the recurrence for every head. Inputs are d_model wide
// (heads packed); alpha is d_model wide for GLA and n_heads wide for GDN;
// beta is n_heads wide for GDN. Writes d_model head outputs (before Wo).
template <class T>
void scan_step(RecurrentState<T>& state, const T* q, const T* k, const T* v, const T* alpha, const T* beta, T* out);

// Token-wise projections of a sublayer input, gates already activated.
template <class T>
struct LinearProjections {
    Tensor<T> q, k, v, alpha, beta;
};

template <class T>
LinearProjections<T> project(const LinearBlockWeights<T>& w, const Tensor<T>& x);

// Recurrent form over one sequence x [seq x d_model]; `state` is read as the
// initial state and left holding the final one. Throws NumericError with the
// offending step if outputs go non-finite.
template <class T>
Tensor<T> linear_forward_recurrent(const LinearBlockWeights<T>& w, const Tensor<T>& x, RecurrentState<T>& state);

// Quadratic oracle: rebuilds every output from scratch with fresh
// accumulators and naive projections. O(seq^2) and intended for tests.
template <class T>
Tensor<T> linear_forward_reference(const LinearBlockWeights<T>& w, const Tensor<T>& x);

// O(1) decode step for a single token row.
template <class T>
std::vector<T> linear_step(const LinearBlockWeights<T>& w, RecurrentState<T>& state, std::span<const T> x_t);

// Differentiable recurrence over `batch` sequences of length `seq`, state
// reset per sequence. a/b are gate logits (invalid Var when unused).
template <class T>
Var linear_scan(Tape<T>& tape, LinearVariant variant, Var q, Var k, Var v, Var a, Var b, std::size_t batch,
                std::size_t seq, std::size_t n_heads);

// Full sublayer on the tape: projections, gates, scan, Wo.
template <class T>
Var linear_sublayer(Tape<T>& tape, LinearBlockWeights<T>& w, Var x, std::size_t batch, std::size_t seq);
template <class T>
Var linear_sublayer(Tape<T>& tape, const LinearBlockWeights<T>& w, Var x, std::size_t batch, std::size_t seq);

} // namespace hybridforge
