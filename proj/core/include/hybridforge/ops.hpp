#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hybridforge/autograd.hpp"

// Differentiable ops on the tape. Activations are 2-D [rows x features];
// sequence-aware ops take (batch, seq) and assume rows are batch-major.
namespace hybridforge::ops {

template <class T> Var matmul(Tape<T>& t, Var a, Var b);
template <class T> Var add(Tape<T>& t, Var a, Var b);
template <class T> Var add_rowwise(Tape<T>& t, Var x, Var bias);
template <class T> Var mul(Tape<T>& t, Var a, Var b);
template <class T> Var scale(Tape<T>& t, Var a, T s);
template <class T> Var sum(Tape<T>& t, Var a);
template <class T> Var rmsnorm(Tape<T>& t, Var x, Var weight);
template <class T> Var silu_mul(Tape<T>& t, Var gate, Var up);
template <class T> Var sigmoid(Tape<T>& t, Var x);
template <class T> Var softmax_rows(Tape<T>& t, Var x, bool causal);
template <class T> Var embedding(Tape<T>& t, Var table, std::span<const std::int32_t> ids);
template <class T> Var rope(Tape<T>& t, Var x, std::size_t seq, std::size_t n_heads);
template <class T> Var causal_attention(Tape<T>& t, Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                                        std::size_t n_heads);
// Mean of -log p(target) over rows with nonzero weight; weights are 0/1.
template <class T> Var cross_entropy(Tape<T>& t, Var logits, std::span<const std::int32_t> targets,
                                     std::span<const T> weights);
// Mean squared error against a constant target, averaged over all elements.
template <class T> Var mse(Tape<T>& t, Var pred, const Tensor<T>& target);

} // namespace hybridforge::ops
