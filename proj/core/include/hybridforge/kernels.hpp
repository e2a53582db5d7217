#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hybridforge/tensor.hpp"

// Plain loops over contiguous row-major buffers. Every output element is
// accumulated in ascending reduction order regardless of how many rows are
// processed at once, so a one-row call reproduces the matching row of a
// batched call bit for bit.
namespace hybridforge::kernels {

// c[m x n] (+)= a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// c[m x k] (+)= a[m x n] * b[k x n]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool accumulate = false);

template <class T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols);

// Row-wise softmax with max subtraction. With causal=true, row i keeps
// columns [0, i + offset] and zeroes the rest exactly.
template <class T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols, bool causal, std::size_t offset = 0);

template <class T>
void rmsnorm_rows(const T* x, const T* w, T* y, std::size_t rows, std::size_t d, T eps);

// Rotary embedding in place; row r sits at position positions[r].
template <class T>
void rope_rows(T* x, std::size_t rows, std::size_t n_heads, std::size_t d_head, const std::size_t* positions,
               bool inverse = false);

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
inline T sigmoid(T x) {
    // Branch-free; exp(-x) = inf for very negative x still yields exactly 0.
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
inline T log_sigmoid(T x) {
    return x >= T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline constexpr double kRmsEps = 1e-6;
inline constexpr double kRopeBase = 10000.0;

} // namespace hybridforge::kernels
