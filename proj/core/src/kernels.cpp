#include "hybridforge/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace hybridforge {

std::size_t dtype_size(DType d) {
    switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I64: return 8;
    }
    return 0;
}

std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

} // namespace hybridforge

namespace hybridforge::kernels {

namespace {

// Register tile: R rows x (NV vectors) columns of c, accumulated over the
// full reduction. a(r, p) lives at a[r * ars + p * aps]; b rows are
// contiguous with stride ldb. Each element is updated as c = c + a * b in
// ascending p, whatever the tile shape, so results never depend on m.
#if defined(__AVX512F__)
constexpr std::size_t kVecBytes = 64;
#else
constexpr std::size_t kVecBytes = 32;
#endif

template <class T>
struct VecOf;
template <>
struct VecOf<float> {
    typedef float type __attribute__((vector_size(kVecBytes)));
};
template <>
struct VecOf<double> {
    typedef double type __attribute__((vector_size(kVecBytes)));
};
template <class T>
using Vec = typename VecOf<T>::type;

template <class T, std::size_t R, std::size_t NV>
inline void tile(const T* a, std::size_t ars, std::size_t aps, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                 std::size_t k) {
    using V = Vec<T>;
    constexpr std::size_t W = sizeof(V) / sizeof(T);
    V acc[R][NV];
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&acc[r][v], c + r * ldc + v * W, sizeof(V));
    for (std::size_t p = 0; p < k; ++p) {
        V bv[NV];
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(&bv[v], b + p * ldb + v * W, sizeof(V));
        for (std::size_t r = 0; r < R; ++r) {
            const T x = a[r * ars + p * aps];
            for (std::size_t v = 0; v < NV; ++v) acc[r][v] += x * bv[v];
        }
    }
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t v = 0; v < NV; ++v) std::memcpy(c + r * ldc + v * W, &acc[r][v], sizeof(V));
}

template <class T>
inline void edge(const T* a, std::size_t ars, std::size_t aps, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                 std::size_t k, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
            T acc = c[r * ldc + j];
            for (std::size_t p = 0; p < k; ++p) acc += a[r * ars + p * aps] * b[p * ldb + j];
            c[r * ldc + j] = acc;
        }
    }
}

// c[m x n] += A[m x k] * b[k x n] with A addressed through (ars, aps).
// Full row blocks of A are packed p-major and column panels of b are packed
// contiguously, so the tile streams both operands sequentially.
template <class T>
void gemm_strided(const T* a, std::size_t ars, std::size_t aps, const T* b, T* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    constexpr std::size_t R = 4, NV = 1, C = NV * kVecBytes / sizeof(T);
    const std::size_t full_rows = m / R * R;
    if (full_rows == 0) {
        // Few rows (decode): read b in place, four vectors wide for independent chains.
        std::size_t j0 = 0;
        for (; j0 + 4 * C <= n; j0 += 4 * C)
            for (std::size_t i = 0; i < m; ++i) tile<T, 1, 4>(a + i * ars, ars, aps, b + j0, n, c + i * n + j0, n, k);
        for (; j0 + C <= n; j0 += C)
            for (std::size_t i = 0; i < m; ++i) tile<T, 1, 1>(a + i * ars, ars, aps, b + j0, n, c + i * n + j0, n, k);
        if (j0 < n) edge(a, ars, aps, b + j0, n, c + j0, n, k, m, n - j0);
        return;
    }
    thread_local std::vector<T> apack, panel;
    apack.resize(full_rows * k);
    panel.resize(k * C);
    for (std::size_t i0 = 0; i0 < full_rows; i0 += R) {
        T* dst = apack.data() + i0 * k;
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t r = 0; r < R; ++r) dst[p * R + r] = a[(i0 + r) * ars + p * aps];
    }
    std::size_t j0 = 0;
    for (; j0 + C <= n; j0 += C) {
        for (std::size_t p = 0; p < k; ++p) std::copy_n(b + p * n + j0, C, panel.data() + p * C);
        for (std::size_t i0 = 0; i0 < full_rows; i0 += R) {
            tile<T, R, NV>(apack.data() + i0 * k, 1, R, panel.data(), C, c + i0 * n + j0, n, k);
        }
        for (std::size_t i0 = full_rows; i0 < m; ++i0) {
            tile<T, 1, NV>(a + i0 * ars, ars, aps, panel.data(), C, c + i0 * n + j0, n, k);
        }
    }
    if (j0 < n) edge(a, ars, aps, b + j0, n, c + j0, n, k, m, n - j0);
}

} // namespace

template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T{});
    gemm_strided(a, k, 1, b, c, m, k, n);
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, T{});
    // c[p][j] = sum_i a[i][p] b[i][j]: rows of c walk columns of a.
    gemm_strided(a, 1, k, b, c, k, m, n);
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
    thread_local std::vector<T> bt;
    bt.resize(n * k);
    transpose(b, bt.data(), k, n);
    if (!accumulate) std::fill(c, c + m * k, T{});
    gemm_strided(a, n, 1, bt.data(), c, m, n, k);
}

template <class T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
    constexpr std::size_t B = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += B) {
        for (std::size_t c0 = 0; c0 < cols; c0 += B) {
            const std::size_t r1 = std::min(rows, r0 + B), c1 = std::min(cols, c0 + B);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = a[r * cols + c];
        }
    }
}

template <class T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols, bool causal, std::size_t offset) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x + r * cols;
        const std::size_t live = causal ? std::min(cols, r + offset + 1) : cols;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < live; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < live; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < live; ++j) row[j] *= inv;
        for (std::size_t j = live; j < cols; ++j) row[j] = T(0);
    }
}

template <class T>
void rmsnorm_rows(const T* x, const T* w, T* y, std::size_t rows, std::size_t d, T eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T* yr = y + r * d;
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(ss / T(d) + eps);
        for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * w[j];
    }
}

template <class T>
void rope_rows(T* x, std::size_t rows, std::size_t n_heads, std::size_t d_head, const std::size_t* positions,
               bool inverse) {
    const std::size_t half = d_head / 2;
    std::vector<T> cs(half), sn(half);
    for (std::size_t r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t i = 0; i < half; ++i) {
            const double theta = pos * std::pow(kRopeBase, -2.0 * double(i) / double(d_head));
            cs[i] = static_cast<T>(std::cos(theta));
            sn[i] = static_cast<T>(inverse ? -std::sin(theta) : std::sin(theta));
        }
        T* xr = x + r * n_heads * d_head;
        for (std::size_t h = 0; h < n_heads; ++h) {
            T* xh = xr + h * d_head;
            for (std::size_t i = 0; i < half; ++i) {
                const T a = xh[i], b = xh[i + half];
                xh[i] = a * cs[i] - b * sn[i];
                xh[i + half] = a * sn[i] + b * cs[i];
            }
        }
    }
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    Tensor<T> c({a.rows(), b.cols()});
    gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

#define HF_INSTANTIATE(T)                                                                                       \
    template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);             \
    template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);             \
    template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);             \
    template void transpose<T>(const T*, T*, std::size_t, std::size_t);                                        \
    template void softmax_rows<T>(T*, std::size_t, std::size_t, bool, std::size_t);                            \
    template void rmsnorm_rows<T>(const T*, const T*, T*, std::size_t, std::size_t, T);                        \
    template void rope_rows<T>(T*, std::size_t, std::size_t, std::size_t, const std::size_t*, bool);           \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);

HF_INSTANTIATE(float)
HF_INSTANTIATE(double)
#undef HF_INSTANTIATE

} // namespace hybridforge::kernels
