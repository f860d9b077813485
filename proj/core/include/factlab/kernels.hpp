#pragma once
// Hand-rolled dense kernels. At this project's shapes (a few hundred rows,
// inner dims 64-256) a plain ikj loop at -O3 matches a tuned BLAS, whose call
// overhead dominates below ~512x512; staying dependency-free keeps the float
// and double paths identical.

#include <cstdint>
#include <vector>

#include "factlab/tensor.hpp"

namespace factlab::kernels {

template <typename T>
inline void transpose(int64_t rows, int64_t cols, const T* in, T* out) {
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

// C[M,N] = A[M,K] B[K,N], optionally accumulating into C
template <typename T>
inline void gemm(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* c,
                 bool accumulate = false) {
    for (int64_t i = 0; i < M; ++i) {
        T* ci = c + i * N;
        if (!accumulate)
            for (int64_t j = 0; j < N; ++j) ci[j] = T(0);
        const T* ai = a + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const T aik = ai[k];
            const T* bk = b + k * N;
            for (int64_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C[M,N] = A[M,K] B[N,K]^T; B is transposed into scratch so the inner loop
// stays contiguous without -ffast-math reductions
template <typename T>
inline void gemm_nt(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* c,
                    bool accumulate = false) {
    thread_local std::vector<T> scratch;
    scratch.resize(static_cast<size_t>(K * N));
    transpose(N, K, b, scratch.data());
    gemm(M, K, N, a, scratch.data(), c, accumulate);
}

// C[K,N] = A[M,K]^T B[M,N]
template <typename T>
inline void gemm_tn(int64_t M, int64_t K, int64_t N, const T* a, const T* b, T* c,
                    bool accumulate = false) {
    if (!accumulate)
        for (int64_t i = 0; i < K * N; ++i) c[i] = T(0);
    for (int64_t m = 0; m < M; ++m) {
        const T* am = a + m * K;
        const T* bm = b + m * N;
        for (int64_t k = 0; k < K; ++k) {
            const T amk = am[k];
            T* ck = c + k * N;
            for (int64_t j = 0; j < N; ++j) ck[j] += amk * bm[j];
        }
    }
}

// row-wise softmax with max subtraction; logits scaled by 1/temperature first
template <typename T>
inline void softmax_rows(int64_t rows, int64_t cols, const T* in, T* out, T temperature) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T mx = x[0];
        for (int64_t c = 1; c < cols; ++c) mx = x[c] > mx ? x[c] : mx;
        T sum = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp((x[c] - mx) / temperature);
            sum += y[c];
        }
        const T inv = T(1) / sum;
        for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
    }
}

// row-wise log-softmax, returns log p = x - max - log(sum exp(x - max))
template <typename T>
inline void log_softmax_rows(int64_t rows, int64_t cols, const T* in, T* out) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T mx = x[0];
        for (int64_t c = 1; c < cols; ++c) mx = x[c] > mx ? x[c] : mx;
        T sum = T(0);
        for (int64_t c = 0; c < cols; ++c) sum += std::exp(x[c] - mx);
        const T lse = mx + std::log(sum);
        for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
}

template <typename T>
inline void layer_norm_rows(int64_t rows, int64_t cols, const T* in, const T* gamma,
                            const T* beta, T eps, T* out, T* inv_std_opt = nullptr,
                            T* xhat_opt = nullptr) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = in + r * cols;
        T* y = out + r * cols;
        T mean = T(0);
        for (int64_t c = 0; c < cols; ++c) mean += x[c];
        mean /= T(cols);
        T var = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            const T d = x[c] - mean;
            var += d * d;
        }
        var /= T(cols);
        const T inv_std = T(1) / std::sqrt(var + eps);
        if (inv_std_opt) inv_std_opt[r] = inv_std;
        for (int64_t c = 0; c < cols; ++c) {
            const T xh = (x[c] - mean) * inv_std;
            if (xhat_opt) xhat_opt[r * cols + c] = xh;
            y[c] = gamma[c] * xh + beta[c];
        }
    }
}

template <typename T>
inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

} // namespace factlab::kernels
