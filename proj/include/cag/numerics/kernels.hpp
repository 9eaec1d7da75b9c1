#pragma once

// Raw row-major kernels shared by the tensor ops and the attention code.
// Callers own shape checking; these only index.

#include <cmath>
#include <cstddef>
#include <limits>

namespace cag::kernels {

// c[m x n] (+)= a[m x k] * b[k x n]
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate) {
        for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    if (!accumulate) {
        for (std::size_t i = 0; i < k * n; ++i) c[i] = T(0);
    }
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate = false) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s = T(0);
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
    }
}

// In-place stabilized softmax over one row. Entries equal to -inf come out
// as exactly 0. Returns false when the row has no finite entry.
template <class T>
bool softmax_row(T* row, std::size_t n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        if (row[j] > mx) mx = row[j];
    }
    if (!(mx > -std::numeric_limits<T>::infinity())) return false;
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
        const T e = row[j] == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(row[j] - mx);
        row[j] = e;
        sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
    return true;
}

} // namespace cag::kernels
