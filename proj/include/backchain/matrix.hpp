#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

#include "backchain/threading.hpp"

namespace backchain {

// Dense row-major matrix. Deliberately minimal: the model code needs
// matmul in three transpose patterns plus elementwise loops, nothing more.
template <typename S>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<S> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * static_cast<size_t>(c), S(0)) {}

    S* row(int r) { return d.data() + static_cast<size_t>(r) * static_cast<size_t>(cols); }
    const S* row(int r) const { return d.data() + static_cast<size_t>(r) * static_cast<size_t>(cols); }
    S& at(int r, int c) { return d[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    S at(int r, int c) const { return d[static_cast<size_t>(r) * static_cast<size_t>(cols) + static_cast<size_t>(c)]; }
    size_t size() const { return d.size(); }
    void zero() { std::fill(d.begin(), d.end(), S(0)); }

    template <typename T>
    Mat<T> cast() const {
        Mat<T> out(rows, cols);
        for (size_t i = 0; i < d.size(); ++i) out.d[i] = static_cast<T>(d[i]);
        return out;
    }
};

// y += s * x; restrict-qualified so the compiler vectorizes it.
template <typename S>
inline void axpy_row(S* __restrict__ y, const S* __restrict__ x, S s, int n) {
    for (int j = 0; j < n; ++j) y[j] += s * x[j];
}

// Dot product over eight deterministic partial-sum lanes (vectorizes
// without reassociation licenses; the lane order is fixed).
template <typename S>
inline S dot_row(const S* __restrict__ a, const S* __restrict__ b, int n) {
    S lanes[8] = {S(0), S(0), S(0), S(0), S(0), S(0), S(0), S(0)};
    int k = 0;
    for (; k + 8 <= n; k += 8) {
        for (int u = 0; u < 8; ++u) lanes[u] += a[k + u] * b[k + u];
    }
    S tail = S(0);
    for (; k < n; ++k) tail += a[k] * b[k];
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
           ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

// C (+)= A * B. Every C row is owned by one worker and the k-accumulation is
// ascending, so results do not depend on the worker count.
template <typename S>
void gemm_nn(Mat<S>& c, const Mat<S>& a, const Mat<S>& b, bool accumulate = false) {
    assert(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols);
    const int n = c.cols, k_dim = a.cols;
    parallel_for(static_cast<size_t>(c.rows), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            S* crow = c.row(static_cast<int>(i));
            if (!accumulate)
                for (int j = 0; j < n; ++j) crow[j] = S(0);
            const S* arow = a.row(static_cast<int>(i));
            for (int k = 0; k < k_dim; ++k) {
                if (arow[k] == S(0)) continue;
                axpy_row(crow, b.row(k), arow[k], n);
            }
        }
    });
}

// C (+)= A * B^T.
template <typename S>
void gemm_nt(Mat<S>& c, const Mat<S>& a, const Mat<S>& b, bool accumulate = false) {
    assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
    const int n = c.cols, k_dim = a.cols;
    parallel_for(static_cast<size_t>(c.rows), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            S* crow = c.row(static_cast<int>(i));
            const S* arow = a.row(static_cast<int>(i));
            for (int j = 0; j < n; ++j) {
                const S acc = dot_row(arow, b.row(j), k_dim);
                crow[j] = accumulate ? crow[j] + acc : acc;
            }
        }
    });
}

// C (+)= A^T * B  (A: K x M, B: K x N, C: M x N). Used for weight gradients.
// The k loop runs outermost so A and B stream sequentially while each
// worker's C block stays cache-resident; per element the accumulation is
// still k-ascending, so the result is independent of the worker count.
template <typename S>
void gemm_tn(Mat<S>& c, const Mat<S>& a, const Mat<S>& b, bool accumulate = false) {
    assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
    const int n = c.cols, k_dim = a.rows;
    parallel_for(static_cast<size_t>(c.rows), [&](size_t lo, size_t hi) {
        if (!accumulate) {
            for (size_t i = lo; i < hi; ++i) {
                S* crow = c.row(static_cast<int>(i));
                for (int j = 0; j < n; ++j) crow[j] = S(0);
            }
        }
        for (int k = 0; k < k_dim; ++k) {
            const S* arow = a.row(k);
            const S* brow = b.row(k);
            for (size_t i = lo; i < hi; ++i) {
                if (arow[i] == S(0)) continue;
                axpy_row(c.row(static_cast<int>(i)), brow, arow[i], n);
            }
        }
    });
}

// out[j] (+)= sum_i a[i][j]; bias gradients.
template <typename S>
void column_sums(std::vector<S>& out, const Mat<S>& a, bool accumulate = false) {
    assert(static_cast<int>(out.size()) == a.cols);
    if (!accumulate) std::fill(out.begin(), out.end(), S(0));
    for (int i = 0; i < a.rows; ++i) {
        const S* row = a.row(i);
        for (int j = 0; j < a.cols; ++j) out[j] += row[j];
    }
}

template <typename S>
void add_row_inplace(S* __restrict__ dst, const S* __restrict__ src, int n) {
    for (int i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace backchain
