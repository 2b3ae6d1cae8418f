#pragma once

// Small register-blocked matmul kernels for the conv layers. All loops have a
// fixed evaluation order, so results are bit-stable for a given build; no
// fast-math reassociation is assumed. Reduction loops accumulate into a fixed
// number of lanes and fold them in index order.

#include <cstddef>

namespace ncd::detail {

inline constexpr int kGemmMr = 4;   // C row tile
inline constexpr int kGemmNr = 32;  // C column tile (floats)

// C[M x N] += A[M x K] * B[K x N], all row-major, contiguous.
template <typename S>
void gemm_nn(S* c, const S* a, const S* b, int m, int k, int n) {
    for (int m0 = 0; m0 < m; m0 += kGemmMr) {
        int mr = (m - m0 < kGemmMr) ? m - m0 : kGemmMr;
        for (int n0 = 0; n0 < n; n0 += kGemmNr) {
            int nr = (n - n0 < kGemmNr) ? n - n0 : kGemmNr;
            if (mr == kGemmMr && nr == kGemmNr) {
                S acc[kGemmMr][kGemmNr];
                for (int i = 0; i < kGemmMr; ++i)
                    for (int j = 0; j < kGemmNr; ++j) acc[i][j] = c[size_t(m0 + i) * n + n0 + j];
                for (int p = 0; p < k; ++p) {
                    const S* brow = b + size_t(p) * n + n0;
                    for (int i = 0; i < kGemmMr; ++i) {
                        S av = a[size_t(m0 + i) * k + p];
                        for (int j = 0; j < kGemmNr; ++j) acc[i][j] += av * brow[j];
                    }
                }
                for (int i = 0; i < kGemmMr; ++i)
                    for (int j = 0; j < kGemmNr; ++j) c[size_t(m0 + i) * n + n0 + j] = acc[i][j];
            } else {
                for (int p = 0; p < k; ++p) {
                    const S* brow = b + size_t(p) * n + n0;
                    for (int i = 0; i < mr; ++i) {
                        S av = a[size_t(m0 + i) * k + p];
                        S* crow = c + size_t(m0 + i) * n + n0;
                        for (int j = 0; j < nr; ++j) crow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

// C[K x N] += A[M x K]^T * B[M x N].
template <typename S>
void gemm_tn(S* c, const S* a, const S* b, int m, int k, int n) {
    for (int k0 = 0; k0 < k; k0 += kGemmMr) {
        int kr = (k - k0 < kGemmMr) ? k - k0 : kGemmMr;
        for (int n0 = 0; n0 < n; n0 += kGemmNr) {
            int nr = (n - n0 < kGemmNr) ? n - n0 : kGemmNr;
            if (kr == kGemmMr && nr == kGemmNr) {
                S acc[kGemmMr][kGemmNr];
                for (int i = 0; i < kGemmMr; ++i)
                    for (int j = 0; j < kGemmNr; ++j) acc[i][j] = c[size_t(k0 + i) * n + n0 + j];
                for (int p = 0; p < m; ++p) {
                    const S* brow = b + size_t(p) * n + n0;
                    const S* arow = a + size_t(p) * k + k0;
                    for (int i = 0; i < kGemmMr; ++i) {
                        S av = arow[i];
                        for (int j = 0; j < kGemmNr; ++j) acc[i][j] += av * brow[j];
                    }
                }
                for (int i = 0; i < kGemmMr; ++i)
                    for (int j = 0; j < kGemmNr; ++j) c[size_t(k0 + i) * n + n0 + j] = acc[i][j];
            } else {
                for (int p = 0; p < m; ++p) {
                    const S* brow = b + size_t(p) * n + n0;
                    const S* arow = a + size_t(p) * k + k0;
                    for (int i = 0; i < kr; ++i) {
                        S av = arow[i];
                        S* crow = c + size_t(k0 + i) * n + n0;
                        for (int j = 0; j < nr; ++j) crow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

inline constexpr int kDotLanes = 16;

// Lane-split dot product; deterministic fold order.
template <typename S>
S dot_lanes(const S* a, const S* b, int n) {
    S lanes[kDotLanes] = {};
    int n0 = n - n % kDotLanes;
    for (int i = 0; i < n0; i += kDotLanes)
        for (int l = 0; l < kDotLanes; ++l) lanes[l] += a[i + l] * b[i + l];
    S tail = S(0);
    for (int i = n0; i < n; ++i) tail += a[i] * b[i];
    S sum = S(0);
    for (int l = 0; l < kDotLanes; ++l) sum += lanes[l];
    return sum + tail;
}

// C[M x K] += A[M x N] * B[K x N]^T  (rows of A dotted with rows of B).
template <typename S>
void gemm_nt(S* c, const S* a, const S* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
            c[size_t(i) * k + j] += dot_lanes(a + size_t(i) * n, b + size_t(j) * n, n);
}

// Lane-split sum; deterministic fold order.
template <typename S>
S sum_lanes(const S* a, size_t n) {
    S lanes[kDotLanes] = {};
    size_t n0 = n - n % kDotLanes;
    for (size_t i = 0; i < n0; i += kDotLanes)
        for (int l = 0; l < kDotLanes; ++l) lanes[l] += a[i + l];
    S tail = S(0);
    for (size_t i = n0; i < n; ++i) tail += a[i];
    S sum = S(0);
    for (int l = 0; l < kDotLanes; ++l) sum += lanes[l];
    return sum + tail;
}

}  // namespace ncd::detail
