#pragma once

#include <cstddef>
#include <vector>

#include "tandem/rng.hpp"
#include "tandem/util.hpp"

namespace tandem {

// Parameter tensors carry their gradient buffer; activations are plain
// std::vector<T> scratch managed by the forward/backward caches.

template <typename T>
struct Vec {
    int n = 0;
    std::vector<T> w, g;

    Vec() = default;
    explicit Vec(int n_) { resize(n_); }
    void resize(int n_) {
        n = n_;
        w.assign(size_t(n), T(0));
        g.assign(size_t(n), T(0));
    }
    size_t size() const { return size_t(n); }
};

template <typename T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> w, g;

    Mat() = default;
    Mat(int r, int c) { resize(r, c); }
    void resize(int r, int c) {
        rows = r;
        cols = c;
        w.assign(size_t(r) * c, T(0));
        g.assign(size_t(r) * c, T(0));
    }
    T* row(int r) { return w.data() + size_t(r) * cols; }
    const T* row(int r) const { return w.data() + size_t(r) * cols; }
    T* grow(int r) { return g.data() + size_t(r) * cols; }
    size_t size() const { return size_t(rows) * cols; }

    void fill_normal(Rng& rng, double std_dev) {
        for (auto& v : w) v = T(rng.normal() * std_dev);
    }
    void fill_uniform(Rng& rng, double lo, double hi) {
        for (auto& v : w) v = T(rng.uniform(lo, hi));
    }
};

// ---- kernels ----------------------------------------------------------

// omp simd pragmas license the reassociation the vectorizer needs for
// reductions; they are inert (and the code stays correct) without
// -fopenmp-simd.
template <typename T>
inline T dot(const T* __restrict a, const T* __restrict b, int n) {
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; i++) acc += a[i] * b[i];
    return acc;
}

template <typename T>
inline void axpy(T* __restrict y, T a, const T* __restrict x, int n) {
    for (int i = 0; i < n; i++) y[i] += a * x[i];
}

template <typename T>
inline void scale(T* p, T a, int n) {
    for (int i = 0; i < n; i++) p[i] *= a;
}

// out[m] (+)= W[m x n] @ x, W row-major
template <typename T>
inline void matvec(T* __restrict out, const T* __restrict w, const T* __restrict x,
                   int m, int n, bool accumulate = false) {
    for (int i = 0; i < m; i++) {
        T v = dot(w + size_t(i) * n, x, n);
        out[i] = accumulate ? out[i] + v : v;
    }
}

// out[n] += W^T @ y, W row-major [m x n].  Four rows per pass so each out[]
// element is loaded/stored once per four y terms.
template <typename T>
inline void matvec_t(T* __restrict out, const T* __restrict w, const T* __restrict y,
                     int m, int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* w0 = w + size_t(i) * n;
        const T* w1 = w0 + n;
        const T* w2 = w1 + n;
        const T* w3 = w2 + n;
        T y0 = y[i], y1 = y[i + 1], y2 = y[i + 2], y3 = y[i + 3];
        for (int j = 0; j < n; j++)
            out[j] += y0 * w0[j] + y1 * w1[j] + y2 * w2[j] + y3 * w3[j];
    }
    for (; i < m; i++) axpy(out, y[i], w + size_t(i) * n, n);
}

// W[m x n] += y (outer) x
template <typename T>
inline void rank1_update(T* __restrict w, const T* __restrict y, const T* __restrict x,
                         int m, int n) {
    for (int i = 0; i < m; i++) axpy(w + size_t(i) * n, y[i], x, n);
}

// C[M x N] (+)= A[M x K] @ B[N x K]^T.  B's rows are the output features, so
// a dot-product loop over them leaves the vector lanes idle.  Instead the
// vector dimension is M: A is transposed once into K-major lane blocks (a
// tiny pack, amortized over all N outputs), and for each output feature the
// kernel broadcasts B elements against whole lane blocks of A — every FMA
// fills a full register, B streams contiguously, and C is written once.
template <typename T>
inline void gemm_nt(T* __restrict c, const T* __restrict a, const T* __restrict b,
                    int m, int k, int n, bool accumulate = false) {
    if (m == 1) {  // single row degenerates to a matvec; skip the pack
        matvec(c, b, a, n, k, accumulate);
        return;
    }
    constexpr int PW = 16, CHUNK = 2 * PW;  // M-lanes per pass: two registers' worth
    static thread_local std::vector<T> at_pack;  // A^T for one chunk, K x CHUNK
    at_pack.resize(size_t(k) * CHUNK);
    T* __restrict atp = at_pack.data();
    for (int i0 = 0; i0 < m; i0 += CHUNK) {
        int iw = std::min(CHUNK, m - i0);
        if (iw < CHUNK) std::fill(atp, atp + size_t(k) * CHUNK, T(0));
        for (int i = 0; i < iw; i++) {
            const T* ai = a + size_t(i0 + i) * k;
            for (int p = 0; p < k; p++) atp[size_t(p) * CHUNK + i] = ai[p];
        }
        for (int j = 0; j < n; j++) {
            const T* bj = b + size_t(j) * k;
            T acc0[PW] = {}, acc1[PW] = {};
            for (int p = 0; p < k; p++) {
                const T* ap = atp + size_t(p) * CHUNK;
                T bjp = bj[p];
#pragma omp simd
                for (int l = 0; l < PW; l++) {
                    acc0[l] += bjp * ap[l];
                    acc1[l] += bjp * ap[PW + l];
                }
            }
            if (accumulate) {
                for (int i = 0; i < iw; i++)
                    c[size_t(i0 + i) * n + j] += i < PW ? acc0[i] : acc1[i - PW];
            } else {
                for (int i = 0; i < iw; i++)
                    c[size_t(i0 + i) * n + j] = i < PW ? acc0[i] : acc1[i - PW];
            }
        }
    }
}

// C[M x N] += A[M x K] @ B[K x N], both row-major.  Register-tiled: a 4-row x
// 16-column block of C lives in accumulators across the whole K walk, so C is
// touched exactly once and B is streamed one 16-wide column panel at a time
// (consecutive K-rows of a panel are a constant-stride walk the prefetcher
// likes).
template <typename T>
inline void gemm_nn(T* __restrict c, const T* __restrict a, const T* __restrict b,
                    int m, int k, int n) {
    constexpr int PW = 16;
    for (int j0 = 0; j0 < n; j0 += PW) {
        int jw = std::min(PW, n - j0);
        const T* bj = b + j0;
        int i = 0;
        for (; i + 4 <= m; i += 4) {
            const T* a0 = a + size_t(i) * k;
            const T* a1 = a0 + k;
            const T* a2 = a1 + k;
            const T* a3 = a2 + k;
            T acc0[PW] = {}, acc1[PW] = {}, acc2[PW] = {}, acc3[PW] = {};
            for (int p = 0; p < k; p++) {
                const T* bp = bj + size_t(p) * n;
                T a0p = a0[p], a1p = a1[p], a2p = a2[p], a3p = a3[p];
                if (a0p == T(0) && a1p == T(0) && a2p == T(0) && a3p == T(0)) continue;
#pragma omp simd
                for (int j = 0; j < jw; j++) {
                    T bpj = bp[j];
                    acc0[j] += a0p * bpj;
                    acc1[j] += a1p * bpj;
                    acc2[j] += a2p * bpj;
                    acc3[j] += a3p * bpj;
                }
            }
            T* c0 = c + size_t(i) * n + j0;
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            for (int j = 0; j < jw; j++) {
                c0[j] += acc0[j];
                c1[j] += acc1[j];
                c2[j] += acc2[j];
                c3[j] += acc3[j];
            }
        }
        for (; i < m; i++) {
            const T* ai = a + size_t(i) * k;
            T acc[PW] = {};
            for (int p = 0; p < k; p++) {
                T aip = ai[p];
                if (aip == T(0)) continue;
                const T* bp = bj + size_t(p) * n;
#pragma omp simd
                for (int j = 0; j < jw; j++) acc[j] += aip * bp[j];
            }
            T* ci = c + size_t(i) * n + j0;
            for (int j = 0; j < jw; j++) ci[j] += acc[j];
        }
    }
}

// C[O x N] += A[M x O]^T @ B[M x N]   (sums over the leading M dimension;
// this is the dW accumulation shape).  Training feeds t-major gradients here
// whose unsupervised rows are all zero, so the active rows are compacted
// first: A^T is packed over them and B's panel rows gathered, after which a
// 4-row register kernel writes each C element exactly once.
template <typename T>
inline void gemm_tn(T* __restrict c, const T* __restrict a, const T* __restrict b,
                    int m, int o, int n) {
    static thread_local std::vector<int> active;
    active.clear();
    for (int t = 0; t < m; t++) {
        const T* at = a + size_t(t) * o;
        for (int i = 0; i < o; i++)
            if (at[i] != T(0)) {
                active.push_back(t);
                break;
            }
    }
    int s_n = int(active.size());
    if (s_n == 0) return;
    static thread_local std::vector<T> at_pack, b_panel;
    at_pack.resize(size_t(o) * s_n);
    T* __restrict atp = at_pack.data();
    for (int s = 0; s < s_n; s++) {
        const T* at = a + size_t(active[size_t(s)]) * o;
        for (int i = 0; i < o; i++) atp[size_t(i) * s_n + s] = at[i];
    }
    constexpr int PW = 16;
    b_panel.resize(size_t(s_n) * PW);
    T* __restrict bp = b_panel.data();
    for (int j0 = 0; j0 < n; j0 += PW) {
        int jw = std::min(PW, n - j0);
        for (int s = 0; s < s_n; s++) {
            const T* bt = b + size_t(active[size_t(s)]) * n + j0;
            T* dst = bp + size_t(s) * PW;
            for (int j = 0; j < jw; j++) dst[j] = bt[j];
            for (int j = jw; j < PW; j++) dst[j] = T(0);
        }
        int i = 0;
        for (; i + 4 <= o; i += 4) {
            const T* a0 = atp + size_t(i) * s_n;
            const T* a1 = a0 + s_n;
            const T* a2 = a1 + s_n;
            const T* a3 = a2 + s_n;
            T acc0[PW] = {}, acc1[PW] = {}, acc2[PW] = {}, acc3[PW] = {};
            for (int s = 0; s < s_n; s++) {
                const T* bv = bp + size_t(s) * PW;
                T a0s = a0[s], a1s = a1[s], a2s = a2[s], a3s = a3[s];
#pragma omp simd
                for (int j = 0; j < PW; j++) {
                    T bj = bv[j];
                    acc0[j] += a0s * bj;
                    acc1[j] += a1s * bj;
                    acc2[j] += a2s * bj;
                    acc3[j] += a3s * bj;
                }
            }
            T* c0 = c + size_t(i) * n + j0;
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            for (int j = 0; j < jw; j++) {
                c0[j] += acc0[j];
                c1[j] += acc1[j];
                c2[j] += acc2[j];
                c3[j] += acc3[j];
            }
        }
        for (; i < o; i++) {
            const T* ai = atp + size_t(i) * s_n;
            T acc[PW] = {};
            for (int s = 0; s < s_n; s++) {
                const T* bv = bp + size_t(s) * PW;
                T ais = ai[s];
#pragma omp simd
                for (int j = 0; j < PW; j++) acc[j] += ais * bv[j];
            }
            T* ci = c + size_t(i) * n + j0;
            for (int j = 0; j < jw; j++) ci[j] += acc[j];
        }
    }
}

template <typename T>
inline T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu_grad(T x) {
    T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
inline T softplus(T x) {
    // overflow-safe: softplus(x) = max(x,0) + log1p(exp(-|x|))
    T m = x > T(0) ? x : T(0);
    return m + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace tandem
