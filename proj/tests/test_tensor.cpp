#include <catch2/catch_amalgamated.hpp>

#include "tandem/rng.hpp"
#include "tandem/tensor.hpp"

using namespace tandem;

namespace {

// naive reference products the blocked kernels are checked against
template <typename T>
void ref_gemm_nt(T* c, const T* a, const T* b, int m, int k, int n) {
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) {
            T s = 0;
            for (int p = 0; p < k; p++) s += a[i * k + p] * b[j * k + p];
            c[i * n + j] = s;
        }
}

}  // namespace

TEST_CASE("gemm_nt matches a naive triple loop across odd shapes") {
    Rng rng(11);
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, std::tuple{3, 5, 7}, std::tuple{8, 16, 4},
                           std::tuple{5, 33, 9}, std::tuple{17, 8, 17}}) {
        std::vector<float> a(size_t(m) * k), b(size_t(n) * k);
        for (auto& v : a) v = float(rng.normal());
        for (auto& v : b) v = float(rng.normal());
        std::vector<float> got(size_t(m) * n, -1), want(size_t(m) * n);
        gemm_nt(got.data(), a.data(), b.data(), m, k, n);
        ref_gemm_nt(want.data(), a.data(), b.data(), m, k, n);
        for (size_t i = 0; i < got.size(); i++)
            REQUIRE_THAT(got[i], Catch::Matchers::WithinRel(want[i], 1e-5f) ||
                                     Catch::Matchers::WithinAbs(want[i], 1e-6f));
    }
}

TEST_CASE("gemm_nt accumulate adds on top of existing values") {
    Rng rng(12);
    int m = 4, k = 6, n = 5;
    std::vector<float> a(size_t(m) * k), b(size_t(n) * k);
    for (auto& v : a) v = float(rng.normal());
    for (auto& v : b) v = float(rng.normal());
    std::vector<float> base(size_t(m) * n);
    for (auto& v : base) v = float(rng.normal());
    std::vector<float> got = base, want(size_t(m) * n);
    gemm_nt(got.data(), a.data(), b.data(), m, k, n, true);
    ref_gemm_nt(want.data(), a.data(), b.data(), m, k, n);
    for (size_t i = 0; i < got.size(); i++)
        REQUIRE_THAT(got[i], Catch::Matchers::WithinRel(base[i] + want[i], 1e-5f) ||
                                 Catch::Matchers::WithinAbs(base[i] + want[i], 1e-6f));
}

TEST_CASE("gemm_nn and gemm_tn agree with transposed references") {
    Rng rng(13);
    int m = 6, k = 9, n = 7;
    std::vector<double> a(size_t(m) * k), b(size_t(k) * n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();

    std::vector<double> got(size_t(m) * n, 0), want(size_t(m) * n, 0);
    gemm_nn(got.data(), a.data(), b.data(), m, k, n);
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++)
            for (int p = 0; p < k; p++) want[size_t(i) * n + j] += a[size_t(i) * k + p] * b[size_t(p) * n + j];
    for (size_t i = 0; i < got.size(); i++)
        REQUIRE_THAT(got[i], Catch::Matchers::WithinRel(want[i], 1e-12));

    // C[o x n] += A[m x o]^T B[m x n]
    int o = 5;
    std::vector<double> a2(size_t(m) * o), b2(size_t(m) * n);
    for (auto& v : a2) v = rng.normal();
    for (auto& v : b2) v = rng.normal();
    std::vector<double> got2(size_t(o) * n, 0), want2(size_t(o) * n, 0);
    gemm_tn(got2.data(), a2.data(), b2.data(), m, o, n);
    for (int t = 0; t < m; t++)
        for (int i = 0; i < o; i++)
            for (int j = 0; j < n; j++)
                want2[size_t(i) * n + j] += a2[size_t(t) * o + i] * b2[size_t(t) * n + j];
    for (size_t i = 0; i < got2.size(); i++)
        REQUIRE_THAT(got2[i], Catch::Matchers::WithinRel(want2[i], 1e-12));
}

TEST_CASE("matvec family round trip") {
    Rng rng(14);
    int m = 8, n = 5;
    std::vector<float> w(size_t(m) * n), x(static_cast<size_t>(n)), y(static_cast<size_t>(m));
    for (auto& v : w) v = float(rng.normal());
    for (auto& v : x) v = float(rng.normal());
    matvec(y.data(), w.data(), x.data(), m, n);
    for (int i = 0; i < m; i++) {
        float s = 0;
        for (int j = 0; j < n; j++) s += w[size_t(i) * n + j] * x[size_t(j)];
        REQUIRE_THAT(y[size_t(i)], Catch::Matchers::WithinRel(s, 1e-5f));
    }

    std::vector<float> xt(size_t(n), 0);
    matvec_t(xt.data(), w.data(), y.data(), m, n);
    for (int j = 0; j < n; j++) {
        float s = 0;
        for (int i = 0; i < m; i++) s += w[size_t(i) * n + j] * y[size_t(i)];
        REQUIRE_THAT(xt[size_t(j)], Catch::Matchers::WithinRel(s, 1e-5f));
    }
}

TEST_CASE("rng streams are deterministic and fork-independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; i++) REQUIRE(a.next_u64() == b.next_u64());

    Rng c(42);
    Rng f1 = c.fork(1), f2 = c.fork(2);
    bool differ = false;
    for (int i = 0; i < 16; i++) differ |= (f1.next_u64() != f2.next_u64());
    REQUIRE(differ);
}

TEST_CASE("normal samples have sane first moments") {
    Rng rng(7);
    double sum = 0, sq = 0;
    int n = 20000;
    for (int i = 0; i < n; i++) {
        double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    REQUIRE(std::abs(sum / n) < 0.05);
    REQUIRE(std::abs(sq / n - 1.0) < 0.05);
}
