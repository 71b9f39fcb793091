#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "verifscope/numerics.hpp"

using namespace verifscope;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, float scale = 1.0f) {
    Matrix m(r, c);
    for (float& x : m.data) x = scale * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
    return m;
}

// Plain-loop reference matmul (no blocking, double accumulation).
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
            out.at(i, j) = static_cast<float>(s);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("dot matches a plain accumulation loop") {
    Rng rng(42);
    for (int n : {1, 3, 7, 8, 9, 64, 111}) {
        std::vector<float> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = static_cast<float>(rng.uniform()) - 0.5f;
            b[i] = static_cast<float>(rng.uniform()) - 0.5f;
        }
        double ref = 0.0;
        for (int i = 0; i < n; ++i) ref += static_cast<double>(a[i]) * b[i];
        CHECK(dot(a.data(), b.data(), n) == doctest::Approx(ref).epsilon(1e-5));
    }
}

TEST_CASE("dot is deterministic across calls") {
    Rng rng(1);
    std::vector<float> a(1000), b(1000);
    for (int i = 0; i < 1000; ++i) {
        a[i] = static_cast<float>(rng.gaussian());
        b[i] = static_cast<float>(rng.gaussian());
    }
    float first = dot(a.data(), b.data(), 1000);
    for (int k = 0; k < 10; ++k) CHECK(dot(a.data(), b.data(), 1000) == first);
}

TEST_CASE("matmul matches naive reference and composes with transpose") {
    Rng rng(7);
    Matrix a = random_matrix(rng, 13, 9);
    Matrix b = random_matrix(rng, 9, 17);
    Matrix c = matmul(a, b);
    Matrix ref = naive_matmul(a, b);
    for (size_t i = 0; i < c.data.size(); ++i)
        CHECK(c.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-4));

    Matrix at = transpose(a);
    CHECK(at.rows == 9);
    CHECK(at.cols == 13);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) CHECK(at.at(j, i) == a.at(i, j));
}

TEST_CASE("matmul rejects mismatched shapes") {
    Matrix a(2, 3), b(4, 2);
    CHECK_THROWS_AS(matmul(a, b), VsError);
}

TEST_CASE("softmax rows are normalized and order-preserving") {
    Matrix m(2, 4);
    float vals[] = {1.0f, 2.0f, 3.0f, 4.0f, -1.0f, 0.0f, -3.0f, 2.0f};
    std::copy(vals, vals + 8, m.data.begin());
    Matrix s = softmax_rows(m);
    for (int i = 0; i < 2; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 4; ++j) sum += s.at(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(s.at(0, 3) > s.at(0, 2));
    CHECK(s.at(1, 3) > s.at(1, 1));
    // Shift invariance.
    Matrix shifted = m;
    for (int j = 0; j < 4; ++j) shifted.at(0, j) += 100.0f;
    Matrix s2 = softmax_rows(shifted);
    for (int j = 0; j < 4; ++j)
        CHECK(s2.at(0, j) == doctest::Approx(s.at(0, j)).epsilon(1e-5));
}

TEST_CASE("silu values and gradient") {
    CHECK(silu(0.0f) == 0.0f);
    CHECK(silu(1.0f) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    CHECK(silu(-1.0f) == doctest::Approx(-1.0 / (1.0 + std::exp(1.0))));
    // Known global minimum magnitude of silu on the negative axis.
    double max_abs = 0.0;
    for (int i = 1; i < 200000; ++i) {
        double a = -10.0 * i / 200000.0;
        max_abs = std::max(max_abs, std::abs(a / (1.0 + std::exp(-a))));
    }
    CHECK(max_abs == doctest::Approx(0.27846).epsilon(1e-3));
    // Gradient by finite differences.
    for (float x : {-3.0f, -0.5f, 0.0f, 0.7f, 2.0f}) {
        double eps = 1e-4;
        double num = (silu(static_cast<float>(x + eps)) - silu(static_cast<float>(x - eps))) /
                     (2 * eps);
        CHECK(silu_grad(x) == doctest::Approx(num).epsilon(1e-2));
    }
}

TEST_CASE("cosine similarity basics") {
    Vector a = {1, 0, 0}, b = {0, 1, 0}, c = {2, 0, 0};
    CHECK(cosine_sim(a, b) == doctest::Approx(0.0));
    CHECK(cosine_sim(a, c) == doctest::Approx(1.0));
    CHECK(cosine_sim(a, Vector{-1, 0, 0}) == doctest::Approx(-1.0));
}

TEST_CASE("least squares recovers a planted linear map") {
    Rng rng(11);
    const int n = 200, p = 8, q = 5;
    Matrix s = random_matrix(rng, n, p);
    Matrix t_true = random_matrix(rng, q, p);
    // target row = t_true applied to source row.
    Matrix g(n, q);
    for (int i = 0; i < n; ++i)
        for (int r = 0; r < q; ++r) g.at(i, r) = dot(t_true.row(r), s.row(i), p);
    Matrix t = least_squares_fit(s, g, 1e-8f);
    REQUIRE(t.rows == q);
    REQUIRE(t.cols == p);
    for (size_t i = 0; i < t.data.size(); ++i)
        CHECK(t.data[i] == doctest::Approx(t_true.data[i]).epsilon(1e-3));
}

TEST_CASE("frobenius norm") {
    Matrix m(2, 2);
    m.at(0, 0) = 3;
    m.at(1, 1) = 4;
    CHECK(frobenius_norm(m) == doctest::Approx(5.0));
}

TEST_CASE("rng determinism, fork independence, and bounds") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng base(5);
    Rng f1 = base.fork(1), f2 = base.fork(2);
    bool differ = false;
    for (int i = 0; i < 32; ++i) differ |= (f1.next_u64() != f2.next_u64());
    CHECK(differ);

    Rng r(9);
    for (int i = 0; i < 1000; ++i) {
        uint64_t v = r.uniform_int(3, 17);
        CHECK(v >= 3);
        CHECK(v <= 17);
    }
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("shuffle is a permutation and is seed-stable") {
    Rng r1(77), r2(77);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    std::vector<int> w = v;
    r1.shuffle(v);
    r2.shuffle(w);
    CHECK(v == w);
    std::set<int> seen(v.begin(), v.end());
    CHECK(seen.size() == 50);
}

TEST_CASE("parallel_for merge order is thread-count independent") {
    auto run = [&](const char* threads) {
        setenv("VERIFSCOPE_THREADS", threads, 1);
        std::vector<double> out(64, 0.0);
        parallel_for(64, [&](int i) { out[i] = std::sin(0.1 * i) * i; });
        double acc = 0.0;
        for (double x : out) acc += x;
        return acc;
    };
    double one = run("1");
    double four = run("4");
    unsetenv("VERIFSCOPE_THREADS");
    CHECK(one == four);
}
