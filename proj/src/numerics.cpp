#include "verifscope/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace verifscope {

float dot(const float* a, const float* b, int n) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
    }
    for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
    float s01 = acc[0] + acc[1];
    float s23 = acc[2] + acc[3];
    float s45 = acc[4] + acc[5];
    float s67 = acc[6] + acc[7];
    return (s01 + s23) + (s45 + s67);
}

void axpy(float* y, float s, const float* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += s * x[i];
}

namespace {

// Column tile sized so a 4-row accumulator block stays in vector registers.
constexpr int kTileJ = 64;

// c[r][j0..j0+tj) = sum_k x_r[k] * w[k][j0+j] for four rows at once, with the
// sum for every element taken in ascending-k order (bit-identical to a
// scalar per-row loop). Accumulators live on the stack for the whole k loop,
// which is what makes this fast.
template <int R>
void gemm_tile(const float* const* xr, const float* w, int rows, int cols, int j0,
               int tj, float* const* cr) {
    float acc[R][kTileJ];
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < kTileJ; ++j) acc[r][j] = 0.0f;
    if (tj == kTileJ) {
        for (int k = 0; k < rows; ++k) {
            const float* __restrict wr = w + static_cast<size_t>(k) * cols + j0;
            for (int r = 0; r < R; ++r) {
                const float s = xr[r][k];
                float* __restrict ar = acc[r];
                for (int j = 0; j < kTileJ; ++j) ar[j] += s * wr[j];
            }
        }
    } else {
        for (int k = 0; k < rows; ++k) {
            const float* __restrict wr = w + static_cast<size_t>(k) * cols + j0;
            for (int r = 0; r < R; ++r) {
                const float s = xr[r][k];
                float* __restrict ar = acc[r];
                for (int j = 0; j < tj; ++j) ar[j] += s * wr[j];
            }
        }
    }
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < tj; ++j) cr[r][j0 + j] += acc[r][j];
}

}  // namespace

void matmul_into(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols) {
        throw VsError(ErrorKind::Shape, "matmul_into: shape mismatch");
    }
    const int cols = b.cols;
    for (int j0 = 0; j0 < cols; j0 += kTileJ) {
        const int tj = std::min(kTileJ, cols - j0);
        int i = 0;
        for (; i + 4 <= a.rows; i += 4) {
            const float* xr[4] = {a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)};
            float* cr[4] = {c.row(i), c.row(i + 1), c.row(i + 2), c.row(i + 3)};
            gemm_tile<4>(xr, b.data.data(), a.cols, cols, j0, tj, cr);
        }
        for (; i < a.rows; ++i) {
            const float* xr[1] = {a.row(i)};
            float* cr[1] = {c.row(i)};
            gemm_tile<1>(xr, b.data.data(), a.cols, cols, j0, tj, cr);
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw VsError(ErrorKind::Shape, "matmul: inner dimensions differ (" +
                                            std::to_string(a.cols) + " vs " +
                                            std::to_string(b.rows) + ")");
    }
    Matrix c(a.rows, b.cols);
    matmul_into(a, b, c);
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

void softmax_inplace(float* row, int n) {
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    float inv = 1.0f / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out = m;
    for (int i = 0; i < out.rows; ++i) softmax_inplace(out.row(i), out.cols);
    return out;
}

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

float silu(float x) { return x * sigmoid(x); }

Vector silu(const Vector& x) {
    Vector out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
    return out;
}

float silu_grad(float x) {
    float s = sigmoid(x);
    return s * (1.0f + x * (1.0f - s));
}

float norm2(const float* a, int n) { return std::sqrt(dot(a, a, n)); }

float cosine_sim(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) {
        throw VsError(ErrorKind::Shape, "cosine_sim: dimension mismatch");
    }
    int n = static_cast<int>(a.size());
    float na = norm2(a.data(), n);
    float nb = norm2(b.data(), n);
    if (na == 0.0f || nb == 0.0f) {
        throw VsError(ErrorKind::Numerical, "cosine_sim: zero vector");
    }
    float c = dot(a.data(), b.data(), n) / (na * nb);
    return std::clamp(c, -1.0f, 1.0f);
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (float v : m.data) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

namespace {

// Cholesky solve of (A + ridge I) X = B with A symmetric p x p, in double.
std::vector<double> cholesky_solve(std::vector<double> a, int p, std::vector<double> b,
                                   int q) {
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i) * p + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<size_t>(i) * p + k] * a[static_cast<size_t>(j) * p + k];
            if (i == j) {
                if (s <= 0.0) {
                    throw VsError(ErrorKind::Numerical,
                                  "least_squares_fit: normal equations not positive "
                                  "definite (rank deficiency beyond ridge rescue)");
                }
                a[static_cast<size_t>(i) * p + j] = std::sqrt(s);
            } else {
                a[static_cast<size_t>(i) * p + j] = s / a[static_cast<size_t>(j) * p + j];
            }
        }
    }
    // Forward then backward substitution, column by column of B.
    for (int c = 0; c < q; ++c) {
        for (int i = 0; i < p; ++i) {
            double s = b[static_cast<size_t>(i) * q + c];
            for (int k = 0; k < i; ++k)
                s -= a[static_cast<size_t>(i) * p + k] * b[static_cast<size_t>(k) * q + c];
            b[static_cast<size_t>(i) * q + c] = s / a[static_cast<size_t>(i) * p + i];
        }
        for (int i = p - 1; i >= 0; --i) {
            double s = b[static_cast<size_t>(i) * q + c];
            for (int k = i + 1; k < p; ++k)
                s -= a[static_cast<size_t>(k) * p + i] * b[static_cast<size_t>(k) * q + c];
            b[static_cast<size_t>(i) * q + c] = s / a[static_cast<size_t>(i) * p + i];
        }
    }
    return b;
}

}  // namespace

Matrix least_squares_fit(const Matrix& source, const Matrix& target, float ridge) {
    if (source.rows != target.rows) {
        throw VsError(ErrorKind::Shape, "least_squares_fit: row counts differ");
    }
    const int n = source.rows;
    const int p = source.cols;
    const int q = target.cols;
    // Gram matrix S^T S (+ ridge) and S^T G, accumulated in double.
    std::vector<double> gram(static_cast<size_t>(p) * p, 0.0);
    std::vector<double> rhs(static_cast<size_t>(p) * q, 0.0);
    for (int t = 0; t < n; ++t) {
        const float* s = source.row(t);
        const float* g = target.row(t);
        for (int i = 0; i < p; ++i) {
            double si = s[i];
            for (int j = 0; j < p; ++j) gram[static_cast<size_t>(i) * p + j] += si * s[j];
            for (int j = 0; j < q; ++j) rhs[static_cast<size_t>(i) * q + j] += si * g[j];
        }
    }
    for (int i = 0; i < p; ++i) gram[static_cast<size_t>(i) * p + i] += ridge;
    std::vector<double> tt = cholesky_solve(std::move(gram), p, std::move(rhs), q);
    // tt holds T^T (p x q); return T (q x p).
    Matrix t(q, p);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < q; ++j)
            t.at(j, i) = static_cast<float>(tt[static_cast<size_t>(i) * q + j]);
    for (float v : t.data) {
        if (!std::isfinite(v)) {
            throw VsError(ErrorKind::Numerical, "least_squares_fit: non-finite solution");
        }
    }
    return t;
}

}  // namespace verifscope
