#pragma once

#include <cstddef>
#include <vector>

#include "verifscope/common.hpp"

namespace verifscope {

using Vector = std::vector<float>;

// Dense row-major float matrix. All exported operations keep entries finite.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const float* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }
    float& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    float at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    Vector row_vec(int i) const { return Vector(row(i), row(i) + cols); }
    Vector col_vec(int j) const {
        Vector v(rows);
        for (int i = 0; i < rows; ++i) v[i] = at(i, j);
        return v;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Deterministic dot product: eight independent accumulator lanes merged in a
// fixed order. Vectorizes without -ffast-math and never reassociates.
float dot(const float* a, const float* b, int n);

// y += s * x, elementwise over n entries.
void axpy(float* y, float s, const float* x, int n);

// c = a * b, accumulation over the inner dimension in ascending order.
Matrix matmul(const Matrix& a, const Matrix& b);

// c += a @ b with every element accumulated in ascending-k order; the tiled
// kernel behind both this and matmul.
void matmul_into(const Matrix& a, const Matrix& b, Matrix& c);

Matrix transpose(const Matrix& m);

// Row-stable softmax (per-row max subtraction). Rows sum to 1 within 1e-6.
Matrix softmax_rows(const Matrix& m);
void softmax_inplace(float* row, int n);

float sigmoid(float x);
float silu(float x);
Vector silu(const Vector& x);
// d/dx [x * sigmoid(x)]
float silu_grad(float x);

float norm2(const float* a, int n);
float cosine_sim(const Vector& a, const Vector& b);

// Least squares: returns T (q x p) minimizing ||source * T^T - target||_F,
// where source is n x p and target is n x q. Ridge-regularized normal
// equations, Cholesky-solved with double accumulation.
Matrix least_squares_fit(const Matrix& source, const Matrix& target, float ridge = 1e-6f);

double frobenius_norm(const Matrix& m);

}  // namespace verifscope
