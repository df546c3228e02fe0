#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace parq::linalg {

// Small dense matrices only; everything here is O(n^3) with n up to a few
// dozen (feature dimensions), never the state-space size.
struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const {
        return a[static_cast<std::size_t>(i) * cols + j];
    }
};

struct SingularMatrixError : std::runtime_error {
    int column;
    SingularMatrixError(const std::string& msg, int col)
        : std::runtime_error(msg), column(col) {}
};

namespace detail {
inline double max_abs(const Matrix& m) {
    double v = 0.0;
    for (double x : m.a) v = std::max(v, std::abs(x));
    return v;
}
}  // namespace detail

/// Solve A x = b by Gaussian elimination with partial pivoting. Throws
/// SingularMatrixError naming the deficient column.
inline std::vector<double> solve(Matrix A, std::vector<double> b) {
    const int n = A.rows;
    if (A.cols != n || static_cast<int>(b.size()) != n)
        throw std::invalid_argument("linalg::solve: dimension mismatch");
    const double tol = 1e-13 * std::max(detail::max_abs(A), 1e-300);
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A(r, col)) > std::abs(A(piv, col))) piv = r;
        if (std::abs(A(piv, col)) <= tol)
            throw SingularMatrixError(
                "linalg::solve: singular matrix, pivot column " + std::to_string(col),
                col);
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(A(piv, c), A(col, c));
            std::swap(b[piv], b[col]);
        }
        for (int r = col + 1; r < n; ++r) {
            const double f = A(r, col) / A(col, col);
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) A(r, c) -= f * A(col, c);
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(static_cast<std::size_t>(n), 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double s = b[r];
        for (int c = r + 1; c < n; ++c) s -= A(r, c) * x[c];
        x[r] = s / A(r, r);
    }
    return x;
}

/// Gauss-Jordan inverse; same pivoting and failure behavior as solve().
inline Matrix inverse(Matrix A) {
    const int n = A.rows;
    if (A.cols != n) throw std::invalid_argument("linalg::inverse: matrix not square");
    Matrix inv(n, n);
    for (int i = 0; i < n; ++i) inv(i, i) = 1.0;
    const double tol = 1e-13 * std::max(detail::max_abs(A), 1e-300);
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A(r, col)) > std::abs(A(piv, col))) piv = r;
        if (std::abs(A(piv, col)) <= tol)
            throw SingularMatrixError(
                "linalg::inverse: singular matrix, pivot column " + std::to_string(col),
                col);
        if (piv != col)
            for (int c = 0; c < n; ++c) {
                std::swap(A(piv, c), A(col, c));
                std::swap(inv(piv, c), inv(col, c));
            }
        const double d = A(col, col);
        for (int c = 0; c < n; ++c) {
            A(col, c) /= d;
            inv(col, c) /= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = A(r, col);
            if (f == 0.0) continue;
            for (int c = 0; c < n; ++c) {
                A(r, c) -= f * A(col, c);
                inv(r, c) -= f * inv(col, c);
            }
        }
    }
    return inv;
}

inline double norm_1(const Matrix& m) {
    double best = 0.0;
    for (int c = 0; c < m.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < m.rows; ++r) s += std::abs(m(r, c));
        best = std::max(best, s);
    }
    return best;
}

/// 1-norm condition estimate via the explicit inverse.
inline double condition_1(const Matrix& m) { return norm_1(m) * norm_1(inverse(m)); }

}  // namespace parq::linalg
