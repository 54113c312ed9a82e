#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

#include "crf/core.hpp"

namespace crf {

/// n×n complex matrix at one grid point, n ∈ {1, 2}. Entry (i, j) is the
/// coefficient α_{i j̄} of √−1 α_{i j̄} dz^i ∧ dz̄^j.
struct HMat {
    int n = 1;
    std::array<cplx, 4> a{};

    HMat() = default;
    explicit HMat(int dim) : n(dim) {}

    static HMat identity(int dim, double s = 1.0) {
        HMat m(dim);
        for (int i = 0; i < dim; ++i) m(i, i) = s;
        return m;
    }

    cplx& operator()(int i, int j) { return a[2 * i + j]; }
    const cplx& operator()(int i, int j) const { return a[2 * i + j]; }

    HMat& operator+=(const HMat& o) {
        for (int k = 0; k < 4; ++k) a[k] += o.a[k];
        return *this;
    }
    HMat& operator-=(const HMat& o) {
        for (int k = 0; k < 4; ++k) a[k] -= o.a[k];
        return *this;
    }
    HMat& operator*=(cplx s) {
        for (auto& x : a) x *= s;
        return *this;
    }
    friend HMat operator+(HMat l, const HMat& r) { return l += r; }
    friend HMat operator-(HMat l, const HMat& r) { return l -= r; }
    friend HMat operator*(HMat l, cplx s) { return l *= s; }
    friend HMat operator*(cplx s, HMat l) { return l *= s; }
};

inline HMat matmul(const HMat& A, const HMat& B) {
    HMat C(A.n);
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) {
            cplx s = 0.0;
            for (int k = 0; k < A.n; ++k) s += A(i, k) * B(k, j);
            C(i, j) = s;
        }
    return C;
}

inline HMat adjoint(const HMat& A) {
    HMat C(A.n);
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) C(i, j) = std::conj(A(j, i));
    return C;
}

inline cplx trace(const HMat& A) {
    cplx s = 0.0;
    for (int i = 0; i < A.n; ++i) s += A(i, i);
    return s;
}

inline cplx det(const HMat& A) {
    return A.n == 1 ? A(0, 0) : A(0, 0) * A(1, 1) - A(0, 1) * A(1, 0);
}

inline double frobenius(const HMat& A) {
    double s = 0.0;
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) s += std::norm(A(i, j));
    return std::sqrt(s);
}

inline HMat inverse(const HMat& A) {
    HMat B(A.n);
    const cplx d = det(A);
    if (A.n == 1) {
        B(0, 0) = 1.0 / d;
    } else {
        B(0, 0) = A(1, 1) / d;
        B(1, 1) = A(0, 0) / d;
        B(0, 1) = -A(0, 1) / d;
        B(1, 0) = -A(1, 0) / d;
    }
    return B;
}

/// Hermitian part ½(A + A*), which also zeroes imaginary diagonal round-off.
inline HMat hermitian_part(const HMat& A) {
    HMat B(A.n);
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) B(i, j) = 0.5 * (A(i, j) + std::conj(A(j, i)));
    return B;
}

inline bool is_hermitian(const HMat& A, double rel_tol = 1e-12) {
    double diff = 0.0;
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) diff += std::norm(A(i, j) - std::conj(A(j, i)));
    return std::sqrt(diff) <= rel_tol * std::max(frobenius(A), 1e-300);
}

/// Eigenvalues (ascending) of the Hermitian matrix A.
inline std::pair<double, double> eigenvalues(const HMat& A) {
    if (A.n == 1) return {A(0, 0).real(), A(0, 0).real()};
    const double p = A(0, 0).real();
    const double q = A(1, 1).real();
    const double m = 0.5 * (p + q);
    const double r = std::sqrt(0.25 * (p - q) * (p - q) + std::norm(A(0, 1)));
    return {m - r, m + r};
}

/// Eigenvalues (ascending) of the pencil α − λ·base, base positive definite.
/// For n = 2 these are the roots of λ² − tr(base⁻¹α)λ + det α / det base.
inline std::pair<double, double> generalized_eigenvalues(const HMat& alpha, const HMat& base) {
    if (alpha.n == 1) {
        const double l = alpha(0, 0).real() / base(0, 0).real();
        return {l, l};
    }
    const double t = trace(matmul(inverse(base), alpha)).real();
    const double d = det(alpha).real() / det(base).real();
    const double disc = std::sqrt(std::max(0.25 * t * t - d, 0.0));
    const double big = 0.5 * t + (t >= 0.0 ? disc : -disc);
    // product of roots = d; take the well-conditioned root first
    double other = (big != 0.0) ? d / big : 0.5 * t - disc;
    return {std::min(big, other), std::max(big, other)};
}

/// 2-norm condition number of a positive definite Hermitian matrix.
inline double condition_number(const HMat& A) {
    auto [lo, hi] = eigenvalues(A);
    if (lo <= 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

inline double factorial(int n) { return n == 1 ? 1.0 : 2.0; }

}  // namespace crf
