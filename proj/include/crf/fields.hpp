#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "crf/core.hpp"
#include "crf/grid.hpp"
#include "crf/pointwise.hpp"

namespace crf {

/// Real samples on a chart (φ, φ̇, ψ, θ, traces, ...).
struct ScalarField {
    GridChart chart;
    std::vector<double> v;

    ScalarField() = default;
    explicit ScalarField(const GridChart& c, double fill = 0.0) : chart(c), v(c.size(), fill) {}
    ScalarField(const GridChart& c, std::vector<double> values) : chart(c), v(std::move(values)) {
        if (v.size() != c.size()) throw InvalidInput("scalar field shape does not match chart");
    }

    template <class F>
    static ScalarField sample(const GridChart& c, F&& f) {
        ScalarField s(c);
        for (std::size_t p = 0; p < c.size(); ++p) {
            auto idx = c.multi_index(p);
            std::array<double, 4> x{};
            for (int a = 0; a < c.real_dim(); ++a) x[a] = idx[a] * c.spacing();
            s.v[p] = f(x);
        }
        return s;
    }

    std::size_t size() const { return v.size(); }
    double& operator[](std::size_t p) { return v[p]; }
    double operator[](std::size_t p) const { return v[p]; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

/// Complex samples (Christoffel components, derivatives of metric entries).
struct ComplexField {
    GridChart chart;
    std::vector<cplx> v;

    ComplexField() = default;
    explicit ComplexField(const GridChart& c) : chart(c), v(c.size()) {}
    ComplexField(const GridChart& c, std::vector<cplx> values) : chart(c), v(std::move(values)) {}
};

/// Coefficients α_{i j̄} of a real (1,1)-form, one n×n Hermitian matrix per point.
class Form11Field {
public:
    Form11Field() = default;
    explicit Form11Field(const GridChart& c)
        : chart_(c), c_(c.size() * c.complex_dim() * c.complex_dim()) {}

    template <class F>
    static Form11Field sample(const GridChart& c, F&& f) {
        Form11Field out(c);
        for (std::size_t p = 0; p < c.size(); ++p) {
            auto idx = c.multi_index(p);
            std::array<double, 4> x{};
            for (int a = 0; a < c.real_dim(); ++a) x[a] = idx[a] * c.spacing();
            out.set(p, f(x));
        }
        return out;
    }

    /// Constant form s·Id.
    static Form11Field identity(const GridChart& c, double s = 1.0) {
        Form11Field out(c);
        for (std::size_t p = 0; p < c.size(); ++p) out.set(p, HMat::identity(c.complex_dim(), s));
        return out;
    }

    const GridChart& chart() const { return chart_; }
    int dim() const { return chart_.complex_dim(); }
    /// Number of grid points with stored data (0 for a default-constructed field).
    std::size_t size() const { return c_.size() / static_cast<std::size_t>(dim() * dim()); }
    bool empty() const { return c_.empty(); }

    cplx& operator()(std::size_t p, int i, int j) { return c_[(p * dim() + i) * dim() + j]; }
    cplx operator()(std::size_t p, int i, int j) const { return c_[(p * dim() + i) * dim() + j]; }

    HMat at(std::size_t p) const {
        HMat m(dim());
        for (int i = 0; i < dim(); ++i)
            for (int j = 0; j < dim(); ++j) m(i, j) = (*this)(p, i, j);
        return m;
    }

    void set(std::size_t p, const HMat& m) {
        for (int i = 0; i < dim(); ++i)
            for (int j = 0; j < dim(); ++j) (*this)(p, i, j) = m(i, j);
    }

    /// Entry (i, j) over the whole grid.
    std::vector<cplx> component(int i, int j) const {
        std::vector<cplx> out(size());
        for (std::size_t p = 0; p < size(); ++p) out[p] = (*this)(p, i, j);
        return out;
    }

    void set_component(int i, int j, std::span<const cplx> values) {
        for (std::size_t p = 0; p < size(); ++p) (*this)(p, i, j) = values[p];
    }

    std::span<const cplx> raw() const { return c_; }
    std::span<cplx> raw() { return c_; }

    bool is_hermitian(double rel_tol = 1e-12) const {
        for (std::size_t p = 0; p < size(); ++p)
            if (!crf::is_hermitian(at(p), rel_tol)) return false;
        return true;
    }

    bool all_finite() const {
        for (const auto& x : c_)
            if (!std::isfinite(x.real()) || !std::isfinite(x.imag())) return false;
        return true;
    }

    Form11Field& operator+=(const Form11Field& o) {
        for (std::size_t k = 0; k < c_.size(); ++k) c_[k] += o.c_[k];
        return *this;
    }
    Form11Field& operator-=(const Form11Field& o) {
        for (std::size_t k = 0; k < c_.size(); ++k) c_[k] -= o.c_[k];
        return *this;
    }
    Form11Field& operator*=(double s) {
        for (auto& x : c_) x *= s;
        return *this;
    }
    friend Form11Field operator+(Form11Field l, const Form11Field& r) { return l += r; }
    friend Form11Field operator-(Form11Field l, const Form11Field& r) { return l -= r; }
    friend Form11Field operator*(Form11Field l, double s) { return l *= s; }
    friend Form11Field operator*(double s, Form11Field l) { return l *= s; }

    /// Sup over unmasked points of the Frobenius norm.
    double sup_norm(const Mask& m = {}) const {
        double s = 0.0;
        for (std::size_t p = 0; p < size(); ++p)
            if (!excluded(m, p)) s = std::max(s, frobenius(at(p)));
        return s;
    }

private:
    GridChart chart_;
    std::vector<cplx> c_;
};

/// Hermitian positive definite g_{i j̄}; construction rejects anything else.
class MetricField {
public:
    MetricField() = default;
    explicit MetricField(Form11Field f) : f_(std::move(f)) {
        for (std::size_t p = 0; p < f_.size(); ++p) {
            HMat m = f_.at(p);
            if (!crf::is_hermitian(m, 1e-10))
                throw DegenerateMetric("metric matrix is not Hermitian", p);
            auto [lo, hi] = eigenvalues(m);
            if (!(lo > 0.0) || !std::isfinite(hi))
                throw DegenerateMetric("metric is not positive definite (eigenvalue " +
                                           std::to_string(lo) + ")",
                                       p);
        }
    }

    const Form11Field& form() const { return f_; }
    const GridChart& chart() const { return f_.chart(); }
    int dim() const { return f_.dim(); }
    std::size_t size() const { return f_.size(); }
    HMat at(std::size_t p) const { return f_.at(p); }

private:
    Form11Field f_;
};

/// Positive density against the Euclidean volume element of the chart.
struct VolumeFormField {
    GridChart chart;
    std::vector<double> density;

    VolumeFormField() = default;
    VolumeFormField(const GridChart& c, std::vector<double> d) : chart(c), density(std::move(d)) {
        if (density.size() != c.size()) throw InvalidInput("volume form shape mismatch");
    }

    double total_mass() const { return integrate(chart, density); }
    bool positive() const {
        for (double x : density)
            if (!(x > 0.0) || !std::isfinite(x)) return false;
        return true;
    }
};

/// Tensor with one upper and two lower unbarred indices per point, stored as
/// X^k_{ij} at (p, k, i, j). Holds Christoffel symbols and torsion.
class Tensor3Field {
public:
    Tensor3Field() = default;
    explicit Tensor3Field(const GridChart& c)
        : chart_(c), c_(c.size() * c.complex_dim() * c.complex_dim() * c.complex_dim()) {}

    const GridChart& chart() const { return chart_; }
    int dim() const { return chart_.complex_dim(); }
    std::size_t size() const { return chart_.size(); }

    cplx& operator()(std::size_t p, int k, int i, int j) {
        return c_[((p * dim() + k) * dim() + i) * dim() + j];
    }
    cplx operator()(std::size_t p, int k, int i, int j) const {
        return c_[((p * dim() + k) * dim() + i) * dim() + j];
    }

    std::vector<cplx> component(int k, int i, int j) const {
        std::vector<cplx> out(size());
        for (std::size_t p = 0; p < size(); ++p) out[p] = (*this)(p, k, i, j);
        return out;
    }

    double sup_norm(const Mask& m = {}) const {
        double s = 0.0;
        const std::size_t per = static_cast<std::size_t>(dim() * dim() * dim());
        for (std::size_t p = 0; p < size(); ++p) {
            if (excluded(m, p)) continue;
            for (std::size_t q = 0; q < per; ++q) s = std::max(s, std::abs(c_[p * per + q]));
        }
        return s;
    }

private:
    GridChart chart_;
    std::vector<cplx> c_;
};

/// Γ^k_{ij} of the Chern connection.
using ChristoffelField = Tensor3Field;
/// T^k_{ij} = Γ^k_{ij} − Γ^k_{ji}.
using TorsionField = Tensor3Field;

/// R_{k l̄ i}{}^p stored at (p, k, l, i, pp).
class CurvatureField {
public:
    CurvatureField() = default;
    explicit CurvatureField(const GridChart& c)
        : chart_(c), c_(c.size() * static_cast<std::size_t>(std::pow(c.complex_dim(), 4))) {}

    const GridChart& chart() const { return chart_; }
    int dim() const { return chart_.complex_dim(); }
    std::size_t size() const { return chart_.size(); }

    cplx& operator()(std::size_t p, int k, int l, int i, int q) {
        return c_[(((p * dim() + k) * dim() + l) * dim() + i) * dim() + q];
    }
    cplx operator()(std::size_t p, int k, int l, int i, int q) const {
        return c_[(((p * dim() + k) * dim() + l) * dim() + i) * dim() + q];
    }

private:
    GridChart chart_;
    std::vector<cplx> c_;
};

}  // namespace crf
