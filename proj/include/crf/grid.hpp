#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "crf/core.hpp"

namespace crf {

enum class DiffMode { spectral, fd4 };

inline std::string to_string(DiffMode m) {
    return m == DiffMode::spectral ? "spectral" : "fd4";
}

/// Periodic lattice on the fundamental domain [0,1)^{2n} of ℂⁿ.
///
/// Real axes are ordered (x₁, y₁, x₂, y₂) with z_k = x_k + i y_k; the flat
/// index is row-major with axis 0 slowest.
class GridChart {
public:
    static constexpr double period = 1.0;

    GridChart() = default;
    GridChart(int complex_dim, int resolution, DiffMode mode = DiffMode::spectral)
        : n_(complex_dim), res_(resolution), mode_(mode) {
        if (n_ != 1 && n_ != 2)
            throw InvalidInput("complex dimension must be 1 or 2");
        if (res_ < 16 || res_ % 2 != 0)
            throw InvalidInput("resolution must be even and >= 16");
        size_ = 1;
        for (int a = 0; a < real_dim(); ++a) size_ *= static_cast<std::size_t>(res_);
    }

    int complex_dim() const { return n_; }
    int resolution() const { return res_; }
    int real_dim() const { return 2 * n_; }
    DiffMode mode() const { return mode_; }
    std::size_t size() const { return size_; }
    double spacing() const { return period / res_; }
    /// Euclidean volume of one cell.
    double cell_volume() const { return std::pow(spacing(), real_dim()); }

    std::array<int, 4> multi_index(std::size_t p) const {
        std::array<int, 4> idx{0, 0, 0, 0};
        for (int a = real_dim() - 1; a >= 0; --a) {
            idx[a] = static_cast<int>(p % res_);
            p /= res_;
        }
        return idx;
    }

    std::size_t flat_index(const std::array<int, 4>& idx) const {
        std::size_t p = 0;
        for (int a = 0; a < real_dim(); ++a) {
            int i = ((idx[a] % res_) + res_) % res_;
            p = p * res_ + static_cast<std::size_t>(i);
        }
        return p;
    }

    double coord(std::size_t p, int axis) const {
        return multi_index(p)[axis] * spacing();
    }

    /// Periodic distance to the slice {z₁ = 0} (the pole set of the barrier).
    double distance_to_pole(std::size_t p) const {
        auto idx = multi_index(p);
        double d2 = 0.0;
        for (int a = 0; a < 2; ++a) {
            double x = idx[a] * spacing();
            x = std::min(x, period - x);
            d2 += x * x;
        }
        return std::sqrt(d2);
    }

    bool operator==(const GridChart& o) const {
        return n_ == o.n_ && res_ == o.res_ && mode_ == o.mode_;
    }

private:
    int n_ = 1;
    int res_ = 16;
    DiffMode mode_ = DiffMode::spectral;
    std::size_t size_ = 256;
};

/// Per-point exclusion flags (1 = excluded from reductions). Empty = none.
using Mask = std::vector<std::uint8_t>;

inline bool excluded(const Mask& m, std::size_t p) { return !m.empty() && m[p]; }

/// Mask of points within `radius` of the pole slice.
inline Mask pole_mask(const GridChart& chart, double radius) {
    Mask m(chart.size(), 0);
    for (std::size_t p = 0; p < chart.size(); ++p)
        m[p] = chart.distance_to_pole(p) <= radius + 1e-12 ? 1 : 0;
    return m;
}

// ── Masked reductions ────────────────────────────────────────────────────────

inline double masked_sup(std::span<const double> v, const Mask& m = {}) {
    double s = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < v.size(); ++p)
        if (!excluded(m, p)) s = std::max(s, v[p]);
    return s;
}

inline double masked_inf(std::span<const double> v, const Mask& m = {}) {
    double s = std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < v.size(); ++p)
        if (!excluded(m, p)) s = std::min(s, v[p]);
    return s;
}

inline double masked_sup_abs(std::span<const double> v, const Mask& m = {}) {
    double s = 0.0;
    for (std::size_t p = 0; p < v.size(); ++p)
        if (!excluded(m, p)) s = std::max(s, std::abs(v[p]));
    return s;
}

inline std::size_t masked_argmax(std::span<const double> v, const Mask& m = {}) {
    std::size_t best = 0;
    double s = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < v.size(); ++p)
        if (!excluded(m, p) && v[p] > s) {
            s = v[p];
            best = p;
        }
    return best;
}

/// Trapezoidal (= rectangle, periodic) integral over the fundamental domain.
inline double integrate(const GridChart& chart, std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s * chart.cell_volume();
}

}  // namespace crf
