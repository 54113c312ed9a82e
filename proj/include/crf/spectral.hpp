#pragma once

#include <fftw3.h>

#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>
#include <span>
#include <utility>
#include <vector>

#include "crf/core.hpp"
#include "crf/grid.hpp"

namespace crf {

/// One term coef · D_a D_b of a constant-coefficient derivative operator.
/// a = -1 is the identity, b = -1 a first derivative along a.
struct DerivTerm {
    cplx coef;
    int a = -1;
    int b = -1;
};
using DerivOp = std::vector<DerivTerm>;

namespace ops {

inline int x_axis(int k) { return 2 * k; }
inline int y_axis(int k) { return 2 * k + 1; }

/// ∂/∂z_k = ½(∂_x − i∂_y)
inline DerivOp dz(int k) {
    return {{cplx(0.5, 0.0), x_axis(k), -1}, {cplx(0.0, -0.5), y_axis(k), -1}};
}

/// ∂/∂z̄_k = ½(∂_x + i∂_y)
inline DerivOp dzbar(int k) {
    return {{cplx(0.5, 0.0), x_axis(k), -1}, {cplx(0.0, 0.5), y_axis(k), -1}};
}

/// ∂²/∂z_k∂z̄_l
inline DerivOp dz_dzbar(int k, int l) {
    if (k == l)
        return {{cplx(0.25, 0.0), x_axis(k), x_axis(k)},
                {cplx(0.25, 0.0), y_axis(k), y_axis(k)}};
    return {{cplx(0.25, 0.0), x_axis(k), x_axis(l)},
            {cplx(0.25, 0.0), y_axis(k), y_axis(l)},
            {cplx(0.0, 0.25), x_axis(k), y_axis(l)},
            {cplx(0.0, -0.25), y_axis(k), x_axis(l)}};
}

}  // namespace ops

/// Periodic differentiation on a GridChart.
///
/// Spectral mode multiplies Fourier coefficients by the exact symbol (odd
/// derivatives drop the Nyquist mode). fd4 mode applies 4th-order central
/// stencils in physical space; its Fourier symbol is still available for
/// the diagonal linear solves of the flow and Newton preconditioner.
class Differentiator {
public:
    explicit Differentiator(const GridChart& chart) : chart_(chart) {
        const int N = chart.resolution();
        const int d = chart.real_dim();
        kd_.resize(N);
        k2_.resize(N);
        for (int i = 0; i < N; ++i) {
            int w = i <= N / 2 ? i : i - N;
            kd_[i] = (i == N / 2) ? 0.0 : static_cast<double>(w);
            k2_[i] = static_cast<double>(w) * w;
        }
        mode_index_.resize(chart.size() * d);
        for (std::size_t p = 0; p < chart.size(); ++p) {
            auto idx = chart.multi_index(p);
            for (int a = 0; a < d; ++a)
                mode_index_[p * d + a] = static_cast<std::uint16_t>(idx[a]);
        }
        std::vector<int> dims(d, N);
        std::vector<cplx> a(chart.size()), b(chart.size());
        std::lock_guard<std::mutex> lock(planner_mutex());
        fwd_ = fftw_plan_dft(d, dims.data(), reinterpret_cast<fftw_complex*>(a.data()),
                             reinterpret_cast<fftw_complex*>(b.data()), FFTW_FORWARD,
                             FFTW_ESTIMATE | FFTW_UNALIGNED);
        inv_ = fftw_plan_dft(d, dims.data(), reinterpret_cast<fftw_complex*>(a.data()),
                             reinterpret_cast<fftw_complex*>(b.data()), FFTW_BACKWARD,
                             FFTW_ESTIMATE | FFTW_UNALIGNED);
        build_sigma();
    }

    ~Differentiator() {
        std::lock_guard<std::mutex> lock(planner_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(inv_);
    }

    Differentiator(const Differentiator&) = delete;
    Differentiator& operator=(const Differentiator&) = delete;

    /// Shared instance per (n, resolution, mode).
    static const Differentiator& get(const GridChart& chart) {
        static std::mutex m;
        static std::map<std::tuple<int, int, int>, std::unique_ptr<Differentiator>> cache;
        std::lock_guard<std::mutex> lock(m);
        auto key = std::make_tuple(chart.complex_dim(), chart.resolution(),
                                   static_cast<int>(chart.mode()));
        auto it = cache.find(key);
        if (it == cache.end())
            it = cache.emplace(key, std::make_unique<Differentiator>(chart)).first;
        return *it->second;
    }

    const GridChart& chart() const { return chart_; }

    std::vector<cplx> forward(std::span<const cplx> f) const {
        std::vector<cplx> out(f.size());
        fftw_execute_dft(fwd_, reinterpret_cast<fftw_complex*>(const_cast<cplx*>(f.data())),
                         reinterpret_cast<fftw_complex*>(out.data()));
        return out;
    }

    /// Normalized inverse transform.
    std::vector<cplx> inverse(std::span<const cplx> spec) const {
        std::vector<cplx> out(spec.size());
        fftw_execute_dft(inv_, reinterpret_cast<fftw_complex*>(const_cast<cplx*>(spec.data())),
                         reinterpret_cast<fftw_complex*>(out.data()));
        const double s = 1.0 / static_cast<double>(spec.size());
        for (auto& x : out) x *= s;
        return out;
    }

    std::vector<cplx> forward_real(std::span<const double> f) const {
        std::vector<cplx> c(f.begin(), f.end());
        return forward(c);
    }

    /// Fourier symbol of `op` at flat mode index p (mode-consistent).
    cplx symbol(const DerivOp& op, std::size_t p) const {
        cplx s = 0.0;
        for (const auto& t : op) s += t.coef * term_symbol(t, p);
        return s;
    }

    std::vector<cplx> apply(const DerivOp& op, std::span<const cplx> f) const {
        return std::move(apply_many({op}, f).front());
    }

    std::vector<cplx> apply(const DerivOp& op, std::span<const double> f) const {
        std::vector<cplx> c(f.begin(), f.end());
        return apply(op, c);
    }

    /// Applies several operators to the same field (one forward transform in
    /// spectral mode).
    std::vector<std::vector<cplx>> apply_many(const std::vector<DerivOp>& ops,
                                              std::span<const cplx> f) const {
        check_finite(f);
        std::vector<std::vector<cplx>> out;
        out.reserve(ops.size());
        if (chart_.mode() == DiffMode::spectral) {
            auto spec = forward(f);
            std::vector<cplx> work(spec.size());
            for (const auto& op : ops) {
                for (std::size_t p = 0; p < spec.size(); ++p) work[p] = symbol(op, p) * spec[p];
                out.push_back(inverse(work));
            }
        } else {
            for (const auto& op : ops) out.push_back(apply_fd(op, f));
        }
        return out;
    }

    /// Spectral coefficients multiplied by op's symbol, returned to physical space.
    std::vector<cplx> apply_spectrum(const DerivOp& op, std::span<const cplx> spec) const {
        std::vector<cplx> work(spec.size());
        for (std::size_t p = 0; p < spec.size(); ++p) work[p] = symbol(op, p) * spec[p];
        return inverse(work);
    }

    /// σ_p ≥ 0: symbol of −Σ_k ∂_k∂_{k̄} in the active differentiation mode.
    const std::vector<double>& sigma() const { return sigma_; }

    /// Largest σ over all modes (stiffness scale of the flat ∂∂̄-Laplacian).
    double sigma_max() const { return sigma_max_; }

private:
    static std::mutex& planner_mutex() {
        static std::mutex m;
        return m;
    }

    static void check_finite(std::span<const cplx> f) {
        for (const auto& x : f)
            if (!std::isfinite(x.real()) || !std::isfinite(x.imag()))
                throw InvalidInput("non-finite sample passed to differentiation");
    }

    // First-derivative symbol along one axis (per mode index i).
    cplx first_symbol(int i) const {
        const double h = chart_.spacing();
        if (chart_.mode() == DiffMode::spectral) return cplx(0.0, 2.0 * pi * kd_[i]);
        const double th = 2.0 * pi * kd_raw(i) * h;
        return cplx(0.0, (8.0 * std::sin(th) - std::sin(2.0 * th)) / (6.0 * h));
    }

    double second_symbol(int i) const {
        const double h = chart_.spacing();
        if (chart_.mode() == DiffMode::spectral) return -4.0 * pi * pi * k2_[i];
        const double th = 2.0 * pi * kd_raw(i) * h;
        return (32.0 * std::cos(th) - 2.0 * std::cos(2.0 * th) - 30.0) / (12.0 * h * h);
    }

    double kd_raw(int i) const {
        const int N = chart_.resolution();
        return i <= N / 2 ? i : i - N;
    }

    cplx term_symbol(const DerivTerm& t, std::size_t p) const {
        const int d = chart_.real_dim();
        if (t.a < 0) return 1.0;
        const int ia = mode_index_[p * d + t.a];
        if (t.b < 0) return first_symbol(ia);
        const int ib = mode_index_[p * d + t.b];
        if (t.a == t.b) return second_symbol(ia);
        return first_symbol(ia) * first_symbol(ib);
    }

    void build_sigma() {
        sigma_.assign(chart_.size(), 0.0);
        DerivOp lap;
        for (int k = 0; k < chart_.complex_dim(); ++k)
            for (const auto& t : ops::dz_dzbar(k, k)) lap.push_back(t);
        sigma_max_ = 0.0;
        for (std::size_t p = 0; p < chart_.size(); ++p) {
            sigma_[p] = -symbol(lap, p).real();
            sigma_max_ = std::max(sigma_max_, sigma_[p]);
        }
    }

    // ── fd4 stencils ──

    std::vector<cplx> shifted_sum(std::span<const cplx> f, int axis,
                                  const std::array<double, 5>& w) const {
        const int N = chart_.resolution();
        const int d = chart_.real_dim();
        std::size_t stride = 1;
        for (int a = d - 1; a > axis; --a) stride *= N;
        std::vector<cplx> out(f.size());
        for (std::size_t p = 0; p < f.size(); ++p) {
            const int i = static_cast<int>((p / stride) % N);
            const std::size_t base = p - static_cast<std::size_t>(i) * stride;
            cplx s = 0.0;
            for (int o = -2; o <= 2; ++o) {
                if (w[o + 2] == 0.0) continue;
                const int j = (i + o + N) % N;
                s += w[o + 2] * f[base + static_cast<std::size_t>(j) * stride];
            }
            out[p] = s;
        }
        return out;
    }

    std::vector<cplx> fd_first(std::span<const cplx> f, int axis) const {
        const double h = chart_.spacing();
        const double c = 1.0 / (12.0 * h);
        return shifted_sum(f, axis, {c, -8.0 * c, 0.0, 8.0 * c, -c});
    }

    std::vector<cplx> fd_second(std::span<const cplx> f, int axis) const {
        const double h = chart_.spacing();
        const double c = 1.0 / (12.0 * h * h);
        return shifted_sum(f, axis, {-c, 16.0 * c, -30.0 * c, 16.0 * c, -c});
    }

    std::vector<cplx> apply_fd(const DerivOp& op, std::span<const cplx> f) const {
        std::vector<cplx> out(f.size(), 0.0);
        for (const auto& t : op) {
            std::vector<cplx> r;
            if (t.a < 0)
                r.assign(f.begin(), f.end());
            else if (t.b < 0)
                r = fd_first(f, t.a);
            else if (t.a == t.b)
                r = fd_second(f, t.a);
            else
                r = fd_first(fd_first(f, t.b), t.a);
            for (std::size_t p = 0; p < f.size(); ++p) out[p] += t.coef * r[p];
        }
        return out;
    }

    GridChart chart_;
    std::vector<double> kd_, k2_;
    std::vector<std::uint16_t> mode_index_;
    std::vector<double> sigma_;
    double sigma_max_ = 0.0;
    fftw_plan fwd_ = nullptr;
    fftw_plan inv_ = nullptr;
};

}  // namespace crf
