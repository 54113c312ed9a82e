#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "crf/background.hpp"

namespace crf {

enum class Scheme { rk4, imex };

inline std::string to_string(Scheme s) { return s == Scheme::rk4 ? "rk4" : "imex"; }

inline Scheme parse_scheme(const std::string& s) {
    if (s == "rk4") return Scheme::rk4;
    if (s == "imex" || s == "etdrk4") return Scheme::imex;
    throw ConfigError("unknown scheme '" + s + "' (expected rk4 or imex)");
}

/// Time-stepping controls.
///
/// `imex` is a fourth-order exponential time-differencing Runge-Kutta scheme:
/// the stiff part −a·σ − 1 (σ the flat ∂∂̄-Laplacian symbol, a a frozen
/// diffusion scale) is integrated exactly in Fourier space and the remainder
/// explicitly. Its step is limited only by dt_max. `rk4` is classical
/// explicit Runge-Kutta under the parabolic stiffness cap.
struct FlowConfig {
    double dt_initial = 0.01;
    double dt_max = 0.02;
    double safety = 0.9;
    Scheme scheme = Scheme::imex;
    double t_max = 30.0;
    double convergence_tol = 1e-6;
    double positivity_floor = 1e-8;
    double snapshot_interval = 0.25;
    /// Stop as soon as sup|φ̇| < convergence_tol. Acceptance runs that need
    /// the late-time drift of the lemma quantities turn this off.
    bool stop_on_convergence = true;

    void validate() const {
        auto pos = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
        };
        pos(dt_initial, "dt_initial");
        pos(dt_max, "dt_max");
        pos(t_max, "t_max");
        pos(positivity_floor, "positivity_floor");
        pos(snapshot_interval, "snapshot_interval");
        if (!(safety > 0.0 && safety < 1.0)) throw ConfigError("safety must lie in (0, 1)");
        if (!(convergence_tol >= 1e-10)) throw ConfigError("convergence_tol must be >= 1e-10");
    }
};

/// Result of one right-hand-side evaluation, with the pointwise statistics
/// the step controllers need.
struct RhsEval {
    ScalarField value;
    double min_eig = 0.0;        ///< smallest eigenvalue of ω over all points
    double max_inv_eig = 0.0;    ///< largest eigenvalue of g⁻¹
    double max_inv_trace = 0.0;  ///< largest tr_ω(flat) = tr g⁻¹
};

/// φ̇ = log((ω̂_t + ddbar φ)ⁿ/Ω) − φ with positivity statistics. Throws
/// PositivityLoss when the smallest eigenvalue of ω is ≤ floor.
inline RhsEval evaluate_rhs(const BackgroundData& bg, const ScalarField& phi, double t,
                            double floor = 0.0) {
    Form11Field w = reference_metric(bg, t);
    w += ddbar(phi);
    const double nf = factorial(bg.chart.complex_dim());
    RhsEval r;
    r.value = ScalarField(bg.chart);
    r.min_eig = std::numeric_limits<double>::infinity();
    std::size_t worst = 0;
    for (std::size_t p = 0; p < phi.size(); ++p) {
        HMat m = w.at(p);
        auto [lo, hi] = eigenvalues(m);
        if (lo < r.min_eig) {
            r.min_eig = lo;
            worst = p;
        }
        if (!(lo > floor)) continue;
        r.max_inv_eig = std::max(r.max_inv_eig, 1.0 / lo);
        r.max_inv_trace = std::max(r.max_inv_trace, trace(inverse(m)).real());
        r.value[p] = std::log(nf * det(m).real() / bg.Omega.density[p]) - phi[p];
    }
    if (!(r.min_eig > floor) || !std::isfinite(r.min_eig)) throw PositivityLoss(worst, r.min_eig);
    return r;
}

/// log((ω̂_t + ddbar φ)ⁿ/Ω) − φ.
inline ScalarField rhs(const BackgroundData& bg, const ScalarField& phi, double t) {
    return evaluate_rhs(bg, phi, t).value;
}

/// ω = ω̂_t + ddbar φ.
inline Form11Field flow_metric(const BackgroundData& bg, const ScalarField& phi, double t) {
    return reference_metric(bg, t) + ddbar(phi);
}

struct FlowState {
    double t = 0.0;
    ScalarField phi;
    ScalarField phidot;
    MetricField omega;
    long step_count = 0;
    long halvings = 0;
    double dt_last = 0.0;
    double min_eig = 0.0;
    double max_inv_eig = 0.0;
    double max_inv_trace = 0.0;
};

/// φ(0) = 0 with its caches.
inline FlowState initial_state(const BackgroundData& bg) {
    FlowState s;
    s.phi = ScalarField(bg.chart, 0.0);
    auto r = evaluate_rhs(bg, s.phi, 0.0);
    s.phidot = std::move(r.value);
    s.omega = MetricField(bg.omega0.form());
    s.min_eig = r.min_eig;
    s.max_inv_eig = r.max_inv_eig;
    s.max_inv_trace = r.max_inv_trace;
    return s;
}

// ── Exponential integrator coefficients ─────────────────────────────────────

/// Per-mode ETDRK4 coefficients for L̂ = −a·σ − 1 and step h, evaluated with
/// the contour-integral formulas (32 points on a unit circle around z = L̂h)
/// to avoid cancellation at small |z|.
struct EtdCoefficients {
    double a = 0.0, h = 0.0;
    std::vector<double> L, E, E2, Q, f1, f2, f3;
};

inline std::shared_ptr<const EtdCoefficients> etd_coefficients(const Differentiator& D, double a,
                                                               double h) {
    static std::mutex m;
    static std::map<std::tuple<int, int, int, double, double>, std::shared_ptr<const EtdCoefficients>> cache;
    const auto& c = D.chart();
    auto key = std::make_tuple(c.complex_dim(), c.resolution(), static_cast<int>(c.mode()), a, h);
    {
        std::lock_guard<std::mutex> lock(m);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
    }
    auto co = std::make_shared<EtdCoefficients>();
    co->a = a;
    co->h = h;
    const auto& sigma = D.sigma();
    const std::size_t n = sigma.size();
    co->L.resize(n);
    co->E.resize(n);
    co->E2.resize(n);
    co->Q.resize(n);
    co->f1.resize(n);
    co->f2.resize(n);
    co->f3.resize(n);
    constexpr int M = 32;
    std::array<cplx, M> roots;
    for (int j = 0; j < M; ++j) roots[j] = std::exp(cplx(0.0, pi * (j + 0.5) / M));
    // many modes share σ; memoize on the value
    std::map<double, std::array<double, 4>> memo;
    for (std::size_t p = 0; p < n; ++p) {
        const double Lp = -a * sigma[p] - 1.0;
        const double z = Lp * h;
        co->L[p] = Lp;
        co->E[p] = std::exp(z);
        co->E2[p] = std::exp(0.5 * z);
        auto it = memo.find(z);
        if (it == memo.end()) {
            double q = 0, a1 = 0, a2 = 0, a3 = 0;
            for (const auto& r : roots) {
                const cplx w = z + r;
                const cplx ew = std::exp(w), ew2 = std::exp(0.5 * w);
                const cplx w3 = w * w * w;
                q += ((ew2 - 1.0) / w).real();
                a1 += ((-4.0 - w + ew * (4.0 - 3.0 * w + w * w)) / w3).real();
                a2 += ((2.0 + w + ew * (-2.0 + w)) / w3).real();
                a3 += ((-4.0 - 3.0 * w - w * w + ew * (4.0 - w)) / w3).real();
            }
            it = memo.emplace(z, std::array<double, 4>{h * q / M, h * a1 / M, h * a2 / M, h * a3 / M}).first;
        }
        co->Q[p] = it->second[0];
        co->f1[p] = it->second[1];
        co->f2[p] = it->second[2];
        co->f3[p] = it->second[3];
    }
    std::lock_guard<std::mutex> lock(m);
    if (cache.size() > 64) cache.clear();
    cache.emplace(key, co);
    return co;
}

// ── Steppers ────────────────────────────────────────────────────────────────

namespace detail {

inline std::vector<double> real_part(const std::vector<cplx>& v) {
    std::vector<double> r(v.size());
    for (std::size_t p = 0; p < v.size(); ++p) r[p] = v[p].real();
    return r;
}

/// Largest stable explicit RK4 step for the current state: the linearized
/// operator has spectral radius ≈ max tr g⁻¹ · σ_max + 1 and RK4's stability
/// interval on the negative axis is ≈ 2.785.
inline double rk4_cap(const Differentiator& D, double max_inv_trace, double safety) {
    const double lam = max_inv_trace * D.sigma_max() + 1.0;
    return safety * 2.785 / lam;
}

/// Diffusion scale for the exponential integrator's linear part.
inline double etd_scale(double max_inv_eig) {
    // round to a coarse ladder so nearby states share cached coefficients
    const double raw = 1.25 * max_inv_eig;
    return std::exp2(std::ceil(std::log2(raw) * 8.0) / 8.0);
}

}  // namespace detail

/// One step of size h from (t, φ) with φ̇ = phidot already known. Throws
/// PositivityLoss if any stage leaves the positive cone.
inline FlowState advance(const FlowState& s, double h, Scheme scheme, const BackgroundData& bg,
                         double floor, double etd_a = 0.0) {
    const auto& D = Differentiator::get(bg.chart);
    const std::size_t N = bg.chart.size();
    FlowState out;
    out.t = s.t + h;
    if (scheme == Scheme::rk4) {
        auto stage = [&](const ScalarField& k, double c) {
            ScalarField u(bg.chart);
            for (std::size_t p = 0; p < N; ++p) u[p] = s.phi[p] + c * h * k[p];
            return u;
        };
        const ScalarField& k1 = s.phidot;
        auto k2 = evaluate_rhs(bg, stage(k1, 0.5), s.t + 0.5 * h, floor).value;
        auto k3 = evaluate_rhs(bg, stage(k2, 0.5), s.t + 0.5 * h, floor).value;
        auto k4 = evaluate_rhs(bg, stage(k3, 1.0), s.t + h, floor).value;
        out.phi = ScalarField(bg.chart);
        for (std::size_t p = 0; p < N; ++p)
            out.phi[p] = s.phi[p] + h / 6.0 * (k1[p] + 2.0 * k2[p] + 2.0 * k3[p] + k4[p]);
    } else {
        const double a = etd_a > 0.0 ? etd_a : detail::etd_scale(s.max_inv_eig);
        auto co = etd_coefficients(D, a, h);
        auto v = D.forward_real(s.phi.v);
        auto nonlin = [&](const ScalarField& r, const std::vector<cplx>& uhat) {
            auto nh = D.forward_real(r.v);
            for (std::size_t p = 0; p < N; ++p) nh[p] -= co->L[p] * uhat[p];
            return nh;
        };
        auto to_field = [&](const std::vector<cplx>& hat) {
            return ScalarField(bg.chart, detail::real_part(D.inverse(hat)));
        };
        auto Nv = nonlin(s.phidot, v);
        std::vector<cplx> ah(N), bh(N), ch(N), nh(N);
        for (std::size_t p = 0; p < N; ++p) ah[p] = co->E2[p] * v[p] + co->Q[p] * Nv[p];
        auto Na = nonlin(evaluate_rhs(bg, to_field(ah), s.t + 0.5 * h, floor).value, ah);
        for (std::size_t p = 0; p < N; ++p) bh[p] = co->E2[p] * v[p] + co->Q[p] * Na[p];
        auto Nb = nonlin(evaluate_rhs(bg, to_field(bh), s.t + 0.5 * h, floor).value, bh);
        for (std::size_t p = 0; p < N; ++p)
            ch[p] = co->E2[p] * ah[p] + co->Q[p] * (2.0 * Nb[p] - Nv[p]);
        auto Nc = nonlin(evaluate_rhs(bg, to_field(ch), s.t + h, floor).value, ch);
        for (std::size_t p = 0; p < N; ++p)
            nh[p] = co->E[p] * v[p] + co->f1[p] * Nv[p] + 2.0 * co->f2[p] * (Na[p] + Nb[p]) +
                    co->f3[p] * Nc[p];
        out.phi = to_field(nh);
    }
    auto r = evaluate_rhs(bg, out.phi, out.t, floor);
    out.phidot = std::move(r.value);
    out.min_eig = r.min_eig;
    out.max_inv_eig = r.max_inv_eig;
    out.max_inv_trace = r.max_inv_trace;
    out.step_count = s.step_count + 1;
    out.halvings = s.halvings;
    out.dt_last = h;
    return out;
}

namespace detail {

/// advance() with positivity retry: on failure the interval is covered by
/// two half steps, recursively, at most 20 halvings deep.
inline FlowState advance_guarded(const FlowState& s, double h, Scheme scheme,
                                 const BackgroundData& bg, double floor, int depth = 0) {
    try {
        return advance(s, h, scheme, bg, floor);
    } catch (const PositivityLoss&) {
        if (depth >= 20 || 0.5 * h < 1e-12)
            throw FlowBreakdown("time step underflow at t = " + std::to_string(s.t));
        auto mid = advance_guarded(s, 0.5 * h, scheme, bg, floor, depth + 1);
        mid.halvings += 1;
        return advance_guarded(mid, 0.5 * h, scheme, bg, floor, depth + 1);
    }
}

inline double step_limit(const FlowState& s, const FlowConfig& cfg, const BackgroundData& bg) {
    double h = s.t < cfg.snapshot_interval ? std::min(cfg.dt_initial, cfg.dt_max) : cfg.dt_max;
    if (cfg.scheme == Scheme::rk4)
        h = std::min(h, rk4_cap(Differentiator::get(bg.chart), s.max_inv_trace, cfg.safety));
    return h;
}

}  // namespace detail

/// One adaptive step: Δt = min(dt_max, stiffness cap for rk4), halved on
/// positivity failure. The returned state has fresh caches.
inline FlowState step(const FlowState& s, const FlowConfig& cfg, const BackgroundData& bg) {
    const double h = detail::step_limit(s, cfg, bg);
    auto out = detail::advance_guarded(s, h, cfg.scheme, bg, cfg.positivity_floor);
    out.omega = MetricField(flow_metric(bg, out.phi, out.t));
    return out;
}

// ── Trajectories ────────────────────────────────────────────────────────────

struct Snapshot {
    double t = 0.0;
    ScalarField phi;
    ScalarField phidot;
};

struct Trajectory {
    std::vector<Snapshot> snapshots;
    bool converged = false;
    double t_converged = std::numeric_limits<double>::quiet_NaN();
    long steps = 0;
    long halvings = 0;
    double min_eig = std::numeric_limits<double>::infinity();
    FlowConfig config;

    const Snapshot& back() const { return snapshots.back(); }
};

inline double sup_abs_phidot(const ScalarField& phidot, const Mask& m) {
    return masked_sup_abs(phidot.v, m);
}

/// Integrates from φ = 0 to t_max (or convergence), recording a snapshot at
/// every multiple of snapshot_interval. Each interval is split into equal
/// substeps no longer than the step limit so snapshot times are exact.
inline Trajectory run(const BackgroundData& bg, const FlowConfig& cfg) {
    cfg.validate();
    Trajectory tr;
    tr.config = cfg;
    FlowState s = initial_state(bg);
    tr.min_eig = s.min_eig;
    tr.snapshots.push_back({0.0, s.phi, s.phidot});
    const long intervals = std::lround(std::ceil(cfg.t_max / cfg.snapshot_interval - 1e-9));
    for (long k = 1; k <= intervals; ++k) {
        const double t_end = std::min(k * cfg.snapshot_interval, cfg.t_max);
        const double span = t_end - s.t;
        const double lim = detail::step_limit(s, cfg, bg);
        const long m = std::max(1L, std::lround(std::ceil(span / lim - 1e-9)));
        const double h = span / m;
        for (long j = 0; j < m; ++j) {
            s = detail::advance_guarded(s, h, cfg.scheme, bg, cfg.positivity_floor);
            tr.min_eig = std::min(tr.min_eig, s.min_eig);
        }
        s.t = t_end;
        tr.snapshots.push_back({s.t, s.phi, s.phidot});
        if (!tr.converged && sup_abs_phidot(s.phidot, bg.pole_mask) < cfg.convergence_tol) {
            tr.converged = true;
            tr.t_converged = s.t;
            if (cfg.stop_on_convergence) break;
        }
    }
    tr.steps = s.step_count;
    tr.halvings = s.halvings;
    return tr;
}

// ── Oracles and checks ──────────────────────────────────────────────────────

/// Exact potential of the homogeneous scenario:
/// φ(t) = e^{−t}∫₀ᵗ eˢ h(s) ds, h(s) = log(n!·(e^{−s}a₀ + (1−e^{−s})a_∞)ⁿ/ω_c).
inline double homogeneous_oracle(const BackgroundData& bg, double t) {
    if (bg.info.name != "homogeneous") throw InvalidInput("homogeneous_oracle needs the homogeneous scenario");
    const int n = bg.chart.complex_dim();
    const double a0 = bg.info.a0, ai = bg.info.a_inf, wc = bg.info.omega_const;
    auto hfun = [&](double s) {
        const double e = std::exp(-s);
        return std::log(factorial(n) * std::pow(e * a0 + (1.0 - e) * ai, n) / wc);
    };
    if (t == 0.0) return 0.0;
    auto integrand = [&](double s) { return std::exp(s - t) * hfun(s); };
    double err = 0.0;
    const double v = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, 0.0, t, 20, 1e-14, &err);
    return v;
}

/// d/dt of the oracle: φ̇ = h(t) − φ.
inline double homogeneous_oracle_rate(const BackgroundData& bg, double t) {
    const int n = bg.chart.complex_dim();
    const double e = std::exp(-t);
    const double h = std::log(factorial(n) * std::pow(e * bg.info.a0 + (1.0 - e) * bg.info.a_inf, n) /
                              bg.info.omega_const);
    return h - homogeneous_oracle(bg, t);
}

struct IdentityPoint {
    double t;
    double residual;
};

/// Sup-norm residual of ∂ω/∂t + Ric(ω) + ω at interior snapshots, with the
/// time derivative from centered differences of neighbouring snapshots and
/// Ric(ω) := −ddbar log(ωⁿ/Ω) − ω̂_∞. Uses snapshots i−stride, i, i+stride.
inline std::vector<IdentityPoint> verify_flow_identity(const Trajectory& tr, const BackgroundData& bg,
                                                       int stride = 1) {
    std::vector<IdentityPoint> out;
    const auto& S = tr.snapshots;
    for (std::size_t i = stride; i + stride < S.size(); i += stride) {
        const double dt = S[i + stride].t - S[i - stride].t;
        auto wp = flow_metric(bg, S[i + stride].phi, S[i + stride].t);
        auto wm = flow_metric(bg, S[i - stride].phi, S[i - stride].t);
        auto w = flow_metric(bg, S[i].phi, S[i].t);
        Form11Field res = wp - wm;
        res *= 1.0 / dt;
        res += ricci_form(bg, w);
        res += w;
        out.push_back({S[i].t, res.sup_norm(bg.pole_mask)});
    }
    return out;
}

/// Residual of the same identity for a static state (φ̇ ≡ 0 expected).
inline double static_flow_residual(const BackgroundData& bg, const ScalarField& phi, double t) {
    auto w = flow_metric(bg, phi, t);
    Form11Field r = ricci_form(bg, w) + w;
    return r.sup_norm(bg.pole_mask);
}

struct LimitPotential {
    ScalarField phi;
    double sup_phidot = 0.0;
    double t = 0.0;
    Form11Field omega;  ///< ω̂_∞ + ddbar φ_∞
};

inline LimitPotential limit_potential(const Trajectory& tr, const BackgroundData& bg) {
    LimitPotential L;
    const auto& s = tr.back();
    L.phi = s.phi;
    L.t = s.t;
    L.sup_phidot = sup_abs_phidot(s.phidot, bg.pole_mask);
    L.omega = bg.omega_inf + ddbar(s.phi);
    return L;
}

}  // namespace crf
