#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "crf/estimates.hpp"

namespace crf {

/// θ with ω_KE = ω̂_∞ + ddbar θ solving log(ω_KEⁿ/Ω) = θ.
struct KESolution {
    ScalarField theta;
    MetricField omega_KE;
    double residual = 0.0;  ///< ‖F(θ)‖∞
    int newton_iters = 0;
    int krylov_iters = 0;
    int halvings = 0;
    std::vector<double> history;  ///< ‖F‖∞ after each Newton step (entry 0: initial)
};

struct KEConfig {
    double tol = 1e-10;
    int max_newton = 100;
    int max_halvings = 30;
    double forcing = 1e-2;  ///< Krylov relative tolerance cap
    int krylov_restart = 60;
    int krylov_max = 600;
};

namespace detail {

struct KEEval {
    ScalarField F;
    std::vector<HMat> inv;  ///< (ω̂_∞ + ddbar θ)⁻¹
    double min_eig = 0.0;
    double max_inv_eig = 0.0;
};

/// F(θ) = log((ω̂_∞ + ddbar θ)ⁿ/Ω) − θ; nullopt when ω̂_∞ + ddbar θ is not
/// positive definite somewhere.
inline std::optional<KEEval> ke_residual(const BackgroundData& bg, const ScalarField& theta) {
    Form11Field w = bg.omega_inf + ddbar(theta);
    KEEval e;
    e.F = ScalarField(bg.chart);
    e.inv.resize(w.size());
    e.min_eig = std::numeric_limits<double>::infinity();
    const double nf = factorial(bg.chart.complex_dim());
    for (std::size_t p = 0; p < w.size(); ++p) {
        HMat m = w.at(p);
        auto [lo, hi] = eigenvalues(m);
        (void)hi;
        e.min_eig = std::min(e.min_eig, lo);
        if (!(lo > 0.0)) return std::nullopt;
        e.max_inv_eig = std::max(e.max_inv_eig, 1.0 / lo);
        e.inv[p] = inverse(m);
        e.F[p] = std::log(nf * det(m).real() / bg.Omega.density[p]) - theta[p];
    }
    return e;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

/// Restarted GMRES for A x = b with right preconditioning M; x starts at 0.
/// Returns the iteration count; x holds the approximate solution.
template <class Op, class Prec>
int gmres(const Op& A, const Prec& M, const std::vector<double>& b, std::vector<double>& x, double rtol,
          int restart, int max_iter) {
    const std::size_t N = b.size();
    x.assign(N, 0.0);
    const double bn = norm2(b);
    if (bn == 0.0) return 0;
    int total = 0;
    std::vector<double> r = b;
    while (total < max_iter) {
        const double beta = norm2(r);
        if (beta <= rtol * bn) break;
        const int m = restart;
        std::vector<std::vector<double>> V(m + 1), Z(m);
        std::vector<std::vector<double>> H(m + 1, std::vector<double>(m, 0.0));
        std::vector<double> cs(m), sn(m), g(m + 1, 0.0);
        V[0] = r;
        for (auto& v : V[0]) v /= beta;
        g[0] = beta;
        int k = 0;
        for (; k < m && total < max_iter; ++k, ++total) {
            Z[k] = M(V[k]);
            std::vector<double> w = A(Z[k]);
            for (int j = 0; j <= k; ++j) {
                H[j][k] = dot(w, V[j]);
                for (std::size_t i = 0; i < N; ++i) w[i] -= H[j][k] * V[j][i];
            }
            H[k + 1][k] = norm2(w);
            V[k + 1] = w;
            if (H[k + 1][k] > 0.0)
                for (auto& v : V[k + 1]) v /= H[k + 1][k];
            for (int j = 0; j < k; ++j) {
                const double t = cs[j] * H[j][k] + sn[j] * H[j + 1][k];
                H[j + 1][k] = -sn[j] * H[j][k] + cs[j] * H[j + 1][k];
                H[j][k] = t;
            }
            const double d = std::hypot(H[k][k], H[k + 1][k]);
            cs[k] = H[k][k] / d;
            sn[k] = H[k + 1][k] / d;
            H[k][k] = d;
            H[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k] * g[k];
            if (std::abs(g[k + 1]) <= rtol * bn) {
                ++k;
                ++total;
                break;
            }
        }
        std::vector<double> y(k, 0.0);
        for (int i = k - 1; i >= 0; --i) {
            double s = g[i];
            for (int j = i + 1; j < k; ++j) s -= H[i][j] * y[j];
            y[i] = s / H[i][i];
        }
        for (int j = 0; j < k; ++j)
            for (std::size_t i = 0; i < N; ++i) x[i] += y[j] * Z[j][i];
        auto Ax = A(x);
        for (std::size_t i = 0; i < N; ++i) r[i] = b[i] - Ax[i];
    }
    return total;
}

}  // namespace detail

/// Damped Newton for F(θ) = 0. Each step solves (Δ_{ω_θ} − 1) v = −F by
/// GMRES with the flat preconditioner (−a·σ − 1)⁻¹ to relative accuracy
/// min(forcing, ‖F‖∞), then halves the step until ω stays positive and ‖F‖∞
/// decreases.
inline KESolution solve_ke(const BackgroundData& bg, const KEConfig& cfg = {},
                           std::optional<ScalarField> theta0 = std::nullopt) {
    if (!(cfg.tol > 0.0)) throw ConfigError("Newton tolerance must be positive");
    const auto& c = bg.chart;
    const std::size_t N = c.size();
    ScalarField theta = theta0 ? *theta0 : ScalarField(c, 0.0);
    if (!(theta.chart == c)) throw InvalidInput("initial guess lives on a different chart");
    auto ev = detail::ke_residual(bg, theta);
    if (!ev) throw InvalidInput("initial guess: omega_inf + ddbar theta0 is not positive definite");

    const auto& D = Differentiator::get(c);
    KESolution sol;
    double res = masked_sup_abs(ev->F.v);
    sol.history.push_back(res);
    while (res > cfg.tol) {
        if (sol.newton_iters >= cfg.max_newton)
            throw SolverFailure("Newton did not converge in " + std::to_string(cfg.max_newton) + " steps",
                                sol.history);
        const auto& inv = ev->inv;
        // frozen diffusion scale for the preconditioner: mean of tr ω⁻¹ / n
        double a = 0.0;
        for (std::size_t p = 0; p < N; ++p) a += trace(inv[p]).real();
        a /= static_cast<double>(N) * c.complex_dim();
        auto J = [&](const std::vector<double>& v) {
            ScalarField f(c, v);
            auto dd = ddbar(f);
            std::vector<double> out(N);
            for (std::size_t p = 0; p < N; ++p) out[p] = trace(matmul(inv[p], dd.at(p))).real() - v[p];
            return out;
        };
        const auto& sig = D.sigma();
        auto M = [&](const std::vector<double>& v) {
            auto s = D.forward_real(v);
            for (std::size_t p = 0; p < N; ++p) s[p] /= (-a * sig[p] - 1.0);
            auto back = D.inverse(s);
            std::vector<double> out(N);
            for (std::size_t p = 0; p < N; ++p) out[p] = back[p].real();
            return out;
        };
        std::vector<double> rhs(N), v;
        for (std::size_t p = 0; p < N; ++p) rhs[p] = -ev->F[p];
        const double eta = std::min(cfg.forcing, res);
        sol.krylov_iters += detail::gmres(J, M, rhs, v, eta, cfg.krylov_restart, cfg.krylov_max);

        double lam = 1.0;
        int halv = 0;
        for (;;) {
            ScalarField trial = theta;
            for (std::size_t p = 0; p < N; ++p) trial[p] += lam * v[p];
            auto te = detail::ke_residual(bg, trial);
            if (te) {
                const double r2 = masked_sup_abs(te->F.v);
                if (r2 < (1.0 - 1e-4 * lam) * res || r2 <= cfg.tol) {
                    theta = std::move(trial);
                    ev = std::move(te);
                    res = r2;
                    break;
                }
            }
            if (++halv > cfg.max_halvings)
                throw SolverFailure("line search exhausted " + std::to_string(cfg.max_halvings) + " halvings",
                                    sol.history);
            lam *= 0.5;
        }
        sol.halvings += halv;
        ++sol.newton_iters;
        sol.history.push_back(res);
    }
    sol.residual = res;
    sol.omega_KE = MetricField(bg.omega_inf + ddbar(theta));
    sol.theta = std::move(theta);
    return sol;
}

inline KESolution solve_ke(const BackgroundData& bg, double tol,
                           std::optional<ScalarField> theta0 = std::nullopt) {
    KEConfig cfg;
    cfg.tol = tol;
    return solve_ke(bg, cfg, std::move(theta0));
}

/// ‖Ric(ω_KE) + ω_KE‖∞ over unmasked points.
inline double verify_einstein(const KESolution& sol, const BackgroundData& bg) {
    Form11Field r = ricci_form(bg, sol.omega_KE.form()) + sol.omega_KE.form();
    return r.sup_norm(bg.pole_mask);
}

struct VolumePinchEntry {
    double eps = 0.0;
    double inf_weighted = 0.0, sup_weighted = 0.0;  ///< of ω_KEⁿ/(e^{εψ}Ω)
};

struct VolumePinchReport {
    double inf_ratio = 0.0, sup_ratio = 0.0;  ///< of ω_KEⁿ/Ω
    std::vector<VolumePinchEntry> entries;
    bool ok = true;  ///< everything finite and positive
};

inline VolumePinchReport verify_volume_pinch(const KESolution& sol, const BackgroundData& bg,
                                             const std::vector<double>& eps_list = default_eps_list()) {
    VolumePinchReport rep;
    auto vol = top_power(sol.omega_KE.form());
    const auto& m = bg.pole_mask;
    std::vector<double> ratio(vol.density.size());
    for (std::size_t p = 0; p < ratio.size(); ++p) ratio[p] = vol.density[p] / bg.Omega.density[p];
    rep.inf_ratio = masked_inf(ratio, m);
    rep.sup_ratio = masked_sup(ratio, m);
    auto good = [](double a, double b) { return std::isfinite(a) && std::isfinite(b) && a > 0.0 && b > 0.0; };
    rep.ok = good(rep.inf_ratio, rep.sup_ratio);
    for (double e : eps_list) {
        std::vector<double> w(ratio.size());
        for (std::size_t p = 0; p < w.size(); ++p) w[p] = ratio[p] * std::exp(-e * bg.psi[p]);
        VolumePinchEntry en{e, masked_inf(w, m), masked_sup(w, m)};
        rep.ok = rep.ok && good(en.inf_weighted, en.sup_weighted);
        rep.entries.push_back(en);
    }
    return rep;
}

struct ComparisonEntry {
    double delta = 0.0, eps = 0.0;
    double min_Q = 0.0;  ///< min over unmasked points of θ_A − (1−δ)θ_B − δεψ
    double bound = 0.0;  ///< n log(1−δ) − δ C_ε
    bool holds = true;
};

struct UniquenessReport {
    double sup_diff = 0.0;  ///< ‖θ_A − θ_B‖∞ over unmasked points
    std::vector<ComparisonEntry> entries;
    bool all_hold = true;
};

/// C_eps maps ε to the constant of θ_B ≥ εψ − C_ε (when absent it is
/// measured from θ_B directly).
inline UniquenessReport compare_uniqueness(const ScalarField& theta_A, const ScalarField& theta_B,
                                           const BackgroundData& bg,
                                           const std::map<double, double>& C_eps = {}) {
    const auto& m = bg.pole_mask;
    const std::size_t N = bg.chart.size();
    if (theta_A.size() != N || theta_B.size() != N) throw InvalidInput("potentials do not match the chart");
    UniquenessReport rep;
    for (std::size_t p = 0; p < N; ++p)
        if (!excluded(m, p)) rep.sup_diff = std::max(rep.sup_diff, std::abs(theta_A[p] - theta_B[p]));
    const int n = bg.chart.complex_dim();
    for (double delta : {0.1, 0.01})
        for (double eps : {0.1, 1.0}) {
            double ce;
            if (auto it = C_eps.find(eps); it != C_eps.end()) {
                ce = it->second;
            } else {
                double lo = std::numeric_limits<double>::infinity();
                for (std::size_t p = 0; p < N; ++p)
                    if (!excluded(m, p)) lo = std::min(lo, theta_B[p] - eps * bg.psi[p]);
                ce = -lo;
            }
            ComparisonEntry e;
            e.delta = delta;
            e.eps = eps;
            e.min_Q = std::numeric_limits<double>::infinity();
            for (std::size_t p = 0; p < N; ++p)
                if (!excluded(m, p))
                    e.min_Q = std::min(e.min_Q, theta_A[p] - (1.0 - delta) * theta_B[p] - delta * eps * bg.psi[p]);
            e.bound = n * std::log(1.0 - delta) - delta * ce;
            e.holds = e.min_Q >= e.bound;
            rep.all_hold = rep.all_hold && e.holds;
            rep.entries.push_back(e);
        }
    return rep;
}

inline UniquenessReport compare_uniqueness(const KESolution& A, const KESolution& B, const BackgroundData& bg,
                                           const std::map<double, double>& C_eps = {}) {
    return compare_uniqueness(A.theta, B.theta, bg, C_eps);
}

}  // namespace crf
