#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "crf/flow.hpp"

namespace crf {

inline const std::vector<double>& default_eps_list() {
    static const std::vector<double> e{0.1, 0.25, 0.5, 1.0};
    return e;
}

namespace detail {

inline constexpr double nan_v = std::numeric_limits<double>::quiet_NaN();

/// Relative change of a series between the first sample at or after t_start
/// and the last sample. Zero when both ends are zero.
inline double window_drift(const std::vector<double>& t, const std::vector<double>& v, double t_start) {
    if (v.empty()) return nan_v;
    std::size_t k = 0;
    while (k + 1 < t.size() && t[k] < t_start - 1e-12) ++k;
    const double a = v[k], b = v.back();
    if (a == b) return 0.0;
    return std::abs(b - a) / std::max(std::abs(b), std::abs(a));
}

/// (max − min) of a series over t ≥ t_start, relative to max(|last|, 1).
inline double window_spread(const std::vector<double>& t, const std::vector<double>& v, double t_start) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t k = 0; k < t.size(); ++k)
        if (t[k] >= t_start - 1e-12) {
            lo = std::min(lo, v[k]);
            hi = std::max(hi, v[k]);
        }
    if (!(hi >= lo)) return nan_v;
    return (hi - lo) / std::max(std::abs(v.back()), 1.0);
}

inline double default_window_start(const Trajectory& tr) {
    return tr.snapshots.front().t + (2.0 / 3.0) * (tr.back().t - tr.snapshots.front().t);
}

/// Round-off level of φ̇ in double precision: the discrete ∂∂̄ amplifies
/// relative errors of size eps·|φ| by up to σ_max.
inline double phidot_noise_floor(const BackgroundData& bg, const ScalarField& phi) {
    const double s = Differentiator::get(bg.chart).sigma_max();
    const double m = std::max(1.0, masked_sup_abs(phi.v));
    return 16.0 * std::numeric_limits<double>::epsilon() * s * m;
}

inline std::vector<HMat> inverses(const Form11Field& w) {
    std::vector<HMat> out(w.size());
    for (std::size_t p = 0; p < w.size(); ++p) out[p] = inverse(w.at(p));
    return out;
}

inline ScalarField trace_with(const std::vector<HMat>& inv, const Form11Field& alpha) {
    ScalarField out(alpha.chart());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = trace(matmul(inv[p], alpha.at(p))).real();
    return out;
}

inline ScalarField tilde_phi(const BackgroundData& bg, const ScalarField& phi) {
    ScalarField out = phi;
    for (std::size_t p = 0; p < out.size(); ++p) out[p] -= bg.psi[p];
    return out;
}

}  // namespace detail

// ── Upper bounds ─────────────────────────────────────────────────

struct UpperBoundFit {
    double C_phi = 0.0;     ///< sup φ
    double C_phidot = 0.0;  ///< sup φ̇·eᵗ/t over t ≥ t1, above the noise floor
    double C_vol = 0.0;     ///< sup ωⁿ/Ω
    /// sup |φ̇|·eᵗ/t over t ≥ t1 above the noise floor. The lemma is one-sided
    /// and φ̇ is often negative late, which makes C_phidot = 0; this records
    /// the decay rate as well.
    double C_phidot_abs = 0.0;
    double drift_phidot_abs = 0.0;
    double t1 = 1.0;
    double window_start = 0.0;
    double drift_phi = 0.0, drift_phidot = 0.0, drift_vol = 0.0;
    double noise_floor = 0.0;
    int phidot_samples = 0;
    bool finite = true;
    bool stable = true;
    std::vector<double> t, run_phi, run_phidot, run_vol, run_phidot_abs;  ///< running sups
};

/// Running sups of φ, φ̇eᵗ/t and ωⁿ/Ω; the ratio ωⁿ/Ω is e^{φ̇+φ} exactly.
/// Snapshots where sup φ̇ is below the round-off floor do not enter the φ̇ fit.
inline UpperBoundFit check_upper_bounds(const Trajectory& tr, const BackgroundData& bg, double t1 = 1.0,
                                        double window_start = detail::nan_v) {
    if (tr.snapshots.empty()) throw InvalidInput("empty trajectory");
    UpperBoundFit f;
    f.t1 = t1;
    f.window_start = std::isnan(window_start) ? detail::default_window_start(tr) : window_start;
    const auto& m = bg.pole_mask;
    double sphi = -std::numeric_limits<double>::infinity(), sdot = 0.0, svol = 0.0, sabs = 0.0;
    for (const auto& s : tr.snapshots) {
        sphi = std::max(sphi, masked_sup(s.phi.v, m));
        std::vector<double> vr(s.phi.size());
        for (std::size_t p = 0; p < vr.size(); ++p) vr[p] = std::exp(s.phi[p] + s.phidot[p]);
        svol = std::max(svol, masked_sup(vr, m));
        const double nu = detail::phidot_noise_floor(bg, s.phi);
        f.noise_floor = std::max(f.noise_floor, nu);
        const double pd = masked_sup(s.phidot.v, m);
        if (s.t >= t1 - 1e-12 && pd > nu) {
            sdot = std::max(sdot, pd * std::exp(s.t) / s.t);
            ++f.phidot_samples;
        }
        const double pa = masked_sup_abs(s.phidot.v, m);
        if (s.t >= t1 - 1e-12 && pa > nu) sabs = std::max(sabs, pa * std::exp(s.t) / s.t);
        f.run_phidot_abs.push_back(sabs);
        f.t.push_back(s.t);
        f.run_phi.push_back(sphi);
        f.run_phidot.push_back(sdot);
        f.run_vol.push_back(svol);
    }
    f.C_phi = sphi;
    f.C_phidot = sdot;
    f.C_vol = svol;
    f.C_phidot_abs = sabs;
    f.drift_phidot_abs = detail::window_drift(f.t, f.run_phidot_abs, f.window_start);
    f.drift_phi = detail::window_drift(f.t, f.run_phi, f.window_start);
    f.drift_phidot = detail::window_drift(f.t, f.run_phidot, f.window_start);
    f.drift_vol = detail::window_drift(f.t, f.run_vol, f.window_start);
    f.finite = std::isfinite(f.C_phi) && std::isfinite(f.C_phidot) && std::isfinite(f.C_vol);
    f.stable = f.finite && f.drift_phi < 0.05 && f.drift_phidot < 0.05 && f.drift_vol < 0.05;
    return f;
}

// ── Lower bounds ─────────────────────────────────────────────────

struct LowerBoundEntry {
    double eps = 0.0;
    double C_eps = 0.0;           ///< −min_t inf_x Q_ε, Q_ε = log(ωⁿ/(e^{εψ}Ω))
    double C_phi_bound = 0.0;     ///< −min_t inf_x (φ − εψ)
    double C_phidot_bound = 0.0;  ///< −min_t inf_x (φ̇ − εψ)
    std::vector<double> inf_series;
    bool violation = false;
};

struct LowerBoundFit {
    std::vector<LowerBoundEntry> entries;
    std::vector<double> t;
    double window_start = 0.0;
    bool violation = false;

    const LowerBoundEntry& at(double eps) const {
        for (const auto& e : entries)
            if (std::abs(e.eps - eps) < 1e-12) return e;
        throw InvalidInput("no lower-bound entry for eps " + std::to_string(eps));
    }
};

/// A series drifts to −∞ when it decreases at every sample of the final
/// window and loses more than 5% of its scale there.
inline bool drifts_down(const std::vector<double>& t, const std::vector<double>& v, double t_start,
                        double tol) {
    std::size_t k = 0;
    while (k + 1 < t.size() && t[k] < t_start - 1e-12) ++k;
    if (v.size() - k < 3) return false;
    for (std::size_t j = k + 1; j < v.size(); ++j)
        if (!(v[j] < v[j - 1] - tol)) return false;
    return (v[k] - v.back()) > 0.05 * std::max(std::abs(v.back()), 1.0);
}

inline LowerBoundFit check_lower_bounds(const Trajectory& tr, const BackgroundData& bg,
                                        const std::vector<double>& eps_list = default_eps_list(),
                                        double window_start = detail::nan_v) {
    LowerBoundFit f;
    f.window_start = std::isnan(window_start) ? detail::default_window_start(tr) : window_start;
    const auto& m = bg.pole_mask;
    for (double eps : eps_list) {
        if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("eps must lie in (0, 1]");
        LowerBoundEntry e;
        e.eps = eps;
        double q = std::numeric_limits<double>::infinity(), a = q, b = q;
        for (const auto& s : tr.snapshots) {
            double qi = std::numeric_limits<double>::infinity();
            for (std::size_t p = 0; p < s.phi.size(); ++p) {
                if (excluded(m, p)) continue;
                const double ep = eps * bg.psi[p];
                qi = std::min(qi, s.phidot[p] + s.phi[p] - ep);
                a = std::min(a, s.phi[p] - ep);
                b = std::min(b, s.phidot[p] - ep);
            }
            q = std::min(q, qi);
            e.inf_series.push_back(qi);
        }
        e.C_eps = -q;
        e.C_phi_bound = -a;
        e.C_phidot_bound = -b;
        f.entries.push_back(std::move(e));
    }
    for (const auto& s : tr.snapshots) f.t.push_back(s.t);
    const double tol = detail::phidot_noise_floor(bg, tr.back().phi);
    for (auto& e : f.entries) {
        e.violation = drifts_down(f.t, e.inf_series, f.window_start, tol) || !std::isfinite(e.C_eps);
        f.violation = f.violation || e.violation;
    }
    return f;
}

// ── Background geometry of ω₀ used by the trace estimate ────────────────────

/// Chern data of ω₀ that the (∂t − Δ) tr_{ω₀}ω identity needs.
struct ReferenceGeometry {
    ChristoffelField gamma;
    TorsionField T;
    CurvatureField R;
    std::vector<Tensor3Field> dbar_T;  ///< [l](p, q, i, k) = ∂_{l̄} T^q_{ik}
    std::vector<HMat> inv;             ///< ω₀⁻¹ per point
    ScalarField tr_theta;              ///< tr_{ω₀}(ω̂_∞ − ddbar log Ω)

    explicit ReferenceGeometry(const BackgroundData& bg) {
        const auto& c = bg.chart;
        const int n = c.complex_dim();
        gamma = christoffels(bg.omega0);
        T = torsion(gamma);
        R = chern_curvature(gamma);
        inv = inverse_metric(bg.omega0);
        for (int l = 0; l < n; ++l) {
            Tensor3Field d(c);
            for (int q = 0; q < n; ++q)
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < n; ++k) {
                        auto comp = T.component(q, i, k);
                        auto v = d_zbar(c, l, comp);
                        for (std::size_t p = 0; p < c.size(); ++p) d(p, q, i, k) = v[p];
                    }
            dbar_T.push_back(std::move(d));
        }
        tr_theta = detail::trace_with(inv, bg.omega_inf - bg.ddbar_log_Omega);
    }
};

/// Pointwise pieces of the evolution of tr_{ω₀}ω along the flow, for the flow
/// metric ω = ω̂_t + ddbar φ.
struct LogTrTerms {
    ScalarField tr;          ///< tr_{ω₀}ω
    ScalarField rhs_tr;      ///< assembled (∂t − Δ) tr_{ω₀}ω
    ScalarField rhs_logtr;   ///< assembled (∂t − Δ) log tr_{ω₀}ω
    ScalarField torsion_part;   ///< sum of all brackets that contain T₀
    ScalarField torsion_grad;   ///< (2/tr²) Re(g^{l̄k} T^p_{kp} ∂_{l̄} tr)
    ScalarField tr_omega_w0;    ///< tr_ω ω₀
    ScalarField static_lhs_tr;  ///< tr_{ω₀}(ω̂_∞ + ddbar log(ωⁿ/Ω) − ω) − Δ tr
    ScalarField lap_logtr;      ///< Δ_ω log tr (spectral)
};

/// Assembles every bracket of the evolution of tr_{ω₀}ω. With ∇, T, R the
/// Chern data of ω₀, τ = e^{−t} and Θ = ω̂_∞ − ddbar log Ω:
///
///   (∂t − Δ) tr = − g^{j̄p} g^{q̄i} g₀^{l̄k} ∇_k g_{ij̄} ∇_{l̄} g_{pq̄}
///               + 2 Re(g^{j̄i} g₀^{l̄k} T^p_{ik} ∇_{l̄} g_{pj̄})
///               − g^{j̄i} g₀^{l̄k} g_{pq̄} T^p_{ik} conj(T^q_{jl})
///               + g^{j̄i} g₀^{l̄k} g_{kq̄} (∇_i conj(T^q_{jl}) − R_{il̄pj̄} g₀^{q̄p})
///               − τ g^{j̄i} g₀^{l̄k} (∇_{l̄} T^p_{ik} g₀_{pj̄} + ∇_i conj(T^q_{jl}) g₀_{kq̄})
///               + τ g^{j̄i} g₀^{l̄k} T^p_{ik} conj(T^q_{jl}) g₀_{pq̄}
///               − tr + tr_{ω₀}Θ.
///
/// The last term is absent on a compact manifold, where ω̂_∞ = ddbar log Ω.
inline LogTrTerms assemble_logtr(const BackgroundData& bg, const ReferenceGeometry& R0,
                                 const Form11Field& omega, double t) {
    const auto& c = bg.chart;
    const int n = c.complex_dim();
    const std::size_t N = c.size();
    const double tau = std::exp(-t);
    MetricField g(omega);
    auto H = inverse_metric(g);
    auto dg = metric_derivatives(omega);

    LogTrTerms L;
    L.tr = detail::trace_with(R0.inv, omega);
    L.tr_omega_w0 = detail::trace_with(H, bg.omega0.form());
    std::vector<cplx> trc(L.tr.v.begin(), L.tr.v.end());
    std::vector<std::vector<cplx>> dtr(n);
    for (int k = 0; k < n; ++k) dtr[k] = d_z(c, k, trc);
    auto lap_tr = detail::trace_with(H, ddbar(L.tr));
    ScalarField logtr(c);
    for (std::size_t p = 0; p < N; ++p) logtr[p] = std::log(L.tr[p]);
    L.lap_logtr = detail::trace_with(H, ddbar(logtr));

    // static left side: ∂t ω = ω̂_∞ + ddbar log(ωⁿ/Ω) − ω for any potential
    auto vol = top_power(omega);
    ScalarField u(c);
    for (std::size_t p = 0; p < N; ++p) u[p] = std::log(vol.density[p] / bg.Omega.density[p]);
    Form11Field dtw = bg.omega_inf + ddbar(u) - omega;
    L.static_lhs_tr = detail::trace_with(R0.inv, dtw);
    for (std::size_t p = 0; p < N; ++p) L.static_lhs_tr[p] -= lap_tr[p];

    L.rhs_tr = ScalarField(c);
    L.rhs_logtr = ScalarField(c);
    L.torsion_part = ScalarField(c);
    L.torsion_grad = ScalarField(c);
    parallel_for(N, [&](std::size_t pb, std::size_t pe) {
      for (std::size_t p = pb; p < pe; ++p) {
        const HMat G = omega.at(p), Hp = H[p], G0 = bg.omega0.at(p), H0 = R0.inv[p];
        // Dg[k](i, j) = ∇_k g_{ij̄} = ∂_k g_{ij̄} − Γ^q_{ki} g_{qj̄}
        std::array<HMat, 2> Dg{HMat(n), HMat(n)};
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    cplx s = dg[k][i * n + j][p];
                    for (int q = 0; q < n; ++q) s -= R0.gamma(p, q, k, i) * G(q, j);
                    Dg[k](i, j) = s;
                }
        auto T = [&](int q, int i, int k) { return R0.T(p, q, i, k); };
        // ∂_{l̄} T^q_{ik}
        auto dT = [&](int l, int q, int i, int k) { return R0.dbar_T[l](p, q, i, k); };
        cplx grad = 0.0, tor = 0.0, curv = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k)
                    for (int l = 0; l < n; ++l) {
                        const cplx w = Hp(j, i) * H0(l, k);
                        for (int a = 0; a < n; ++a)
                            for (int b = 0; b < n; ++b)
                                // a = p, b = q: g^{j̄p} g^{q̄i} g₀^{l̄k} ∇_k g_{ij̄} conj(∇_l g_{qp̄})
                                grad -= Hp(j, a) * Hp(b, i) * H0(l, k) * Dg[k](i, j) * std::conj(Dg[l](b, a));
                        for (int a = 0; a < n; ++a) {
                            // ∇_{l̄} g_{aj̄} = conj(∇_l g_{jā})
                            tor += 2.0 * std::real(w * T(a, i, k) * std::conj(Dg[l](j, a)));
                            for (int b = 0; b < n; ++b) {
                                const cplx TT = T(a, i, k) * std::conj(T(b, j, l));
                                tor -= w * G(a, b) * TT;
                                tor += tau * w * TT * G0(a, b);
                            }
                            // ∇_i conj(T^a_{jl}) = conj(∂_{ī} T^a_{jl})
                            tor += w * G(k, a) * std::conj(dT(i, a, j, l));
                            tor -= tau * w * (dT(l, a, i, k) * G0(a, j) + std::conj(dT(i, a, j, l)) * G0(k, a));
                            // R_{il̄aj̄} = R_{il̄a}{}^s g₀_{sj̄}
                            for (int b = 0; b < n; ++b) {
                                cplx Rlow = 0.0;
                                for (int s = 0; s < n; ++s) Rlow += R0.R(p, i, l, a, s) * G0(s, j);
                                curv -= w * G(k, b) * H0(b, a) * Rlow;
                            }
                        }
                    }
        const double tr = L.tr[p];
        const double rt = grad.real() + tor.real() + curv.real() - tr + R0.tr_theta[p];
        L.rhs_tr[p] = rt;
        L.torsion_part[p] = tor.real();
        cplx q = 0.0, tg = 0.0;
        for (int k = 0; k < n; ++k)
            for (int l = 0; l < n; ++l) {
                q += Hp(l, k) * dtr[k][p] * std::conj(dtr[l][p]);
                cplx Tk = 0.0;
                for (int a = 0; a < n; ++a) Tk += T(a, k, a);
                tg += Hp(l, k) * Tk * std::conj(dtr[l][p]);
            }
        L.rhs_logtr[p] = rt / tr + q.real() / (tr * tr);
        L.torsion_grad[p] = 2.0 * tg.real() / (tr * tr);
      }
    });
    return L;
}

// ── Evolution identities ────────────────────────────────────────────────────

/// Names of the identity checks, in report order.
inline const std::vector<std::string>& identity_names() {
    static const std::vector<std::string> n{"phi", "phidot", "tilde_phi", "frac", "logtr"};
    return n;
}

/// For every identity (∂t − Δ)F = RHS, the field F and the spatial part
/// ΔF + RHS at one snapshot; the residual is then ∂t F − spatial.
struct IdentityFields {
    double t = 0.0;
    std::vector<ScalarField> F;
    std::vector<ScalarField> spatial;
};

/// Evaluates F and ΔF + RHS for the five evolution identities:
///   (∂t − Δ)φ       = φ̇ − n + tr_ω ω̂_t
///   (∂t − Δ)φ̇       = tr_ω(ω̂_∞ − ω̂_t) − φ̇
///   (∂t − Δ)φ̃       = φ̇ − n + tr_ω S_t,   φ̃ = φ − ψ
///   (∂t − Δ)f       = −φ̇ f² + Δφ̃ f² − 2|∂φ̃|²_ω f³,   f = 1/(φ̃ + C₀)
///   (∂t − Δ)log tr  = assembled trace evolution
/// `with_logtr` = false skips the last one (it is the expensive one).
inline IdentityFields identity_fields(const BackgroundData& bg, const ReferenceGeometry* R0,
                                      const Snapshot& s, double C0, bool with_logtr = true) {
    const auto& c = bg.chart;
    const int n = c.complex_dim();
    const std::size_t N = c.size();
    IdentityFields out;
    out.t = s.t;
    auto ref = reference_metric(bg, s.t);
    auto ddphi = ddbar(s.phi);
    Form11Field omega = ref + ddphi;
    auto H = detail::inverses(omega);
    auto lap = [&](const ScalarField& f) { return detail::trace_with(H, ddbar(f)); };

    auto tr_ref = detail::trace_with(H, ref);
    auto tr_inf = detail::trace_with(H, bg.omega_inf);
    auto tr_ddpsi = detail::trace_with(H, bg.ddbar_psi);
    auto lap_phi = detail::trace_with(H, ddphi);

    ScalarField sa(c), sb(c), sc(c), sd(c);
    auto lap_dot = lap(s.phidot);
    auto tphi = detail::tilde_phi(bg, s.phi);
    ScalarField f(c);
    for (std::size_t p = 0; p < N; ++p) f[p] = 1.0 / (tphi[p] + C0);
    auto lap_f = lap(f);
    std::vector<std::vector<cplx>> dphi(n);
    std::vector<cplx> phc(s.phi.v.begin(), s.phi.v.end());
    for (int k = 0; k < n; ++k) dphi[k] = d_z(c, k, phc);
    for (std::size_t p = 0; p < N; ++p) {
        sa[p] = lap_phi[p] + s.phidot[p] - n + tr_ref[p];
        sb[p] = lap_dot[p] + (tr_inf[p] - tr_ref[p]) - s.phidot[p];
        const double lap_t = lap_phi[p] - tr_ddpsi[p];
        sc[p] = lap_t + s.phidot[p] - n + (tr_ref[p] + tr_ddpsi[p]);
        cplx g2 = 0.0;
        for (int k = 0; k < n; ++k)
            for (int l = 0; l < n; ++l)
                g2 += H[p](l, k) * (dphi[k][p] - bg.dpsi[k][p]) * std::conj(dphi[l][p] - bg.dpsi[l][p]);
        const double fp = f[p];
        sd[p] = lap_f[p] - s.phidot[p] * fp * fp + lap_t * fp * fp - 2.0 * g2.real() * fp * fp * fp;
    }
    out.F = {s.phi, s.phidot, tphi, f};
    out.spatial = {sa, sb, sc, sd};
    if (with_logtr) {
        if (!R0) throw InvalidInput("identity_fields: log tr identity needs the reference geometry");
        auto L = assemble_logtr(bg, *R0, omega, s.t);
        ScalarField lt(c), sp(c);
        for (std::size_t p = 0; p < N; ++p) {
            lt[p] = std::log(L.tr[p]);
            sp[p] = L.lap_logtr[p] + L.rhs_logtr[p];
        }
        out.F.push_back(std::move(lt));
        out.spatial.push_back(std::move(sp));
    }
    return out;
}

struct IdentityRow {
    double t = 0.0;
    std::vector<double> residual;  ///< one per identity, sup over unmasked points
};

struct EvolutionReport {
    int stride = 1;
    double C0 = 1.0;
    std::vector<IdentityRow> rows;

    /// Sup of identity `k` over rows with t in [t_lo, t_hi].
    double sup(std::size_t k, double t_lo = -1e300, double t_hi = 1e300) const {
        double s = 0.0;
        for (const auto& r : rows)
            if (r.t >= t_lo - 1e-12 && r.t <= t_hi + 1e-12 && k < r.residual.size())
                s = std::max(s, r.residual[k]);
        return s;
    }
};

/// Residuals from precomputed per-snapshot fields, with the time derivative
/// as the centered difference over snapshots i ± stride.
inline EvolutionReport residuals_from_fields(const std::vector<IdentityFields>& fields, const Mask& m,
                                             int stride) {
    if (stride < 1) throw InvalidInput("stride must be >= 1");
    EvolutionReport rep;
    rep.stride = stride;
    const std::size_t s = static_cast<std::size_t>(stride);
    for (std::size_t i = s; i + s < fields.size(); ++i) {
        const auto& a = fields[i - s];
        const auto& b = fields[i + s];
        const double dt = b.t - a.t;
        IdentityRow row;
        row.t = fields[i].t;
        for (std::size_t k = 0; k < fields[i].F.size(); ++k) {
            double worst = 0.0;
            for (std::size_t p = 0; p < a.F[k].size(); ++p) {
                if (excluded(m, p)) continue;
                const double r = (b.F[k][p] - a.F[k][p]) / dt - fields[i].spatial[k][p];
                worst = std::max(worst, std::abs(r));
            }
            row.residual.push_back(worst);
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

inline std::vector<IdentityFields> all_identity_fields(const Trajectory& tr, const BackgroundData& bg,
                                                       double C0, bool with_logtr) {
    std::unique_ptr<ReferenceGeometry> R0;
    if (with_logtr) R0 = std::make_unique<ReferenceGeometry>(bg);
    std::vector<IdentityFields> out;
    for (const auto& s : tr.snapshots) out.push_back(identity_fields(bg, R0.get(), s, C0, with_logtr));
    return out;
}

/// Residual report for the φ, φ̇, φ̃ and 1/(φ̃ + C₀) identities (and the
/// log tr identity when `with_logtr`).
inline EvolutionReport check_evolution_identities(const Trajectory& tr, const BackgroundData& bg, double C0,
                                                  int stride = 1, bool with_logtr = false) {
    auto f = all_identity_fields(tr, bg, C0, with_logtr);
    auto r = residuals_from_fields(f, bg.pole_mask, stride);
    r.C0 = C0;
    return r;
}

/// Ratio residual(2·stride)/residual(stride) of identity k over a time window.
struct RichardsonResult {
    double coarse = 0.0, fine = 0.0, ratio = 0.0;
    bool second_order() const { return ratio >= 3.0 && ratio <= 5.0; }
};

inline RichardsonResult richardson(const std::vector<IdentityFields>& fields, const Mask& m, std::size_t k,
                                   int stride, double t_lo, double t_hi) {
    auto fine = residuals_from_fields(fields, m, stride);
    auto coarse = residuals_from_fields(fields, m, 2 * stride);
    RichardsonResult r;
    r.fine = fine.sup(k, t_lo, t_hi);
    r.coarse = coarse.sup(k, t_lo, t_hi);
    r.ratio = r.coarse / r.fine;
    return r;
}

struct LogTrReport {
    std::vector<double> t;
    std::vector<double> residual;  ///< identity residual (interior snapshots)
    double C_evo = 0.0;            ///< smallest C making the trace inequality hold
    double torsion_sup = 0.0;      ///< sup of |torsion brackets| over the run
    bool torsion_vanishes = false;
};

/// Identity mode and inequality mode for log tr_{ω₀}ω. The inequality is
///   (∂t − Δ) log tr ≤ (2/tr²) Re(g^{l̄k} T^p_{kp} ∂_{l̄} tr) + C tr_ω ω₀,
/// evaluated with the assembled left side at every unmasked point and
/// snapshot, so C_evo is free of time-discretization error.
inline LogTrReport check_logtr_evolution(const Trajectory& tr, const BackgroundData& bg, int stride = 1) {
    ReferenceGeometry R0(bg);
    LogTrReport rep;
    std::vector<IdentityFields> fields;
    double cevo = -std::numeric_limits<double>::infinity();
    const auto& m = bg.pole_mask;
    for (const auto& s : tr.snapshots) {
        auto omega = flow_metric(bg, s.phi, s.t);
        auto L = assemble_logtr(bg, R0, omega, s.t);
        IdentityFields f;
        f.t = s.t;
        ScalarField lt(bg.chart), sp(bg.chart);
        for (std::size_t p = 0; p < lt.size(); ++p) {
            lt[p] = std::log(L.tr[p]);
            sp[p] = L.lap_logtr[p] + L.rhs_logtr[p];
            if (excluded(m, p)) continue;
            cevo = std::max(cevo, (L.rhs_logtr[p] - L.torsion_grad[p]) / L.tr_omega_w0[p]);
            rep.torsion_sup = std::max(rep.torsion_sup, std::abs(L.torsion_part[p]));
        }
        f.F.push_back(std::move(lt));
        f.spatial.push_back(std::move(sp));
        fields.push_back(std::move(f));
    }
    auto res = residuals_from_fields(fields, m, stride);
    for (const auto& r : res.rows) {
        rep.t.push_back(r.t);
        rep.residual.push_back(r.residual[0]);
    }
    rep.C_evo = cevo;
    rep.torsion_vanishes = rep.torsion_sup == 0.0;
    return rep;
}

// ── Constants and trace bound ────────────────────────────────────

struct ChosenConstants {
    double A = 0.0;
    double C0 = 1.0;
    double C_evo = 0.0;
    double s_min = 0.0;  ///< min eig of S_t against ω₀ over t ≥ T0, unmasked
    double T0 = 0.0;
};

/// min over t ≥ T0 of the smallest eigenvalue of S_t = (ω̂_∞ + ddbar ψ) +
/// e^{−t}(ω₀ − ω̂_∞). The smallest eigenvalue is concave in e^{−t}, so the
/// minimum sits at t = T0 or t → ∞.
inline double s_current_min_eig(const BackgroundData& bg, double T0) {
    const auto K = bg.omega_inf + bg.ddbar_psi;
    Form11Field D = bg.omega0.form() - bg.omega_inf;
    D *= std::exp(-T0);
    const double a = masked_min_eig(K, bg.omega0, bg.pole_mask);
    const double b = masked_min_eig(K + D, bg.omega0, bg.pole_mask);
    return std::min(a, b);
}

/// Ladder search for A; separate so the arithmetic can be checked directly.
inline double choose_A(double s_min, double C_evo) {
    if (!(s_min > 0.0)) throw InvalidBackground("S_t is not positive for t >= T0", s_min);
    const double need = std::max(C_evo, 0.0) + 1.0;
    double a1 = 1.0;
    while (a1 * s_min < need) a1 *= 2.0;
    return a1 - 1.0;
}

/// C₀ = 1 − inf φ̃ over the snapshots with t ≤ t_prefix; A + 1 is the
/// smallest power of two with (A + 1)·s_min ≥ max(C_evo, 0) + 1.
inline ChosenConstants choose_constants(const BackgroundData& bg, const Trajectory& tr, double C_evo,
                                        double t_prefix = std::numeric_limits<double>::infinity()) {
    ChosenConstants k;
    k.C_evo = C_evo;
    k.T0 = find_T0(bg);
    double inf_t = std::numeric_limits<double>::infinity();
    for (const auto& s : tr.snapshots) {
        if (s.t > t_prefix + 1e-12) break;
        for (std::size_t p = 0; p < s.phi.size(); ++p)
            if (!excluded(bg.pole_mask, p)) inf_t = std::min(inf_t, s.phi[p] - bg.psi[p]);
    }
    k.C0 = 1.0 - inf_t;
    k.s_min = s_current_min_eig(bg, k.T0);
    k.A = choose_A(k.s_min, C_evo);
    return k;
}

struct TraceBoundFit {
    std::vector<double> t;
    std::vector<double> Q_sup;     ///< sup over unmasked points of Q at each snapshot
    double Q_spread = 0.0;         ///< (max − min) of Q_sup over the window, relative
    bool Q_stable = true;
    double window_start = 0.0;
    double frac_min = 0.0, frac_max = 0.0;  ///< range of 1/(φ̃ + C₀)

    // shell regression log tr = C·(−ψ) + b at the final snapshot
    double C = 0.0;
    double intercept = 0.0;
    double R2 = std::numeric_limits<double>::quiet_NaN();
    int shells = 0;
    double C_prime = 0.0;         ///< sup over run of tr_{ω₀}ω·e^{Cψ}
    double C_prime_window = 0.0;  ///< same sup over the final window only
    double A_exponent = 0.0;      ///< exponent implied by the Q bound (= A)
    bool exponent_disagreement = false;

    // e^{Cψ}/C″ ω₀ ≤ ω ≤ C″ e^{−Cψ} ω₀; C″ is the sup over the run and must not
    // grow by 5% or more inside the window
    double C_double_prime = 0.0;
    double unifequiv_prefix = 0.0;        ///< same sup before the window
    double unifequiv_window_worst = 0.0;  ///< largest ratio seen in the window
    bool unifequiv_holds = true;
    bool violation = false;
};

/// Q = log tr_{ω₀}ω − Aφ̃ + 1/(φ̃ + C₀) per snapshot, the pole regression of
/// log tr against −ψ, and both sides of the uniform equivalence.
inline TraceBoundFit check_trace_bound(const Trajectory& tr, const BackgroundData& bg, double A, double C0,
                                       double window_start = detail::nan_v, double r_max = 0.3) {
    TraceBoundFit f;
    f.window_start = std::isnan(window_start) ? detail::default_window_start(tr) : window_start;
    const auto& c = bg.chart;
    const auto& m = bg.pole_mask;
    const std::size_t N = c.size();
    f.frac_min = std::numeric_limits<double>::infinity();
    f.frac_max = -f.frac_min;

    std::vector<ScalarField> trs, lmin, lmax;
    for (const auto& s : tr.snapshots) {
        auto omega = flow_metric(bg, s.phi, s.t);
        ScalarField trw(c), lo(c), hi(c);
        double q = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < N; ++p) {
            const HMat w0 = bg.omega0.at(p), w = omega.at(p);
            trw[p] = trace_at(w0, w);
            auto [a, b] = generalized_eigenvalues(w, w0);
            lo[p] = a;
            hi[p] = b;
            if (excluded(m, p)) continue;
            const double tp = s.phi[p] - bg.psi[p];
            const double fr = 1.0 / (tp + C0);
            f.frac_min = std::min(f.frac_min, fr);
            f.frac_max = std::max(f.frac_max, fr);
            q = std::max(q, std::log(trw[p]) - A * tp + fr);
        }
        f.t.push_back(s.t);
        f.Q_sup.push_back(q);
        trs.push_back(std::move(trw));
        lmin.push_back(std::move(lo));
        lmax.push_back(std::move(hi));
    }
    f.Q_spread = detail::window_spread(f.t, f.Q_sup, f.window_start);
    f.Q_stable = std::isfinite(f.Q_spread) && f.Q_spread < 0.05;

    // shell-averaged regression at the final snapshot
    if (bg.has_pole()) {
        const double h = c.spacing();
        const int nsh = static_cast<int>(std::floor((r_max - bg.r_mask) / h));
        std::vector<double> sx(nsh, 0.0), sy(nsh, 0.0), cnt(nsh, 0.0);
        for (std::size_t p = 0; p < N; ++p) {
            if (excluded(m, p)) continue;
            const double r = c.distance_to_pole(p);
            if (r > r_max) continue;
            const int b = std::min(nsh - 1, static_cast<int>((r - bg.r_mask) / h));
            if (b < 0) continue;
            sx[b] += -bg.psi[p];
            sy[b] += std::log(trs.back()[p]);
            cnt[b] += 1.0;
        }
        std::vector<double> X, Y;
        for (int b = 0; b < nsh; ++b)
            if (cnt[b] > 0) {
                X.push_back(sx[b] / cnt[b]);
                Y.push_back(sy[b] / cnt[b]);
            }
        f.shells = static_cast<int>(X.size());
        if (X.size() >= 3) {
            double mx = 0, my = 0;
            for (std::size_t i = 0; i < X.size(); ++i) {
                mx += X[i];
                my += Y[i];
            }
            mx /= X.size();
            my /= Y.size();
            double sxx = 0, sxy = 0, syy = 0;
            for (std::size_t i = 0; i < X.size(); ++i) {
                sxx += (X[i] - mx) * (X[i] - mx);
                sxy += (X[i] - mx) * (Y[i] - my);
                syy += (Y[i] - my) * (Y[i] - my);
            }
            f.C = sxy / sxx;
            f.intercept = my - f.C * mx;
            f.R2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
        }
    }
    f.A_exponent = A;
    if (f.C > 0.0) f.exponent_disagreement = std::max(f.C, A) > 2.0 * std::min(f.C, A);

    // C′ and C″ with the fitted exponent (C = 0 without a pole)
    const double Cx = std::max(f.C, 0.0);
    double cdp = 0.0, worst = 0.0;
    for (std::size_t k = 0; k < trs.size(); ++k) {
        const bool in_window = f.t[k] >= f.window_start - 1e-12;
        for (std::size_t p = 0; p < N; ++p) {
            if (excluded(m, p)) continue;
            const double w = std::exp(Cx * bg.psi[p]);
            const double cp = trs[k][p] * w;
            f.C_prime = std::max(f.C_prime, cp);
            if (in_window) f.C_prime_window = std::max(f.C_prime_window, cp);
            const double ratio = std::max(lmax[k][p] * w, w / lmin[k][p]);
            if (!in_window)
                cdp = std::max(cdp, ratio);
            else
                worst = std::max(worst, ratio);
        }
    }
    f.unifequiv_prefix = cdp;
    f.unifequiv_window_worst = worst;
    f.C_double_prime = std::max(cdp, worst);
    f.unifequiv_holds = std::isfinite(f.C_double_prime) && cdp > 0.0 && worst < cdp * 1.05;
    f.violation = !f.Q_stable || !f.unifequiv_holds || !(f.frac_min > 0.0 && f.frac_max <= 1.0 + 1e-12);
    return f;
}

// ── Convergence quantity ────────────────────────────────────────────────────

struct MonotoneReport {
    double C = 0.0;
    double t1 = 1.0;
    double max_increase = 0.0;  ///< largest sup_x [Q(t_{k+1}) − Q(t_k)] for t_k ≥ t1
    double tolerance = 0.0;
    bool monotone = true;
};

/// Q = φ + C(1 + t)e^{−t} has ∂t Q = φ̇ − C t e^{−t} ≤ 0 once φ̇ ≤ C t e^{−t},
/// so Q is pointwise non-increasing for t ≥ t1 with C = C_phidot.
inline MonotoneReport check_monotone_quantity(const Trajectory& tr, const BackgroundData& bg, double C,
                                              double t1 = 1.0) {
    MonotoneReport r;
    r.C = C;
    r.t1 = t1;
    const auto& S = tr.snapshots;
    for (std::size_t k = 0; k + 1 < S.size(); ++k) {
        if (S[k].t < t1 - 1e-12) continue;
        const double dt = S[k + 1].t - S[k].t;
        const double nu = detail::phidot_noise_floor(bg, S[k].phi);
        r.tolerance = std::max(r.tolerance, nu * dt);
        const double qa = C * (1.0 + S[k].t) * std::exp(-S[k].t);
        const double qb = C * (1.0 + S[k + 1].t) * std::exp(-S[k + 1].t);
        double worst = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < S[k].phi.size(); ++p) {
            if (excluded(bg.pole_mask, p)) continue;
            worst = std::max(worst, (S[k + 1].phi[p] + qb) - (S[k].phi[p] + qa));
        }
        r.max_increase = std::max(r.max_increase, worst);
        if (worst > nu * dt) r.monotone = false;
    }
    return r;
}

// ── Per-snapshot diagnostics ────────────────────────────────────────────────

struct DiagnosticsRecord {
    double t = 0.0;
    double sup_phi = 0.0;
    double sup_phidot = 0.0;
    double sup_volume_ratio = 0.0;
    std::vector<double> eps;
    std::vector<double> inf_Q_eps;  ///< inf log(ωⁿ/(e^{εψ}Ω)) per ε
    double sup_tr = 0.0;            ///< sup tr_{ω₀}ω
    double sup_tr_weighted = 0.0;   ///< sup tr_{ω₀}ω·e^{Cψ}
    double Q_phong_sturm_sup = 0.0;
    double S_t_min_eig = 0.0;
    double einstein_residual = 0.0;
    /// Identity residuals by name; time derivatives use the neighbouring
    /// snapshots (one-sided three-point at the ends).
    std::map<std::string, double> identity_residuals;
};

struct DiagnosticsOptions {
    double A = 0.0;
    double C0 = 1.0;
    double C_trace = 0.0;  ///< exponent C in tr·e^{Cψ}
    std::vector<double> eps_list = default_eps_list();
    bool identities = true;
    bool logtr_identity = true;
};

namespace detail {

/// Three-point derivative weights at node j of (t0, t1, t2).
inline std::array<double, 3> lagrange_derivative(double t0, double t1, double t2, int j) {
    const double x = j == 0 ? t0 : (j == 1 ? t1 : t2);
    return {((x - t1) + (x - t2)) / ((t0 - t1) * (t0 - t2)), ((x - t0) + (x - t2)) / ((t1 - t0) * (t1 - t2)),
            ((x - t0) + (x - t1)) / ((t2 - t0) * (t2 - t1))};
}

}  // namespace detail

inline std::vector<DiagnosticsRecord> compute_diagnostics(const Trajectory& tr, const BackgroundData& bg,
                                                          const DiagnosticsOptions& opt) {
    const auto& c = bg.chart;
    const auto& m = bg.pole_mask;
    const std::size_t N = c.size();
    const auto& S = tr.snapshots;
    std::vector<IdentityFields> idf;
    if (opt.identities && S.size() >= 3)
        idf = all_identity_fields(tr, bg, opt.C0, opt.logtr_identity);

    std::vector<DiagnosticsRecord> out;
    for (std::size_t i = 0; i < S.size(); ++i) {
        const auto& s = S[i];
        DiagnosticsRecord d;
        d.t = s.t;
        d.sup_phi = masked_sup(s.phi.v, m);
        d.sup_phidot = masked_sup(s.phidot.v, m);
        auto omega = flow_metric(bg, s.phi, s.t);
        double sv = 0.0, st = 0.0, sw = 0.0, qps = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < N; ++p) {
            if (excluded(m, p)) continue;
            sv = std::max(sv, std::exp(s.phi[p] + s.phidot[p]));
            const double trw = trace_at(bg.omega0.at(p), omega.at(p));
            st = std::max(st, trw);
            sw = std::max(sw, trw * std::exp(opt.C_trace * bg.psi[p]));
            const double tp = s.phi[p] - bg.psi[p];
            qps = std::max(qps, std::log(trw) - opt.A * tp + 1.0 / (tp + opt.C0));
        }
        d.sup_volume_ratio = sv;
        d.sup_tr = st;
        d.sup_tr_weighted = sw;
        d.Q_phong_sturm_sup = qps;
        for (double e : opt.eps_list) {
            double q = std::numeric_limits<double>::infinity();
            for (std::size_t p = 0; p < N; ++p)
                if (!excluded(m, p)) q = std::min(q, s.phidot[p] + s.phi[p] - e * bg.psi[p]);
            d.eps.push_back(e);
            d.inf_Q_eps.push_back(q);
        }
        d.S_t_min_eig = masked_min_eig(s_current(bg, s.t), bg.omega0, m);
        Form11Field er = ricci_form(bg, omega) + omega;
        d.einstein_residual = er.sup_norm(m);
        if (!idf.empty()) {
            const std::size_t a = i == 0 ? 0 : (i + 1 == S.size() ? i - 2 : i - 1);
            const int j = static_cast<int>(i - a);
            auto w = detail::lagrange_derivative(S[a].t, S[a + 1].t, S[a + 2].t, j);
            const auto& names = identity_names();
            for (std::size_t k = 0; k < idf[i].F.size(); ++k) {
                double worst = 0.0;
                for (std::size_t p = 0; p < N; ++p) {
                    if (excluded(m, p)) continue;
                    const double dt = w[0] * idf[a].F[k][p] + w[1] * idf[a + 1].F[k][p] + w[2] * idf[a + 2].F[k][p];
                    worst = std::max(worst, std::abs(dt - idf[i].spatial[k][p]));
                }
                d.identity_residuals[names[k]] = worst;
            }
        }
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace crf
