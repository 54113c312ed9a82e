#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crf/geometry.hpp"

namespace crf {

/// Which constructor produced a background, with its parameters. Kept so
/// reports and dumps can say where their data came from.
struct ScenarioInfo {
    std::string name = "custom";
    int variant = 0;
    double kappa = 0.0;
    double delta = 0.0;
    double pole_volume_exponent = 0.0;
    double a0 = 0.0, a_inf = 0.0, omega_const = 0.0;
};

/// Fixed geometric inputs of a run. Construct through a scenario function or
/// fill the fields and call validate(); treat as immutable afterwards.
struct BackgroundData {
    GridChart chart;
    MetricField omega0;
    Form11Field omega_inf;
    VolumeFormField Omega;
    ScalarField psi;
    double psi_regularization_delta = 0.0;
    Mask pole_mask;
    double r_mask = 0.0;
    double c0 = 0.0;
    double C_lemma33 = 0.0;
    /// When false the volume of Ω is prescribed directly (homogeneous ODE
    /// scenario) and is not tied to the volume of ω₀.
    bool mass_normalized = true;
    ScenarioInfo info;

    /// ddbar ψ and ∂_k ψ. Scenarios with a regularized pole fill these from
    /// closed forms: when δ is below a few grid cells, spectral derivatives
    /// of ψ ring with amplitude ~κ/δ² across the whole grid. Otherwise they
    /// are computed spectrally at validation.
    Form11Field ddbar_psi;
    std::vector<std::vector<cplx>> dpsi;
    /// ddbar log Ω (density), same convention as ddbar_psi.
    Form11Field ddbar_log_Omega;

    bool has_pole() const { return !pole_mask.empty(); }
};

// ── Measurements used by validation and scenario construction ───────────────

/// min over unmasked points of the smallest eigenvalue of α against ω₀.
inline double masked_min_eig(const Form11Field& alpha, const MetricField& base, const Mask& m) {
    return masked_inf(min_eigenvalue(alpha, base).v, m);
}

/// Fills ddbar_psi, measures c0 = 0.9·min eig(ω̂_∞ + ddbar ψ, ω₀) and
/// C_lemma33 = 1.1·max(−min eig(ddbar ψ, ω₀), 0), then validates.
inline void fill_psi_derivatives(BackgroundData& bg) {
    if (bg.ddbar_psi.size() != bg.chart.size()) bg.ddbar_psi = ddbar(bg.psi);
    if (bg.ddbar_log_Omega.size() != bg.chart.size()) {
        ScalarField lo(bg.chart);
        for (std::size_t p = 0; p < lo.size(); ++p) lo[p] = std::log(bg.Omega.density[p]);
        bg.ddbar_log_Omega = ddbar(lo);
    }
    if (bg.dpsi.size() != static_cast<std::size_t>(bg.chart.complex_dim())) {
        bg.dpsi.clear();
        std::vector<cplx> c(bg.psi.v.begin(), bg.psi.v.end());
        for (int k = 0; k < bg.chart.complex_dim(); ++k) bg.dpsi.push_back(d_z(bg.chart, k, c));
    }
}

inline void measure_constants(BackgroundData& bg) {
    fill_psi_derivatives(bg);
    const double lam = masked_min_eig(bg.omega_inf + bg.ddbar_psi, bg.omega0, bg.pole_mask);
    if (!(lam > 0.0))
        throw InvalidBackground("omega_inf + ddbar psi is not positive against omega0 "
                                "(min eigenvalue " + std::to_string(lam) + ")",
                                lam);
    bg.c0 = 0.9 * lam;
    const double lo = masked_min_eig(bg.ddbar_psi, bg.omega0, bg.pole_mask);
    bg.C_lemma33 = 1.1 * std::max(-lo, 0.0) + 1e-12;
}

/// Checks every BackgroundData invariant; throws InvalidBackground naming the
/// first one that fails.
inline void validate(BackgroundData& bg) {
    const auto& c = bg.chart;
    if (!(bg.omega0.chart() == c) || !(bg.omega_inf.chart() == c) || !(bg.Omega.chart == c) ||
        !(bg.psi.chart == c))
        throw InvalidBackground("background fields live on different charts");
    if (!bg.pole_mask.empty() && bg.pole_mask.size() != c.size())
        throw InvalidBackground("pole mask shape mismatch");
    if (!bg.omega_inf.is_hermitian(1e-12)) throw InvalidBackground("omega_inf is not Hermitian");
    if (!bg.psi.all_finite()) throw InvalidBackground("psi has non-finite samples");
    if (!bg.Omega.positive()) throw InvalidBackground("Omega density must be positive");
    fill_psi_derivatives(bg);
    if (!bg.ddbar_psi.is_hermitian(1e-12)) throw InvalidBackground("ddbar psi is not Hermitian");

    const double winf_min = masked_inf(min_eigenvalue(bg.omega_inf, bg.omega0).v);
    if (winf_min < -1e-12)
        throw InvalidBackground("omega_inf must be semipositive", winf_min);

    const double sup_psi = masked_sup(bg.psi.v, bg.pole_mask);
    if (std::abs(sup_psi) > 1e-12) throw InvalidBackground("sup psi over unmasked points must be 0", sup_psi);

    if (!(bg.c0 > 0.0)) throw InvalidBackground("c0 must be positive", bg.c0);
    const double kc = masked_min_eig(bg.omega_inf + bg.ddbar_psi, bg.omega0, bg.pole_mask);
    if (kc < bg.c0 - 1e-12)
        throw InvalidBackground("Kahler current inequality fails: min eigenvalue " + std::to_string(kc) +
                                    " < c0 = " + std::to_string(bg.c0),
                                kc);

    if (!(bg.C_lemma33 > 0.0)) throw InvalidBackground("C_lemma33 must be positive", bg.C_lemma33);
    const double lo = masked_min_eig(bg.ddbar_psi, bg.omega0, bg.pole_mask);
    if (lo < -bg.C_lemma33 - 1e-12)
        throw InvalidBackground("ddbar psi >= -C omega0 fails", lo);

    if (bg.mass_normalized) {
        const double m0 = top_power(bg.omega0.form()).total_mass();
        const double m = bg.Omega.total_mass();
        if (std::abs(m - m0) > 1e-10 * m0)
            throw InvalidBackground("Omega mass differs from omega0^n mass", m - m0);
    }
}

// ── Reference family and currents ───────────────────────────────────────────

/// ω̂_t = e^{−t}ω₀ + (1 − e^{−t})ω̂_∞; returns ω₀ itself at t = 0.
inline Form11Field reference_metric(const BackgroundData& bg, double t) {
    if (t < 0.0) throw InvalidInput("reference_metric needs t >= 0");
    if (t == 0.0) return bg.omega0.form();
    const double e = std::exp(-t);
    Form11Field out = bg.omega0.form();
    out *= e;
    Form11Field w = bg.omega_inf;
    w *= (1.0 - e);
    out += w;
    return out;
}

/// S_t = ω̂_t + ddbar ψ.
inline Form11Field s_current(const BackgroundData& bg, double t) {
    return reference_metric(bg, t) + bg.ddbar_psi;
}

/// Smallest T0 on the 0.1 grid with e^{−t}·min eig(ω₀ − ω̂_∞, ω₀) ≥ −c₀/2 for
/// all t ≥ T0. Since S_t = (ω̂_∞ + ddbar ψ) + e^{−t}(ω₀ − ω̂_∞), this gives
/// S_t ≥ (c₀/2)ω₀ on unmasked points for t ≥ T0.
inline double find_T0(const BackgroundData& bg) {
    const double m = masked_min_eig(bg.omega0.form() - bg.omega_inf, bg.omega0, bg.pole_mask);
    if (m >= -0.5 * bg.c0) return 0.0;
    int k = 0;
    while (std::exp(-0.1 * k) * m < -0.5 * bg.c0) ++k;
    return 0.1 * k;
}

struct Lemma33Entry {
    double eps;
    double margin;       ///< min eig of ω̂_∞ + ε ddbar ψ − ε c₀ ω₀ against ω₀
    double near_margin;  ///< same, restricted to the first unmasked shell around the pole
    bool pass;
};

struct Lemma33Report {
    std::vector<Lemma33Entry> entries;
    bool all_pass = true;
};

/// Per-ε check of ω̂_∞ + ε ddbar ψ ≥ ε c₀ ω₀ on unmasked points.
inline Lemma33Report verify_lemma33(const BackgroundData& bg, const std::vector<double>& eps_list) {
    Lemma33Report rep;
    Mask near(bg.chart.size(), 1);
    const double h = bg.chart.spacing();
    for (std::size_t p = 0; p < bg.chart.size(); ++p)
        if (!excluded(bg.pole_mask, p) && bg.chart.distance_to_pole(p) <= bg.r_mask + 2.0 * h)
            near[p] = 0;
    for (double eps : eps_list) {
        if (!(eps > 0.0 && eps <= 1.0)) throw InvalidInput("eps must lie in (0, 1]");
        Form11Field a = bg.ddbar_psi;
        a *= eps;
        a += bg.omega_inf;
        Form11Field w = bg.omega0.form();
        w *= eps * bg.c0;
        a -= w;
        auto e = min_eigenvalue(a, bg.omega0);
        Lemma33Entry en;
        en.eps = eps;
        en.margin = masked_inf(e.v, bg.pole_mask);
        en.near_margin = bg.has_pole() ? masked_inf(e.v, near) : en.margin;
        en.pass = en.margin >= -1e-8;
        rep.all_pass = rep.all_pass && en.pass;
        rep.entries.push_back(en);
    }
    return rep;
}

/// Chern-Ricci form of a flow metric relative to the background pair:
/// Ric(ω) := −ddbar log(ωⁿ/Ω) − ω̂_∞.
inline Form11Field ricci_form(const BackgroundData& bg, const Form11Field& omega) {
    auto vol = top_power(omega);
    ScalarField u(bg.chart);
    for (std::size_t p = 0; p < u.size(); ++p) {
        if (!(vol.density[p] > 0.0)) throw DegenerateMetric("non-positive volume in ricci_form", p);
        u[p] = std::log(vol.density[p] / bg.Omega.density[p]);
    }
    Form11Field r = ddbar(u);
    r *= -1.0;
    r -= bg.omega_inf;
    return r;
}

// ── Scenarios ───────────────────────────────────────────────────────────────

namespace detail {

inline double conformal_factor(const std::array<double, 4>& x, int variant) {
    if (variant == 0) return 1.0 + 0.3 * std::sin(2 * pi * x[0]) * std::sin(2 * pi * x[1]);
    return 1.0 + 0.25 * std::cos(2 * pi * (x[0] + x[1]));
}

inline Form11Field conformal_form(const GridChart& c, int variant, double scale) {
    return Form11Field::sample(c, [&](const std::array<double, 4>& x) {
        return HMat::identity(c.complex_dim(), scale * conformal_factor(x, variant));
    });
}

/// ω̂_∞ = b·Id + 0.2·ddbar β with b large enough that ω̂_∞ ≥ ¼ λ_max(ω₀)·Id.
inline Form11Field smooth_limit_form(const GridChart& c, const MetricField& w0) {
    const int n = c.complex_dim();
    auto beta = ScalarField::sample(c, [&](const std::array<double, 4>& x) {
        double s = -std::cos(2 * pi * x[0]) - std::cos(2 * pi * x[1]);
        if (n == 1) return std::exp(s) / (pi * pi * std::exp(2.0));
        s += -std::cos(2 * pi * x[2]) - std::cos(2 * pi * x[3]) - std::cos(2 * pi * (x[0] + x[2]));
        return s / (2.0 * pi * pi);
    });
    Form11Field bump = ddbar(beta);
    bump *= 0.2;
    double b = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p) {
        const double need = 0.25 * eigenvalues(w0.at(p)).second - eigenvalues(bump.at(p)).first;
        b = std::max(b, need);
    }
    b = std::ceil(b * 100.0 - 1e-9) / 100.0;
    return Form11Field::identity(c, b) + bump;
}

inline std::vector<double> smooth_log_density(const GridChart& c) {
    const int n = c.complex_dim();
    std::vector<double> v(c.size());
    for (std::size_t p = 0; p < c.size(); ++p) {
        const double x1 = c.coord(p, 0), y1 = c.coord(p, 1);
        double s = 0.2 * std::sin(2 * pi * x1) * std::cos(2 * pi * y1) + 0.1 * std::sin(2 * pi * y1);
        if (n == 2) s += 0.1 * std::sin(2 * pi * c.coord(p, 2));
        v[p] = s;
    }
    return v;
}

/// Ω = exp(logd)·dV rescaled so its mass equals the mass of ω₀ⁿ.
inline VolumeFormField normalized_volume(const GridChart& c, const std::vector<double>& logd,
                                         const MetricField& w0) {
    std::vector<double> d(c.size());
    for (std::size_t p = 0; p < c.size(); ++p) d[p] = std::exp(logd[p]);
    const double target = top_power(w0.form()).total_mass();
    const double m = integrate(c, d);
    for (auto& x : d) x *= target / m;
    return VolumeFormField(c, std::move(d));
}

/// Unnormalized log((sin²πx₁ + sin²πy₁ + δ²)/(1 + δ²)).
inline ScalarField pole_profile(const GridChart& c, double delta) {
    const double d2 = delta * delta;
    return ScalarField::sample(c, [&](const std::array<double, 4>& x) {
        const double s = std::pow(std::sin(pi * x[0]), 2) + std::pow(std::sin(pi * x[1]), 2);
        return std::log((s + d2) / (1.0 + d2));
    });
}

/// Closed-form ∂_{z₁} and ∂_{z₁}∂_{z̄₁} of pole_profile (δ-independent of the
/// grid). With u = sin²πx + sin²πy + δ²:
///   ∂_z f = (π/2u)(sin 2πx − i sin 2πy)
///   ∂_z∂_z̄ f = ¼[2π²(cos 2πx + cos 2πy)/u − π²(sin² 2πx + sin² 2πy)/u²]
inline void pole_profile_derivatives(const GridChart& c, double delta, std::vector<cplx>& dz,
                                     std::vector<double>& lap) {
    const double d2 = delta * delta;
    dz.assign(c.size(), 0.0);
    lap.assign(c.size(), 0.0);
    for (std::size_t p = 0; p < c.size(); ++p) {
        const double x = c.coord(p, 0), y = c.coord(p, 1);
        const double u = std::pow(std::sin(pi * x), 2) + std::pow(std::sin(pi * y), 2) + d2;
        const double sx = std::sin(2 * pi * x), sy = std::sin(2 * pi * y);
        dz[p] = (pi / (2.0 * u)) * cplx(sx, -sy);
        lap[p] = 0.25 * (2 * pi * pi * (std::cos(2 * pi * x) + std::cos(2 * pi * y)) / u -
                         pi * pi * (sx * sx + sy * sy) / (u * u));
    }
}

}  // namespace detail

/// Smooth scenario: ψ ≡ 0, conformally flat ω₀ (torsion-carrying when n = 2),
/// ω̂_∞ = b·Id + 0.2·ddbar(bump), Ω = e^v·dV normalized. Variant 1 swaps ω₀
/// for a different conformal factor of the same total volume and keeps
/// ω̂_∞, Ω and ψ of variant 0.
inline BackgroundData scenario_smooth(int resolution, int n, int variant = 0,
                                      DiffMode mode = DiffMode::spectral) {
    if (variant != 0 && variant != 1) throw ConfigError("smooth scenario variant must be 0 or 1");
    GridChart c(n, resolution, mode);
    BackgroundData bg;
    bg.chart = c;
    MetricField base(detail::conformal_form(c, 0, 1.0));
    bg.omega_inf = detail::smooth_limit_form(c, base);
    bg.Omega = detail::normalized_volume(c, detail::smooth_log_density(c), base);
    if (variant == 0) {
        bg.omega0 = base;
    } else {
        // match ∫ n! det ω₀' to ∫ n! det ω₀ so the same Ω stays normalized
        MetricField trial(detail::conformal_form(c, 1, 1.0));
        const double ratio = top_power(base.form()).total_mass() / top_power(trial.form()).total_mass();
        bg.omega0 = MetricField(detail::conformal_form(c, 1, std::pow(ratio, 1.0 / n)));
    }
    bg.psi = ScalarField(c, 0.0);
    bg.info.name = "smooth";
    bg.info.variant = variant;
    measure_constants(bg);
    validate(bg);
    return bg;
}

/// Largest κ keeping ω̂_∞ + κ·ddbar ψ₁ positive against ω₀ on unmasked points
/// (ψ₁ the κ = 1 profile), found by bisection.
inline double degenerate_kappa_max(const Form11Field& omega_inf, const MetricField& w0,
                                   const Form11Field& ddbar_profile, const Mask& mask) {
    auto ok = [&](double k) {
        Form11Field a = ddbar_profile;
        a *= k;
        a += omega_inf;
        return masked_min_eig(a, w0, mask) > 0.0;
    };
    double lo = 0.0, hi = 1.0;
    while (ok(hi) && hi < 1e6) {
        lo = hi;
        hi *= 2.0;
    }
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (ok(mid) ? lo : hi) = mid;
    }
    return lo;
}

/// Degenerate scenario: ψ_δ = κ·log((sin²πx₁ + sin²πy₁ + δ²)/(1 + δ²)) shifted
/// to unmasked sup 0, pole mask of radius 4 cells around z₁ = 0, other data as
/// in the smooth scenario except ω̂_∞ (lifted by ¼·Id) and Ω = exp(v − γψ)·dV
/// (normalized), so that the
/// volume form, and with it the flow, feels the pole. γ = 0 decouples ψ from
/// the flow entirely.
inline BackgroundData scenario_degenerate(int resolution, int n, double kappa = 0.05,
                                          double delta = 1e-2, double gamma = 2.0,
                                          DiffMode mode = DiffMode::spectral) {
    if (!(kappa > 0.0)) throw ConfigError("kappa must be positive");
    if (!(delta > 0.0)) throw ConfigError("delta must be positive");
    if (!(gamma >= 0.0)) throw ConfigError("pole_volume_exponent must be >= 0");
    GridChart c(n, resolution, mode);
    BackgroundData bg;
    bg.chart = c;
    bg.omega0 = MetricField(detail::conformal_form(c, 0, 1.0));
    // lifted by ¼·Id over the smooth scenario: the pole profile has
    // ddbar ≈ −π²/2 at the antipode, which would otherwise leave κ_max ≈ κ
    bg.omega_inf = detail::smooth_limit_form(c, bg.omega0) + Form11Field::identity(c, 0.25);
    bg.r_mask = 4.0 * c.spacing();
    bg.pole_mask = pole_mask(c, bg.r_mask);
    bg.psi_regularization_delta = delta;

    auto prof = detail::pole_profile(c, delta);
    std::vector<cplx> dprof;
    std::vector<double> lprof;
    detail::pole_profile_derivatives(c, delta, dprof, lprof);
    Form11Field ddprof(c);
    for (std::size_t p = 0; p < c.size(); ++p) ddprof(p, 0, 0) = lprof[p];
    const double kmax = degenerate_kappa_max(bg.omega_inf, bg.omega0, ddprof, bg.pole_mask);
    if (kappa >= kmax)
        throw InvalidBackground("kappa " + std::to_string(kappa) + " exceeds kappa_max " +
                                    std::to_string(kmax),
                                kmax);
    const double top = masked_sup(prof.v, bg.pole_mask);
    bg.psi = ScalarField(c);
    for (std::size_t p = 0; p < c.size(); ++p) bg.psi[p] = kappa * (prof[p] - top);
    bg.ddbar_psi = ddprof;
    bg.ddbar_psi *= kappa;
    bg.dpsi.assign(n, std::vector<cplx>(c.size(), 0.0));
    for (std::size_t p = 0; p < c.size(); ++p) bg.dpsi[0][p] = kappa * dprof[p];

    auto logd = detail::smooth_log_density(c);
    for (std::size_t p = 0; p < c.size(); ++p) logd[p] -= gamma * bg.psi[p];
    bg.Omega = detail::normalized_volume(c, logd, bg.omega0);
    // ddbar log Ω = ddbar v − γ·ddbar ψ; v is a trigonometric polynomial
    bg.ddbar_log_Omega = ddbar(ScalarField(c, detail::smooth_log_density(c)));
    {
        Form11Field t = bg.ddbar_psi;
        t *= gamma;
        bg.ddbar_log_Omega -= t;
    }

    bg.info.name = "degenerate";
    bg.info.kappa = kappa;
    bg.info.delta = delta;
    bg.info.pole_volume_exponent = gamma;
    measure_constants(bg);
    validate(bg);
    return bg;
}

/// Spatially constant data: ω₀ = a₀·Id, ω̂_∞ = a_∞·Id, Ω = ω_c·dV, ψ ≡ 0.
/// The PDE reduces to φ̇ = log(n!·(e^{−t}a₀ + (1−e^{−t})a_∞)ⁿ/ω_c) − φ.
inline BackgroundData scenario_homogeneous(int n, double a0, double a_inf, double omega_const,
                                           int resolution = 16) {
    if (!(a0 > 0.0) || !(a_inf > 0.0) || !(omega_const > 0.0))
        throw ConfigError("homogeneous scenario needs a0, a_inf, omega_const > 0");
    GridChart c(n, resolution);
    BackgroundData bg;
    bg.chart = c;
    bg.omega0 = MetricField(Form11Field::identity(c, a0));
    bg.omega_inf = Form11Field::identity(c, a_inf);
    bg.Omega = VolumeFormField(c, std::vector<double>(c.size(), omega_const));
    bg.psi = ScalarField(c, 0.0);
    bg.mass_normalized = false;
    bg.info.name = "homogeneous";
    bg.info.a0 = a0;
    bg.info.a_inf = a_inf;
    bg.info.omega_const = omega_const;
    measure_constants(bg);
    validate(bg);
    return bg;
}

}  // namespace crf
