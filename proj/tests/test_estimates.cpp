#include <gtest/gtest.h>

#include <cmath>

#include "crf/einstein.hpp"
#include "crf/estimates.hpp"

using namespace crf;

namespace {

ScalarField probe_potential(const GridChart& c) {
    const int n = c.complex_dim();
    return ScalarField::sample(c, [n](const std::array<double, 4>& x) {
        double v = 0.008 * std::sin(2 * pi * x[0]) * std::cos(2 * pi * x[1]);
        if (n == 2) v += 0.006 * std::cos(2 * pi * (x[2] + x[0])) + 0.004 * std::sin(2 * pi * x[3]);
        return v;
    });
}

/// sup |static left side − assembled right side| of the trace evolution.
double static_trace_error(const BackgroundData& bg, double t) {
    ReferenceGeometry R0(bg);
    auto L = assemble_logtr(bg, R0, flow_metric(bg, probe_potential(bg.chart), t), t);
    double e = 0.0;
    for (std::size_t p = 0; p < L.tr.size(); ++p) e = std::max(e, std::abs(L.static_lhs_tr[p] - L.rhs_tr[p]));
    return e;
}

Trajectory constant_trajectory(const BackgroundData& bg, double value, int count, double dt) {
    Trajectory tr;
    for (int k = 0; k < count; ++k)
        tr.snapshots.push_back({k * dt, ScalarField(bg.chart, value), ScalarField(bg.chart, 0.0)});
    return tr;
}

FlowConfig long_run(double t_max) {
    FlowConfig f;
    f.t_max = t_max;
    f.stop_on_convergence = false;
    return f;
}

}  // namespace

TEST(TraceEvolution, StaticIdentityN1) {
    auto bg = scenario_smooth(64, 1);
    for (double t : {0.0, 0.7, 3.0}) EXPECT_LT(static_trace_error(bg, t), 1e-6) << "t = " << t;
}

TEST(TraceEvolution, StaticIdentityN2WithTorsionConvergesSpectrally) {
    auto coarse = scenario_smooth(16, 2);
    auto fine = scenario_smooth(24, 2);
    for (double t : {0.0, 0.7}) {
        const double ec = static_trace_error(coarse, t);
        const double ef = static_trace_error(fine, t);
        EXPECT_LT(ef, 1e-5) << "t = " << t;
        EXPECT_GT(ec / ef, 100.0) << "t = " << t;
    }
    ReferenceGeometry R0(fine);
    auto L = assemble_logtr(fine, R0, flow_metric(fine, probe_potential(fine.chart), 0.7), 0.7);
    EXPECT_GT(masked_sup_abs(L.torsion_part.v), 1.0);  // torsion brackets are active
}

TEST(TraceEvolution, TorsionVanishesInDimensionOne) {
    auto bg = scenario_smooth(32, 1);
    auto tr = run(bg, long_run(2.0));
    auto rep = check_logtr_evolution(tr, bg);
    EXPECT_TRUE(rep.torsion_vanishes);
    EXPECT_TRUE(std::isfinite(rep.C_evo));
}

TEST(TraceEvolution, EinsteinPointIsStationary) {
    // at ω = ω̂_∞ + ddbar θ with F(θ) = 0 the flow is static, so
    // (∂t − Δ) log tr reduces to −Δ log tr. The Newton residual floor is
    // amplified by two spectral derivatives, so the grid is kept at 32.
    auto bg = scenario_smooth(32, 1);
    auto sol = solve_ke(bg, 1e-11);
    ReferenceGeometry R0(bg);
    auto L = assemble_logtr(bg, R0, bg.omega_inf + ddbar(sol.theta), 60.0);
    double e = 0.0;
    for (std::size_t p = 0; p < L.tr.size(); ++p) e = std::max(e, std::abs(L.rhs_logtr[p] + L.lap_logtr[p]));
    EXPECT_LT(e, 1e-8);
}

TEST(Constants, ChooseAArithmetic) {
    EXPECT_EQ(choose_A(0.25, 3.0), 15.0);  // (A+1)/4 ≥ 4
    EXPECT_EQ(choose_A(1.0, 0.0), 0.0);
    EXPECT_EQ(choose_A(0.5, 2.5), 7.0);    // 8·0.5 ≥ 3.5 > 4·0.5
    EXPECT_THROW(choose_A(0.0, 1.0), InvalidBackground);
}

TEST(Constants, C0FromInfOfTildePhi) {
    auto bg = scenario_smooth(16, 1);  // ψ ≡ 0, so φ̃ = φ
    auto tr = constant_trajectory(bg, -3.0, 3, 0.25);
    auto k = choose_constants(bg, tr, 3.0);
    EXPECT_EQ(k.C0, 4.0);
    EXPECT_GE(k.s_min, 0.5 * bg.c0 - 1e-12);
    EXPECT_GE((k.A + 1.0) * k.s_min, 4.0);
}

TEST(UpperBounds, HomogeneousConstantForcing) {
    // φ̇ = h e^{−t}: sup φ̇·eᵗ/t over t ≥ t1 is h/t1
    const double h = std::log(2.0);
    auto bg = scenario_homogeneous(1, 2.0, 2.0, 1.0);
    auto tr = run(bg, long_run(6.0));
    for (double t1 : {0.5, 1.0, 2.0}) {
        auto U = check_upper_bounds(tr, bg, t1);
        EXPECT_NEAR(U.C_phidot, h / t1, 1e-8 * h / t1) << "t1 = " << t1;
        EXPECT_NEAR(U.C_phi, h * (1.0 - std::exp(-6.0)), 1e-8);
        EXPECT_NEAR(U.C_vol, 2.0, 1e-12);  // ωⁿ/Ω at t = 0
    }
}

TEST(UpperBounds, SmoothScenarioStable) {
    auto bg = scenario_smooth(32, 1);
    auto tr = run(bg, long_run(15.0));
    auto U = check_upper_bounds(tr, bg);
    EXPECT_TRUE(U.finite);
    EXPECT_TRUE(U.stable);
    EXPECT_GT(U.C_vol, 1.0);
    EXPECT_GT(U.noise_floor, 0.0);
    EXPECT_LT(U.noise_floor, 1e-9);
}

TEST(LowerBounds, FixedPointAndFlatBarrier) {
    // fixed point: Q_ε ≡ 0 so every C_ε vanishes
    auto fp = scenario_homogeneous(1, 1.5, 1.5, 1.5);
    auto tf = run(fp, long_run(3.0));
    auto Lf = check_lower_bounds(tf, fp);
    for (const auto& e : Lf.entries) EXPECT_NEAR(e.C_eps, 0.0, 1e-12);
    EXPECT_FALSE(Lf.violation);

    // ψ ≡ 0: the εψ term drops out and C_ε does not depend on ε
    auto bg = scenario_smooth(32, 1);
    auto tr = run(bg, long_run(6.0));
    auto L = check_lower_bounds(tr, bg);
    ASSERT_EQ(L.entries.size(), 4u);
    for (const auto& e : L.entries) EXPECT_EQ(e.C_eps, L.entries.front().C_eps);
    EXPECT_FALSE(L.violation);
}

TEST(LowerBounds, DegenerateStableUnderDeltaHalving) {
    std::vector<LowerBoundFit> fits;
    for (double delta : {1e-2, 5e-3}) {
        auto bg = scenario_degenerate(32, 1, 0.05, delta);
        fits.push_back(check_lower_bounds(run(bg, long_run(12.0)), bg));
        EXPECT_FALSE(fits.back().violation);
    }
    for (double eps : default_eps_list()) {
        const double a = fits[0].at(eps).C_eps, b = fits[1].at(eps).C_eps;
        EXPECT_LT(std::abs(a - b), 0.2 * std::abs(a)) << "eps = " << eps;
    }
}

TEST(Identities, FixedPointResidualsAlgebraic) {
    auto bg = scenario_homogeneous(1, 1.5, 1.5, 1.5);
    auto tr = run(bg, long_run(2.0));
    auto rep = check_evolution_identities(tr, bg, 1.0, 1, true);
    ASSERT_FALSE(rep.rows.empty());
    for (std::size_t k = 0; k < identity_names().size(); ++k) EXPECT_LT(rep.sup(k), 1e-8) << identity_names()[k];
}

TEST(Identities, HomogeneousOdeForm) {
    // Δ vanishes; the φ identity is φ̇ − n + tr_ω ω̂_t = φ̇ exactly, so its
    // residual is the centered-difference error of the oracle
    auto bg = scenario_homogeneous(1, 2.0, 1.0, 1.0);
    FlowConfig f = long_run(4.0);
    f.snapshot_interval = 0.125;
    auto tr = run(bg, f);
    auto rep = check_evolution_identities(tr, bg, 1.0);
    for (const auto& r : rep.rows) {
        const double D = 0.125;
        const double cd = (homogeneous_oracle(bg, r.t + D) - homogeneous_oracle(bg, r.t - D)) / (2 * D);
        EXPECT_NEAR(r.residual[0], std::abs(cd - homogeneous_oracle_rate(bg, r.t)), 1e-8) << "t = " << r.t;
    }
}

TEST(Identities, SecondOrderInSnapshotSpacing) {
    auto bg = scenario_smooth(32, 1);
    FlowConfig f = long_run(4.0);
    f.snapshot_interval = 0.125;
    f.dt_max = 0.005;
    auto tr = run(bg, f);
    auto fields = all_identity_fields(tr, bg, 2.0, true);
    for (std::size_t k = 0; k < identity_names().size(); ++k) {
        auto r = richardson(fields, bg.pole_mask, k, 1, 1.0, 3.0);
        EXPECT_TRUE(r.second_order()) << identity_names()[k] << " ratio " << r.ratio;
    }
}

TEST(TraceBound, SmoothScenario) {
    auto bg = scenario_smooth(32, 1);
    auto tr = run(bg, long_run(15.0));
    auto lt = check_logtr_evolution(tr, bg);
    auto k = choose_constants(bg, tr, lt.C_evo);
    auto T = check_trace_bound(tr, bg, k.A, k.C0);
    EXPECT_TRUE(T.Q_stable);
    EXPECT_TRUE(T.unifequiv_holds);
    EXPECT_GT(T.frac_min, 0.0);
    EXPECT_LE(T.frac_max, 1.0);
    EXPECT_FALSE(T.violation);
    EXPECT_EQ(T.shells, 0);  // no pole, no regression
}

TEST(TraceBound, FixedPointQConstant) {
    // ω₀ = ω̂_∞ at the fixed point: tr_{ω₀}ω ≡ n and Q does not move
    auto bg = scenario_homogeneous(1, 1.5, 1.5, 1.5);
    auto tr = run(bg, long_run(3.0));
    auto T = check_trace_bound(tr, bg, 3.0, 1.0);
    for (double q : T.Q_sup) EXPECT_NEAR(q, T.Q_sup.front(), 1e-12);
    EXPECT_NEAR(T.Q_sup.front(), std::log(1.0) + 1.0, 1e-10);  // log n − A·0 + 1/(0 + 1)
}

TEST(TraceBound, DegenerateShellRegression) {
    auto bg = scenario_degenerate(64, 1);
    auto tr = run(bg, long_run(12.0));
    auto lt = check_logtr_evolution(tr, bg);
    auto k = choose_constants(bg, tr, lt.C_evo);
    auto T = check_trace_bound(tr, bg, k.A, k.C0);
    EXPECT_GT(T.C, 0.0);
    EXPECT_GE(T.R2, 0.9);
    EXPECT_GE(T.shells, 5);
    EXPECT_TRUE(T.unifequiv_holds);
    EXPECT_FALSE(T.violation);
}

TEST(Monotone, QuantityNonIncreasingAfterT1) {
    for (const char* name : {"smooth", "degenerate"}) {
        auto bg = std::string(name) == "smooth" ? scenario_smooth(32, 1) : scenario_degenerate(32, 1);
        auto tr = run(bg, long_run(10.0));
        auto U = check_upper_bounds(tr, bg);
        auto M = check_monotone_quantity(tr, bg, U.C_phidot, 1.0);
        EXPECT_TRUE(M.monotone) << name << " max increase " << M.max_increase;
    }
}

TEST(Diagnostics, PureFunctionOfInputs) {
    auto bg = scenario_degenerate(32, 1);
    auto tr = run(bg, long_run(3.0));
    DiagnosticsOptions opt;
    opt.A = 7.0;
    opt.C0 = 2.0;
    auto a = compute_diagnostics(tr, bg, opt);
    auto b = compute_diagnostics(tr, bg, opt);
    ASSERT_EQ(a.size(), tr.snapshots.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].sup_phi, b[i].sup_phi);
        EXPECT_EQ(a[i].sup_tr, b[i].sup_tr);
        EXPECT_EQ(a[i].Q_phong_sturm_sup, b[i].Q_phong_sturm_sup);
        EXPECT_EQ(a[i].einstein_residual, b[i].einstein_residual);
        EXPECT_EQ(a[i].inf_Q_eps, b[i].inf_Q_eps);
        EXPECT_EQ(a[i].identity_residuals, b[i].identity_residuals);
    }
    EXPECT_EQ(a.front().sup_phi, 0.0);
}
