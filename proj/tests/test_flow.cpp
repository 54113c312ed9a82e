#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "crf/flow.hpp"

using namespace crf;

namespace {

/// φ(t) = e^{−t}∫₀ᵗ eˢ h(s) ds by composite Simpson with 20000 panels; an
/// oracle independent of the library's Gauss-Kronrod quadrature.
double simpson_oracle(int n, double a0, double ai, double wc, double t) {
    auto h = [&](double s) {
        const double e = std::exp(-s);
        return std::log((n == 1 ? 1.0 : 2.0) * std::pow(e * a0 + (1.0 - e) * ai, n) / wc);
    };
    const int m = 20000;
    const double dx = t / m;
    double acc = 0.0;
    for (int k = 0; k <= m; ++k) {
        const double s = k * dx;
        const double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
        acc += w * std::exp(s - t) * h(s);
    }
    return acc * dx / 3.0;
}

double sup_diff(const ScalarField& a, const ScalarField& b) {
    double w = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) w = std::max(w, std::abs(a[p] - b[p]));
    return w;
}

}  // namespace

TEST(Rhs, FixedPointIsZero) {
    // a0 = a_inf = a and Ω-density = aⁿ·n!
    for (int n : {1, 2}) {
        const double a = 1.7;
        auto bg = scenario_homogeneous(n, a, a, std::pow(a, n) * (n == 1 ? 1.0 : 2.0));
        auto r = rhs(bg, ScalarField(bg.chart, 0.0), 0.3);
        EXPECT_LT(masked_sup_abs(r.v), 1e-14);
    }
}

TEST(Rhs, ConstantPotentialShiftsUniformly) {
    auto bg = scenario_homogeneous(1, 2.0, 1.0, 1.5);
    const double t = 0.8, c = 0.37;
    auto r = rhs(bg, ScalarField(bg.chart, c), t);
    const double want = std::log((std::exp(-t) * 2.0 + (1.0 - std::exp(-t))) / 1.5) - c;
    for (std::size_t p = 0; p < r.size(); ++p) EXPECT_NEAR(r[p], want, 1e-14);
}

TEST(Rhs, SmoothInitialMatchesDeterminantOracle) {
    for (int n : {1, 2}) {
        auto bg = scenario_smooth(n == 1 ? 32 : 16, n);
        auto r = rhs(bg, ScalarField(bg.chart, 0.0), 0.0);
        double worst = 0.0;
        for (std::size_t p = 0; p < r.size(); ++p) {
            Eigen::MatrixXcd G(n, n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) G(i, j) = bg.omega0.at(p)(i, j);
            const double volume = (n == 1 ? 1.0 : 2.0) * G.determinant().real();
            worst = std::max(worst, std::abs(r[p] - std::log(volume / bg.Omega.density[p])));
        }
        EXPECT_LT(worst, 1e-13) << "n = " << n;
    }
}

TEST(Rhs, PositivityLossCarriesPointAndEigenvalue) {
    auto bg = scenario_smooth(16, 1);
    auto phi = ScalarField::sample(bg.chart, [](const std::array<double, 4>& x) {
        return 0.2 * std::sin(2 * pi * x[0]);  // ddbar amplitude ≈ π²·0.2 > min eig of ω₀
    });
    try {
        rhs(bg, phi, 0.0);
        FAIL() << "expected PositivityLoss";
    } catch (const PositivityLoss& e) {
        EXPECT_LE(e.eigenvalue(), 0.0);
        EXPECT_LT(e.point(), bg.chart.size());
    }
}

TEST(FlowConfig, Validation) {
    FlowConfig f;
    EXPECT_NO_THROW(f.validate());
    f.convergence_tol = 1e-12;
    EXPECT_THROW(f.validate(), ConfigError);
    f = FlowConfig{};
    f.safety = 1.0;
    EXPECT_THROW(f.validate(), ConfigError);
    f = FlowConfig{};
    f.dt_max = -1.0;
    EXPECT_THROW(f.validate(), ConfigError);
    EXPECT_EQ(parse_scheme("rk4"), Scheme::rk4);
    EXPECT_EQ(parse_scheme("imex"), Scheme::imex);
    EXPECT_THROW(parse_scheme("euler"), ConfigError);
}

TEST(Run, FixedPointStaysPut) {
    for (Scheme sc : {Scheme::imex, Scheme::rk4}) {
        auto bg = scenario_homogeneous(1, 1.5, 1.5, 1.5, 32);
        FlowConfig f;
        f.scheme = sc;
        f.t_max = 10.0;
        f.stop_on_convergence = false;
        auto tr = run(bg, f);
        for (const auto& s : tr.snapshots) EXPECT_LE(masked_sup_abs(s.phi.v), 1e-10 * std::max(1.0, s.t));
        // fixed point: flow identity residual is ‖Ric(ω) + ω‖∞ directly
        for (const auto& r : verify_flow_identity(tr, bg)) EXPECT_LE(r.residual, 1e-8);
    }
}

TEST(Run, HomogeneousMatchesQuadratureOracle) {
    auto bg = scenario_homogeneous(1, 2.0, 1.0, 1.0);
    FlowConfig f;
    f.t_max = 10.0;
    f.stop_on_convergence = false;
    auto tr = run(bg, f);
    for (const auto& s : tr.snapshots) {
        // spatially constant
        EXPECT_LE(masked_sup(s.phi.v) - masked_inf(s.phi.v), 1e-10);
        if (s.t == 1.0 || s.t == 5.0 || s.t == 10.0) {
            const double want = simpson_oracle(1, 2.0, 1.0, 1.0, s.t);
            EXPECT_NEAR(s.phi[0], want, 1e-8) << "t = " << s.t;
            EXPECT_NEAR(homogeneous_oracle(bg, s.t), want, 1e-12);
        }
    }
    // n = 2, h varying in time
    auto b2 = scenario_homogeneous(2, 0.8, 1.4, 1.1);
    f.t_max = 2.0;
    auto t2 = run(b2, f);
    EXPECT_NEAR(t2.back().phi[0], simpson_oracle(2, 0.8, 1.4, 1.1, 2.0), 1e-8);
}

TEST(Run, ConstantForcingClosedForm) {
    // a0 = a_inf: h constant, φ = h(1 − e^{−t}) and φ̇ = h e^{−t}
    auto bg = scenario_homogeneous(1, 3.0, 3.0, 1.2);
    const double h = std::log(3.0 / 1.2);
    FlowConfig f;
    f.t_max = 6.0;
    f.stop_on_convergence = false;
    auto tr = run(bg, f);
    for (const auto& s : tr.snapshots) {
        EXPECT_NEAR(s.phi[0], h * (1.0 - std::exp(-s.t)), 1e-9);
        EXPECT_NEAR(s.phidot[0], h * std::exp(-s.t), 1e-9);
    }
}

TEST(Run, HomogeneousFlowIdentityClosedForm) {
    // ddbar φ = 0 and Ric(ω) = −ω̂_∞, so the discrete residual is the centered
    // difference error of ω̂_t: (a0 − a_inf)e^{−t}(sinh Δ/Δ − 1)
    const double a0 = 2.0, ai = 1.0;
    auto bg = scenario_homogeneous(1, a0, ai, 1.0);
    FlowConfig f;
    f.t_max = 4.0;
    f.snapshot_interval = 0.25;
    f.stop_on_convergence = false;
    auto tr = run(bg, f);
    const double D = 0.25;
    for (const auto& r : verify_flow_identity(tr, bg)) {
        const double want = (a0 - ai) * std::exp(-r.t) * (std::sinh(D) / D - 1.0);
        EXPECT_NEAR(r.residual, want, 1e-8) << "t = " << r.t;
    }
}

TEST(Run, SnapshotTimesExactAndConvergenceStop) {
    auto bg = scenario_smooth(32, 1);
    FlowConfig f;
    f.t_max = 25.0;
    auto tr = run(bg, f);
    ASSERT_TRUE(tr.converged);
    EXPECT_LE(tr.t_converged, 25.0);
    EXPECT_EQ(tr.back().t, tr.t_converged);
    EXPECT_LT(sup_abs_phidot(tr.back().phidot, bg.pole_mask), 1e-6);
    for (std::size_t k = 0; k < tr.snapshots.size(); ++k) EXPECT_EQ(tr.snapshots[k].t, 0.25 * k);
    EXPECT_GT(tr.min_eig, f.positivity_floor);

    auto L = limit_potential(tr, bg);
    EXPECT_EQ(L.t, tr.back().t);
    EXPECT_LT((L.omega - bg.omega_inf - ddbar(L.phi)).sup_norm(), 1e-14);
    EXPECT_LT(L.sup_phidot, 1e-6);
}

TEST(Step, Rk4GlobalErrorIsFourthOrder) {
    // fixed steps below the stiffness cap; differences of successive halvings
    auto bg = scenario_smooth(16, 1);
    auto s0 = initial_state(bg);
    const double T = 0.2;
    ASSERT_LT(T / 200, detail::rk4_cap(Differentiator::get(bg.chart), s0.max_inv_trace, 0.9));
    std::vector<ScalarField> sol;
    for (int steps : {200, 400, 800}) {
        auto s = s0;
        for (int k = 0; k < steps; ++k) s = advance(s, T / steps, Scheme::rk4, bg, 0.0);
        sol.push_back(s.phi);
    }
    const double ratio = sup_diff(sol[0], sol[1]) / sup_diff(sol[1], sol[2]);
    EXPECT_NEAR(ratio, 16.0, 0.3 * 16.0);
}

TEST(Step, ImexAndRk4Agree) {
    auto bg = scenario_smooth(32, 1);
    FlowConfig a, b;
    a.t_max = b.t_max = 2.0;
    a.dt_max = 0.005;
    b.scheme = Scheme::rk4;
    auto ta = run(bg, a), tb = run(bg, b);
    EXPECT_LT(sup_diff(ta.back().phi, tb.back().phi), 1e-7);
}

TEST(Run, TwoGridConsistency) {
    FlowConfig f;
    f.t_max = 5.0;
    f.stop_on_convergence = false;
    std::vector<int> R{16, 32, 64};
    std::vector<ScalarField> P;
    for (int r : R) P.push_back(run(scenario_smooth(r, 1), f).back().phi);
    // compare on the coarse points of each pair
    auto cmp = [&](int a, int b) {
        const int st = R[b] / R[a];
        double w = 0.0;
        for (int i = 0; i < R[a]; ++i)
            for (int j = 0; j < R[a]; ++j)
                w = std::max(w, std::abs(P[a][i * R[a] + j] - P[b][(i * st) * R[b] + j * st]));
        return w;
    };
    // the 32 ↔ 64 gap is within the coarse grid's own error estimate (16 ↔ 32)
    EXPECT_LE(cmp(1, 2), cmp(0, 1));
    EXPECT_LT(cmp(1, 2), 1e-10);
}

TEST(Run, FlowIdentitySecondOrderInSnapshotSpacing) {
    auto bg = scenario_smooth(64, 1);
    FlowConfig f;
    f.t_max = 4.0;
    f.snapshot_interval = 0.125;
    f.dt_max = 0.005;
    f.stop_on_convergence = false;
    auto tr = run(bg, f);
    auto fine = verify_flow_identity(tr, bg, 1);
    auto coarse = verify_flow_identity(tr, bg, 2);
    auto sup_in = [](const std::vector<IdentityPoint>& v) {
        double s = 0.0;
        for (const auto& r : v)
            if (r.t >= 1.0 && r.t <= 3.0) s = std::max(s, r.residual);
        return s;
    };
    const double ratio = sup_in(coarse) / sup_in(fine);
    EXPECT_GE(ratio, 3.0);
    EXPECT_LE(ratio, 5.0);
}
