#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <random>

#include "crf/geometry.hpp"

using namespace crf;

namespace {

/// Smooth random periodic field: a few low Fourier modes with seeded amplitudes.
ScalarField random_smooth(const GridChart& c, std::mt19937_64& rng, double amp) {
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    struct Mode { int k[4]; double a, ph; };
    std::vector<Mode> modes;
    for (int m = 0; m < 5; ++m) {
        Mode md{};
        for (int a = 0; a < 4; ++a) md.k[a] = (a < c.real_dim()) ? static_cast<int>(std::lround(U(rng))) : 0;
        md.a = amp * U(rng);
        md.ph = pi * U(rng);
        modes.push_back(md);
    }
    return ScalarField::sample(c, [&](const std::array<double, 4>& x) {
        double s = 0.0;
        for (const auto& md : modes) {
            double arg = md.ph;
            for (int a = 0; a < 4; ++a) arg += 2 * pi * md.k[a] * x[a];
            s += md.a * std::sin(arg);
        }
        return s;
    });
}

MetricField conformal_metric(const GridChart& c, const ScalarField& f) {
    Form11Field g(c);
    for (std::size_t p = 0; p < c.size(); ++p) g.set(p, HMat::identity(c.complex_dim(), std::exp(f[p])));
    return MetricField(g);
}

/// Random Hermitian positive definite metric built as flat + small smooth perturbation.
MetricField random_metric(const GridChart& c, std::mt19937_64& rng) {
    const int n = c.complex_dim();
    Form11Field g = Form11Field::identity(c, 1.5);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            auto re = random_smooth(c, rng, 0.06);
            auto im = random_smooth(c, rng, 0.06);
            for (std::size_t p = 0; p < c.size(); ++p) {
                if (i == j) {
                    g(p, i, i) += re[p];
                } else {
                    g(p, i, j) += cplx(re[p], im[p]);
                    g(p, j, i) += cplx(re[p], -im[p]);
                }
            }
        }
    return MetricField(g);
}

}  // namespace

TEST(Grid, RejectsBadShape) {
    EXPECT_THROW(GridChart(3, 16), InvalidInput);
    EXPECT_THROW(GridChart(1, 15), InvalidInput);
    EXPECT_THROW(GridChart(1, 8), InvalidInput);
    GridChart c(2, 16);
    EXPECT_EQ(c.size(), 65536u);
    auto idx = c.multi_index(12345);
    EXPECT_EQ(c.flat_index(idx), 12345u);
}

TEST(Ddbar, ConstantGivesZero) {
    GridChart c(2, 16);
    ScalarField f(c, 3.7);
    auto d = ddbar(f);
    EXPECT_LT(d.sup_norm(), 1e-12);
}

TEST(Ddbar, SineIsMinusPiSquared) {
    for (auto mode : {DiffMode::spectral, DiffMode::fd4}) {
        GridChart c(1, 64, mode);
        auto f = ScalarField::sample(c, [](auto x) { return std::sin(2 * pi * x[0]); });
        auto d = ddbar(f);
        double err = 0.0;
        for (std::size_t p = 0; p < c.size(); ++p)
            err = std::max(err, std::abs(d(p, 0, 0) + pi * pi * f[p]));
        // fd4 truncation: (2π)^6 h^4 / 90 / 4 ≈ 1.0e-5 at N = 64
        EXPECT_LT(err, mode == DiffMode::spectral ? 1e-10 : 2e-5) << to_string(mode);
        EXPECT_TRUE(d.is_hermitian());
    }
}

TEST(Ddbar, MixedTermsN2) {
    GridChart c(2, 16);
    // f = cos(2π(x1 + y2)): ∂1∂2̄ f = ¼(f_{x1 x2} + f_{y1 y2} + i(f_{x1 y2} − f_{y1 x2}))
    //                               = ¼ i·(−4π²) cos(...)
    auto f = ScalarField::sample(c, [](auto x) { return std::cos(2 * pi * (x[0] + x[3])); });
    auto d = ddbar(f);
    double err = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p) {
        cplx expect(0.0, -pi * pi * f[p]);
        err = std::max(err, std::abs(d(p, 0, 1) - expect));
        err = std::max(err, std::abs(d(p, 1, 0) - std::conj(expect)));
        err = std::max(err, std::abs(d(p, 0, 0) + pi * pi * f[p]));
    }
    EXPECT_LT(err, 1e-10);
}

TEST(Ddbar, RejectsNonFinite) {
    GridChart c(1, 16);
    ScalarField f(c);
    f[3] = std::nan("");
    EXPECT_THROW(ddbar(f), InvalidInput);
}

TEST(Backends, Fd4ConvergesAtFourthOrder) {
    // The two backends do not agree to 1e-8 at N = 32 for sin(2πx) (the fd4
    // truncation error alone is ~1.6e-4); check the order instead.
    std::vector<double> errs;
    for (int N : {32, 64, 128}) {
        GridChart s(1, N, DiffMode::spectral), f4(1, N, DiffMode::fd4);
        auto fun = [](auto x) { return std::sin(2 * pi * x[0]) * std::cos(2 * pi * x[1]); };
        auto a = ddbar(ScalarField::sample(s, fun));
        auto b = ddbar(ScalarField::sample(f4, fun));
        double e = 0.0;
        for (std::size_t p = 0; p < s.size(); ++p) e = std::max(e, std::abs(a(p, 0, 0) - b(p, 0, 0)));
        errs.push_back(e);
    }
    EXPECT_GT(errs[0] / errs[1], 14.0);
    EXPECT_GT(errs[1] / errs[2], 14.0);
}

TEST(Spectral, RefinementConvergence) {
    // analytic, not band-limited: exp(0.5 sin 2πx)
    std::vector<double> errs;
    for (int N : {16, 32, 64}) {
        GridChart c(1, N);
        auto f = ScalarField::sample(c, [](auto x) { return std::exp(0.5 * std::sin(2 * pi * x[0])); });
        auto d = ddbar(f);
        double e = 0.0;
        for (std::size_t p = 0; p < c.size(); ++p) {
            double x = c.coord(p, 0);
            double s = std::sin(2 * pi * x), co = std::cos(2 * pi * x);
            double exact = 0.25 * f[p] * (std::pow(pi * co, 2) - 2 * pi * pi * s);
            e = std::max(e, std::abs(d(p, 0, 0).real() - exact));
        }
        errs.push_back(e);
    }
    EXPECT_GT(errs[0] / errs[1], 10.0);
    EXPECT_LT(errs[2], 1e-11);
}

TEST(Christoffel, FlatIsZero) {
    GridChart c(2, 16);
    MetricField g(Form11Field::identity(c, 2.0));
    EXPECT_LT(christoffels(g).sup_norm(), 1e-14);
}

TEST(Christoffel, ConformalN1) {
    GridChart c(1, 32);
    auto f = ScalarField::sample(c, [](auto x) { return std::sin(2 * pi * x[0]); });
    auto G = christoffels(conformal_metric(c, f));
    double err = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p) {
        cplx dzf(pi * std::cos(2 * pi * c.coord(p, 0)), 0.0);  // ½·2π cos
        err = std::max(err, std::abs(G(p, 0, 0, 0) - dzf));
    }
    EXPECT_LT(err, 1e-8);
}

TEST(Christoffel, DiagonalN2AndTorsion) {
    GridChart c(2, 16);
    // g = diag(1, e^{h(z1)}), h = 0.3 sin(2πx1) + 0.2 cos(2πy1)
    Form11Field gf(c);
    std::vector<cplx> dh(c.size());
    for (std::size_t p = 0; p < c.size(); ++p) {
        double x = c.coord(p, 0), y = c.coord(p, 1);
        double h = 0.3 * std::sin(2 * pi * x) + 0.2 * std::cos(2 * pi * y);
        HMat m(2);
        m(0, 0) = 1.0;
        m(1, 1) = std::exp(h);
        gf.set(p, m);
        dh[p] = cplx(0.3 * pi * std::cos(2 * pi * x), 0.2 * pi * std::sin(2 * pi * y));
    }
    MetricField g(gf);
    auto G = christoffels(g);
    auto T = torsion(G);
    double err = 0.0, other = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p) {
        err = std::max(err, std::abs(G(p, 1, 0, 1) - dh[p]));
        err = std::max(err, std::abs(T(p, 1, 0, 1) - dh[p]));
        err = std::max(err, std::abs(T(p, 1, 1, 0) + dh[p]));
        for (int k = 0; k < 2; ++k)
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    if (!(k == 1 && i == 0 && j == 1)) other = std::max(other, std::abs(G(p, k, i, j)));
    }
    EXPECT_LT(err, 1e-8);
    EXPECT_LT(other, 1e-8);
}

TEST(Christoffel, SingularRejected) {
    GridChart c(2, 16);
    Form11Field gf = Form11Field::identity(c, 1.0);
    gf(5, 1, 1) = 1e-13;
    MetricField g(gf);
    EXPECT_THROW(christoffels(g), DegenerateMetric);
}

TEST(Metric, RejectsIndefinite) {
    GridChart c(1, 16);
    Form11Field gf = Form11Field::identity(c, 1.0);
    gf(7, 0, 0) = -0.5;
    EXPECT_THROW(MetricField{gf}, DegenerateMetric);
}

TEST(Torsion, VanishesForKahlerAndN1) {
    std::mt19937_64 rng(7);
    GridChart c1(1, 32);
    EXPECT_EQ(torsion(random_metric(c1, rng)).sup_norm(), 0.0);
    GridChart c2(2, 16);
    auto f = random_smooth(c2, rng, 0.01);
    Form11Field g = Form11Field::identity(c2, 1.0) + ddbar(f);
    EXPECT_LT(torsion(MetricField(g)).sup_norm(), 1e-8);
}

TEST(Curvature, ConformalN1) {
    GridChart c(1, 32);
    auto f = ScalarField::sample(c, [](auto x) { return 0.4 * std::sin(2 * pi * x[0]) * std::cos(2 * pi * x[1]); });
    auto g = conformal_metric(c, f);
    auto R = chern_curvature(g);
    auto L = ddbar(f);
    auto ric = chern_ricci(g);
    double err = 0.0, err2 = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p) {
        err = std::max(err, std::abs(R(p, 0, 0, 0, 0) + L(p, 0, 0)));
        err2 = std::max(err2, std::abs(ric(p, 0, 0) + L(p, 0, 0)));
    }
    EXPECT_LT(err, 1e-8);
    EXPECT_LT(err2, 1e-8);
}

TEST(Curvature, FlatZero) {
    GridChart c(2, 16);
    MetricField g(Form11Field::identity(c, 1.3));
    auto R = chern_curvature(g);
    double s = 0.0;
    for (std::size_t p = 0; p < c.size(); ++p)
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) s = std::max(s, std::abs(R(p, a, b, a, b)));
    EXPECT_LT(s, 1e-14);
    EXPECT_LT(chern_ricci(g).sup_norm(), 1e-12);
}

TEST(Curvature, RicciTwoWaysAndHermitianSymmetry) {
    std::mt19937_64 rng(11);
    GridChart c(2, 24);
    for (int trial = 0; trial < 3; ++trial) {
        auto g = random_metric(c, rng);
        auto R = chern_curvature(g);
        auto a = chern_ricci(g);
        auto b = ricci_from_curvature(R);
        EXPECT_LT((a - b).sup_norm(), 1e-6);
        // R_{k l̄ i j̄} = conj(R_{l k̄ j ī})
        double asym = 0.0;
        for (std::size_t p = 0; p < c.size(); p += 7) {
            HMat G = g.at(p);
            auto low = [&](int k, int l, int i, int j) {
                cplx s = 0.0;
                for (int q = 0; q < 2; ++q) s += R(p, k, l, i, q) * G(q, j);
                return s;
            };
            for (int k = 0; k < 2; ++k)
                for (int l = 0; l < 2; ++l)
                    for (int i = 0; i < 2; ++i)
                        for (int j = 0; j < 2; ++j)
                            asym = std::max(asym, std::abs(low(k, l, i, j) - std::conj(low(l, k, j, i))));
        }
        EXPECT_LT(asym, 1e-6);
    }
}

TEST(Curvature, CommutatorIdentity) {
    std::mt19937_64 rng(3);
    GridChart c(2, 24);
    for (int trial = 0; trial < 3; ++trial) {
        auto g = random_metric(c, rng);
        std::vector<std::vector<cplx>> X(2, std::vector<cplx>(c.size()));
        for (int i = 0; i < 2; ++i) {
            auto re = random_smooth(c, rng, 1.0), im = random_smooth(c, rng, 1.0);
            for (std::size_t p = 0; p < c.size(); ++p) X[i][p] = cplx(re[p], im[p]);
        }
        EXPECT_LT(commutator_residual(g, X), 1e-6);
    }
}

TEST(Trace, Basics) {
    std::mt19937_64 rng(5);
    GridChart c(2, 16);
    auto g = random_metric(c, rng);
    auto t = trace(g, g.form());
    for (double x : t.v) EXPECT_NEAR(x, 2.0, 1e-12);
    GridChart c1(1, 32);
    auto f = ScalarField::sample(c1, [](auto x) { return std::cos(2 * pi * x[1]); });
    auto tf = trace(MetricField(Form11Field::identity(c1)), ddbar(f));
    for (std::size_t p = 0; p < c1.size(); ++p) EXPECT_NEAR(tf[p], -pi * pi * f[p], 1e-10);
}

TEST(Trace, GeometricArithmetic) {
    std::mt19937_64 rng(9);
    GridChart c(2, 16);
    auto w0 = random_metric(c, rng), w = random_metric(c, rng);
    auto tr = trace(w, w0.form());
    auto v0 = top_power(w0.form()), v = top_power(w.form());
    for (std::size_t p = 0; p < c.size(); ++p)
        EXPECT_GE(tr[p] / 2.0 + 1e-12, std::sqrt(v0.density[p] / v.density[p]));
}

TEST(TopPower, Oracle) {
    GridChart c(2, 16);
    EXPECT_DOUBLE_EQ(top_power(Form11Field::identity(c)).density[0], 2.0);
    HMat d(2);
    d(0, 0) = 3.0;
    d(1, 1) = 0.5;
    Form11Field f(c);
    f.set(0, d);
    EXPECT_DOUBLE_EQ(top_power(f).density[0], 3.0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(-1, 1);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::Matrix2cd A;
        A << cplx(U(rng), U(rng)), cplx(U(rng), U(rng)), cplx(U(rng), U(rng)), cplx(U(rng), U(rng));
        Eigen::Matrix2cd H = A * A.adjoint() + 0.1 * Eigen::Matrix2cd::Identity();
        HMat m(2);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) m(i, j) = H(i, j);
        f.set(1, m);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2cd> es(H);
        double prod = 2.0 * es.eigenvalues()(0) * es.eigenvalues()(1);
        EXPECT_NEAR(top_power(f).density[1], prod, 1e-12 * prod);
        auto [lo, hi] = eigenvalues(m);
        EXPECT_NEAR(lo, es.eigenvalues()(0), 1e-12);
        EXPECT_NEAR(hi, es.eigenvalues()(1), 1e-12);
    }
}

TEST(Laplacian, ConstantSineAndMaxPrinciple) {
    std::mt19937_64 rng(13);
    GridChart c(1, 64);
    MetricField flat(Form11Field::identity(c));
    EXPECT_LT(masked_sup_abs(laplacian(flat, ScalarField(c, 2.0)).v), 1e-12);
    auto s = ScalarField::sample(c, [](auto x) { return std::sin(2 * pi * x[0]); });
    auto ls = laplacian(flat, s);
    for (std::size_t p = 0; p < c.size(); ++p) EXPECT_NEAR(ls[p], -pi * pi * s[p], 1e-9);
    for (int trial = 0; trial < 10; ++trial) {
        auto g = random_metric(c, rng);
        auto f = random_smooth(c, rng, 1.0);
        auto lf = laplacian(g, f);
        EXPECT_LE(lf[masked_argmax(f.v)], 1e-6);
    }
}

TEST(MinEigenvalue, Generalized) {
    GridChart c(2, 16);
    MetricField base(Form11Field::identity(c, 2.0));
    Form11Field a(c);
    HMat m(2);
    m(0, 0) = 1.0;
    m(1, 1) = 4.0;
    for (std::size_t p = 0; p < c.size(); ++p) a.set(p, m);
    auto e = min_eigenvalue(a, base);
    EXPECT_NEAR(e[0], 0.5, 1e-14);
    EXPECT_NEAR(max_eigenvalue(a, base)[0], 2.0, 1e-14);
}
