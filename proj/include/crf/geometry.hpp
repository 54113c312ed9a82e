#pragma once

#include <cmath>
#include <vector>

#include "crf/fields.hpp"
#include "crf/spectral.hpp"

namespace crf {

/// Matrix of ∂²f/∂z^k∂z̄^l. Hermitian by construction: the lower triangle is
/// the conjugate of the upper one and the diagonal is real.
inline Form11Field ddbar(const ScalarField& f) {
    const auto& chart = f.chart;
    if (!f.all_finite()) throw InvalidInput("ddbar: non-finite samples");
    const auto& D = Differentiator::get(chart);
    const int n = chart.complex_dim();
    std::vector<DerivOp> list;
    std::vector<std::pair<int, int>> idx;
    for (int k = 0; k < n; ++k)
        for (int l = k; l < n; ++l) {
            list.push_back(ops::dz_dzbar(k, l));
            idx.emplace_back(k, l);
        }
    std::vector<cplx> c(f.v.begin(), f.v.end());
    auto out = D.apply_many(list, c);
    Form11Field r(chart);
    for (std::size_t q = 0; q < idx.size(); ++q) {
        auto [k, l] = idx[q];
        for (std::size_t p = 0; p < chart.size(); ++p) {
            if (k == l) {
                r(p, k, k) = out[q][p].real();
            } else {
                r(p, k, l) = out[q][p];
                r(p, l, k) = std::conj(out[q][p]);
            }
        }
    }
    return r;
}

/// ∂/∂z^k of a complex field.
inline std::vector<cplx> d_z(const GridChart& chart, int k, std::span<const cplx> f) {
    return Differentiator::get(chart).apply(ops::dz(k), f);
}

/// ∂/∂z̄^k of a complex field.
inline std::vector<cplx> d_zbar(const GridChart& chart, int k, std::span<const cplx> f) {
    return Differentiator::get(chart).apply(ops::dzbar(k), f);
}

/// Pointwise inverse of g, rejecting ill-conditioned points.
inline std::vector<HMat> inverse_metric(const MetricField& g) {
    std::vector<HMat> inv(g.size());
    for (std::size_t p = 0; p < g.size(); ++p) {
        HMat m = g.at(p);
        if (condition_number(m) > 1e12)
            throw DegenerateMetric("metric condition number exceeds 1e12", p);
        inv[p] = inverse(m);
    }
    return inv;
}

/// First derivatives ∂_i g_{j l̄}, indexed [i][j*n + l].
inline std::vector<std::vector<std::vector<cplx>>> metric_derivatives(const Form11Field& g) {
    const int n = g.dim();
    std::vector<std::vector<std::vector<cplx>>> dg(n, std::vector<std::vector<cplx>>(n * n));
    for (int j = 0; j < n; ++j)
        for (int l = 0; l < n; ++l) {
            auto comp = g.component(j, l);
            for (int i = 0; i < n; ++i) dg[i][j * n + l] = d_z(g.chart(), i, comp);
        }
    return dg;
}

/// Γ^k_{ij} = g^{l̄ k} ∂_i g_{j l̄} of the Chern connection.
inline ChristoffelField christoffels(const MetricField& g) {
    const int n = g.dim();
    auto inv = inverse_metric(g);
    auto dg = metric_derivatives(g.form());
    ChristoffelField G(g.chart());
    for (std::size_t p = 0; p < g.size(); ++p)
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    cplx s = 0.0;
                    // inv(l, k) is g^{l̄ k}
                    for (int l = 0; l < n; ++l) s += inv[p](l, k) * dg[i][j * n + l][p];
                    G(p, k, i, j) = s;
                }
    return G;
}

/// T^k_{ij} = Γ^k_{ij} − Γ^k_{ji}.
inline TorsionField torsion(const ChristoffelField& G) {
    const int n = G.dim();
    TorsionField T(G.chart());
    for (std::size_t p = 0; p < G.size(); ++p)
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) T(p, k, i, j) = G(p, k, i, j) - G(p, k, j, i);
    return T;
}

inline TorsionField torsion(const MetricField& g) { return torsion(christoffels(g)); }

/// R_{k l̄ i}{}^p = −∂_{l̄} Γ^p_{ki}.
inline CurvatureField chern_curvature(const ChristoffelField& G) {
    const int n = G.dim();
    CurvatureField R(G.chart());
    for (int q = 0; q < n; ++q)
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i) {
                auto comp = G.component(q, k, i);
                for (int l = 0; l < n; ++l) {
                    auto d = d_zbar(G.chart(), l, comp);
                    for (std::size_t p = 0; p < G.size(); ++p) R(p, k, l, i, q) = -d[p];
                }
            }
    return R;
}

inline CurvatureField chern_curvature(const MetricField& g) {
    return chern_curvature(christoffels(g));
}

/// log det g per point; det ≤ 0 is a degenerate metric.
inline ScalarField log_det(const Form11Field& g) {
    ScalarField out(g.chart());
    for (std::size_t p = 0; p < g.size(); ++p) {
        const double d = det(g.at(p)).real();
        if (!(d > 0.0)) throw DegenerateMetric("non-positive determinant", p);
        out[p] = std::log(d);
    }
    return out;
}

/// R_{k l̄} = −∂_k∂_{l̄} log det g.
inline Form11Field chern_ricci(const MetricField& g) {
    Form11Field r = ddbar(log_det(g.form()));
    r *= -1.0;
    return r;
}

/// Σ_i R_{k l̄ i}{}^i, which equals g^{j̄ i}R_{k l̄ i j̄}.
inline Form11Field ricci_from_curvature(const CurvatureField& R) {
    const int n = R.dim();
    Form11Field out(R.chart());
    for (std::size_t p = 0; p < R.size(); ++p)
        for (int k = 0; k < n; ++k)
            for (int l = 0; l < n; ++l) {
                cplx s = 0.0;
                for (int i = 0; i < n; ++i) s += R(p, k, l, i, i);
                out(p, k, l) = s;
            }
    return out;
}

/// tr_base α = g_base^{j̄ i} α_{i j̄}.
inline double trace_at(const HMat& base, const HMat& alpha) {
    return trace(matmul(inverse(base), alpha)).real();
}

inline ScalarField trace(const MetricField& base, const Form11Field& alpha) {
    ScalarField out(base.chart());
    for (std::size_t p = 0; p < base.size(); ++p) out[p] = trace_at(base.at(p), alpha.at(p));
    return out;
}

/// n!·det α against the Euclidean volume element.
inline VolumeFormField top_power(const Form11Field& alpha) {
    std::vector<double> d(alpha.size());
    const double nf = factorial(alpha.dim());
    for (std::size_t p = 0; p < alpha.size(); ++p) d[p] = nf * det(alpha.at(p)).real();
    VolumeFormField v;
    v.chart = alpha.chart();
    v.density = std::move(d);
    return v;
}

/// Chern Laplacian g^{j̄ i}∂_i∂_{j̄} f.
inline ScalarField laplacian(const MetricField& g, const ScalarField& f) {
    return trace(g, ddbar(f));
}

/// Smallest generalized eigenvalue of α against base at every point.
inline ScalarField min_eigenvalue(const Form11Field& alpha, const MetricField& base) {
    ScalarField out(base.chart());
    for (std::size_t p = 0; p < base.size(); ++p)
        out[p] = generalized_eigenvalues(alpha.at(p), base.at(p)).first;
    return out;
}

inline ScalarField max_eigenvalue(const Form11Field& alpha, const MetricField& base) {
    ScalarField out(base.chart());
    for (std::size_t p = 0; p < base.size(); ++p)
        out[p] = generalized_eigenvalues(alpha.at(p), base.at(p)).second;
    return out;
}

/// Sup norm over unmasked points of [∇_k, ∇_{l̄}]X^i − R_{k l̄ j}{}^i X^j for a
/// (1,0) vector field X given by its n components. The left side is built
/// from nested covariant derivatives; the right side from chern_curvature.
inline double commutator_residual(const MetricField& g,
                                  const std::vector<std::vector<cplx>>& X,
                                  const Mask& mask = {}) {
    const int n = g.dim();
    const auto& chart = g.chart();
    auto G = christoffels(g);
    auto R = chern_curvature(G);
    const std::size_t N = chart.size();
    double worst = 0.0;
    for (int k = 0; k < n; ++k)
        for (int l = 0; l < n; ++l) {
            // Y^i = ∇_{l̄} X^i = ∂_{l̄} X^i;  ∇_k Y^i = ∂_k Y^i + Γ^i_{kj} Y^j
            std::vector<std::vector<cplx>> Y(n), KX(n);
            for (int i = 0; i < n; ++i) Y[i] = d_zbar(chart, l, X[i]);
            for (int i = 0; i < n; ++i) {
                // ∇_k X^i
                auto dX = d_z(chart, k, X[i]);
                for (std::size_t p = 0; p < N; ++p)
                    for (int j = 0; j < n; ++j) dX[p] += G(p, i, k, j) * X[j][p];
                KX[i] = std::move(dX);
            }
            for (int i = 0; i < n; ++i) {
                auto a = d_z(chart, k, Y[i]);
                auto b = d_zbar(chart, l, KX[i]);
                for (std::size_t p = 0; p < N; ++p) {
                    if (excluded(mask, p)) continue;
                    cplx lhs = a[p] - b[p];
                    for (int j = 0; j < n; ++j) lhs += G(p, i, k, j) * Y[j][p];
                    cplx rhs = 0.0;
                    for (int j = 0; j < n; ++j) rhs += R(p, k, l, j, i) * X[j][p];
                    worst = std::max(worst, std::abs(lhs - rhs));
                }
            }
        }
    return worst;
}

}  // namespace crf
