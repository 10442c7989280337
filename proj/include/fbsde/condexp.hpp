#pragma once

#include "fbsde/control.hpp"
#include "fbsde/regression.hpp"
#include "fbsde/state_solver.hpp"

#include <algorithm>

namespace fbsde {

/// Regressor rows (x_i and, when needed, the running drivers) of a solved
/// trajectory at one grid step.
inline Mat state_regressors(const Trajectory& tr, const DriverHistory& hist, int step) {
    const int P = tr.paths(), n = tr.layout.n;
    const int q = n + tr.regressors.extra(hist.d, hist.M);
    Mat out(P, q);
    std::vector<double> row(static_cast<std::size_t>(std::max(q, 1)));
    for (int p = 0; p < P; ++p) {
        for (int a = 0; a < n; ++a) row[static_cast<std::size_t>(a)] = tr.x(p, step)[a];
        tr.regressors.fill(hist, p, step, row.data() + n);
        for (int a = 0; a < q; ++a) out(p, a) = row[static_cast<std::size_t>(a)];
    }
    return out;
}

/// Grid step whose information generates the filtration at step i.
inline int information_step(const FiltrationSpec& f, int step, double dt) {
    return std::max(step - f.lag_steps(dt), 0);
}

/// Projection of per-path values (rows = paths) onto the polynomial features
/// of the given regressors.
struct Projection {
    Mat design;
    RegressionFit fit;
    Mat fitted;
};

inline Projection project_onto(const Mat& regressors, const Mat& values, int degree, double ridge, int workers = 1) {
    if (!values.allFinite()) throw NonFiniteValue("conditional expectation input is not finite");
    const MonomialBasis basis(static_cast<int>(regressors.cols()), degree);
    Projection out;
    out.design = basis.design(regressors);
    out.fit = fit_regression(out.design, values, ridge, workers);
    out.fitted = out.design * out.fit.coef;
    return out;
}

/// E[values | eps_{t_i}] under the filtration: the cross-path mean for the
/// trivial filtration, otherwise a projection onto the regressors at the
/// information step (which reduces to the mean when that step is 0).
inline Mat condexp(const Mat& values, int step, const FiltrationSpec& filtration, const Trajectory& tr,
                   const DriverHistory& hist, double ridge = 1e-8, int workers = 1) {
    if (!values.allFinite()) throw NonFiniteValue("conditional expectation input is not finite");
    if (filtration.kind == FiltrationKind::trivial) {
        const Vec mean = values.colwise().mean().transpose();
        return mean.transpose().replicate(values.rows(), 1);
    }
    const int info = information_step(filtration, step, tr.dt);
    return project_onto(state_regressors(tr, hist, info), values, filtration.degree, ridge, workers).fitted;
}

/// Cost estimate with a martingale control variate. Each path's cost has
/// sum_i (zhat_i dB_i + sum_j rhat_ij dN~_ij) subtracted, where zhat and rhat
/// come from regressing the cost-to-go after step i jointly on the basis and
/// the basis times the step's increments. The projections used
/// on one half of the paths are fitted on the other half, so the correction
/// has mean zero exactly and the estimate stays unbiased. Falls back to
/// estimate_cost when the batch is too small to split.
inline CostEstimate estimate_cost_cv(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                     const Trajectory& tr, int workers = 1) {
    CostEstimate est = estimate_cost(spec, batch, u, tr, workers);
    const int P = tr.paths(), N = tr.steps(), d = batch.brownian_dim(), M = batch.mark_count();
    const double dt = tr.dt;
    const DriverHistory hist(batch);
    const int q = tr.layout.n + tr.regressors.extra(hist.d, hist.M);
    const int half = P / 2;
    if (d + M == 0 || half < 4 * MonomialBasis(q, 2).size() * (1 + d + M)) return est;

    Vec hgrad;
    spec.coeffs.h_grad(Vec(tr.y(0, 0)), hgrad);
    // togo(p, i): cost accumulated from step i to the end, i = 0..N.
    Mat togo(P, N + 1);
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t, std::size_t b, std::size_t e) {
        Point pt(tr.layout);
        Vec out, bt, nt;
        for (std::size_t pp = b; pp < e; ++pp) {
            const int p = static_cast<int>(pp);
            detail::StateSystem::terminal_value(spec, hist, p, tr.x(p, N), bt, nt, out);
            togo(p, N) = spec.coeffs.phi(Vec(tr.x(p, N))) + hgrad.dot(out);
            for (int i = N - 1; i >= 0; --i) {
                tr.fill_point(p, i, u, pt);
                spec.coeffs.f(pt, out);
                togo(p, i) = togo(p, i + 1) + (spec.coeffs.l(pt) + hgrad.dot(out)) * dt;
            }
        }
    });

    std::vector<double> correction(static_cast<std::size_t>(P), 0.0);
    const MonomialBasis basis(q, 2);
    const int B = basis.size(), K = B * (1 + d + M);
    Mat design(P, K), incr(P, d + M);
    Vec target(P);
    for (int i = 0; i < N; ++i) {
        const Mat base = basis.design(state_regressors(tr, hist, i));
        for (int p = 0; p < P; ++p) {
            const auto idx = static_cast<std::size_t>(p) * N + i;
            for (int c = 0; c < d; ++c) incr(p, c) = batch.raw_dB()[idx * d + c];
            for (int j = 0; j < M; ++j)
                incr(p, d + j) = static_cast<double>(batch.raw_dN()[idx * M + j]) -
                                 batch.marks().weights[static_cast<std::size_t>(j)] * dt;
            design.row(p).head(B) = base.row(p);
            for (int c = 0; c < d + M; ++c) design.row(p).segment(B * (1 + c), B) = base.row(p) * incr(p, c);
            target[p] = togo(p, i + 1);
        }
        const RegressionFit first = fit_regression(design.topRows(half), target.head(half), 1e-8, workers);
        const RegressionFit second = fit_regression(design.bottomRows(P - half), target.tail(P - half), 1e-8, workers);
        for (int p = 0; p < P; ++p) {
            const RegressionFit& fit = p < half ? second : first;
            correction[static_cast<std::size_t>(p)] += design.row(p).tail(K - B).dot(fit.coef.col(0).tail(K - B));
        }
    }
    double shift = 0.0;
    for (int p = 0; p < P; ++p) {
        est.contributions[static_cast<std::size_t>(p)] -= correction[static_cast<std::size_t>(p)];
        shift += correction[static_cast<std::size_t>(p)];
    }
    est.value -= shift / P;
    double mean = 0.0;
    for (double c : est.contributions) mean += c;
    mean /= P;
    double var = 0.0;
    for (double c : est.contributions) var += (c - mean) * (c - mean);
    est.se = std::sqrt(var / std::max(1, P - 1) / P);
    if (!std::isfinite(est.value) || !std::isfinite(est.se)) throw NonFiniteCost("cost estimate is not finite");
    return est;
}

} // namespace fbsde
