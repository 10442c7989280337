#pragma once

#include "fbsde/errors.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/regression.hpp"
#include "fbsde/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fbsde {

struct PicardConfig {
    int max_iterations = 50;
    double damping = 0.5;
    double tolerance = 1e-6;
    /// Give up early when no new best residual appears within this many
    /// iterations.
    int stall_window = 10;
    RegressionConfig regression;
    int workers = 1;
};

/// Per-path arrays of a forward/backward pair solved on a batch.
///
/// forward[p][i] (i = 0..N) and y[p][i] (i = 0..N) are the forward and
/// backward states; bvals[p][i] (i = 0..N-1) packs the fitted
/// (ybar, z, r) used as coefficient arguments at step i:
/// ybar = E_i[y_{i+1}], z = E_i[y_{i+1} dB'] / dt, r_j = E_i[y_{i+1} dN~_j] / (pi_j dt).
struct PicardStore {
    int P = 0, N = 0, nf = 0, nb = 0, d = 0, M = 0;
    std::vector<double> forward, y, bvals;
    std::vector<RegressionFit> fits;
    std::vector<double> residuals;
    int iterations = 0;
    bool converged = false;

    PicardStore() = default;
    PicardStore(int paths, int steps, int forward_dim, int backward_dim, int brownian, int marks)
        : P(paths), N(steps), nf(forward_dim), nb(backward_dim), d(brownian), M(marks),
          forward(static_cast<std::size_t>(paths) * (steps + 1) * forward_dim, 0.0),
          y(static_cast<std::size_t>(paths) * (steps + 1) * backward_dim, 0.0),
          bvals(static_cast<std::size_t>(paths) * steps * packed(), 0.0), fits(static_cast<std::size_t>(steps)) {}

    int packed() const noexcept { return nb * (1 + d + M); }
    double* fwd(int p, int i) { return forward.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * nf; }
    const double* fwd(int p, int i) const { return forward.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * nf; }
    double* back(int p, int i) { return y.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * nb; }
    const double* back(int p, int i) const { return y.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * nb; }
    double* packed_at(int p, int i) { return bvals.data() + (static_cast<std::size_t>(p) * N + i) * packed(); }
    const double* packed_at(int p, int i) const { return bvals.data() + (static_cast<std::size_t>(p) * N + i) * packed(); }
};

namespace detail {

inline bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace detail

/// Alternates a forward Euler sweep (driven by the current backward
/// surrogates) with a least-squares Monte Carlo backward sweep until the
/// surrogates stop changing. The System supplies:
///
///   int forward_dim(), backward_dim(), regressor_dim(); bool coupled();
///   int linear_regressors();   // optional: trailing regressors entering affinely
///   Scratch make_scratch();
///   void regressor(p, i, fwd, out, scratch);
///   void init(p, fwd0, scratch);
///   void step(p, i, fwd, packed, next, scratch);
///   void terminal(p, fwdN, yN, scratch);
///   void driver(p, i, fwd, packed, f_out, scratch);   // y_i = ybar + f dt
///
/// When the system is not coupled the forward sweep ignores the surrogates,
/// so one forward and one backward sweep solve it exactly.
template <typename System>
PicardStore run_picard(const System& sys, const ScenarioBatch& batch, const PicardConfig& cfg) {
    const int P = batch.paths(), N = batch.steps(), d = batch.brownian_dim(), M = batch.mark_count();
    const int nf = sys.forward_dim(), nb = sys.backward_dim(), q = sys.regressor_dim();
    const double dt = batch.grid().dt();
    int tail = 0;
    if constexpr (requires { sys.linear_regressors(); }) tail = sys.linear_regressors();
    const MonomialBasis basis(q, cfg.regression.degree, tail);
    const int B = basis.size();
    PicardStore st(P, N, nf, nb, d, M);
    const int packed = st.packed();
    std::vector<RegressionFit> surrogate(static_cast<std::size_t>(N), RegressionFit::zero(B, packed));
    const bool coupled = sys.coupled();
    const double theta = std::clamp(cfg.damping, 1e-6, 1.0);

    auto features_row = [&](int p, int i, const double* fwd, double* zbuf, double* out, auto& scratch) {
        sys.regressor(p, i, fwd, zbuf, scratch);
        basis.evaluate(zbuf, out);
    };

    auto forward_sweep = [&] {
        for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
            auto scratch = sys.make_scratch();
            std::vector<double> zbuf(static_cast<std::size_t>(std::max(q, 1))), feat(static_cast<std::size_t>(B)),
                vals(static_cast<std::size_t>(packed), 0.0);
            for (std::size_t pp = b; pp < e; ++pp) {
                const int p = static_cast<int>(pp);
                sys.init(p, st.fwd(p, 0), scratch);
                for (int i = 0; i < N; ++i) {
                    if (coupled) {
                        features_row(p, i, st.fwd(p, i), zbuf.data(), feat.data(), scratch);
                        surrogate[i].predict(Eigen::Map<const Vec>(feat.data(), B), vals.data());
                    }
                    sys.step(p, i, st.fwd(p, i), vals.data(), st.fwd(p, i + 1), scratch);
                }
            }
        });
    };

    // Returns (sum of squared change, sum of squared new values) per step.
    auto backward_sweep = [&](std::vector<double>& change, std::vector<double>& size) {
        for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
            auto scratch = sys.make_scratch();
            for (std::size_t pp = b; pp < e; ++pp)
                sys.terminal(static_cast<int>(pp), st.fwd(static_cast<int>(pp), N), st.back(static_cast<int>(pp), N), scratch);
        });
        Mat design(P, B), targets(P, packed), level(P, nb);
        const std::size_t chunks = chunk_count(static_cast<std::size_t>(P));
        std::vector<double> part_change(chunks), part_size(chunks);
        for (int i = N - 1; i >= 0; --i) {
            for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
                auto scratch = sys.make_scratch();
                std::vector<double> zbuf(static_cast<std::size_t>(std::max(q, 1))), feat(static_cast<std::size_t>(B));
                for (std::size_t pp = b; pp < e; ++pp) {
                    const int p = static_cast<int>(pp);
                    features_row(p, i, st.fwd(p, i), zbuf.data(), feat.data(), scratch);
                    for (int c = 0; c < B; ++c) design(p, c) = feat[c];
                    const double* next = st.back(p, i + 1);
                    for (int a = 0; a < nb; ++a) level(p, a) = next[a];
                }
            });
            // z and r are projections of the martingale increment y_{i+1} - ybar_i
            // times the driver increments: same conditional mean as y_{i+1} times
            // the increments, less variance, and exactly zero when y_{i+1} is
            // known at step i.
            const RegressionFit level_fit = fit_regression(design, level, cfg.regression.ridge, cfg.workers);
            for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
                std::vector<double> ybar(static_cast<std::size_t>(nb));
                for (std::size_t pp = b; pp < e; ++pp) {
                    const int p = static_cast<int>(pp);
                    level_fit.predict(design.row(p), ybar.data());
                    for (int a = 0; a < nb; ++a) {
                        const double next = level(p, a), dy = next - ybar[static_cast<std::size_t>(a)];
                        targets(p, a) = next;
                        for (int c = 0; c < d; ++c)
                            targets(p, nb + a * d + c) = dy * batch.raw_dB()[(pp * N + i) * d + c] / dt;
                        for (int j = 0; j < M; ++j) {
                            const double pi_dt = batch.marks().weights[static_cast<std::size_t>(j)] * dt;
                            const double dn = static_cast<double>(batch.raw_dN()[(pp * N + i) * M + j]) - pi_dt;
                            targets(p, nb * (1 + d) + j * nb + a) = dy * dn / pi_dt;
                        }
                    }
                }
            });
            RegressionFit fit = fit_regression(design, targets, cfg.regression.ridge, cfg.workers);
            for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t c, std::size_t b, std::size_t e) {
                auto scratch = sys.make_scratch();
                std::vector<double> old(static_cast<std::size_t>(packed)), f(static_cast<std::size_t>(nb));
                double ch = 0.0, sz = 0.0;
                for (std::size_t pp = b; pp < e; ++pp) {
                    const int p = static_cast<int>(pp);
                    double* vals = st.packed_at(p, i);
                    fit.predict(design.row(p), vals);
                    if (coupled) {
                        surrogate[i].predict(design.row(p), old.data());
                        for (int t = 0; t < packed; ++t) {
                            ch += (vals[t] - old[t]) * (vals[t] - old[t]);
                            sz += vals[t] * vals[t];
                        }
                    }
                    sys.driver(p, i, st.fwd(p, i), vals, f.data(), scratch);
                    double* yi = st.back(p, i);
                    for (int a = 0; a < nb; ++a) yi[a] = vals[a] + f[a] * dt;
                }
                part_change[c] = ch;
                part_size[c] = sz;
            });
            double ch = 0.0, sz = 0.0;
            for (std::size_t c = 0; c < chunks; ++c) {
                ch += part_change[c];
                sz += part_size[c];
            }
            change[static_cast<std::size_t>(i)] = ch / P;
            size[static_cast<std::size_t>(i)] = sz / P;
            st.fits[static_cast<std::size_t>(i)] = std::move(fit);
        }
    };

    std::vector<double> change(static_cast<std::size_t>(N)), size(static_cast<std::size_t>(N));
    double best = std::numeric_limits<double>::infinity();
    int best_at = 0;
    for (int it = 1; it <= std::max(1, cfg.max_iterations); ++it) {
        forward_sweep();
        if (!detail::all_finite(st.forward))
            throw PicardDiverged("forward state became non-finite", st.residuals);
        backward_sweep(change, size);
        if (!detail::all_finite(st.y) || !detail::all_finite(st.bvals))
            throw PicardDiverged("backward state became non-finite", st.residuals);
        st.iterations = it;
        if (!coupled) {
            st.residuals.push_back(0.0);
            st.converged = true;
            return st;
        }
        const double num = std::sqrt(*std::max_element(change.begin(), change.end()));
        const double den = std::sqrt(*std::max_element(size.begin(), size.end()));
        const double residual = num == 0.0 ? 0.0 : num / (den + 1e-10);
        st.residuals.push_back(residual);
        if (!std::isfinite(residual)) throw PicardDiverged("Picard residual became non-finite", st.residuals);
        if (residual < cfg.tolerance) {
            st.converged = true;
            return st;
        }
        if (residual < best) {
            best = residual;
            best_at = it;
        } else if (it - best_at >= cfg.stall_window) {
            throw PicardDiverged("Picard residual stopped decreasing", st.residuals);
        }
        for (int i = 0; i < N; ++i)
            surrogate[static_cast<std::size_t>(i)] = blend(st.fits[static_cast<std::size_t>(i)], surrogate[static_cast<std::size_t>(i)], theta);
    }
    throw PicardDiverged("Picard iteration did not reach tolerance", st.residuals);
}

} // namespace fbsde
