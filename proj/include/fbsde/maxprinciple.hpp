#pragma once

#include "fbsde/adjoint.hpp"
#include "fbsde/condexp.hpp"
#include "fbsde/hamiltonian.hpp"
#include "fbsde/state_solver.hpp"
#include "fbsde/variational.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace fbsde {

struct Estimate {
    double value = 0.0;
    double se = 0.0;
};

/// Mean and standard error of per-path samples, summed in path order.
inline Estimate mean_and_se(const std::vector<double>& samples) {
    const auto P = static_cast<double>(samples.size());
    if (samples.empty()) return {};
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= P;
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= std::max(1.0, P - 1.0);
    return {mean, std::sqrt(var / P)};
}

/// SE of the difference of two estimates, treated as independent.
inline double pooled_se(double a, double b) { return std::sqrt(a * a + b * b); }

/// A bounded control direction theta, adapted like the controls. `delta_adm`
/// is the largest y <= 1 with u +- y theta in U at every (path, step).
struct DirectionProcess {
    ControlProcess theta;
    double bound = 0.0;
    double delta_adm = 0.0;

    static DirectionProcess make(ControlProcess theta, const ControlProcess& u, const ControlSet& set) {
        DirectionProcess d;
        d.theta = std::move(theta);
        for (double v : d.theta.values) d.bound = std::max(d.bound, std::abs(v));
        d.delta_adm = admissible_radius(d.theta, u, set);
        return d;
    }

    /// theta_s = alpha * 1{t0 <= s < t0 + r} on one control axis, with the
    /// indicator aligned to grid nodes and alpha one scalar per path.
    static ControlProcess indicator(int paths, int steps, int k, double dt, int axis, double t0, double r,
                                    const std::vector<double>& alpha, FiltrationSpec f = {}) {
        if (axis < 0 || axis >= k) throw IndexOutOfRange("direction axis out of range");
        if (static_cast<int>(alpha.size()) != paths) throw InvalidSpec("alpha needs one value per path");
        ControlProcess th(paths, steps, k, f);
        const int first = static_cast<int>(std::ceil(t0 / dt - 1e-9));
        const int last = static_cast<int>(std::ceil((t0 + r) / dt - 1e-9));
        for (int p = 0; p < paths; ++p)
            for (int i = std::max(first, 0); i < std::min(last, steps); ++i) th.at(p, i)[axis] = alpha[static_cast<std::size_t>(p)];
        return th;
    }

    static double admissible_radius(const ControlProcess& theta, const ControlProcess& u, const ControlSet& set) {
        auto ok = [&](double y) {
            for (int p = 0; p < u.P; ++p)
                for (int i = 0; i < u.N; ++i) {
                    const Vec base = u.vec(p, i), dir = theta.vec(p, i);
                    if (!in_control_set(base + y * dir, set, 1e-12) || !in_control_set(base - y * dir, set, 1e-12))
                        return false;
                }
            return true;
        };
        if (ok(1.0)) return 1.0;
        double lo = 0.0, hi = 1.0;
        for (int it = 0; it < 60; ++it) {
            const double mid = 0.5 * (lo + hi);
            (ok(mid) ? lo : hi) = mid;
        }
        return lo;
    }
};

/// Central difference [J(u + y theta) - J(u - y theta)] / (2y) on one batch.
/// The SE comes from the per-path difference quotients of the cost
/// contributions (common random numbers).
inline Estimate gateaux_fd(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                           const ControlProcess& theta, double y = 1e-4, const PicardConfig& cfg = {}) {
    if (!(y > 0.0)) throw InvalidSpec("finite-difference step must be positive");
    if (std::all_of(theta.values.begin(), theta.values.end(), [](double v) { return v == 0.0; })) return {};
    const ControlProcess plus = u + theta.scaled(y), minus = u + theta.scaled(-y);
    if (!plus.admissible(spec.control_set, 1e-12) || !minus.admissible(spec.control_set, 1e-12))
        throw InvalidSpec("perturbed control leaves the control set; reduce the step");
    const Trajectory tp = solve_fbsde(spec, batch, plus, cfg), tm = solve_fbsde(spec, batch, minus, cfg);
    const CostEstimate cp = estimate_cost(spec, batch, plus, tp, cfg.workers);
    const CostEstimate cm = estimate_cost(spec, batch, minus, tm, cfg.workers);
    std::vector<double> quot(cp.contributions.size());
    for (std::size_t p = 0; p < quot.size(); ++p) quot[p] = (cp.contributions[p] - cm.contributions[p]) / (2.0 * y);
    return {(cp.value - cm.value) / (2.0 * y), mean_and_se(quot).se};
}

/// Derivative from one variational solve:
///   E[ sum <grad l, dw> dt + <grad phi(x_T), X1_T> ] + <grad h(y_0), Y1_0>.
inline Estimate gateaux_variational(const ProblemSpec& spec, const ControlProcess& theta, const Trajectory& tr,
                                    const Linearization& lin, const VariationalTrajectory& var) {
    const int P = tr.paths(), N = tr.steps();
    const double dt = tr.dt;
    Vec hgrad;
    spec.coeffs.h_grad(Vec(tr.y(0, 0)), hgrad);
    std::vector<double> contrib(static_cast<std::size_t>(P)), direct(static_cast<std::size_t>(P));
    for_each_chunk(static_cast<std::size_t>(P), 1, [&](std::size_t, std::size_t b, std::size_t e) {
        Vec dw, pg, ysum;
        for (std::size_t pp = b; pp < e; ++pp) {
            const int p = static_cast<int>(pp);
            double s = 0.0;
            ysum = var.Y1(p, N);
            for (int i = 0; i < N; ++i) {
                var.fill_direction(p, i, theta, dw);
                lin.weight_direction(dw);
                s += lin.lgrad(p, i).dot(dw) * dt;
                ysum += lin.jf(p, i) * dw * dt;
            }
            spec.coeffs.phi_grad(Vec(tr.x(p, N)), pg);
            s += pg.dot(var.X1(p, N));
            direct[pp] = s;
            contrib[pp] = s + hgrad.dot(ysum);
        }
    });
    const Estimate d = mean_and_se(direct);
    return {d.value + hgrad.dot(var.Y1(0, 0)), mean_and_se(contrib).se};
}

inline Estimate gateaux_variational(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                    const ControlProcess& theta, const Trajectory& tr, const Linearization& lin,
                                    const PicardConfig& cfg = {}) {
    const VariationalTrajectory var = solve_variational(spec, batch, u, theta, tr, lin, cfg);
    return gateaux_variational(spec, theta, tr, lin, var);
}

/// grad_v H along the solved trajectory, one (paths x k) matrix per step.
inline std::vector<Mat> control_gradient(const Linearization& lin, const AdjointTrajectory& adj, int workers = 1) {
    const int P = adj.paths(), N = adj.steps();
    const Layout& lay = adj.layout;
    std::vector<Mat> out(static_cast<std::size_t>(N), Mat(P, lay.k));
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t, std::size_t b, std::size_t e) {
        Multipliers mu;
        Vec pairing, grad;
        for (std::size_t pp = b; pp < e; ++pp)
            for (int i = 0; i < N; ++i) {
                adj.fill_multipliers(static_cast<int>(pp), i, mu);
                lin.gradient(static_cast<int>(pp), i, mu, pairing, grad);
                out[static_cast<std::size_t>(i)].row(static_cast<Eigen::Index>(pp)) = grad.segment(lay.v_off, lay.k).transpose();
            }
    });
    return out;
}

/// E[ sum <grad_v H, theta> dt ] at the adjoint multipliers.
inline Estimate gateaux_hamiltonian(const ControlProcess& theta, const std::vector<Mat>& hv, double dt) {
    const int P = theta.P, N = theta.N;
    std::vector<double> per(static_cast<std::size_t>(P), 0.0);
    for (int p = 0; p < P; ++p) {
        double s = 0.0;
        for (int i = 0; i < N; ++i)
            s += hv[static_cast<std::size_t>(i)].row(p).dot(Eigen::Map<const Vec>(theta.at(p, i), theta.k)) * dt;
        per[static_cast<std::size_t>(p)] = s;
    }
    return mean_and_se(per);
}

inline Estimate gateaux_hamiltonian(const ControlProcess& theta, const Linearization& lin, const AdjointTrajectory& adj) {
    return gateaux_hamiltonian(theta, control_gradient(lin, adj), adj.dt);
}

/// G[p][i] = E[grad_v H | eps_{t_i}] per step, with the cross-path RMS of |G|
/// per step and its maximum over steps.
struct StationarityReport {
    std::vector<Mat> G;
    std::vector<double> rms;
    double norm = 0.0;
};

inline StationarityReport stationarity_residual(const std::vector<Mat>& hv, const FiltrationSpec& filtration,
                                                const Trajectory& tr, const DriverHistory& hist, double ridge = 1e-8,
                                                int workers = 1) {
    StationarityReport rep;
    const int N = static_cast<int>(hv.size());
    rep.G.resize(static_cast<std::size_t>(N));
    rep.rms.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        rep.G[static_cast<std::size_t>(i)] = condexp(hv[static_cast<std::size_t>(i)], i, filtration, tr, hist, ridge, workers);
        const Mat& g = rep.G[static_cast<std::size_t>(i)];
        rep.rms[static_cast<std::size_t>(i)] = std::sqrt(g.squaredNorm() / static_cast<double>(g.rows()));
        rep.norm = std::max(rep.norm, rep.rms[static_cast<std::size_t>(i)]);
    }
    return rep;
}

inline StationarityReport stationarity_residual(const ProblemSpec& spec, const ScenarioBatch& batch,
                                                const Trajectory& tr, const Linearization& lin,
                                                const AdjointTrajectory& adj, const FiltrationSpec& filtration,
                                                double ridge = 1e-8, int workers = 1) {
    (void)spec;
    return stationarity_residual(control_gradient(lin, adj, workers), filtration, tr, DriverHistory(batch), ridge, workers);
}

/// Standard error of the stationarity table by sectioning. The batch is cut
/// into `sections` contiguous blocks of paths; state and adjoint are solved
/// on each block, grad_v H is projected onto that block's information, and
/// the resulting per-step fits are evaluated on the regressors of `tr`. The
/// spread of those evaluations estimates the sampling error of G.
struct StationarityError {
    std::vector<double> se;  ///< per step, RMS over paths
    double max_se = 0.0;
};

inline StationarityError stationarity_error(const ProblemSpec& spec, const ScenarioBatch& batch,
                                            const ControlProcess& u, const Trajectory& tr,
                                            const FiltrationSpec& filtration, const PicardConfig& cfg,
                                            int sections = 8) {
    const int P = batch.paths(), N = batch.steps(), k = u.k;
    if (sections < 2 || P < 2 * sections) throw InvalidSpec("too few paths for sectioning");
    const DriverHistory hist(batch);
    // evals[s][i]: section s fit at step i evaluated on all paths of tr.
    std::vector<std::vector<Mat>> evals(static_cast<std::size_t>(sections));
    for (int s = 0; s < sections; ++s) {
        std::vector<int> rows;
        for (int p = s * P / sections; p < (s + 1) * P / sections; ++p) rows.push_back(p);
        const ScenarioBatch sub = batch.select_paths(rows);
        const ControlProcess us = u.select_paths(rows);
        const Trajectory ts = solve_fbsde(spec, sub, us, cfg);
        const Linearization lin(spec, ts, us, cfg.workers);
        const AdjointTrajectory adj = solve_adjoint(spec, sub, us, ts, lin, cfg);
        const std::vector<Mat> hv = control_gradient(lin, adj, cfg.workers);
        const DriverHistory sub_hist(sub);
        auto& out = evals[static_cast<std::size_t>(s)];
        for (int i = 0; i < N; ++i) {
            const Mat& h = hv[static_cast<std::size_t>(i)];
            if (filtration.kind == FiltrationKind::trivial) {
                out.push_back(h.colwise().mean().replicate(P, 1));
                continue;
            }
            const int info = information_step(filtration, i, tr.dt);
            const Projection proj = project_onto(state_regressors(ts, sub_hist, info), h, filtration.degree,
                                                 cfg.regression.ridge, cfg.workers);
            const Mat reg = state_regressors(tr, hist, info);
            out.push_back(MonomialBasis(static_cast<int>(reg.cols()), filtration.degree).design(reg) * proj.fit.coef);
        }
    }
    StationarityError err;
    err.se.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        Mat mean = Mat::Zero(P, k);
        for (int s = 0; s < sections; ++s) mean += evals[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
        mean /= sections;
        double acc = 0.0;
        for (int s = 0; s < sections; ++s)
            acc += (evals[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] - mean).squaredNorm() / P;
        err.se[static_cast<std::size_t>(i)] = std::sqrt(acc / (sections * (sections - 1.0)));
        err.max_se = std::max(err.max_se, err.se[static_cast<std::size_t>(i)]);
    }
    return err;
}

/// Per-step outcome of the partial-information maximum condition: the
/// smallest conditional gap E[H(v) - H(u) | eps_t] over candidates and
/// paths, and the tolerance it was held to.
struct MaxConditionStep {
    double margin = 0.0;
    double tolerance = 0.0;
    Vec worst_candidate;
    bool pass = true;
};

struct MaxConditionReport {
    std::vector<MaxConditionStep> steps;
    bool pass() const {
        return std::all_of(steps.begin(), steps.end(), [](const auto& s) { return s.pass; });
    }
    double worst_slack() const {
        double w = std::numeric_limits<double>::infinity();
        for (const auto& s : steps) w = std::min(w, s.margin + s.tolerance);
        return steps.empty() ? 0.0 : w;
    }
};

/// Checks E[H(v) - H(u) | eps_t] >= 0 for every candidate v at every step.
///
/// The paths are cut into `bins` equal-count cells by the first regressor at
/// the information step (a single cell when that step carries no
/// information). Cells are eps_t-measurable, so by the tower property the
/// mean gap in each must be non-negative; it is tested against
/// -(3 SE + 1e-6) with SE the standard error of the cell mean.
inline MaxConditionReport max_condition_check(const ProblemSpec& spec, const ScenarioBatch& batch,
                                              const Trajectory& tr, const AdjointTrajectory& adj,
                                              const ControlProcess& u, const std::vector<Vec>& candidates,
                                              const FiltrationSpec& filtration, int bins = 16, int workers = 1) {
    const int P = tr.paths(), N = tr.steps();
    const auto C = static_cast<Eigen::Index>(candidates.size());
    const DriverHistory hist(batch);
    MaxConditionReport rep;
    rep.steps.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        Mat gap(P, C);
        for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t, std::size_t b, std::size_t e) {
            Point pt(tr.layout);
            Multipliers mu;
            LocalCoefficients lc;
            for (std::size_t pp = b; pp < e; ++pp) {
                const int p = static_cast<int>(pp);
                tr.fill_point(p, i, u, pt);
                adj.fill_multipliers(p, i, mu);
                lc.evaluate(spec, pt, true, false);
                const double base = hamiltonian_value(lc, mu, spec.marks);
                for (Eigen::Index c = 0; c < C; ++c) {
                    pt.v() = candidates[static_cast<std::size_t>(c)];
                    lc.evaluate(spec, pt, true, false);
                    gap(p, c) = hamiltonian_value(lc, mu, spec.marks) - base;
                }
            }
        });

        std::vector<std::vector<int>> cells;
        const int info = information_step(filtration, i, tr.dt);
        if (filtration.kind != FiltrationKind::trivial && info > 0) {
            std::vector<int> order(static_cast<std::size_t>(P));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int l, int r) { return tr.x(l, info)[0] < tr.x(r, info)[0]; });
            const int cells_n = std::clamp(bins, 1, P);
            for (int c = 0; c < cells_n; ++c)
                cells.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(c) * P / cells_n,
                                   order.begin() + static_cast<std::ptrdiff_t>(c + 1) * P / cells_n);
        } else {
            cells.emplace_back(static_cast<std::size_t>(P));
            std::iota(cells.back().begin(), cells.back().end(), 0);
        }

        MaxConditionStep& st = rep.steps[static_cast<std::size_t>(i)];
        st.margin = C == 0 ? 0.0 : std::numeric_limits<double>::infinity();
        double worst_slack = std::numeric_limits<double>::infinity();
        auto consider = [&](double m, double tol, Eigen::Index c) {
            if (m + tol < worst_slack) {
                worst_slack = m + tol;
                st.margin = m;
                st.tolerance = tol;
                st.worst_candidate = candidates[static_cast<std::size_t>(c)];
            }
        };
        for (Eigen::Index c = 0; c < C; ++c) {
            for (const auto& cell : cells) {
                std::vector<double> vals;
                vals.reserve(cell.size());
                for (int p : cell) vals.push_back(gap(p, c));
                const Estimate e = mean_and_se(vals);
                consider(e.value, 3.0 * e.se + 1e-6, c);
            }
        }
        st.pass = C == 0 || worst_slack >= 0.0;
    }
    return rep;
}

/// One scalar-or-vector test process dY = b dt + g dB + sum_j sigma_j dN~_j
/// with coefficients depending on (t, Y_{t-}).
struct IbpProcess {
    Vec y0;
    std::function<void(double, const Vec&, Vec&)> b;
    std::function<void(double, const Vec&, Vec&)> g;  ///< dim x d, row-major
    std::function<void(double, const Vec&, std::size_t, Vec&)> sigma;
};

struct IbpReport {
    double lhs = 0.0, rhs = 0.0, difference = 0.0, se = 0.0;
};

/// Compares E[Y1_T . Y2_T] with y1 . y2 + E sum <Y1, dY2> + E sum <dY1, Y2>
/// + E sum <g1, g2> dt + E sum_j pi_j <sigma1_j, sigma2_j> dt on the grid.
inline IbpReport verify_ibp(const IbpProcess& a, const IbpProcess& b, const ScenarioBatch& batch) {
    if (a.y0.size() != b.y0.size()) throw InvalidSpec("integration-by-parts processes need matching dimensions");
    const int P = batch.paths(), N = batch.steps(), d = batch.brownian_dim(), M = batch.mark_count();
    const Eigen::Index dim = a.y0.size();
    const double dt = batch.grid().dt();
    std::vector<double> lhs(static_cast<std::size_t>(P)), rhs(static_cast<std::size_t>(P)), diff(static_cast<std::size_t>(P));
    Vec ya, yb, ba, bb, ga, gb, sa, sb, da(dim), db(dim);
    for (int p = 0; p < P; ++p) {
        ya = a.y0;
        yb = b.y0;
        double r = a.y0.dot(b.y0), cross = 0.0;
        for (int i = 0; i < N; ++i) {
            const double t = i * dt;
            a.b(t, ya, ba);
            b.b(t, yb, bb);
            a.g(t, ya, ga);
            b.g(t, yb, gb);
            da = ba * dt;
            db = bb * dt;
            for (Eigen::Index c = 0; c < dim; ++c)
                for (int e = 0; e < d; ++e) {
                    da[c] += ga[c * d + e] * batch.dB(p, i, e);
                    db[c] += gb[c * d + e] * batch.dB(p, i, e);
                }
            double comp = ga.dot(gb) * dt;
            for (int j = 0; j < M; ++j) {
                a.sigma(t, ya, static_cast<std::size_t>(j), sa);
                b.sigma(t, yb, static_cast<std::size_t>(j), sb);
                const double dn = batch.compensated(p, i, j);
                da += sa * dn;
                db += sb * dn;
                comp += batch.marks().weights[static_cast<std::size_t>(j)] * sa.dot(sb) * dt;
            }
            r += ya.dot(db) + da.dot(yb) + comp;
            cross += da.dot(db) - comp;
            ya += da;
            yb += db;
        }
        lhs[static_cast<std::size_t>(p)] = ya.dot(yb);
        rhs[static_cast<std::size_t>(p)] = r;
        diff[static_cast<std::size_t>(p)] = cross;
    }
    IbpReport rep;
    rep.lhs = mean_and_se(lhs).value;
    rep.rhs = mean_and_se(rhs).value;
    const Estimate e = mean_and_se(diff);
    rep.difference = e.value;
    rep.se = e.se;
    return rep;
}

struct MomentEntry {
    std::string name;
    double value = 0.0;
    bool skipped = false;   ///< jump entries when there are no marks
    bool warning = false;   ///< finite but above the threshold
};

/// Sample estimates of the quadratic-moment integrands whose finiteness the
/// optimality conditions assume. Multipliers are (pbar, q, beta, k) at each
/// step; entries above `threshold` (or non-finite) are flagged.
inline std::vector<MomentEntry> moment_diagnostics(const ProblemSpec& spec, const Trajectory& tr,
                                                   const AdjointTrajectory& adj, const Linearization& lin,
                                                   const ControlProcess& u, double threshold = 1e12) {
    const int P = tr.paths(), N = tr.steps();
    const Layout& lay = tr.layout;
    const double dt = tr.dt;
    const bool jumps = lay.marks > 0;
    const std::vector<std::string> names = {"p_ggT_p", "p_sigsigT_p", "k_zzT_k", "k_rrT_k", "x_qqT_x",
                                            "x_betabetaT_x", "y_HzHzT_y", "y_HrHrT_y", "Hv_sq"};
    std::vector<double> acc(names.size(), 0.0);
    Point pt(lay);
    LocalCoefficients lc;
    Multipliers mu;
    Vec pairing, grad;
    // Row-major flattened (r x c) block as a matrix.
    auto rows = [](const Vec& flat, Eigen::Index r, Eigen::Index c) -> Mat { return Eigen::Map<const Mat>(flat.data(), c, r).transpose(); };
    for (int p = 0; p < P; ++p) {
        std::vector<double> path(names.size(), 0.0);
        for (int i = 0; i < N; ++i) {
            tr.fill_point(p, i, u, pt);
            adj.fill_multipliers(p, i, mu);
            lc.evaluate(spec, pt, true, false);
            lin.gradient(p, i, mu, pairing, grad);
            const Vec x = tr.x(p, i), y = tr.y(p, i), z = tr.z(p, i);
            path[0] += (rows(lc.g, lay.n, lay.d).transpose() * mu.p).squaredNorm();
            path[2] += (rows(z, lay.m, lay.d).transpose() * mu.k).squaredNorm();
            path[4] += (rows(mu.q, lay.n, lay.d).transpose() * x).squaredNorm();
            path[6] += (rows(Vec(grad.segment(lay.z_off, lay.m * lay.d)), lay.m, lay.d).transpose() * y).squaredNorm();
            path[8] += grad.segment(lay.v_off, lay.k).squaredNorm();
            for (int j = 0; j < lay.marks; ++j) {
                const double w = spec.marks.weights[static_cast<std::size_t>(j)];
                path[1] += w * std::pow(mu.p.dot(lc.sigma[static_cast<std::size_t>(j)]), 2);
                path[3] += w * std::pow(mu.k.dot(tr.r(p, i, j)), 2);
                path[5] += w * std::pow(x.dot(mu.beta_j(j)), 2);
                path[7] += w * std::pow(y.dot(grad.segment(lay.r_block(static_cast<std::size_t>(j)), lay.m)), 2);
            }
        }
        for (std::size_t e = 0; e < names.size(); ++e) acc[e] += path[e] * dt;
    }
    std::vector<MomentEntry> out;
    for (std::size_t e = 0; e < names.size(); ++e) {
        MomentEntry m;
        m.name = names[e];
        m.skipped = !jumps && (e == 1 || e == 3 || e == 5 || e == 7);
        m.value = acc[e] / P;
        m.warning = !m.skipped && (!std::isfinite(m.value) || std::abs(m.value) > threshold);
        out.push_back(m);
    }
    return out;
}

} // namespace fbsde
