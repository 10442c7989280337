#pragma once

#include "fbsde/adjoint.hpp"
#include "fbsde/condexp.hpp"
#include "fbsde/maxprinciple.hpp"
#include "fbsde/state_solver.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fbsde {

enum class StepRule { fixed, halving };
enum class Termination { converged, max_iters, diverged };

inline const char* to_string(Termination t) {
    switch (t) {
    case Termination::converged: return "converged";
    case Termination::max_iters: return "max_iters";
    case Termination::diverged: return "diverged";
    }
    return "unknown";
}

struct OptimizerConfig {
    double gamma = 0.1;
    StepRule rule = StepRule::fixed;
    int max_iterations = 200;
    double tolerance = 1e-4;
    PicardConfig picard;
    int candidates_per_axis = 11;
    int convexity_samples = 200;
    int max_condition_bins = 16;
    /// Report costs from estimate_cost_cv instead of estimate_cost.
    bool control_variate = true;
};

struct IterationRecord {
    double J = 0.0;
    double se = 0.0;
    double residual = 0.0;      ///< projected-gradient mapping norm
    double stationarity = 0.0;  ///< max_i RMS |E[grad_v H | eps]|
    double gamma = 0.0;
    bool accepted = true;
};

/// Everything known about one control: state, cost, adjoint, conditional
/// gradient.
struct Evaluation {
    Trajectory tr;
    CostEstimate cost;
    Linearization lin;
    AdjointTrajectory adj;
    StationarityReport stat;
};

inline Evaluation evaluate_control(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                   const PicardConfig& cfg, bool control_variate = false) {
    Evaluation ev;
    ev.tr = solve_fbsde(spec, batch, u, cfg);
    ev.cost = control_variate ? estimate_cost_cv(spec, batch, u, ev.tr, cfg.workers)
                              : estimate_cost(spec, batch, u, ev.tr, cfg.workers);
    ev.lin = Linearization(spec, ev.tr, u, cfg.workers);
    ev.adj = solve_adjoint(spec, batch, u, ev.tr, ev.lin, cfg);
    ev.stat = stationarity_residual(control_gradient(ev.lin, ev.adj, cfg.workers), u.filtration, ev.tr,
                                    DriverHistory(batch), cfg.regression.ridge, cfg.workers);
    return ev;
}

/// max_i RMS_p |(u - Proj(u - gamma G)) / gamma|; equals the stationarity
/// norm wherever the projection is inactive.
inline double mapping_norm(const ControlProcess& u, const std::vector<Mat>& G, const ControlSet& set, double gamma) {
    double worst = 0.0;
    for (int i = 0; i < u.N; ++i) {
        double acc = 0.0;
        for (int p = 0; p < u.P; ++p) {
            const Vec cur = u.vec(p, i);
            const Vec moved = project_control(cur - gamma * G[static_cast<std::size_t>(i)].row(p).transpose(), set);
            acc += ((cur - moved) / gamma).squaredNorm();
        }
        worst = std::max(worst, std::sqrt(acc / u.P));
    }
    return worst;
}

/// u_next = Proj_U(u - gamma G). Under a delayed filtration the unprojected
/// update is refitted onto the lagged regressor and stored as coefficients,
/// so every value is a function of the allowed information.
inline ControlProcess projected_update(const ControlProcess& u, const std::vector<Mat>& G, double gamma,
                                       const ControlSet& set, const Trajectory& tr, const DriverHistory& hist,
                                       double ridge = 1e-8) {
    ControlProcess next = u;
    next.feedback.clear();
    next.snapshot.clear();
    const bool delayed = u.filtration.kind == FiltrationKind::delayed;
    if (delayed) {
        next.feedback.resize(static_cast<std::size_t>(u.N));
        next.snapshot.resize(static_cast<std::size_t>(u.N));
    }
    for (int i = 0; i < u.N; ++i) {
        Mat target(u.P, u.k);
        for (int p = 0; p < u.P; ++p)
            target.row(p) = u.vec(p, i).transpose() - gamma * G[static_cast<std::size_t>(i)].row(p);
        if (delayed) {
            const Mat reg = state_regressors(tr, hist, information_step(u.filtration, i, tr.dt));
            Projection proj = project_onto(reg, target, u.filtration.degree, ridge);
            target = proj.fitted;
            next.feedback[static_cast<std::size_t>(i)] = std::move(proj.fit);
            next.snapshot[static_cast<std::size_t>(i)] = reg;
        }
        for (int p = 0; p < u.P; ++p) next.set(p, i, project_control(target.row(p).transpose(), set));
    }
    return next;
}

/// Re-derives every value of a delayed-filtration control from its stored
/// coefficients and regressor snapshot; trivial-filtration controls must be
/// path-constant.
inline bool check_measurability(const ControlProcess& u, const ControlSet& set) {
    switch (u.filtration.kind) {
    case FiltrationKind::trivial: return u.path_constant();
    case FiltrationKind::full: return true;
    case FiltrationKind::delayed: break;
    }
    if (u.feedback.size() != static_cast<std::size_t>(u.N)) return u.path_constant();
    for (int i = 0; i < u.N; ++i) {
        const Mat& reg = u.snapshot[static_cast<std::size_t>(i)];
        const MonomialBasis basis(static_cast<int>(reg.cols()), u.filtration.degree);
        const Mat values = basis.design(reg) * u.feedback[static_cast<std::size_t>(i)].coef;
        for (int p = 0; p < u.P; ++p)
            if (project_control(values.row(p).transpose(), set) != u.vec(p, i)) return false;
    }
    return true;
}

struct StepResult {
    ControlProcess next;
    IterationRecord record;
};

/// One projected conditional-gradient step from u.
inline StepResult step(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                       const OptimizerConfig& cfg) {
    const Evaluation ev = evaluate_control(spec, batch, u, cfg.picard, cfg.control_variate);
    StepResult out;
    out.next = projected_update(u, ev.stat.G, cfg.gamma, spec.control_set, ev.tr, DriverHistory(batch),
                                cfg.picard.regression.ridge);
    out.record = {ev.cost.value, ev.cost.se, mapping_norm(u, ev.stat.G, spec.control_set, cfg.gamma), ev.stat.norm,
                  cfg.gamma, true};
    return out;
}

struct SufficiencyReport {
    ConvexityReport hamiltonian, phi, h;
    MaxConditionReport max_condition;
};

/// Box over the stacked argument covering the solved trajectory (widened by
/// 10%) with the v-block spanning U.
inline void trajectory_box(const ProblemSpec& spec, const Trajectory& tr, const ControlProcess& u, Vec& lo, Vec& hi) {
    const Layout& lay = tr.layout;
    lo = Vec::Constant(lay.size, std::numeric_limits<double>::infinity());
    hi = -lo;
    Point pt(lay);
    for (int p = 0; p < tr.paths(); ++p)
        for (int i = 0; i < tr.steps(); ++i) {
            tr.fill_point(p, i, u, pt);
            lo = lo.cwiseMin(pt.w);
            hi = hi.cwiseMax(pt.w);
        }
    const Vec pad = 0.1 * (hi - lo) + Vec::Constant(lay.size, 1e-3);
    lo -= pad;
    hi += pad;
    const auto& cs = spec.control_set;
    if (cs.kind == ControlSetKind::box) {
        lo.segment(lay.v_off, lay.k) = cs.lower.cwiseMax(Vec::Constant(lay.k, -1e6));
        hi.segment(lay.v_off, lay.k) = cs.upper.cwiseMin(Vec::Constant(lay.k, 1e6));
    } else if (cs.kind == ControlSetKind::ball) {
        lo.segment(lay.v_off, lay.k) = cs.center.array() - cs.radius;
        hi.segment(lay.v_off, lay.k) = cs.center.array() + cs.radius;
    } else {
        lo.segment(lay.v_off, lay.k).setZero();
        hi.segment(lay.v_off, lay.k).setConstant(cs.total);
    }
}

/// Convexity of H (at the multipliers of a few sampled (path, step) pairs and
/// their path average), of phi and h, plus the maximum condition.
inline SufficiencyReport sufficiency(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                     const Evaluation& ev, const OptimizerConfig& cfg) {
    SufficiencyReport rep;
    Vec lo, hi;
    trajectory_box(spec, ev.tr, u, lo, hi);
    const int N = ev.tr.steps(), P = ev.tr.paths();
    std::vector<Multipliers> probes;
    for (int i : {0, N / 2, N - 1}) {
        probes.push_back(ev.adj.multipliers(0, i));
        probes.push_back(ev.adj.multipliers(P - 1, i));
        Multipliers avg = Multipliers::zero(ev.tr.layout);
        for (int p = 0; p < P; ++p) avg = avg + ev.adj.multipliers(p, i);
        avg.p /= P;
        avg.q /= P;
        avg.beta /= P;
        avg.k /= P;
        probes.push_back(avg);
    }
    rep.hamiltonian.worst = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < probes.size(); ++s) {
        const ConvexityReport r = convexity_probe(spec, probes[s], cfg.convexity_samples, lo, hi, 0.0, 1e-8, 11 + s);
        rep.hamiltonian.samples += r.samples;
        rep.hamiltonian.worst = std::min(rep.hamiltonian.worst, r.worst);
        rep.hamiltonian.pass = rep.hamiltonian.pass && r.pass;
    }
    const Layout& lay = ev.tr.layout;
    rep.phi = convexity_probe_terminal(spec.coeffs.phi, spec.coeffs.phi_grad, lo.segment(lay.x_off, lay.n),
                                       hi.segment(lay.x_off, lay.n), cfg.convexity_samples);
    rep.h = convexity_probe_terminal(spec.coeffs.h, spec.coeffs.h_grad, lo.segment(lay.y_off, lay.m),
                                     hi.segment(lay.y_off, lay.m), cfg.convexity_samples);
    rep.max_condition = max_condition_check(spec, batch, ev.tr, ev.adj, u,
                                            candidate_grid(spec.control_set, cfg.candidates_per_axis), u.filtration,
                                            cfg.max_condition_bins, cfg.picard.workers);
    return rep;
}

/// A control as feedback of the allowed information: per step a fit over the
/// state regressors at the information step, projected onto U.
struct FeedbackPolicy {
    FiltrationSpec filtration;
    std::vector<RegressionFit> fits;
    ControlSet set;
    int k = 1;

    /// Fits each step of u onto the information of the trajectory it was
    /// evaluated on.
    static FeedbackPolicy fit(const ControlProcess& u, const Trajectory& tr, const DriverHistory& hist,
                              const ControlSet& set, double ridge = 1e-8) {
        FeedbackPolicy pol;
        pol.filtration = u.filtration;
        pol.set = set;
        pol.k = u.k;
        for (int i = 0; i < u.N; ++i) {
            Mat target(u.P, u.k);
            for (int p = 0; p < u.P; ++p) target.row(p) = u.vec(p, i).transpose();
            Mat reg = pol.filtration.kind == FiltrationKind::trivial
                          ? Mat(u.P, 0)
                          : state_regressors(tr, hist, information_step(pol.filtration, i, tr.dt));
            pol.fits.push_back(project_onto(reg, target, pol.filtration.degree, ridge).fit);
        }
        return pol;
    }

    /// Control table on a trajectory of another batch.
    ControlProcess apply(const Trajectory& tr, const DriverHistory& hist) const {
        ControlProcess u(tr.paths(), tr.steps(), k, filtration);
        for (int i = 0; i < tr.steps(); ++i) {
            Mat reg = filtration.kind == FiltrationKind::trivial
                          ? Mat(tr.paths(), 0)
                          : state_regressors(tr, hist, information_step(filtration, i, tr.dt));
            const MonomialBasis basis(static_cast<int>(reg.cols()), filtration.degree);
            const Mat values = basis.design(reg) * fits[static_cast<std::size_t>(i)].coef;
            for (int p = 0; p < tr.paths(); ++p) u.set(p, i, project_control(values.row(p).transpose(), set));
        }
        return u;
    }
};

/// Closed-loop evaluation of a feedback policy on a batch. A forward sweep
/// reads each control from the states already simulated on its path; for
/// coupled systems the sweep uses the backward surrogates of the previous
/// solve and is repeated until the control table stops changing.
inline Evaluation evaluate_policy(const ProblemSpec& spec, const ScenarioBatch& batch, const FeedbackPolicy& pol,
                                  const PicardConfig& cfg, ControlProcess* applied = nullptr, int max_rounds = 50,
                                  bool control_variate = false) {
    const DriverHistory hist(batch);
    const int P = batch.paths(), N = batch.steps(), n = spec.dims.n;
    ControlProcess u(P, N, pol.k, pol.filtration);
    const detail::StateSystem sys(spec, batch, u, hist);
    const RegressorChoice choice = RegressorChoice::for_spec(spec);
    const Layout lay = spec.layout();
    const int packed = lay.v_off - lay.y_off;
    std::vector<RegressionFit> surrogates;
    Evaluation ev;
    for (int round = 0; round < max_rounds; ++round) {
        const std::vector<double> previous = u.values;
        const MonomialBasis state_basis(sys.regressor_dim(), cfg.regression.degree);
        for_each_chunk(static_cast<std::size_t>(P), cfg.workers, [&](std::size_t, std::size_t b, std::size_t e) {
            auto s = sys.make_scratch();
            std::vector<double> x(static_cast<std::size_t>(N + 1) * n), row(static_cast<std::size_t>(sys.regressor_dim() + 1)),
                feat(static_cast<std::size_t>(state_basis.size())), vals(static_cast<std::size_t>(packed), 0.0);
            Mat reg(1, n + choice.extra(hist.d, hist.M));
            for (std::size_t pp = b; pp < e; ++pp) {
                const int p = static_cast<int>(pp);
                sys.init(p, x.data(), s);
                for (int i = 0; i < N; ++i) {
                    Mat info(1, 0);
                    if (pol.filtration.kind != FiltrationKind::trivial) {
                        const int src = information_step(pol.filtration, i, batch.grid().dt());
                        for (int a = 0; a < n; ++a) reg(0, a) = x[static_cast<std::size_t>(src) * n + a];
                        choice.fill(hist, p, src, row.data());
                        for (int a = 0; a < choice.extra(hist.d, hist.M); ++a) reg(0, n + a) = row[static_cast<std::size_t>(a)];
                        info = reg;
                    }
                    const MonomialBasis basis(static_cast<int>(info.cols()), pol.filtration.degree);
                    const Vec v = (basis.design(info) * pol.fits[static_cast<std::size_t>(i)].coef).row(0).transpose();
                    u.set(p, i, project_control(v, pol.set));
                    if (!surrogates.empty() && sys.coupled()) {
                        sys.regressor(p, i, x.data() + static_cast<std::size_t>(i) * n, row.data(), s);
                        state_basis.evaluate(row.data(), feat.data());
                        surrogates[static_cast<std::size_t>(i)].predict(Eigen::Map<const Vec>(feat.data(), state_basis.size()), vals.data());
                    }
                    sys.step(p, i, x.data() + static_cast<std::size_t>(i) * n, vals.data(),
                             x.data() + static_cast<std::size_t>(i + 1) * n, s);
                }
            }
        });
        ev.tr = solve_fbsde(spec, batch, u, cfg);
        surrogates = ev.tr.store.fits;
        if (!sys.coupled() || u.values == previous) break;
    }
    ev.cost = control_variate ? estimate_cost_cv(spec, batch, u, ev.tr, cfg.workers)
                              : estimate_cost(spec, batch, u, ev.tr, cfg.workers);
    if (applied) *applied = u;
    return ev;
}

struct OptimizerReport {
    std::vector<IterationRecord> iterations;
    ControlProcess control;
    double final_J = 0.0, final_se = 0.0, final_residual = 0.0, final_stationarity = 0.0;
    std::optional<CostEstimate> fresh;   ///< final control re-evaluated on a fresh batch
    std::optional<SufficiencyReport> sufficiency;
    Termination termination = Termination::max_iters;
    std::string message;
};

/// Iterates state solve, adjoint solve, conditional gradient and projected
/// update until the mapping norm drops below the tolerance. Under the halving
/// rule a step that raises J is retried from the same control with half the
/// step size. With a fresh batch the final control, fitted as a feedback
/// policy, is also evaluated out of sample.
inline OptimizerReport optimize(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u_init,
                                const OptimizerConfig& cfg, bool with_sufficiency = true,
                                const ScenarioBatch* fresh_batch = nullptr) {
    if (!(cfg.gamma > 0.0) || !(cfg.tolerance > 0.0)) throw InvalidSpec("optimizer needs gamma > 0 and tolerance > 0");
    if (!u_init.admissible(spec.control_set, 1e-12)) throw InvalidSpec("initial control is not admissible");
    OptimizerReport rep;
    ControlProcess u = u_init;
    double gamma = cfg.gamma;
    const DriverHistory hist(batch);
    try {
        Evaluation ev = evaluate_control(spec, batch, u, cfg.picard, cfg.control_variate);
        for (int it = 0; it < cfg.max_iterations; ++it) {
            const double residual = mapping_norm(u, ev.stat.G, spec.control_set, gamma);
            rep.iterations.push_back({ev.cost.value, ev.cost.se, residual, ev.stat.norm, gamma, true});
            if (residual <= cfg.tolerance) {
                rep.termination = Termination::converged;
                break;
            }
            ControlProcess next = projected_update(u, ev.stat.G, gamma, spec.control_set, ev.tr, hist,
                                                   cfg.picard.regression.ridge);
            Evaluation ev_next = evaluate_control(spec, batch, next, cfg.picard, cfg.control_variate);
            if (cfg.rule == StepRule::halving && ev_next.cost.value > ev.cost.value) {
                rep.iterations.back().accepted = false;
                gamma *= 0.5;
                continue;
            }
            u = std::move(next);
            ev = std::move(ev_next);
        }
        if (rep.termination != Termination::converged) {
            const double residual = mapping_norm(u, ev.stat.G, spec.control_set, gamma);
            if (residual <= cfg.tolerance) rep.termination = Termination::converged;
        }
        rep.final_J = ev.cost.value;
        rep.final_se = ev.cost.se;
        rep.final_residual = mapping_norm(u, ev.stat.G, spec.control_set, gamma);
        rep.final_stationarity = ev.stat.norm;
        if (with_sufficiency) rep.sufficiency = sufficiency(spec, batch, u, ev, cfg);
        if (fresh_batch) {
            const FeedbackPolicy pol = FeedbackPolicy::fit(u, ev.tr, hist, spec.control_set, cfg.picard.regression.ridge);
            rep.fresh = evaluate_policy(spec, *fresh_batch, pol, cfg.picard, nullptr, 50, cfg.control_variate).cost;
        }
    } catch (const PicardDiverged& e) {
        rep.termination = Termination::diverged;
        rep.message = e.what();
    }
    rep.control = std::move(u);
    return rep;
}

} // namespace fbsde
