#pragma once

#include "fbsde/affine_model.hpp"
#include "fbsde/control.hpp"
#include "fbsde/model.hpp"

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace fbsde {

/// Scalar linear-quadratic problem with one jump mark:
///   dx = (A x + B v + b0) dt + (C x + c0) dB + (E x + e0) dN~,
///   cost E[ int (Q x^2 / 2 + R v^2 / 2) dt + G x_T^2 / 2 ] + h(y_0),
/// where dy = -(f1 x + f0) dt + z dB + r dN~, y_T = 0 and h(y) = y, so the
/// backward component adds E int (f1 x + f0) dt to the cost.
struct LqParams {
    double T = 1.0, a = 1.0;
    double A = 0.1, B = 0.5, b0 = 0.2;
    double C = 0.2, c0 = 0.3;
    double E = 0.3, e0 = 0.2, intensity = 2.0;
    double Q = 1.0, R = 1.0, G = 1.0;
    double f1 = 0.5, f0 = 0.1;
    double bound = 20.0;  ///< U = [-bound, bound]
    bool jumps = true;
};

inline AffineModelParams lq_params(const LqParams& q, FiltrationSpec filtration = {}) {
    MarkSpace marks;
    if (q.jumps) marks = {{1.0}, {q.intensity}};
    auto p = AffineModelParams::zeros({1, 1, 1, 1}, marks);
    const Layout lay(p.dims, marks.size());
    p.name = "lq";
    p.T = q.T;
    p.a = Vec::Constant(1, q.a);
    p.b.offset[0] = q.b0;
    p.b.linear(0, lay.x_off) = q.A;
    p.b.linear(0, lay.v_off) = q.B;
    p.g.offset[0] = q.c0;
    p.g.linear(0, lay.x_off) = q.C;
    if (q.jumps) {
        p.sigma.offset[0] = q.e0;
        p.sigma.linear(0, lay.x_off) = q.E;
    }
    p.f.offset[0] = q.f0;
    p.f.linear(0, lay.x_off) = q.f1;
    p.l.quad(lay.x_off, lay.x_off) = q.Q;
    p.l.quad(lay.v_off, lay.v_off) = q.R;
    p.phi.quad(0, 0) = q.G;
    p.h.lin[0] = 1.0;
    p.control_set = ControlSet::box(Vec::Constant(1, -q.bound), Vec::Constant(1, q.bound));
    p.filtration = filtration;
    return p;
}

inline ProblemSpec lq_problem(const LqParams& q = {}, FiltrationSpec filtration = {}) {
    return make_affine_problem(lq_params(q, filtration));
}

/// Recovers LqParams from a model of the scalar LQ shape (n = m = d = k = 1,
/// at most one mark of size 1, no nonlinearity, h(y) = y, y_T = 0, box U).
/// Returns nothing when the model has any other structure.
inline std::optional<LqParams> lq_params_of(const AffineModelParams& p) {
    const auto& dm = p.dims;
    if (dm.n != 1 || dm.m != 1 || dm.d != 1 || dm.k != 1) return std::nullopt;
    if (p.marks.size() > 1 || (p.marks.size() == 1 && p.marks.atoms[0] != 1.0)) return std::nullopt;
    const Layout lay(dm, p.marks.size());
    auto shaped = [&](const AffineMap& m) {
        return m.offset.size() == 1 && m.linear.rows() == 1 && m.linear.cols() == lay.size && m.scale == 0.0;
    };
    if (!shaped(p.b) || !shaped(p.g) || !shaped(p.sigma) || !shaped(p.f)) return std::nullopt;
    auto only = [&](const AffineMap& m, std::initializer_list<int> cols) {
        for (int c = 0; c < lay.size; ++c)
            if (m.linear(0, c) != 0.0 && std::find(cols.begin(), cols.end(), c) == cols.end()) return false;
        return true;
    };
    if (!only(p.b, {lay.x_off, lay.v_off}) || !only(p.g, {lay.x_off}) || !only(p.sigma, {lay.x_off}) ||
        !only(p.f, {lay.x_off}))
        return std::nullopt;
    if (p.l.quad.rows() != lay.size || p.l.lin.size() != lay.size || p.phi.quad.rows() != 1 || p.h.quad.rows() != 1)
        return std::nullopt;
    Mat lq = Mat::Zero(lay.size, lay.size);
    lq(lay.x_off, lay.x_off) = p.l.quad(lay.x_off, lay.x_off);
    lq(lay.v_off, lay.v_off) = p.l.quad(lay.v_off, lay.v_off);
    if (p.l.quad != lq || !p.l.lin.isZero(0.0) || p.l.constant != 0.0) return std::nullopt;
    if (!p.phi.lin.isZero(0.0) || p.phi.constant != 0.0) return std::nullopt;
    if (p.h.quad(0, 0) != 0.0 || p.h.lin[0] != 1.0 || p.h.constant != 0.0) return std::nullopt;
    if (p.terminal_kind != TerminalKind::driver || !p.xi_offset.isZero(0.0) || !p.xi_brownian.isZero(0.0) ||
        (p.xi_counts.size() > 0 && !p.xi_counts.isZero(0.0)))
        return std::nullopt;
    const auto& cs = p.control_set;
    if (cs.kind != ControlSetKind::box || cs.lower.size() != 1 || cs.upper.size() != 1 || cs.lower[0] != -cs.upper[0])
        return std::nullopt;
    LqParams q;
    q.T = p.T;
    q.a = p.a.size() == 1 ? p.a[0] : 0.0;
    q.A = p.b.linear(0, lay.x_off);
    q.B = p.b.linear(0, lay.v_off);
    q.b0 = p.b.offset[0];
    q.C = p.g.linear(0, lay.x_off);
    q.c0 = p.g.offset[0];
    q.jumps = p.marks.size() == 1;
    q.E = q.jumps ? p.sigma.linear(0, lay.x_off) : 0.0;
    q.e0 = q.jumps ? p.sigma.offset[0] : 0.0;
    q.intensity = q.jumps ? p.marks.weights[0] : 0.0;
    q.Q = p.l.quad(lay.x_off, lay.x_off);
    q.R = p.l.quad(lay.v_off, lay.v_off);
    q.G = p.phi.quad(0, 0);
    q.f1 = p.f.linear(0, lay.x_off);
    q.f0 = p.f.offset[0];
    q.bound = cs.upper[0];
    if (!(q.R > 0.0)) return std::nullopt;
    return q;
}

/// Optimal feedback of the Euler-discretized LQ problem on an N-step grid,
/// v_i = alpha_i x + beta_i, from the exact discrete dynamic programme.
struct LqDiscreteSolution {
    std::vector<double> alpha, beta;
    double cost = 0.0;  ///< optimal expected cost from x_0 = a
};

inline LqDiscreteSolution lq_discrete_solution(const LqParams& q, int N) {
    const double dt = q.T / N;
    const double lam = q.jumps ? q.intensity : 0.0;
    const double E = q.jumps ? q.E : 0.0, e0 = q.jumps ? q.e0 : 0.0;
    LqDiscreteSolution sol;
    sol.alpha.assign(static_cast<std::size_t>(N), 0.0);
    sol.beta.assign(static_cast<std::size_t>(N), 0.0);
    double P = q.G, S = 0.0, s = 0.0;
    for (int i = N - 1; i >= 0; --i) {
        const double den = q.R + P * q.B * q.B * dt;
        const double al = -q.B * P * (1.0 + q.A * dt) / den;
        const double be = -q.B * (P * q.b0 * dt + S) / den;
        const double m1 = 1.0 + q.A * dt + q.B * al * dt;
        const double m0 = (q.b0 + q.B * be) * dt;
        const double vx = (q.C * q.C + lam * E * E) * dt, v1 = (q.C * q.c0 + lam * E * e0) * dt,
                     v0 = (q.c0 * q.c0 + lam * e0 * e0) * dt;
        const double Pn = q.Q * dt + q.R * al * al * dt + P * (m1 * m1 + vx);
        const double Sn = (q.f1 + q.R * al * be) * dt + P * (m1 * m0 + v1) + S * m1;
        const double sn = (0.5 * q.R * be * be + q.f0) * dt + 0.5 * P * (m0 * m0 + v0) + S * m0 + s;
        P = Pn;
        S = Sn;
        s = sn;
        sol.alpha[static_cast<std::size_t>(i)] = al;
        sol.beta[static_cast<std::size_t>(i)] = be;
    }
    sol.cost = 0.5 * P * q.a * q.a + S * q.a + s;
    return sol;
}

/// Evaluates the discrete-optimal feedback along a given forward path array
/// x[p][i] (i = 0..N); decoupled LQ dynamics make this a plain forward sweep.
inline ControlProcess lq_feedback_control(const LqParams& q, const LqDiscreteSolution& sol, const ScenarioBatch& batch,
                                          FiltrationSpec filtration = {}) {
    const int P = batch.paths(), N = batch.steps();
    const double dt = batch.grid().dt();
    ControlProcess u(P, N, 1, filtration);
    for (int p = 0; p < P; ++p) {
        double x = q.a;
        for (int i = 0; i < N; ++i) {
            const double v = std::clamp(sol.alpha[static_cast<std::size_t>(i)] * x + sol.beta[static_cast<std::size_t>(i)],
                                        -q.bound, q.bound);
            u.at(p, i)[0] = v;
            double nx = x + (q.A * x + q.B * v + q.b0) * dt + (q.C * x + q.c0) * batch.dB(p, i, 0);
            if (q.jumps) nx += (q.E * x + q.e0) * batch.compensated(p, i, 0);
            x = nx;
        }
    }
    return u;
}

/// Fully coupled scalar model with one mark: every coefficient is affine in
/// (x, y, z, r, v) passed through the bounded nonlinearity with scale 0.5,
/// costs are convex quadratics, and y_T = 0.2 B_T.
inline AffineModelParams nonlinear_coupled_params() {
    auto p = AffineModelParams::zeros({1, 1, 1, 1}, MarkSpace{{1.0}, {1.0}});
    const Layout lay(p.dims, 1);
    p.name = "nonlinear-coupled";
    p.T = 1.0;
    p.a = Vec::Constant(1, 0.5);
    auto row = [&](AffineMap& m, double c, std::initializer_list<double> coefs) {
        m.offset[0] = c;
        int col = 0;
        for (double v : coefs) m.linear(0, col++) = v;
        m.scale = 0.5;
    };
    // columns: x, y, z, r, v
    row(p.b, 0.1, {-0.5, 0.3, 0.1, 0.1, 1.0});
    row(p.g, 0.3, {0.1, 0.1, 0.0, 0.0, 0.2});
    row(p.sigma, 0.2, {0.1, 0.05, 0.0, 0.0, 0.1});
    row(p.f, 0.1, {0.5, -0.3, 0.2, 0.1, 0.3});
    p.l.quad.diagonal() << 1.0, 0.2, 0.1, 0.1, 1.0;
    p.l.lin[lay.v_off] = -0.2;
    p.phi.quad(0, 0) = 1.0;
    p.h.quad(0, 0) = 1.0;
    p.h.lin[0] = 0.5;
    p.xi_brownian(0, 0) = 0.2;
    p.control_set = ControlSet::box(Vec::Constant(1, -2.0), Vec::Constant(1, 2.0));
    return p;
}

inline ProblemSpec nonlinear_coupled_problem() { return make_affine_problem(nonlinear_coupled_params()); }

/// Forward-only reduction: f = 0, y_T = 0, forward coefficients free of
/// (y, z, r); the LQ forward dynamics and running cost are kept.
inline AffineModelParams pure_forward_params() {
    auto p = lq_params(LqParams{});
    p.name = "pure-forward";
    p.f = AffineMap::zero(1, p.f.linear.cols());
    p.h = QuadraticForm::zero(1);
    return p;
}

/// The LQ problem with the mark space removed (M = 0).
inline AffineModelParams no_jump_params() {
    LqParams q;
    q.jumps = false;
    auto p = lq_params(q);
    p.name = "no-jump";
    return p;
}

inline std::vector<std::string> builtin_model_names() {
    return {"lq", "lq-no-jump", "nonlinear-coupled", "pure-forward"};
}

inline AffineModelParams builtin_model(const std::string& name) {
    if (name == "lq") return lq_params(LqParams{});
    if (name == "lq-no-jump") return no_jump_params();
    if (name == "nonlinear-coupled") return nonlinear_coupled_params();
    if (name == "pure-forward") return pure_forward_params();
    throw InvalidSpec("unknown builtin model '" + name + "'");
}

} // namespace fbsde
