#pragma once

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace fbsde {

/// Adjoint multipliers paired with the coefficients: p in R^n, q in R^{n x d}
/// (row-major), beta_j in R^n stacked over marks, k in R^m.
struct Multipliers {
    Vec p, q, beta, k;

    static Multipliers zero(const Layout& lay) {
        return {Vec::Zero(lay.n), Vec::Zero(lay.n * lay.d), Vec::Zero(lay.n * lay.marks), Vec::Zero(lay.m)};
    }
    auto beta_j(int j) const { return beta.segment(j * p.size(), p.size()); }
    auto beta_j(int j) { return beta.segment(j * p.size(), p.size()); }

    Multipliers operator+(const Multipliers& o) const { return {p + o.p, q + o.q, beta + o.beta, k + o.k}; }
};

/// Partial gradients of H. The r-block holds per-mark kernels: the
/// directional derivative along dr is sum_j pi_j <r_j, dr_j>.
struct HamiltonianGradient {
    Vec stacked;  ///< over w = (x, y, z, r, v), kernel convention on r
    Layout layout;

    auto x() const { return stacked.segment(layout.x_off, layout.n); }
    auto y() const { return stacked.segment(layout.y_off, layout.m); }
    auto z() const { return stacked.segment(layout.z_off, layout.m * layout.d); }
    auto r(int j) const { return stacked.segment(layout.r_block(static_cast<std::size_t>(j)), layout.m); }
    auto v() const { return stacked.segment(layout.v_off, layout.k); }
};

/// Coefficient values and Jacobians at one point, the inputs from which H and
/// its gradient are assembled.
struct LocalCoefficients {
    Vec b, g, f;
    std::vector<Vec> sigma;
    double l = 0.0;
    Mat jb, jg, jf;
    std::vector<Mat> jsigma;
    Vec lgrad;

    void evaluate(const ProblemSpec& spec, const Point& pt, bool values = true, bool jacobians = true) {
        const auto& c = spec.coeffs;
        const std::size_t M = spec.marks.size();
        sigma.resize(M);
        jsigma.resize(M);
        if (values) {
            c.b(pt, b);
            c.g(pt, g);
            c.f(pt, f);
            for (std::size_t j = 0; j < M; ++j) c.sigma(pt, j, sigma[j]);
            l = c.l(pt);
        }
        if (jacobians) {
            c.b_jac(pt, jb);
            c.g_jac(pt, jg);
            c.f_jac(pt, jf);
            for (std::size_t j = 0; j < M; ++j) c.sigma_jac(pt, j, jsigma[j]);
            c.l_grad(pt, lgrad);
        }
    }
};

/// H = <k, -f> + <p, b> + <q, g> + l + sum_j pi_j <beta_j, sigma_j>.
inline double hamiltonian_value(const LocalCoefficients& c, const Multipliers& mu, const MarkSpace& marks) {
    double h = -mu.k.dot(c.f) + mu.p.dot(c.b) + mu.q.dot(c.g) + c.l;
    for (std::size_t j = 0; j < marks.size(); ++j)
        h += marks.weights[j] * mu.beta_j(static_cast<int>(j)).dot(c.sigma[j]);
    return h;
}

/// Gradient over the stacked argument by the chain rule through the
/// coefficient Jacobians. Since every Jacobian carries kernels on its r-block,
/// so does the result.
inline void hamiltonian_gradient(const LocalCoefficients& c, const Multipliers& mu, const MarkSpace& marks, Vec& out) {
    out = c.lgrad;
    out.noalias() -= c.jf.transpose() * mu.k;
    out.noalias() += c.jb.transpose() * mu.p;
    out.noalias() += c.jg.transpose() * mu.q;
    for (std::size_t j = 0; j < marks.size(); ++j)
        out.noalias() += marks.weights[j] * (c.jsigma[j].transpose() * mu.beta_j(static_cast<int>(j)));
}

/// Rows of the stacked coefficient Jacobian [b; g; f; sigma_1..sigma_M; l]
/// over w. With the pairing vector c = (p, q, -k, pi_1 beta_1, .., 1) the
/// gradient of H is J' c.
inline int stacked_rows(const Layout& lay) { return lay.n + lay.n * lay.d + lay.m + lay.marks * lay.n + 1; }

template <typename Out>
void stack_jacobians(const LocalCoefficients& c, const Layout& lay, Out&& out) {
    int row = 0;
    out.middleRows(row, lay.n) = c.jb;
    row += lay.n;
    out.middleRows(row, lay.n * lay.d) = c.jg;
    row += lay.n * lay.d;
    out.middleRows(row, lay.m) = c.jf;
    row += lay.m;
    for (int j = 0; j < lay.marks; ++j, row += lay.n) out.middleRows(row, lay.n) = c.jsigma[static_cast<std::size_t>(j)];
    out.row(row) = c.lgrad.transpose();
}

inline void pairing_vector(const Multipliers& mu, const MarkSpace& marks, const Layout& lay, Vec& out) {
    out.resize(stacked_rows(lay));
    int row = 0;
    out.segment(row, lay.n) = mu.p;
    row += lay.n;
    out.segment(row, lay.n * lay.d) = mu.q;
    row += lay.n * lay.d;
    out.segment(row, lay.m) = -mu.k;
    row += lay.m;
    for (int j = 0; j < lay.marks; ++j, row += lay.n)
        out.segment(row, lay.n) = marks.weights[static_cast<std::size_t>(j)] * mu.beta_j(j);
    out[row] = 1.0;
}

namespace detail {

inline void require_finite_value(double v) {
    if (!std::isfinite(v)) throw NonFiniteValue("Hamiltonian evaluated to a non-finite value");
}

} // namespace detail

inline double eval_H(const ProblemSpec& spec, const Point& pt, const Multipliers& mu) {
    LocalCoefficients c;
    c.evaluate(spec, pt, true, false);
    const double h = hamiltonian_value(c, mu, spec.marks);
    detail::require_finite_value(h);
    return h;
}

/// Convenience form taking the blocks separately; r stacks r_1..r_M.
inline double eval_H(const ProblemSpec& spec, double t, const Vec& x, const Vec& y, const Vec& z, const Vec& r,
                     const Vec& v, const Multipliers& mu) {
    Point pt(spec.layout());
    pt.t = t;
    pt.x() = x;
    pt.y() = y;
    pt.z() = z;
    pt.w.segment(pt.layout.r_off, pt.layout.m * pt.layout.marks) = r;
    pt.v() = v;
    return eval_H(spec, pt, mu);
}

inline HamiltonianGradient grad_H(const ProblemSpec& spec, const Point& pt, const Multipliers& mu) {
    LocalCoefficients c;
    c.evaluate(spec, pt, false, true);
    HamiltonianGradient g;
    g.layout = pt.layout;
    hamiltonian_gradient(c, mu, spec.marks, g.stacked);
    if (!g.stacked.allFinite()) throw NonFiniteValue("Hamiltonian gradient is not finite");
    return g;
}

/// Directional derivative of H along dw, with the pi-weighted r pairing.
inline double directional(const HamiltonianGradient& g, const Vec& dw, const MarkSpace& marks) {
    double s = g.stacked.dot(dw);
    const Layout& lay = g.layout;
    for (std::size_t j = 0; j < marks.size(); ++j)
        s += (marks.weights[j] - 1.0) * g.r(static_cast<int>(j)).dot(dw.segment(lay.r_block(j), lay.m));
    return s;
}

struct ConvexityReport {
    bool pass = true;
    double worst = 0.0;   ///< most negative value of H(w2) - H(w1) - <grad H(w1), w2 - w1>
    int samples = 0;
};

/// Samples pairs (w1, w2) uniformly in the box [lower, upper] (over the
/// stacked argument, v projected onto U) and tests the gradient inequality.
inline ConvexityReport convexity_probe(const ProblemSpec& spec, const Multipliers& mu, int samples, const Vec& lower,
                                       const Vec& upper, double t = 0.0, double tol = 1e-8, std::uint64_t seed = 11) {
    const Layout lay = spec.layout();
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&] {
        Point pt(lay);
        pt.t = t;
        for (int c = 0; c < lay.size; ++c) pt.w[c] = lower[c] + unit(gen) * (upper[c] - lower[c]);
        const Vec v = pt.v();
        pt.v() = project_control(v, spec.control_set);
        return pt;
    };
    ConvexityReport rep;
    rep.samples = samples;
    double worst = std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        const Point p1 = draw(), p2 = draw();
        const double gap =
            eval_H(spec, p2, mu) - eval_H(spec, p1, mu) - directional(grad_H(spec, p1, mu), p2.w - p1.w, spec.marks);
        worst = std::min(worst, gap);
    }
    rep.worst = samples > 0 ? worst : 0.0;
    rep.pass = rep.worst >= -tol;
    return rep;
}

/// The same predicate for a terminal function of one vector argument.
inline ConvexityReport convexity_probe_terminal(const TerminalScalar& fn, const TerminalGradient& grad, const Vec& lower,
                                                const Vec& upper, int samples, double tol = 1e-8, std::uint64_t seed = 13) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw = [&] {
        Vec w(lower.size());
        for (Eigen::Index c = 0; c < w.size(); ++c) w[c] = lower[c] + unit(gen) * (upper[c] - lower[c]);
        return w;
    };
    ConvexityReport rep;
    rep.samples = samples;
    double worst = std::numeric_limits<double>::infinity();
    Vec g;
    for (int s = 0; s < samples; ++s) {
        const Vec w1 = draw(), w2 = draw();
        grad(w1, g);
        worst = std::min(worst, fn(w2) - fn(w1) - g.dot(w2 - w1));
    }
    rep.worst = samples > 0 ? worst : 0.0;
    rep.pass = rep.worst >= -tol;
    return rep;
}

} // namespace fbsde
