#pragma once

#include "fbsde/model.hpp"

#include <string>

namespace fbsde {

/// Bounded smooth squashing s(w) = w / (1 + w^2).
inline double squash(double w) { return w / (1.0 + w * w); }
inline double squash_prime(double w) {
    const double q = 1.0 + w * w;
    return (1.0 - w * w) / (q * q);
}

/// out = a + scale * s(a) componentwise, with a = offset + linear * w.
/// `linear` holds plain partial derivatives over the stacked argument; the
/// r-block is converted to kernels when the Jacobian is reported.
struct AffineMap {
    Vec offset;
    Mat linear;
    double scale = 0.0;

    static AffineMap zero(int rows, int cols) { return {Vec::Zero(rows), Mat::Zero(rows, cols), 0.0}; }

    void value(const Vec& w, Vec& out, double mark = 1.0) const {
        out.noalias() = linear * w;
        out = mark * (out + offset);
        if (scale != 0.0)
            for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += scale * squash(out[i]);
    }

    void jacobian(const Vec& w, const Layout& layout, const MarkSpace& marks, Mat& out, double mark = 1.0) const {
        out = mark * linear;
        if (scale != 0.0) {
            Vec pre = linear * w;
            pre = mark * (pre + offset);
            for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) *= 1.0 + scale * squash_prime(pre[i]);
        }
        for (std::size_t j = 0; j < marks.size(); ++j)
            out.middleCols(layout.r_block(j), layout.m) /= marks.weights[j];
    }

    /// True when any coefficient couples the output to (y, z, r).
    bool touches_backward(const Layout& layout) const {
        return linear.middleCols(layout.y_off, layout.v_off - layout.y_off).cwiseAbs().maxCoeff() > 0.0;
    }
};

/// 0.5 w'Qw + q'w + c over a vector argument.
struct QuadraticForm {
    Mat quad;
    Vec lin;
    double constant = 0.0;

    static QuadraticForm zero(int dim) { return {Mat::Zero(dim, dim), Vec::Zero(dim), 0.0}; }

    double value(const Vec& w) const { return 0.5 * w.dot(quad * w) + lin.dot(w) + constant; }
    void gradient(const Vec& w, Vec& out) const {
        out.noalias() = 0.5 * (quad + quad.transpose()) * w;
        out += lin;
    }
};

/// Parameters of the builtin family. Every coefficient is affine in the
/// stacked argument w = (x, y, z, r, v), optionally passed through the bounded
/// nonlinearity; costs are quadratic; the terminal value is affine in
/// (B_T, jump totals) or, experimentally, in x_T.
struct AffineModelParams {
    std::string name = "affine";
    Dimensions dims;
    MarkSpace marks;
    double T = 1.0;
    Vec a;
    AffineMap b, g, sigma, f;
    QuadraticForm l, phi, h;
    TerminalKind terminal_kind = TerminalKind::driver;
    Vec xi_offset;
    Mat xi_brownian;  ///< m x d
    Mat xi_counts;    ///< m x M
    Mat xi_state;     ///< m x n, state kind only
    ControlSet control_set;
    FiltrationSpec filtration;

    /// All-zero model of the given shape.
    static AffineModelParams zeros(Dimensions dims, MarkSpace marks) {
        AffineModelParams p;
        p.dims = dims;
        p.marks = std::move(marks);
        const Layout lay(dims, p.marks.size());
        p.a = Vec::Zero(dims.n);
        p.b = AffineMap::zero(dims.n, lay.size);
        p.g = AffineMap::zero(dims.n * dims.d, lay.size);
        p.sigma = AffineMap::zero(dims.n, lay.size);
        p.f = AffineMap::zero(dims.m, lay.size);
        p.l = QuadraticForm::zero(lay.size);
        p.phi = QuadraticForm::zero(dims.n);
        p.h = QuadraticForm::zero(dims.m);
        p.xi_offset = Vec::Zero(dims.m);
        p.xi_brownian = Mat::Zero(dims.m, dims.d);
        p.xi_counts = Mat::Zero(dims.m, static_cast<Eigen::Index>(p.marks.size()));
        p.xi_state = Mat::Zero(dims.m, dims.n);
        p.control_set = ControlSet::box(Vec::Constant(dims.k, -1.0), Vec::Constant(dims.k, 1.0));
        return p;
    }
};

/// Shape check of the parameter arrays. Must pass before the maps are
/// evaluated, since mismatched products are not caught at run time.
inline ValidationReport check_shapes(const AffineModelParams& p) {
    ValidationReport rep;
    const auto& dm = p.dims;
    if (dm.n < 1 || dm.m < 1 || dm.d < 1 || dm.k < 1) {
        rep.violations.push_back({"dims", "dimensions must be at least 1"});
        return rep;
    }
    if (p.marks.atoms.size() != p.marks.weights.size()) {
        rep.violations.push_back({"marks", "atoms and weights must have the same length"});
        return rep;
    }
    const Layout lay(dm, p.marks.size());
    const auto M = static_cast<Eigen::Index>(p.marks.size());
    auto vec = [&](const std::string& name, const Vec& v, Eigen::Index len) {
        if (v.size() != len)
            rep.violations.push_back({name, "shape violation: got length " + std::to_string(v.size()) + ", expected " +
                                                std::to_string(len)});
    };
    auto mat = [&](const std::string& name, const Mat& m, Eigen::Index rows, Eigen::Index cols) {
        if (m.rows() != rows || m.cols() != cols)
            rep.violations.push_back({name, "shape violation: got " + detail::shape_str(m.rows(), m.cols()) +
                                                ", expected " + detail::shape_str(rows, cols)});
    };
    auto map = [&](const std::string& name, const AffineMap& m, Eigen::Index rows) {
        vec(name + ".offset", m.offset, rows);
        mat(name + ".linear", m.linear, rows, lay.size);
    };
    auto form = [&](const std::string& name, const QuadraticForm& q, Eigen::Index dim) {
        mat(name + ".quad", q.quad, dim, dim);
        vec(name + ".lin", q.lin, dim);
    };
    vec("a", p.a, dm.n);
    map("b", p.b, dm.n);
    map("g", p.g, static_cast<Eigen::Index>(dm.n) * dm.d);
    map("sigma", p.sigma, dm.n);
    map("f", p.f, dm.m);
    form("l", p.l, lay.size);
    form("phi", p.phi, dm.n);
    form("h", p.h, dm.m);
    vec("terminal.offset", p.xi_offset, dm.m);
    if (p.terminal_kind == TerminalKind::driver) {
        mat("terminal.brownian", p.xi_brownian, dm.m, dm.d);
        if (p.xi_counts.size() > 0 || M > 0) mat("terminal.counts", p.xi_counts, dm.m, M);
    } else {
        mat("terminal.state", p.xi_state, dm.m, dm.n);
    }
    return rep;
}

/// Builds a ProblemSpec from the builtin family. Shape errors in the
/// parameters surface through validate(), not here.
inline ProblemSpec make_affine_problem(const AffineModelParams& p) {
    ProblemSpec spec;
    spec.name = p.name;
    spec.dims = p.dims;
    spec.marks = p.marks;
    spec.a = p.a;
    spec.T = p.T;
    spec.control_set = p.control_set;
    spec.filtration = p.filtration;
    const Layout lay(p.dims, p.marks.size());
    const MarkSpace marks = p.marks;

    auto& c = spec.coeffs;
    c.b = [m = p.b](const Point& pt, Vec& out) { m.value(pt.w, out); };
    c.g = [m = p.g](const Point& pt, Vec& out) { m.value(pt.w, out); };
    c.f = [m = p.f](const Point& pt, Vec& out) { m.value(pt.w, out); };
    c.b_jac = [m = p.b, marks](const Point& pt, Mat& out) { m.jacobian(pt.w, pt.layout, marks, out); };
    c.g_jac = [m = p.g, marks](const Point& pt, Mat& out) { m.jacobian(pt.w, pt.layout, marks, out); };
    c.f_jac = [m = p.f, marks](const Point& pt, Mat& out) { m.jacobian(pt.w, pt.layout, marks, out); };
    c.sigma = [m = p.sigma, marks](const Point& pt, std::size_t j, Vec& out) { m.value(pt.w, out, marks.atoms[j]); };
    c.sigma_jac = [m = p.sigma, marks](const Point& pt, std::size_t j, Mat& out) {
        m.jacobian(pt.w, pt.layout, marks, out, marks.atoms[j]);
    };
    c.l = [q = p.l](const Point& pt) { return q.value(pt.w); };
    c.l_grad = [q = p.l, marks, lay](const Point& pt, Vec& out) {
        q.gradient(pt.w, out);
        for (std::size_t j = 0; j < marks.size(); ++j) out.segment(lay.r_block(j), lay.m) /= marks.weights[j];
    };
    c.phi = [q = p.phi](const Vec& x) { return q.value(x); };
    c.phi_grad = [q = p.phi](const Vec& x, Vec& out) { q.gradient(x, out); };
    c.h = [q = p.h](const Vec& y) { return q.value(y); };
    c.h_grad = [q = p.h](const Vec& y, Vec& out) { q.gradient(y, out); };

    const bool shapes_ok = p.b.linear.cols() == lay.size && p.g.linear.cols() == lay.size &&
                           p.sigma.linear.cols() == lay.size && p.f.linear.cols() == lay.size;
    c.forward_coupled = !shapes_ok || p.b.touches_backward(lay) || p.g.touches_backward(lay) ||
                        (marks.size() > 0 && p.sigma.touches_backward(lay));

    auto& term = spec.terminal;
    term.kind = p.terminal_kind;
    if (p.terminal_kind == TerminalKind::driver) {
        term.driver = [c0 = p.xi_offset, lb = p.xi_brownian, ln = p.xi_counts](const Vec& bt, const Vec& nt, Vec& out) {
            out = c0;
            if (lb.size() > 0) out.noalias() += lb * bt;
            if (ln.size() > 0) out.noalias() += ln * nt;
        };
        term.uses_brownian = p.xi_brownian.size() > 0 && p.xi_brownian.cwiseAbs().maxCoeff() > 0.0;
        term.uses_counts = p.xi_counts.size() > 0 && p.xi_counts.cwiseAbs().maxCoeff() > 0.0;
    } else {
        term.state = [c0 = p.xi_offset, ls = p.xi_state](const Vec& x, Vec& out) { out = c0 + ls * x; };
        term.state_jac = [ls = p.xi_state](const Vec&, Mat& out) { out = ls; };
        term.experimental = true;
    }
    return spec;
}

} // namespace fbsde
