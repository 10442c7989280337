#pragma once

#include "fbsde/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fbsde {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Dimensions {
    int n = 1;  ///< forward state
    int m = 1;  ///< backward state
    int d = 1;  ///< Brownian
    int k = 1;  ///< control
};

/// Finite atomic mark space: jumps of size atoms[j] arrive at rate weights[j].
struct MarkSpace {
    std::vector<double> atoms;
    std::vector<double> weights;

    std::size_t size() const noexcept { return atoms.size(); }
    double total_intensity() const {
        return std::accumulate(weights.begin(), weights.end(), 0.0);
    }
};

/// Block offsets inside the stacked argument w = (x, y, z, r_1..r_M, v).
/// z is stored row-major (m x d); each r_j lives in R^m.
struct Layout {
    int n = 0, m = 0, d = 0, k = 0, marks = 0;
    int x_off = 0, y_off = 0, z_off = 0, r_off = 0, v_off = 0, size = 0;

    Layout() = default;
    Layout(const Dimensions& dims, std::size_t mark_count)
        : n(dims.n), m(dims.m), d(dims.d), k(dims.k), marks(static_cast<int>(mark_count)) {
        x_off = 0;
        y_off = n;
        z_off = n + m;
        r_off = z_off + m * d;
        v_off = r_off + marks * m;
        size = v_off + k;
    }

    int r_block(std::size_t j) const { return r_off + static_cast<int>(j) * m; }
};

/// Evaluation point for the coefficient maps.
struct Point {
    double t = 0.0;
    Vec w;
    Layout layout;

    Point() = default;
    explicit Point(const Layout& l) : w(Vec::Zero(l.size)), layout(l) {}

    auto x() { return w.segment(layout.x_off, layout.n); }
    auto y() { return w.segment(layout.y_off, layout.m); }
    auto z() { return w.segment(layout.z_off, layout.m * layout.d); }
    auto r(std::size_t j) { return w.segment(layout.r_block(j), layout.m); }
    auto v() { return w.segment(layout.v_off, layout.k); }
    auto x() const { return w.segment(layout.x_off, layout.n); }
    auto y() const { return w.segment(layout.y_off, layout.m); }
    auto z() const { return w.segment(layout.z_off, layout.m * layout.d); }
    auto r(std::size_t j) const { return w.segment(layout.r_block(j), layout.m); }
    auto v() const { return w.segment(layout.v_off, layout.k); }
};

// Jacobians are (output x layout.size) matrices over the stacked argument.
// Columns of the r_j block hold the Riesz kernel D_j, so the directional
// derivative along dw is J_x dx + J_y dy + J_z dz + sum_j pi_j D_j dr_j + J_v dv.
using VectorField = std::function<void(const Point&, Vec&)>;
using JacobianField = std::function<void(const Point&, Mat&)>;
using MarkVectorField = std::function<void(const Point&, std::size_t, Vec&)>;
using MarkJacobianField = std::function<void(const Point&, std::size_t, Mat&)>;
using ScalarField = std::function<double(const Point&)>;
using GradientField = std::function<void(const Point&, Vec&)>;
using TerminalScalar = std::function<double(const Vec&)>;
using TerminalGradient = std::function<void(const Vec&, Vec&)>;

/// Coefficients of the controlled system and the cost, with first-order
/// derivatives. g is returned flattened row-major (n x d).
struct CoefficientSet {
    VectorField b, g, f;
    JacobianField b_jac, g_jac, f_jac;
    MarkVectorField sigma;
    MarkJacobianField sigma_jac;
    ScalarField l;
    GradientField l_grad;
    TerminalScalar phi, h;
    TerminalGradient phi_grad, h_grad;
    /// False when b, g, sigma ignore (y, z, r); the solvers then skip Picard.
    bool forward_coupled = true;
};

/// Applies a stacked Jacobian to a direction, using the pi-weighted pairing on
/// the r-block.
inline Vec apply_jacobian(const Mat& jac, const Vec& dw, const Layout& layout, const MarkSpace& marks) {
    Vec scaled = dw;
    for (std::size_t j = 0; j < marks.size(); ++j)
        scaled.segment(layout.r_block(j), layout.m) *= marks.weights[j];
    return jac * scaled;
}

enum class ControlSetKind { box, ball, simplex };

struct ControlSet {
    ControlSetKind kind = ControlSetKind::box;
    Vec lower, upper;   // box
    Vec center;         // ball
    double radius = 1.0;
    double total = 1.0; // simplex: v >= 0, sum v = total

    static ControlSet box(Vec lo, Vec hi) {
        ControlSet s;
        s.kind = ControlSetKind::box;
        s.lower = std::move(lo);
        s.upper = std::move(hi);
        return s;
    }
    static ControlSet ball(Vec c, double rho) {
        ControlSet s;
        s.kind = ControlSetKind::ball;
        s.center = std::move(c);
        s.radius = rho;
        return s;
    }
    static ControlSet simplex(int k, double total_mass) {
        ControlSet s;
        s.kind = ControlSetKind::simplex;
        s.lower = Vec::Zero(k);
        s.total = total_mass;
        return s;
    }

    int dim() const {
        switch (kind) {
        case ControlSetKind::box: return static_cast<int>(lower.size());
        case ControlSetKind::ball: return static_cast<int>(center.size());
        case ControlSetKind::simplex: return static_cast<int>(lower.size());
        }
        return 0;
    }
};

/// Euclidean projection onto U. Points already in U are returned unchanged,
/// which makes the map exactly idempotent.
inline Vec project_control(const Vec& u, const ControlSet& set) {
    constexpr double eps = std::numeric_limits<double>::epsilon();
    switch (set.kind) {
    case ControlSetKind::box:
        return u.cwiseMax(set.lower).cwiseMin(set.upper);
    case ControlSetKind::ball: {
        const Vec diff = u - set.center;
        const double norm = diff.norm();
        if (norm <= set.radius * (1.0 + 8.0 * eps)) return u;
        return set.center + diff * (set.radius / norm);
    }
    case ControlSetKind::simplex: {
        const double sum = u.sum();
        const auto k = static_cast<double>(u.size());
        if (u.minCoeff() >= 0.0 && std::abs(sum - set.total) <= 4.0 * k * eps * std::max(1.0, set.total))
            return u;
        std::vector<double> sorted(u.data(), u.data() + u.size());
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        double cumulative = 0.0, tau = 0.0;
        for (std::size_t j = 0; j < sorted.size(); ++j) {
            cumulative += sorted[j];
            const double candidate = (cumulative - set.total) / static_cast<double>(j + 1);
            if (sorted[j] - candidate > 0.0) tau = candidate;
        }
        return (u.array() - tau).cwiseMax(0.0).matrix();
    }
    }
    return u;
}

inline bool in_control_set(const Vec& u, const ControlSet& set, double tol = 1e-12) {
    return (project_control(u, set) - u).norm() <= tol;
}

/// Finite candidate grid spanning U (per-axis points on the bounding box,
/// projected and de-duplicated).
inline std::vector<Vec> candidate_grid(const ControlSet& set, int per_axis = 11) {
    const int k = set.dim();
    Vec lo(k), hi(k);
    switch (set.kind) {
    case ControlSetKind::box: lo = set.lower; hi = set.upper; break;
    case ControlSetKind::ball:
        lo = set.center.array() - set.radius;
        hi = set.center.array() + set.radius;
        break;
    case ControlSetKind::simplex:
        lo = Vec::Zero(k);
        hi = Vec::Constant(k, set.total);
        break;
    }
    std::vector<Vec> out;
    std::vector<int> idx(static_cast<std::size_t>(k), 0);
    const int steps = std::max(per_axis, 1);
    while (true) {
        Vec v(k);
        for (int a = 0; a < k; ++a) {
            const double frac = steps == 1 ? 0.5 : static_cast<double>(idx[a]) / (steps - 1);
            v[a] = lo[a] + frac * (hi[a] - lo[a]);
        }
        v = project_control(v, set);
        const bool dup = std::any_of(out.begin(), out.end(), [&](const Vec& o) { return (o - v).norm() < 1e-12; });
        if (!dup) out.push_back(v);
        int a = 0;
        while (a < k && ++idx[a] == steps) idx[a++] = 0;
        if (a == k) break;
    }
    return out;
}

enum class FiltrationKind { full, delayed, trivial };

/// Information available to the controller: full, delayed by `delay` time
/// units, or none.
struct FiltrationSpec {
    FiltrationKind kind = FiltrationKind::full;
    double delay = 0.0;
    int degree = 2;

    /// Grid lag realizing t -> (t - delay)^+ rounded down to the grid.
    int lag_steps(double dt) const {
        if (kind != FiltrationKind::delayed) return 0;
        return static_cast<int>(std::ceil(delay / dt - 1e-9));
    }
    /// True when the filtration carries no information at step i.
    bool uninformative(int step, double dt) const {
        if (kind == FiltrationKind::trivial) return true;
        if (kind == FiltrationKind::delayed) return step - lag_steps(dt) <= 0 && delay > 0.0;
        return false;
    }
};

enum class TerminalKind { driver, state };

/// Terminal value of the backward component. The driver kind depends only on
/// (B_T, per-mark jump totals) and is therefore identical for every control.
/// The state kind Psi(x_T) is experimental.
struct TerminalSpec {
    TerminalKind kind = TerminalKind::driver;
    std::function<void(const Vec& brownian_T, const Vec& counts_T, Vec& out)> driver;
    std::function<void(const Vec& x_T, Vec& out)> state;
    std::function<void(const Vec& x_T, Mat& jac)> state_jac;
    /// Driver kind: whether the realization depends on (B_T, counts) at all.
    /// When it does, the solvers add the running driver to the regressors.
    bool uses_brownian = false;
    bool uses_counts = false;
    bool experimental = false;

    static TerminalSpec zero(int m) {
        TerminalSpec t;
        t.driver = [m](const Vec&, const Vec&, Vec& out) { out = Vec::Zero(m); };
        return t;
    }
};

struct ProblemSpec {
    std::string name = "custom";
    Dimensions dims;
    MarkSpace marks;
    CoefficientSet coeffs;
    Vec a;
    TerminalSpec terminal;
    double T = 1.0;
    ControlSet control_set;
    FiltrationSpec filtration;

    Layout layout() const { return Layout(dims, marks.size()); }
};

struct Violation {
    std::string location;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const noexcept { return violations.empty(); }
    bool mentions(const std::string& needle) const {
        return std::any_of(violations.begin(), violations.end(), [&](const Violation& v) {
            return v.message.find(needle) != std::string::npos || v.location.find(needle) != std::string::npos;
        });
    }
};

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
    std::ostringstream os;
    os << r << "x" << c;
    return os.str();
}

/// A point inside every coefficient's domain: x = a, all backward slots zero,
/// v the projection of zero onto U.
inline Point reference_point(const ProblemSpec& spec) {
    Point pt(spec.layout());
    if (spec.a.size() == spec.dims.n) pt.x() = spec.a;
    if (spec.control_set.dim() == spec.dims.k) pt.v() = project_control(Vec::Zero(spec.dims.k), spec.control_set);
    return pt;
}

} // namespace detail

/// Checks every structural invariant of a problem instance. Shape checks
/// evaluate each map once at a reference point.
inline ValidationReport validate(const ProblemSpec& spec) {
    ValidationReport rep;
    auto add = [&](std::string loc, std::string msg) { rep.violations.push_back({std::move(loc), std::move(msg)}); };
    const auto& dims = spec.dims;
    if (dims.n < 1 || dims.m < 1 || dims.d < 1 || dims.k < 1) add("dims", "dimensions must be at least 1");
    if (spec.marks.atoms.size() != spec.marks.weights.size())
        add("marks", "atoms and weights must have the same length");
    for (std::size_t j = 0; j < spec.marks.weights.size(); ++j) {
        const double w = spec.marks.weights[j];
        if (!(w > 0.0) || !std::isfinite(w)) add("marks.weights[" + std::to_string(j) + "]", "weights must be positive and finite");
    }
    for (std::size_t j = 0; j < spec.marks.atoms.size(); ++j)
        if (!std::isfinite(spec.marks.atoms[j])) add("marks.atoms[" + std::to_string(j) + "]", "atoms must be finite");
    if (!(spec.T > 0.0) || !std::isfinite(spec.T)) add("T", "horizon must be positive and finite");
    if (spec.a.size() != dims.n) add("a", "initial state must have length n");

    const auto& cs = spec.control_set;
    switch (cs.kind) {
    case ControlSetKind::box:
        if (cs.lower.size() != dims.k || cs.upper.size() != dims.k) add("control_set", "box bounds must have length k");
        else if ((cs.lower.array() > cs.upper.array()).any()) add("control_set", "box lower bound exceeds upper bound");
        break;
    case ControlSetKind::ball:
        if (cs.center.size() != dims.k) add("control_set", "ball center must have length k");
        if (!(cs.radius > 0.0)) add("control_set", "ball radius must be positive");
        break;
    case ControlSetKind::simplex:
        if (cs.lower.size() != dims.k) add("control_set", "simplex dimension must equal k");
        if (!(cs.total > 0.0)) add("control_set", "simplex total must be positive");
        break;
    }

    const auto& fl = spec.filtration;
    if (fl.kind == FiltrationKind::delayed && (fl.delay < 0.0 || fl.delay > spec.T))
        add("filtration.delay", "delay must lie in [0, T]");
    if (fl.degree < 0) add("filtration.degree", "basis degree must be non-negative");

    const auto& c = spec.coeffs;
    if (!c.b || !c.g || !c.f || !c.sigma || !c.l || !c.phi || !c.h || !c.b_jac || !c.g_jac || !c.f_jac ||
        !c.sigma_jac || !c.l_grad || !c.phi_grad || !c.h_grad)
        add("coeffs", "every coefficient and derivative map must be provided");
    if (spec.terminal.kind == TerminalKind::driver && !spec.terminal.driver) add("terminal", "driver map missing");
    if (spec.terminal.kind == TerminalKind::state && (!spec.terminal.state || !spec.terminal.state_jac))
        add("terminal", "state map or its Jacobian missing");
    if (!rep.ok()) return rep;

    const Layout lay = spec.layout();
    const Point pt = detail::reference_point(spec);
    auto check_vec = [&](const std::string& name, const Vec& v, Eigen::Index expect) {
        if (v.size() != expect) add(name, "shape violation: got length " + std::to_string(v.size()) + ", expected " + std::to_string(expect));
        else if (!v.allFinite()) add(name, "non-finite value at reference point");
    };
    auto check_mat = [&](const std::string& name, const Mat& j, Eigen::Index rows) {
        if (j.rows() != rows || j.cols() != lay.size)
            add(name, "shape violation: got " + detail::shape_str(j.rows(), j.cols()) + ", expected " + detail::shape_str(rows, lay.size));
    };
    try {
        Vec out;
        Mat jac;
        c.b(pt, out); check_vec("b", out, dims.n);
        c.g(pt, out); check_vec("g", out, dims.n * dims.d);
        c.f(pt, out); check_vec("f", out, dims.m);
        c.b_jac(pt, jac); check_mat("b_jac", jac, dims.n);
        c.g_jac(pt, jac); check_mat("g_jac", jac, dims.n * dims.d);
        c.f_jac(pt, jac); check_mat("f_jac", jac, dims.m);
        for (std::size_t j = 0; j < spec.marks.size(); ++j) {
            c.sigma(pt, j, out); check_vec("sigma[" + std::to_string(j) + "]", out, dims.n);
            c.sigma_jac(pt, j, jac); check_mat("sigma_jac[" + std::to_string(j) + "]", jac, dims.n);
        }
        if (!std::isfinite(c.l(pt))) add("l", "non-finite value at reference point");
        c.l_grad(pt, out); check_vec("l_grad", out, lay.size);
        const Vec x0 = pt.x(), y0 = pt.y();
        if (!std::isfinite(c.phi(x0))) add("phi", "non-finite value at reference point");
        if (!std::isfinite(c.h(y0))) add("h", "non-finite value at reference point");
        c.phi_grad(x0, out); check_vec("phi_grad", out, dims.n);
        c.h_grad(y0, out); check_vec("h_grad", out, dims.m);
        if (spec.terminal.kind == TerminalKind::driver) {
            spec.terminal.driver(Vec::Zero(dims.d), Vec::Zero(static_cast<Eigen::Index>(spec.marks.size())), out);
            check_vec("terminal", out, dims.m);
        } else {
            spec.terminal.state(x0, out); check_vec("terminal", out, dims.m);
            spec.terminal.state_jac(x0, jac);
            if (jac.rows() != dims.m || jac.cols() != dims.n)
                add("terminal_jac", "shape violation: got " + detail::shape_str(jac.rows(), jac.cols()) + ", expected " + detail::shape_str(dims.m, dims.n));
        }
    } catch (const std::exception& e) {
        add("coeffs", std::string("evaluation failed: ") + e.what());
    }
    return rep;
}

struct DerivativeCheckEntry {
    std::string map;
    double worst_abs = 0.0;   ///< max |fd - analytic|
    double worst_rel = 0.0;   ///< max |fd - analytic| / max(|analytic|, floor)
    bool pass = true;
};

struct DerivativeCheckReport {
    std::vector<DerivativeCheckEntry> entries;
    bool pass() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
    }
    const DerivativeCheckEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.map == name) return &e;
        return nullptr;
    }
};

namespace detail {

inline void require_finite(const Vec& v, const std::string& what) {
    if (!v.allFinite()) throw NonFiniteCoefficient(what + " evaluated to a non-finite value");
}

/// Compares a supplied Jacobian (kernel convention on the r-block) against
/// central differences of `value` along every coordinate of w.
template <typename ValueFn, typename JacFn>
void fd_compare(DerivativeCheckEntry& entry, const Point& pt, const MarkSpace& marks, double step, double tol,
                double floor, ValueFn&& value, JacFn&& jacobian) {
    Vec base, plus, minus;
    Mat jac;
    value(pt, base);
    require_finite(base, entry.map);
    jacobian(pt, jac);
    require_finite(Eigen::Map<const Vec>(jac.data(), jac.size()), entry.map + " jacobian");
    Point probe = pt;
    const Layout& lay = pt.layout;
    for (int c = 0; c < lay.size; ++c) {
        probe.w[c] = pt.w[c] + step;
        value(probe, plus);
        probe.w[c] = pt.w[c] - step;
        value(probe, minus);
        probe.w[c] = pt.w[c];
        require_finite(plus, entry.map);
        require_finite(minus, entry.map);
        double weight = 1.0;
        if (c >= lay.r_off && c < lay.v_off) weight = marks.weights[static_cast<std::size_t>((c - lay.r_off) / lay.m)];
        for (Eigen::Index row = 0; row < base.size(); ++row) {
            const double fd = (plus[row] - minus[row]) / (2.0 * step);
            const double an = weight * jac(row, c);
            const double err = std::abs(fd - an);
            entry.worst_abs = std::max(entry.worst_abs, err);
            entry.worst_rel = std::max(entry.worst_rel, err / std::max(std::abs(an), floor));
            if (err > tol * std::abs(an) + floor) entry.pass = false;
        }
    }
}

} // namespace detail

/// Validates every supplied derivative map against central finite differences
/// at `probe_count` random points. A map passes when each entry satisfies
/// |fd - analytic| <= tol * |analytic| + abs_floor.
inline DerivativeCheckReport check_derivatives(const ProblemSpec& spec, int probe_count = 100, double step = 1e-5,
                                               double tol = 1e-4, double abs_floor = 1e-8, std::uint64_t seed = 7) {
    if (!(step > 0.0) || !(tol > 0.0)) throw std::invalid_argument("check_derivatives: step and tol must be positive");
    const auto& c = spec.coeffs;
    const Layout lay = spec.layout();
    const std::size_t M = spec.marks.size();
    std::vector<DerivativeCheckEntry> entries;
    entries.push_back({"b"});
    entries.push_back({"g"});
    entries.push_back({"f"});
    for (std::size_t j = 0; j < M; ++j) entries.push_back({"sigma[" + std::to_string(j) + "]"});
    entries.push_back({"l"});
    entries.push_back({"phi"});
    entries.push_back({"h"});
    if (spec.terminal.kind == TerminalKind::state) entries.push_back({"terminal"});

    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (int probe = 0; probe < probe_count; ++probe) {
        Point pt(lay);
        pt.t = 0.5 * (unit(gen) + 1.0) * spec.T;
        for (int i = 0; i < lay.size; ++i) pt.w[i] = unit(gen);
        pt.x() += spec.a;
        Vec vv = pt.v();
        pt.v() = project_control(vv, spec.control_set);

        std::size_t e = 0;
        detail::fd_compare(entries[e++], pt, spec.marks, step, tol, abs_floor, c.b, c.b_jac);
        detail::fd_compare(entries[e++], pt, spec.marks, step, tol, abs_floor, c.g, c.g_jac);
        detail::fd_compare(entries[e++], pt, spec.marks, step, tol, abs_floor, c.f, c.f_jac);
        for (std::size_t j = 0; j < M; ++j) {
            detail::fd_compare(
                entries[e++], pt, spec.marks, step, tol, abs_floor,
                [&](const Point& p, Vec& out) { c.sigma(p, j, out); },
                [&](const Point& p, Mat& out) { c.sigma_jac(p, j, out); });
        }
        detail::fd_compare(
            entries[e++], pt, spec.marks, step, tol, abs_floor,
            [&](const Point& p, Vec& out) { out.resize(1); out[0] = c.l(p); },
            [&](const Point& p, Mat& out) {
                Vec g;
                c.l_grad(p, g);
                out = g.transpose();
            });

        // Terminal maps are functions of x (or y) alone; embed them in a layout
        // of matching size so the same comparison routine applies.
        auto terminal_check = [&](DerivativeCheckEntry& entry, int dim, const Vec& at, auto&& value, auto&& jacobian) {
            Dimensions dd{dim, 1, 1, 1};
            Layout sub(dd, 0);
            Point q(sub);
            q.x() = at;
            MarkSpace none;
            // Only the x-block is active; the other coordinates are ignored by
            // value/jacobian, so their FD columns vanish.
            detail::fd_compare(
                entry, q, none, step, tol, abs_floor,
                [&](const Point& p, Vec& out) { value(Vec(p.x()), out); },
                [&](const Point& p, Mat& out) {
                    Mat jx;
                    jacobian(Vec(p.x()), jx);
                    out = Mat::Zero(jx.rows(), sub.size);
                    out.leftCols(dim) = jx;
                });
        };
        terminal_check(entries[e++], lay.n, Vec(pt.x()),
                       [&](const Vec& x, Vec& out) { out.resize(1); out[0] = c.phi(x); },
                       [&](const Vec& x, Mat& out) { Vec g; c.phi_grad(x, g); out = g.transpose(); });
        terminal_check(entries[e++], lay.m, Vec(pt.y()),
                       [&](const Vec& y, Vec& out) { out.resize(1); out[0] = c.h(y); },
                       [&](const Vec& y, Mat& out) { Vec g; c.h_grad(y, g); out = g.transpose(); });
        if (spec.terminal.kind == TerminalKind::state) {
            terminal_check(entries[e++], lay.n, Vec(pt.x()),
                           [&](const Vec& x, Vec& out) { spec.terminal.state(x, out); },
                           [&](const Vec& x, Mat& out) { spec.terminal.state_jac(x, out); });
        }
    }
    return DerivativeCheckReport{std::move(entries)};
}

} // namespace fbsde
