#pragma once

#include "fbsde/control.hpp"
#include "fbsde/model.hpp"
#include "fbsde/picard.hpp"
#include "fbsde/scenario.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <vector>

namespace fbsde {

/// Solution (x, y, z, r) of the controlled system on a batch.
///
/// Coefficients at step i are evaluated at (t_i, x_i, ybar_i, z_i, r_i, u_i)
/// with ybar_i = E_i[y_{i+1}], the predictable value of y, so
/// y_i = ybar_i + f(...) dt. The regression surrogates for
/// (ybar, z, r) are kept per step in `store.fits`.
struct Trajectory {
    Layout layout;
    double dt = 0.0;
    PicardStore store;
    RegressorChoice regressors;
    int basis_degree = 2;

    int paths() const noexcept { return store.P; }
    int steps() const noexcept { return store.N; }
    const std::vector<double>& residuals() const noexcept { return store.residuals; }
    int iterations() const noexcept { return store.iterations; }

    Eigen::Map<const Vec> x(int p, int i) const { return {store.fwd(p, i), layout.n}; }
    Eigen::Map<const Vec> y(int p, int i) const { return {store.back(p, i), layout.m}; }
    Eigen::Map<const Vec> ybar(int p, int i) const { return {store.packed_at(p, i), layout.m}; }
    Eigen::Map<const Vec> z(int p, int i) const { return {store.packed_at(p, i) + layout.m, layout.m * layout.d}; }
    Eigen::Map<const Vec> r(int p, int i, int j) const {
        return {store.packed_at(p, i) + layout.m * (1 + layout.d) + j * layout.m, layout.m};
    }

    /// Coefficient argument at step i < N.
    void fill_point(int p, int i, const ControlProcess& u, Point& pt) const {
        pt.t = i * dt;
        pt.x() = x(p, i);
        pt.w.segment(layout.y_off, layout.v_off - layout.y_off) =
            Eigen::Map<const Vec>(store.packed_at(p, i), layout.v_off - layout.y_off);
        pt.v() = u.vec(p, i);
    }
    Point point(int p, int i, const ControlProcess& u) const {
        Point pt(layout);
        fill_point(p, i, u, pt);
        return pt;
    }
};

namespace detail {

/// Forward/backward pair of the controlled system for run_picard.
class StateSystem {
public:
    StateSystem(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u, const DriverHistory& hist)
        : spec_(spec), batch_(batch), u_(u), hist_(hist), lay_(spec.layout()), rc_(RegressorChoice::for_spec(spec)) {}

    struct Scratch {
        Point pt;
        Vec out, bt, nt;
    };

    int forward_dim() const { return lay_.n; }
    int backward_dim() const { return lay_.m; }
    int regressor_dim() const { return lay_.n + rc_.extra(lay_.d, lay_.marks); }
    bool coupled() const { return spec_.coeffs.forward_coupled; }
    Scratch make_scratch() const { return {Point(lay_), Vec(), Vec(lay_.d), Vec(lay_.marks)}; }

    void regressor(int p, int i, const double* fwd, double* out, Scratch&) const {
        for (int a = 0; a < lay_.n; ++a) out[a] = fwd[a];
        rc_.fill(hist_, p, i, out + lay_.n);
    }
    void init(int, double* fwd0, Scratch&) const {
        for (int a = 0; a < lay_.n; ++a) fwd0[a] = spec_.a[a];
    }
    void step(int p, int i, const double* fwd, const double* packed, double* next, Scratch& s) const {
        load(p, i, fwd, packed, s.pt);
        euler_step(spec_, batch_, p, i, s.pt, s.out, next);
    }
    void terminal(int p, const double* fwdN, double* yN, Scratch& s) const {
        terminal_value(spec_, hist_, p, Eigen::Map<const Vec>(fwdN, lay_.n), s.bt, s.nt, s.out);
        for (int a = 0; a < lay_.m; ++a) yN[a] = s.out[a];
    }
    void driver(int p, int i, const double* fwd, const double* packed, double* f, Scratch& s) const {
        load(p, i, fwd, packed, s.pt);
        spec_.coeffs.f(s.pt, s.out);
        for (int a = 0; a < lay_.m; ++a) f[a] = s.out[a];
    }

    /// x_{i+1} = x_i + b dt + g dB + sum_j sigma_j (dN_j - pi_j dt).
    static void euler_step(const ProblemSpec& spec, const ScenarioBatch& batch, int p, int i, const Point& pt, Vec& out,
                           double* next) {
        const Layout& lay = pt.layout;
        const double dt = batch.grid().dt();
        const auto idx = static_cast<std::size_t>(p) * batch.steps() + i;
        for (int a = 0; a < lay.n; ++a) next[a] = pt.w[lay.x_off + a];
        spec.coeffs.b(pt, out);
        for (int a = 0; a < lay.n; ++a) next[a] += out[a] * dt;
        spec.coeffs.g(pt, out);
        for (int a = 0; a < lay.n; ++a)
            for (int c = 0; c < lay.d; ++c) next[a] += out[a * lay.d + c] * batch.raw_dB()[idx * lay.d + c];
        for (int j = 0; j < lay.marks; ++j) {
            const double dn = static_cast<double>(batch.raw_dN()[idx * lay.marks + j]) -
                              batch.marks().weights[static_cast<std::size_t>(j)] * dt;
            if (dn == 0.0) continue;
            spec.coeffs.sigma(pt, static_cast<std::size_t>(j), out);
            for (int a = 0; a < lay.n; ++a) next[a] += out[a] * dn;
        }
    }

    static void terminal_value(const ProblemSpec& spec, const DriverHistory& hist, int p, const Vec& xN, Vec& bt, Vec& nt,
                               Vec& out) {
        if (spec.terminal.kind == TerminalKind::driver) {
            bt = Eigen::Map<const Vec>(hist.brownian_at(p, hist.N), hist.d);
            nt = Eigen::Map<const Vec>(hist.counts_at(p, hist.N), hist.M);
            spec.terminal.driver(bt, nt, out);
        } else {
            spec.terminal.state(xN, out);
        }
    }

private:
    void load(int p, int i, const double* fwd, const double* packed, Point& pt) const {
        pt.t = i * batch_.grid().dt();
        pt.x() = Eigen::Map<const Vec>(fwd, lay_.n);
        pt.w.segment(lay_.y_off, lay_.v_off - lay_.y_off) = Eigen::Map<const Vec>(packed, lay_.v_off - lay_.y_off);
        pt.v() = u_.vec(p, i);
    }

    const ProblemSpec& spec_;
    const ScenarioBatch& batch_;
    const ControlProcess& u_;
    const DriverHistory& hist_;
    Layout lay_;
    RegressorChoice rc_;
};

inline void require_compatible(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u) {
    if (batch.brownian_dim() != spec.dims.d) throw InvalidSpec("batch Brownian dimension does not match the model");
    if (batch.mark_count() != static_cast<int>(spec.marks.size())) throw InvalidSpec("batch mark count does not match the model");
    if (std::abs(batch.grid().T - spec.T) > 1e-12 * spec.T) throw InvalidSpec("batch horizon does not match the model");
    if (u.P != batch.paths() || u.N != batch.steps() || u.k != spec.dims.k)
        throw InvalidSpec("control shape does not match the batch and model");
}

} // namespace detail

/// Forward Euler sweep only. Backward arguments at each step come from the
/// given surrogates evaluated at the regressor; with no surrogates they are
/// zero (decoupled or first Picard pass). Returns x as [p][i][n], i = 0..N.
inline std::vector<double> simulate_forward(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                            const std::vector<RegressionFit>& surrogates = {},
                                            const RegressionConfig& reg = {}, int workers = 1) {
    detail::require_compatible(spec, batch, u);
    const DriverHistory hist(batch);
    const detail::StateSystem sys(spec, batch, u, hist);
    const int P = batch.paths(), N = batch.steps(), n = spec.dims.n;
    const Layout lay = spec.layout();
    const int packed = lay.v_off - lay.y_off;
    const MonomialBasis basis(sys.regressor_dim(), reg.degree);
    std::vector<double> x(static_cast<std::size_t>(P) * (N + 1) * n);
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t, std::size_t b, std::size_t e) {
        auto s = sys.make_scratch();
        std::vector<double> zbuf(static_cast<std::size_t>(std::max(sys.regressor_dim(), 1))),
            feat(static_cast<std::size_t>(basis.size())), vals(static_cast<std::size_t>(packed), 0.0);
        for (std::size_t pp = b; pp < e; ++pp) {
            const int p = static_cast<int>(pp);
            double* xp = x.data() + pp * (N + 1) * n;
            sys.init(p, xp, s);
            for (int i = 0; i < N; ++i) {
                if (!surrogates.empty()) {
                    sys.regressor(p, i, xp + i * n, zbuf.data(), s);
                    basis.evaluate(zbuf.data(), feat.data());
                    surrogates[static_cast<std::size_t>(i)].predict(Eigen::Map<const Vec>(feat.data(), basis.size()), vals.data());
                }
                sys.step(p, i, xp + i * n, vals.data(), xp + (i + 1) * n, s);
                for (int a = 0; a < n; ++a)
                    if (!std::isfinite(xp[(i + 1) * n + a]))
                        throw NonFiniteState("forward state became non-finite at path " + std::to_string(p) +
                                             ", step " + std::to_string(i + 1));
            }
        }
    });
    return x;
}

/// Solves the controlled forward-backward system by damped Picard iteration
/// between forward Euler and LSMC backward sweeps.
inline Trajectory solve_fbsde(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                              const PicardConfig& cfg = {}) {
    detail::require_compatible(spec, batch, u);
    const DriverHistory hist(batch);
    const detail::StateSystem sys(spec, batch, u, hist);
    Trajectory tr;
    tr.layout = spec.layout();
    tr.dt = batch.grid().dt();
    tr.regressors = RegressorChoice::for_spec(spec);
    tr.basis_degree = cfg.regression.degree;
    tr.store = run_picard(sys, batch, cfg);
    return tr;
}

/// Monte Carlo estimate of the cost E[ sum l dt + phi(x_T) ] + h(y_0).
///
/// y_0 is deterministic, so the standard error comes from the per-path
/// contributions sum l dt + phi(x_T) + <h'(y_0), xi + sum f dt>, whose mean
/// linearizes the cost around y_0.
struct CostEstimate {
    double value = 0.0;
    double se = 0.0;
    double y0 = 0.0;                   ///< first component of y_0
    double admissibility = 0.0;        ///< mean of sum |l| dt + |phi| + |h|
    std::vector<double> contributions;
};

inline CostEstimate estimate_cost(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                  const Trajectory& tr, int workers = 1) {
    const int P = tr.paths(), N = tr.steps(), m = spec.dims.m;
    const double dt = tr.dt;
    const DriverHistory hist(batch);
    const Vec y0 = tr.y(0, 0);
    Vec hgrad;
    spec.coeffs.h_grad(y0, hgrad);
    const double h0 = spec.coeffs.h(y0);
    CostEstimate est;
    est.contributions.resize(static_cast<std::size_t>(P));
    std::vector<double> running(static_cast<std::size_t>(P)), absolute(static_cast<std::size_t>(P));
    for_each_chunk(static_cast<std::size_t>(P), workers, [&](std::size_t, std::size_t b, std::size_t e) {
        Point pt(tr.layout);
        Vec out, bt, nt, ysum(m);
        for (std::size_t pp = b; pp < e; ++pp) {
            const int p = static_cast<int>(pp);
            double run = 0.0, abs_run = 0.0;
            detail::StateSystem::terminal_value(spec, hist, p, tr.x(p, N), bt, nt, out);
            ysum = out;
            for (int i = 0; i < N; ++i) {
                tr.fill_point(p, i, u, pt);
                const double li = spec.coeffs.l(pt);
                run += li * dt;
                abs_run += std::abs(li) * dt;
                spec.coeffs.f(pt, out);
                ysum += out * dt;
            }
            const double ph = spec.coeffs.phi(Vec(tr.x(p, N)));
            running[pp] = run + ph;
            absolute[pp] = abs_run + std::abs(ph) + std::abs(h0);
            est.contributions[pp] = run + ph + hgrad.dot(ysum);
        }
    });
    double mean_run = 0.0, mean_c = 0.0, mean_abs = 0.0;
    for (int p = 0; p < P; ++p) {
        mean_run += running[static_cast<std::size_t>(p)];
        mean_c += est.contributions[static_cast<std::size_t>(p)];
        mean_abs += absolute[static_cast<std::size_t>(p)];
    }
    mean_run /= P;
    mean_c /= P;
    double var = 0.0;
    for (int p = 0; p < P; ++p) var += std::pow(est.contributions[static_cast<std::size_t>(p)] - mean_c, 2);
    var /= std::max(1, P - 1);
    est.value = mean_run + h0;
    est.se = std::sqrt(var / P);
    est.y0 = y0[0];
    est.admissibility = mean_abs / P;
    if (!std::isfinite(est.value) || !std::isfinite(est.se)) throw NonFiniteCost("cost estimate is not finite");
    return est;
}

/// CSV layout: path, step, t, x_1..x_n, y_1..y_m, z (row-major), r_1..r_M
/// (each r_j in R^m); z and r are blank at the terminal step.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
    const Layout& lay = tr.layout;
    os << "path,step,t";
    for (int a = 0; a < lay.n; ++a) os << ",x_" << a + 1;
    for (int a = 0; a < lay.m; ++a) os << ",y_" << a + 1;
    for (int a = 0; a < lay.m; ++a)
        for (int c = 0; c < lay.d; ++c) os << ",z_" << a + 1 << "_" << c + 1;
    for (int j = 0; j < lay.marks; ++j)
        for (int a = 0; a < lay.m; ++a) os << ",r_" << j + 1 << "_" << a + 1;
    os << '\n' << std::setprecision(17);
    for (int p = 0; p < tr.paths(); ++p)
        for (int i = 0; i <= tr.steps(); ++i) {
            os << p << ',' << i << ',' << i * tr.dt;
            for (int a = 0; a < lay.n; ++a) os << ',' << tr.x(p, i)[a];
            for (int a = 0; a < lay.m; ++a) os << ',' << tr.y(p, i)[a];
            const bool terminal = i == tr.steps();
            for (int a = 0; a < lay.m * lay.d; ++a) {
                os << ',';
                if (!terminal) os << tr.z(p, i)[a];
            }
            for (int j = 0; j < lay.marks; ++j)
                for (int a = 0; a < lay.m; ++a) {
                    os << ',';
                    if (!terminal) os << tr.r(p, i, j)[a];
                }
            os << '\n';
        }
}

inline void write_control_csv(std::ostream& os, const ControlProcess& u, double dt) {
    os << "path,step,t";
    for (int a = 0; a < u.k; ++a) os << ",u_" << a + 1;
    os << '\n' << std::setprecision(17);
    for (int p = 0; p < u.P; ++p)
        for (int i = 0; i < u.N; ++i) {
            os << p << ',' << i << ',' << i * dt;
            for (int a = 0; a < u.k; ++a) os << ',' << u.at(p, i)[a];
            os << '\n';
        }
}

} // namespace fbsde
