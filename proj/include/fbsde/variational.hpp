#pragma once

#include "fbsde/adjoint.hpp"

namespace fbsde {

/// Derivative (X1, Y1, Z1, R1) of the state along a control direction.
/// At step i < N, Ybar1_i = E_i[Y1_{i+1}] plays the role of ybar.
struct VariationalTrajectory {
    Layout layout;
    double dt = 0.0;
    PicardStore store;

    int paths() const noexcept { return store.P; }
    int steps() const noexcept { return store.N; }
    const std::vector<double>& residuals() const noexcept { return store.residuals; }

    Eigen::Map<const Vec> X1(int p, int i) const { return {store.fwd(p, i), layout.n}; }
    Eigen::Map<const Vec> Y1(int p, int i) const { return {store.back(p, i), layout.m}; }
    Eigen::Map<const Vec> Ybar1(int p, int i) const { return {store.packed_at(p, i), layout.m}; }
    Eigen::Map<const Vec> Z1(int p, int i) const { return {store.packed_at(p, i) + layout.m, layout.m * layout.d}; }
    Eigen::Map<const Vec> R1(int p, int i, int j) const {
        return {store.packed_at(p, i) + layout.m * (1 + layout.d) + j * layout.m, layout.m};
    }

    /// Direction dw = (X1, Ybar1, Z1, R1, theta) in the stacked argument.
    void fill_direction(int p, int i, const ControlProcess& theta, Vec& dw) const {
        dw.resize(layout.size);
        dw.segment(layout.x_off, layout.n) = X1(p, i);
        dw.segment(layout.y_off, layout.v_off - layout.y_off) =
            Eigen::Map<const Vec>(store.packed_at(p, i), layout.v_off - layout.y_off);
        dw.segment(layout.v_off, layout.k) = theta.vec(p, i);
    }
};

namespace detail {

class VariationalSystem {
public:
    VariationalSystem(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& theta,
                      const Trajectory& tr, const Linearization& lin, const DriverHistory& hist)
        : spec_(spec), batch_(batch), theta_(theta), tr_(tr), lin_(lin), hist_(hist), lay_(tr.layout) {}

    struct Scratch {
        Vec dw, out;
        Mat jac;
    };

    int forward_dim() const { return lay_.n; }
    int backward_dim() const { return lay_.m; }
    int regressor_dim() const { return 2 * lay_.n + tr_.regressors.extra(lay_.d, lay_.marks); }
    /// The system is linear in X1, so the surrogates are affine in it.
    int linear_regressors() const { return lay_.n; }
    bool coupled() const { return spec_.coeffs.forward_coupled; }
    Scratch make_scratch() const { return {Vec(lay_.size), Vec(), Mat()}; }

    void regressor(int p, int i, const double* fwd, double* out, Scratch&) const {
        for (int a = 0; a < lay_.n; ++a) out[a] = tr_.x(p, i)[a];
        const int extra = tr_.regressors.extra(lay_.d, lay_.marks);
        tr_.regressors.fill(hist_, p, i, out + lay_.n);
        for (int a = 0; a < lay_.n; ++a) out[lay_.n + extra + a] = fwd[a];
    }
    void init(int, double* fwd0, Scratch&) const {
        for (int a = 0; a < lay_.n; ++a) fwd0[a] = 0.0;
    }
    void step(int p, int i, const double* fwd, const double* packed, double* next, Scratch& s) const {
        load(p, i, fwd, packed, s.dw);
        const double dt = tr_.dt;
        const auto idx = static_cast<std::size_t>(p) * tr_.steps() + i;
        s.out.noalias() = lin_.jb(p, i) * s.dw;
        for (int a = 0; a < lay_.n; ++a) next[a] = fwd[a] + s.out[a] * dt;
        s.out.noalias() = lin_.jg(p, i) * s.dw;
        for (int a = 0; a < lay_.n; ++a)
            for (int c = 0; c < lay_.d; ++c) next[a] += s.out[a * lay_.d + c] * batch_.raw_dB()[idx * lay_.d + c];
        for (int j = 0; j < lay_.marks; ++j) {
            const double dn = static_cast<double>(batch_.raw_dN()[idx * lay_.marks + j]) -
                              spec_.marks.weights[static_cast<std::size_t>(j)] * dt;
            s.out.noalias() = lin_.jsigma(p, i, j) * s.dw;
            for (int a = 0; a < lay_.n; ++a) next[a] += s.out[a] * dn;
        }
    }
    void terminal(int p, const double* fwdN, double* yN, Scratch& s) const {
        if (spec_.terminal.kind == TerminalKind::state) {
            spec_.terminal.state_jac(Vec(tr_.x(p, tr_.steps())), s.jac);
            s.out.noalias() = s.jac * Eigen::Map<const Vec>(fwdN, lay_.n);
            for (int a = 0; a < lay_.m; ++a) yN[a] = s.out[a];
        } else {
            for (int a = 0; a < lay_.m; ++a) yN[a] = 0.0;
        }
    }
    void driver(int p, int i, const double* fwd, const double* packed, double* f, Scratch& s) const {
        load(p, i, fwd, packed, s.dw);
        s.out.noalias() = lin_.jf(p, i) * s.dw;
        for (int a = 0; a < lay_.m; ++a) f[a] = s.out[a];
    }

private:
    /// Direction with pi-weighted r-block, ready for plain Jacobian products.
    void load(int p, int i, const double* fwd, const double* packed, Vec& dw) const {
        dw.segment(lay_.x_off, lay_.n) = Eigen::Map<const Vec>(fwd, lay_.n);
        dw.segment(lay_.y_off, lay_.v_off - lay_.y_off) = Eigen::Map<const Vec>(packed, lay_.v_off - lay_.y_off);
        dw.segment(lay_.v_off, lay_.k) = Eigen::Map<const Vec>(theta_.at(p, i), lay_.k);
        lin_.weight_direction(dw);
    }

    const ProblemSpec& spec_;
    const ScenarioBatch& batch_;
    const ControlProcess& theta_;
    const Trajectory& tr_;
    const Linearization& lin_;
    const DriverHistory& hist_;
    Layout lay_;
};

} // namespace detail

/// Solves the linearized system along `tr` with inhomogeneity from the
/// direction theta.
inline VariationalTrajectory solve_variational(const ProblemSpec& spec, const ScenarioBatch& batch,
                                               const ControlProcess& u, const ControlProcess& theta,
                                               const Trajectory& tr, const Linearization& lin,
                                               const PicardConfig& cfg = {}) {
    detail::require_compatible(spec, batch, u);
    detail::require_compatible(spec, batch, theta);
    const DriverHistory hist(batch);
    const detail::VariationalSystem sys(spec, batch, theta, tr, lin, hist);
    VariationalTrajectory var;
    var.layout = tr.layout;
    var.dt = tr.dt;
    var.store = run_picard(sys, batch, cfg);
    return var;
}

inline VariationalTrajectory solve_variational(const ProblemSpec& spec, const ScenarioBatch& batch,
                                               const ControlProcess& u, const ControlProcess& theta,
                                               const Trajectory& tr, const PicardConfig& cfg = {}) {
    const Linearization lin(spec, tr, u, cfg.workers);
    return solve_variational(spec, batch, u, theta, tr, lin, cfg);
}

} // namespace fbsde
