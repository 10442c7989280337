#pragma once

#include "fbsde/control.hpp"
#include "fbsde/hamiltonian.hpp"
#include "fbsde/picard.hpp"
#include "fbsde/state_solver.hpp"

#include <vector>

namespace fbsde {

/// Coefficient Jacobians frozen along a solved state trajectory, one stacked
/// matrix [b; g; f; sigma_1..sigma_M; l] (rows) x w (columns) per (path, step).
/// Shared by the adjoint and variational solvers.
class Linearization {
public:
    Linearization() = default;
    Linearization(const ProblemSpec& spec, const Trajectory& tr, const ControlProcess& u, int workers = 1)
        : layout_(tr.layout), marks_(spec.marks), P_(tr.paths()), N_(tr.steps()), rows_(stacked_rows(tr.layout)),
          data_(static_cast<std::size_t>(P_) * N_ * rows_ * layout_.size) {
        for_each_chunk(static_cast<std::size_t>(P_), workers, [&](std::size_t, std::size_t b, std::size_t e) {
            Point pt(layout_);
            LocalCoefficients c;
            for (std::size_t pp = b; pp < e; ++pp)
                for (int i = 0; i < N_; ++i) {
                    tr.fill_point(static_cast<int>(pp), i, u, pt);
                    c.evaluate(spec, pt, false, true);
                    stack_jacobians(c, layout_, block(static_cast<int>(pp), i));
                    if (!block(static_cast<int>(pp), i).allFinite())
                        throw NonFiniteCoefficient("coefficient Jacobian is not finite along the trajectory");
                }
        });
    }

    const Layout& layout() const noexcept { return layout_; }
    const MarkSpace& marks() const noexcept { return marks_; }
    int rows() const noexcept { return rows_; }

    Eigen::Map<const Mat> block(int p, int i) const { return {ptr(p, i), rows_, layout_.size}; }

    auto jb(int p, int i) const { return block(p, i).topRows(layout_.n); }
    auto jg(int p, int i) const { return block(p, i).middleRows(layout_.n, layout_.n * layout_.d); }
    auto jf(int p, int i) const { return block(p, i).middleRows(layout_.n * (1 + layout_.d), layout_.m); }
    auto jsigma(int p, int i, int j) const {
        return block(p, i).middleRows(layout_.n * (1 + layout_.d) + layout_.m + j * layout_.n, layout_.n);
    }
    auto lgrad(int p, int i) const { return block(p, i).row(rows_ - 1); }

    /// grad_w H at (p, i) for the given multipliers (kernel convention on r).
    void gradient(int p, int i, const Multipliers& mu, Vec& pairing, Vec& out) const {
        pairing_vector(mu, marks_, layout_, pairing);
        out.noalias() = block(p, i).transpose() * pairing;
    }

    /// Scales the r-block of a direction by pi_j so that J * dw is the
    /// directional derivative.
    void weight_direction(Vec& dw) const {
        for (int j = 0; j < layout_.marks; ++j)
            dw.segment(layout_.r_block(static_cast<std::size_t>(j)), layout_.m) *= marks_.weights[static_cast<std::size_t>(j)];
    }

private:
    Eigen::Map<Mat> block(int p, int i) { return {ptr(p, i), rows_, layout_.size}; }
    double* ptr(int p, int i) { return data_.data() + (static_cast<std::size_t>(p) * N_ + i) * rows_ * layout_.size; }
    const double* ptr(int p, int i) const {
        return data_.data() + (static_cast<std::size_t>(p) * N_ + i) * rows_ * layout_.size;
    }

    Layout layout_;
    MarkSpace marks_;
    int P_ = 0, N_ = 0, rows_ = 0;
    std::vector<double> data_;
};

/// Adjoint processes (p, q, beta, k). At step i < N the multipliers entering
/// H are (pbar_i, q_i, beta_i, k_i) with pbar_i = E_i[p_{i+1}].
struct AdjointTrajectory {
    Layout layout;
    double dt = 0.0;
    PicardStore store;

    int paths() const noexcept { return store.P; }
    int steps() const noexcept { return store.N; }
    const std::vector<double>& residuals() const noexcept { return store.residuals; }

    Eigen::Map<const Vec> p(int path, int i) const { return {store.back(path, i), layout.n}; }
    Eigen::Map<const Vec> k(int path, int i) const { return {store.fwd(path, i), layout.m}; }
    Eigen::Map<const Vec> pbar(int path, int i) const { return {store.packed_at(path, i), layout.n}; }
    Eigen::Map<const Vec> q(int path, int i) const { return {store.packed_at(path, i) + layout.n, layout.n * layout.d}; }
    Eigen::Map<const Vec> beta(int path, int i, int j) const {
        return {store.packed_at(path, i) + layout.n * (1 + layout.d) + j * layout.n, layout.n};
    }

    void fill_multipliers(int path, int i, Multipliers& mu) const {
        mu.p = pbar(path, i);
        mu.q = q(path, i);
        mu.beta = Eigen::Map<const Vec>(store.packed_at(path, i) + layout.n * (1 + layout.d), layout.n * layout.marks);
        mu.k = k(path, i);
    }
    Multipliers multipliers(int path, int i) const {
        Multipliers mu;
        fill_multipliers(path, i, mu);
        return mu;
    }
};

namespace detail {

/// k runs forward from -grad h(y_0):
///   k_{i+1} = k_i - H_y dt - H_z dB - sum_j H_r[j] dN~_j,
/// p runs backward from grad phi(x_T): p_i = pbar_i + H_x dt.
class AdjointSystem {
public:
    AdjointSystem(const ProblemSpec& spec, const ScenarioBatch& batch, const Trajectory& tr, const Linearization& lin,
                  const DriverHistory& hist)
        : spec_(spec), batch_(batch), tr_(tr), lin_(lin), hist_(hist), lay_(tr.layout) {
        Vec g;
        spec.coeffs.h_grad(Vec(tr.y(0, 0)), g);
        k0_ = -g;
    }

    struct Scratch {
        Multipliers mu;
        Vec pairing, grad, tmp;
        Mat jac;
    };

    int forward_dim() const { return lay_.m; }
    int backward_dim() const { return lay_.n; }
    int regressor_dim() const { return lay_.n + lay_.m + tr_.regressors.extra(lay_.d, lay_.marks); }
    bool coupled() const { return spec_.coeffs.forward_coupled; }
    Scratch make_scratch() const { return {Multipliers::zero(lay_), Vec(), Vec(), Vec(), Mat()}; }

    void regressor(int p, int i, const double* fwd, double* out, Scratch&) const {
        for (int a = 0; a < lay_.n; ++a) out[a] = tr_.x(p, i)[a];
        for (int a = 0; a < lay_.m; ++a) out[lay_.n + a] = fwd[a];
        tr_.regressors.fill(hist_, p, i, out + lay_.n + lay_.m);
    }
    void init(int, double* fwd0, Scratch&) const {
        for (int a = 0; a < lay_.m; ++a) fwd0[a] = k0_[a];
    }
    void step(int p, int i, const double* fwd, const double* packed, double* next, Scratch& s) const {
        gradient(p, i, fwd, packed, s);
        const double dt = tr_.dt;
        const auto idx = static_cast<std::size_t>(p) * tr_.steps() + i;
        for (int a = 0; a < lay_.m; ++a) {
            double v = fwd[a] - s.grad[lay_.y_off + a] * dt;
            for (int c = 0; c < lay_.d; ++c) v -= s.grad[lay_.z_off + a * lay_.d + c] * batch_.raw_dB()[idx * lay_.d + c];
            for (int j = 0; j < lay_.marks; ++j) {
                const double dn = static_cast<double>(batch_.raw_dN()[idx * lay_.marks + j]) -
                                  spec_.marks.weights[static_cast<std::size_t>(j)] * dt;
                v -= s.grad[lay_.r_block(static_cast<std::size_t>(j)) + a] * dn;
            }
            next[a] = v;
        }
    }
    void terminal(int p, const double* fwdN, double* yN, Scratch& s) const {
        spec_.coeffs.phi_grad(Vec(tr_.x(p, tr_.steps())), s.tmp);
        if (spec_.terminal.kind == TerminalKind::state) {
            spec_.terminal.state_jac(Vec(tr_.x(p, tr_.steps())), s.jac);
            s.tmp.noalias() -= s.jac.transpose() * Eigen::Map<const Vec>(fwdN, lay_.m);
        }
        for (int a = 0; a < lay_.n; ++a) yN[a] = s.tmp[a];
    }
    void driver(int p, int i, const double* fwd, const double* packed, double* f, Scratch& s) const {
        gradient(p, i, fwd, packed, s);
        for (int a = 0; a < lay_.n; ++a) f[a] = s.grad[lay_.x_off + a];
    }

private:
    void gradient(int p, int i, const double* k, const double* packed, Scratch& s) const {
        const int n = lay_.n;
        s.mu.p = Eigen::Map<const Vec>(packed, n);
        s.mu.q = Eigen::Map<const Vec>(packed + n, n * lay_.d);
        s.mu.beta = Eigen::Map<const Vec>(packed + n * (1 + lay_.d), n * lay_.marks);
        s.mu.k = Eigen::Map<const Vec>(k, lay_.m);
        lin_.gradient(p, i, s.mu, s.pairing, s.grad);
    }

    const ProblemSpec& spec_;
    const ScenarioBatch& batch_;
    const Trajectory& tr_;
    const Linearization& lin_;
    const DriverHistory& hist_;
    Layout lay_;
    Vec k0_;
};

} // namespace detail

/// Solves the adjoint system along a solved state trajectory. The
/// linearization may be passed in to share it with variational solves.
inline AdjointTrajectory solve_adjoint(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                       const Trajectory& tr, const Linearization& lin, const PicardConfig& cfg = {}) {
    detail::require_compatible(spec, batch, u);
    const DriverHistory hist(batch);
    const detail::AdjointSystem sys(spec, batch, tr, lin, hist);
    AdjointTrajectory adj;
    adj.layout = tr.layout;
    adj.dt = tr.dt;
    adj.store = run_picard(sys, batch, cfg);
    return adj;
}

inline AdjointTrajectory solve_adjoint(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                       const Trajectory& tr, const PicardConfig& cfg = {}) {
    const Linearization lin(spec, tr, u, cfg.workers);
    return solve_adjoint(spec, batch, u, tr, lin, cfg);
}

} // namespace fbsde
