#pragma once

#include "fbsde/model.hpp"
#include "fbsde/regression.hpp"
#include "fbsde/scenario.hpp"

#include <functional>
#include <vector>

namespace fbsde {

/// Control values u[p][i] in R^k (i = 0..N-1) together with the filtration
/// they are adapted to.
///
/// Under a delayed filtration the optimizer writes controls as
/// u[p][i] = Proj_U(psi(regressor[p][i'])' coef_i); `feedback` and
/// `snapshot` keep that representation so measurability can be re-checked.
struct ControlProcess {
    int P = 0, N = 0, k = 0;
    std::vector<double> values;
    FiltrationSpec filtration;
    std::vector<RegressionFit> feedback;
    std::vector<Mat> snapshot;  ///< regressor rows used at fit time, per step

    ControlProcess() = default;
    ControlProcess(int paths, int steps, int dim, FiltrationSpec f = {})
        : P(paths), N(steps), k(dim), values(static_cast<std::size_t>(paths) * steps * dim, 0.0),
          filtration(f) {}

    static ControlProcess constant(int paths, int steps, const Vec& u, FiltrationSpec f = {}) {
        ControlProcess c(paths, steps, static_cast<int>(u.size()), f);
        for (int p = 0; p < paths; ++p)
            for (int i = 0; i < steps; ++i) c.set(p, i, u);
        return c;
    }

    double* at(int p, int i) { return values.data() + (static_cast<std::size_t>(p) * N + i) * k; }
    const double* at(int p, int i) const { return values.data() + (static_cast<std::size_t>(p) * N + i) * k; }
    Vec vec(int p, int i) const { return Eigen::Map<const Vec>(at(p, i), k); }
    void set(int p, int i, const Vec& u) { Eigen::Map<Vec>(at(p, i), k) = u; }

    bool admissible(const ControlSet& set, double tol = 0.0) const {
        for (int p = 0; p < P; ++p)
            for (int i = 0; i < N; ++i) {
                const Vec u = vec(p, i);
                if ((project_control(u, set) - u).cwiseAbs().maxCoeff() > tol) return false;
            }
        return true;
    }

    /// Under the trivial filtration every step must be path-constant.
    bool path_constant() const {
        for (int p = 1; p < P; ++p)
            for (int i = 0; i < N; ++i)
                for (int a = 0; a < k; ++a)
                    if (at(p, i)[a] != at(0, i)[a]) return false;
        return true;
    }

    /// Values of the listed paths (feedback representation dropped).
    ControlProcess select_paths(const std::vector<int>& rows) const {
        ControlProcess out(static_cast<int>(rows.size()), N, k, filtration);
        for (std::size_t q = 0; q < rows.size(); ++q)
            for (int i = 0; i < N; ++i) out.set(static_cast<int>(q), i, vec(rows[q], i));
        return out;
    }

    ControlProcess operator+(const ControlProcess& o) const {
        ControlProcess out = *this;
        for (std::size_t j = 0; j < values.size(); ++j) out.values[j] += o.values[j];
        out.feedback.clear();
        out.snapshot.clear();
        return out;
    }
    ControlProcess scaled(double s) const {
        ControlProcess out = *this;
        for (auto& v : out.values) v *= s;
        out.feedback.clear();
        out.snapshot.clear();
        return out;
    }
};

/// Running driver values on each path: B_{t_i} and per-mark totals N_j(t_i),
/// i = 0..N.
struct DriverHistory {
    int P = 0, N = 0, d = 0, M = 0;
    std::vector<double> brownian;  // [p][i][d]
    std::vector<double> counts;    // [p][i][M]

    DriverHistory() = default;
    explicit DriverHistory(const ScenarioBatch& batch)
        : P(batch.paths()), N(batch.steps()), d(batch.brownian_dim()), M(batch.mark_count()),
          brownian(static_cast<std::size_t>(P) * (N + 1) * d, 0.0),
          counts(static_cast<std::size_t>(P) * (N + 1) * M, 0.0) {
        for (int p = 0; p < P; ++p)
            for (int i = 0; i < N; ++i) {
                for (int c = 0; c < d; ++c)
                    brownian[(static_cast<std::size_t>(p) * (N + 1) + i + 1) * d + c] =
                        brownian[(static_cast<std::size_t>(p) * (N + 1) + i) * d + c] +
                        batch.raw_dB()[(static_cast<std::size_t>(p) * N + i) * d + c];
                for (int j = 0; j < M; ++j)
                    counts[(static_cast<std::size_t>(p) * (N + 1) + i + 1) * M + j] =
                        counts[(static_cast<std::size_t>(p) * (N + 1) + i) * M + j] +
                        batch.raw_dN()[(static_cast<std::size_t>(p) * N + i) * M + j];
            }
    }

    const double* brownian_at(int p, int i) const { return brownian.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * d; }
    const double* counts_at(int p, int i) const { return counts.data() + (static_cast<std::size_t>(p) * (N + 1) + i) * M; }
};

/// Which driver coordinates join x in the regressors. They are needed only
/// when the terminal value loads on them (otherwise the system is Markov in x).
struct RegressorChoice {
    bool brownian = false;
    bool counts = false;

    static RegressorChoice for_spec(const ProblemSpec& spec) {
        if (spec.terminal.kind != TerminalKind::driver) return {};
        return {spec.terminal.uses_brownian, spec.terminal.uses_counts};
    }
    int extra(int d, int M) const { return (brownian ? d : 0) + (counts ? M : 0); }

    /// Writes the driver part of a regressor row starting at `out`.
    void fill(const DriverHistory& h, int p, int i, double* out) const {
        if (brownian)
            for (int c = 0; c < h.d; ++c) *out++ = h.brownian_at(p, i)[c];
        if (counts)
            for (int j = 0; j < h.M; ++j) *out++ = h.counts_at(p, i)[j];
    }
};

} // namespace fbsde
