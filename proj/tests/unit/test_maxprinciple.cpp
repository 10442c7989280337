#include "models.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace fbsde;
using fbsde::test::batch_for;
using fbsde::test::constant_control;
using fbsde::test::scalar_zero;

namespace {

struct Solved {
    ProblemSpec spec;
    ScenarioBatch batch;
    ControlProcess u;
    Trajectory tr;
    Linearization lin;
    AdjointTrajectory adj;
};

Solved solve_all(const ProblemSpec& spec, int N, int P, const std::function<ControlProcess(const ScenarioBatch&)>& ctl,
                 PicardConfig cfg = {}) {
    Solved s{spec, batch_for(spec, N, P), {}, {}, {}, {}};
    s.u = ctl(s.batch);
    s.tr = solve_fbsde(s.spec, s.batch, s.u, cfg);
    s.lin = Linearization(s.spec, s.tr, s.u);
    s.adj = solve_adjoint(s.spec, s.batch, s.u, s.tr, s.lin, cfg);
    return s;
}

Solved pure_control(double v, int N = 16, int P = 256) {
    return solve_all(make_affine_problem(test::pure_control_cost()), N, P,
                     [v](const ScenarioBatch& b) { return constant_control(b, v); });
}

ControlProcess constant_direction(const ControlProcess& u, double c) {
    return ControlProcess::constant(u.P, u.N, Vec::Constant(u.k, c), u.filtration);
}

IbpProcess scalar_process(double b, double g, double s) {
    IbpProcess pr;
    pr.y0 = Vec::Zero(1);
    pr.b = [b](double, const Vec&, Vec& out) { out = Vec::Constant(1, b); };
    pr.g = [g](double, const Vec&, Vec& out) { out = Vec::Constant(1, g); };
    pr.sigma = [s](double, const Vec&, std::size_t, Vec& out) { out = Vec::Constant(1, s); };
    return pr;
}

ScenarioBatch ibp_batch(int N, int P, MarkSpace marks = {}) { return generate(TimeGrid(1.0, N), marks, P, 1, RngSpec{77}); }

} // namespace

TEST(Direction, IndicatorAlignsToGrid) {
    const auto th = DirectionProcess::indicator(3, 10, 2, 0.1, 1, 0.25, 0.3, {1.0, -2.0, 0.5});
    for (int i = 0; i < 10; ++i) {
        EXPECT_EQ(th.at(1, i)[0], 0.0);
        EXPECT_EQ(th.at(1, i)[1], (i >= 3 && i < 6) ? -2.0 : 0.0) << i;
    }
    EXPECT_THROW(DirectionProcess::indicator(3, 10, 2, 0.1, 2, 0.0, 0.1, {1, 1, 1}), IndexOutOfRange);
}

TEST(Direction, AdmissibleRadius) {
    const auto set = ControlSet::box(Vec::Constant(1, -1.0), Vec::Constant(1, 1.0));
    const ControlProcess u = ControlProcess::constant(4, 5, Vec::Constant(1, 0.5));
    const auto d = DirectionProcess::make(ControlProcess::constant(4, 5, Vec::Constant(1, 2.0)), u, set);
    EXPECT_EQ(d.bound, 2.0);
    EXPECT_NEAR(d.delta_adm, 0.25, 1e-12);
}

TEST(GateauxFd, ZeroDirection) {
    const auto s = pure_control(0.0);
    const auto e = gateaux_fd(s.spec, s.batch, s.u, constant_direction(s.u, 0.0), 1e-3);
    EXPECT_EQ(e.value, 0.0);
    EXPECT_EQ(e.se, 0.0);
}

TEST(GateauxFd, PureControlCost) {
    const auto s = pure_control(0.0);
    EXPECT_NEAR(gateaux_fd(s.spec, s.batch, s.u, constant_direction(s.u, 1.0), 1e-3).value, -0.6, 1e-4);
    EXPECT_THROW(gateaux_fd(s.spec, s.batch, s.u, constant_direction(s.u, 1.0), 2.0), InvalidSpec);
}

TEST(GateauxVariational, ZeroDirectionAndLinearity) {
    const auto s = solve_all(nonlinear_coupled_problem(), 16, 1024, [](const ScenarioBatch& b) { return constant_control(b, 0.2); });
    EXPECT_EQ(gateaux_variational(s.spec, s.batch, s.u, constant_direction(s.u, 0.0), s.tr, s.lin).value, 0.0);
    ControlProcess th(s.u.P, s.u.N, 1);
    for (int p = 0; p < th.P; ++p)
        for (int i = 0; i < th.N; ++i) th.at(p, i)[0] = std::sin(s.tr.x(p, i)[0] + i);
    const auto a = gateaux_variational(s.spec, s.batch, s.u, th, s.tr, s.lin);
    const auto b = gateaux_variational(s.spec, s.batch, s.u, th.scaled(2.0), s.tr, s.lin);
    EXPECT_EQ(b.value, 2.0 * a.value);
}

TEST(GateauxVariational, PureControlCost) {
    const auto s = pure_control(0.0);
    EXPECT_NEAR(gateaux_variational(s.spec, s.batch, s.u, constant_direction(s.u, 1.0), s.tr, s.lin).value, -0.6, 1e-12);
}

TEST(GateauxHamiltonian, ZeroDirectionAndControlCost) {
    const auto s = pure_control(0.0);
    EXPECT_EQ(gateaux_hamiltonian(constant_direction(s.u, 0.0), s.lin, s.adj).value, 0.0);
    const auto e = gateaux_hamiltonian(constant_direction(s.u, 1.0), s.lin, s.adj);
    EXPECT_NEAR(e.value, -0.6, 1e-12);
    EXPECT_LT(e.se, 1e-12);
}

TEST(GateauxHamiltonian, LinearInDirection) {
    const auto s = solve_all(nonlinear_coupled_problem(), 16, 1024, [](const ScenarioBatch& b) { return constant_control(b, 0.2); });
    const auto hv = control_gradient(s.lin, s.adj);
    ControlProcess t1(s.u.P, s.u.N, 1), t2(s.u.P, s.u.N, 1);
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> unit(-0.5, 0.5);
    for (auto& v : t1.values) v = unit(gen);
    for (auto& v : t2.values) v = unit(gen);
    const double a = 1.7;
    const double lhs = gateaux_hamiltonian(t1.scaled(a) + t2, hv, s.tr.dt).value;
    const double rhs = a * gateaux_hamiltonian(t1, hv, s.tr.dt).value + gateaux_hamiltonian(t2, hv, s.tr.dt).value;
    EXPECT_NEAR(lhs, rhs, 1e-13);
}

TEST(Gateaux, ThreeEstimatorsAgreeOnCoupledModel) {
    PicardConfig cfg;
    cfg.tolerance = 1e-9;
    cfg.max_iterations = 200;
    const auto s = solve_all(nonlinear_coupled_problem(), 32, 4096,
                             [](const ScenarioBatch& b) { return constant_control(b, 0.2); }, cfg);
    const auto th = DirectionProcess::indicator(4096, 32, 1, s.tr.dt, 0, 0.25, 0.5, std::vector<double>(4096, 0.4));
    const auto fd = gateaux_fd(s.spec, s.batch, s.u, th, 1e-4, cfg);
    const auto va = gateaux_variational(s.spec, s.batch, s.u, th, s.tr, s.lin, cfg);
    const auto ha = gateaux_hamiltonian(th, s.lin, s.adj);
    EXPECT_LE(std::abs(fd.value - va.value), 3.0 * pooled_se(fd.se, va.se) + 1e-3);
    EXPECT_LE(std::abs(fd.value - ha.value), 3.0 * pooled_se(fd.se, ha.se) + 1e-3);
    EXPECT_LE(std::abs(va.value - ha.value), 3.0 * pooled_se(va.se, ha.se) + 1e-3);
}

TEST(Stationarity, PureControlCost) {
    const auto at = pure_control(0.3);
    EXPECT_LE(stationarity_residual(at.spec, at.batch, at.tr, at.lin, at.adj, FiltrationSpec{}).norm, 1e-8);
    const auto off = pure_control(0.0);
    EXPECT_NEAR(stationarity_residual(off.spec, off.batch, off.tr, off.lin, off.adj, FiltrationSpec{}).norm, 0.6, 1e-10);
}

TEST(Stationarity, LqOptimalFeedback) {
    const LqParams q;
    const auto s = solve_all(lq_problem(q), 32, 4096, [&](const ScenarioBatch& b) {
        return lq_feedback_control(q, lq_discrete_solution(q, 32), b);
    });
    const auto rep = stationarity_residual(s.spec, s.batch, s.tr, s.lin, s.adj, FiltrationSpec{});
    const auto err = stationarity_error(s.spec, s.batch, s.u, s.tr, FiltrationSpec{}, PicardConfig{});
    EXPECT_LE(rep.norm, 3.0 * err.max_se + 1e-4) << "se " << err.max_se;
}

TEST(Stationarity, InvariantUnderPathRelabeling) {
    const auto s = solve_all(nonlinear_coupled_problem(), 16, 1024, [](const ScenarioBatch& b) { return constant_control(b, 0.1); });
    std::vector<int> perm(1024);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(5));
    const ScenarioBatch pb = s.batch.select_paths(perm);
    const ControlProcess pu = s.u.select_paths(perm);
    const Trajectory ptr = solve_fbsde(s.spec, pb, pu);
    const Linearization plin(s.spec, ptr, pu);
    const auto padj = solve_adjoint(s.spec, pb, pu, ptr, plin);
    const double a = stationarity_residual(s.spec, s.batch, s.tr, s.lin, s.adj, FiltrationSpec{}).norm;
    const double b = stationarity_residual(s.spec, pb, ptr, plin, padj, FiltrationSpec{}).norm;
    EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::abs(a)));
}

TEST(VerifyIbp, DeterministicDrift) {
    const auto pr = scalar_process(1.0, 0.0, 0.0);
    const auto r1 = verify_ibp(pr, pr, ibp_batch(50, 4));
    const auto r2 = verify_ibp(pr, pr, ibp_batch(100, 4));
    EXPECT_NEAR(r1.lhs, 1.0, 1e-12);
    EXPECT_NEAR(r1.difference, 1.0 / 50, 1e-12);
    EXPECT_NEAR(r1.difference / r2.difference, 2.0, 0.4);
}

TEST(VerifyIbp, BrownianIsometry) {
    const auto pr = scalar_process(0.0, 1.0, 0.0);
    const auto r = verify_ibp(pr, pr, ibp_batch(32, 1 << 14));
    EXPECT_LE(std::abs(r.difference), 3.0 * r.se);
    EXPECT_NEAR(r.rhs, 1.0, 0.05);
    EXPECT_NEAR(r.lhs, 1.0, 0.05);
}

TEST(VerifyIbp, CompensatedJumps) {
    const auto pr = scalar_process(0.0, 0.0, 1.0);
    const auto r = verify_ibp(pr, pr, ibp_batch(32, 1 << 14, MarkSpace{{1.0}, {2.0}}));
    EXPECT_LE(std::abs(r.difference), 3.0 * r.se);
    EXPECT_NEAR(r.lhs, 2.0, 0.15);
    EXPECT_THROW(verify_ibp(pr, IbpProcess{Vec::Zero(2), pr.b, pr.g, pr.sigma}, ibp_batch(4, 4)), InvalidSpec);
}

TEST(Moments, ZeroModel) {
    const auto s = solve_all(make_affine_problem(scalar_zero(1)), 8, 64, [](const ScenarioBatch& b) { return constant_control(b, 0.0); });
    for (const auto& m : moment_diagnostics(s.spec, s.tr, s.adj, s.lin, s.u)) {
        EXPECT_EQ(m.value, 0.0) << m.name;
        EXPECT_FALSE(m.warning);
    }
}

TEST(Moments, UnitDiffusionAndUnitAdjoint) {
    auto p = scalar_zero();
    p.g.offset[0] = 1.0;
    p.phi.lin[0] = 1.0;
    const auto s = solve_all(make_affine_problem(p), 8, 64, [](const ScenarioBatch& b) { return constant_control(b, 0.0); });
    const auto table = moment_diagnostics(s.spec, s.tr, s.adj, s.lin, s.u);
    EXPECT_EQ(table[0].name, "p_ggT_p");
    EXPECT_NEAR(table[0].value, 1.0, 1e-12);
    EXPECT_TRUE(table[1].skipped);
}

TEST(Moments, LqBenchmarkIsFinite) {
    const LqParams q;
    const auto s = solve_all(lq_problem(q), 32, 1024, [&](const ScenarioBatch& b) {
        return lq_feedback_control(q, lq_discrete_solution(q, 32), b);
    });
    for (const auto& m : moment_diagnostics(s.spec, s.tr, s.adj, s.lin, s.u)) {
        EXPECT_TRUE(std::isfinite(m.value)) << m.name;
        EXPECT_FALSE(m.warning) << m.name;
        EXPECT_FALSE(m.skipped) << m.name;
    }
}
