#include "models.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

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
};

Solved solve(const AffineModelParams& p, int N, int P, double v = 0.0, PicardConfig cfg = {}) {
    Solved s{make_affine_problem(p), {}, {}, {}};
    s.batch = batch_for(s.spec, N, P);
    s.u = constant_control(s.batch, v);
    s.tr = solve_fbsde(s.spec, s.batch, s.u, cfg);
    return s;
}

AffineModelParams brownian_walk() {
    auto p = scalar_zero();
    p.g.offset[0] = 1.0;
    return p;
}

} // namespace

TEST(SimulateForward, ConstantSolution) {
    auto p = scalar_zero(1);
    p.a[0] = 1.5;
    const auto s = solve(p, 16, 64);
    for (int q = 0; q < 64; ++q)
        for (int i = 0; i <= 16; ++i) EXPECT_EQ(s.tr.x(q, i)[0], 1.5);
}

TEST(SimulateForward, ConstantDriftIsExactEuler) {
    auto p = scalar_zero();
    p.b.offset[0] = 2.0;
    const auto s = solve(p, 10, 8);
    const auto x = simulate_forward(s.spec, s.batch, s.u);
    for (int q = 0; q < 8; ++q)
        for (int i = 0; i <= 10; ++i) {
            EXPECT_DOUBLE_EQ(s.tr.x(q, i)[0], 0.2 * i);
            EXPECT_EQ(x[static_cast<std::size_t>(q) * 11 + i], s.tr.x(q, i)[0]);
        }
}

TEST(SimulateForward, BrownianMoments) {
    const int P = 1 << 14;
    const auto s = solve(brownian_walk(), 16, P);
    double m = 0.0, m2 = 0.0;
    for (int q = 0; q < P; ++q) {
        m += s.tr.x(q, 16)[0];
        m2 += s.tr.x(q, 16)[0] * s.tr.x(q, 16)[0];
    }
    m /= P;
    m2 /= P;
    EXPECT_LE(std::abs(m), 3.0 / std::sqrt(static_cast<double>(P)));
    EXPECT_NEAR(m2 - m * m, 1.0, 0.05);
}

TEST(SimulateForward, NonFiniteStateIsReported) {
    auto p = scalar_zero();
    p.b.linear(0, 0) = 1e300;
    p.a[0] = 1e10;
    ProblemSpec spec = make_affine_problem(p);
    const auto batch = batch_for(spec, 4, 4);
    EXPECT_THROW(simulate_forward(spec, batch, constant_control(batch, 0.0)), NonFiniteState);
}

TEST(CondExp, ConstantsAreMeasurable) {
    const auto s = solve(brownian_walk(), 8, 1024);
    const DriverHistory hist(s.batch);
    const Mat c = Mat::Constant(1024, 1, 2.5);
    for (auto f : {FiltrationSpec{}, FiltrationSpec{FiltrationKind::delayed, 0.25, 2}, FiltrationSpec{FiltrationKind::trivial}}) {
        const Mat out = condexp(c, 5, f, s.tr, hist);
        EXPECT_LT((out.array() - 2.5).abs().maxCoeff(), 1e-12);
    }
}

TEST(CondExp, LongDelayGivesTheMean) {
    const auto s = solve(brownian_walk(), 8, 1024);
    const DriverHistory hist(s.batch);
    Mat v(1024, 1);
    for (int q = 0; q < 1024; ++q) v(q, 0) = std::sin(s.tr.x(q, 6)[0]) + s.tr.x(q, 6)[0];
    const Mat out = condexp(v, 6, FiltrationSpec{FiltrationKind::delayed, 1.0, 2}, s.tr, hist);
    EXPECT_LT((out.array() - v.mean()).abs().maxCoeff(), 1e-12);
}

TEST(CondExp, RecoversRepresentableFunction) {
    const auto s = solve(brownian_walk(), 8, 1024);
    const DriverHistory hist(s.batch);
    Mat v(1024, 1);
    for (int q = 0; q < 1024; ++q) v(q, 0) = 2.0 * s.tr.x(q, 4)[0] + 1.0;
    EXPECT_LT((condexp(v, 4, FiltrationSpec{}, s.tr, hist, 0.0) - v).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((condexp(v, 4, FiltrationSpec{}, s.tr, hist) - v).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CondExp, TowerPropertyAtTrivialLevel) {
    const auto s = solve(brownian_walk(), 8, 2048);
    const DriverHistory hist(s.batch);
    Mat v(2048, 1);
    for (int q = 0; q < 2048; ++q) v(q, 0) = std::exp(0.3 * s.tr.x(q, 8)[0]);
    for (auto f : {FiltrationSpec{}, FiltrationSpec{FiltrationKind::delayed, 0.25, 2}}) {
        const Mat inner = condexp(v, 7, f, s.tr, hist);
        const Mat outer = condexp(inner, 7, FiltrationSpec{FiltrationKind::trivial}, s.tr, hist);
        EXPECT_LT(std::abs(outer.mean() - v.mean()), 1e-10);
    }
}

TEST(SolveFbsde, ZeroFixedPoint) {
    auto p = scalar_zero(1);
    p.b.offset[0] = 0.1;
    p.g.offset[0] = 0.3;
    p.sigma.offset[0] = 0.2;
    const auto s = solve(p, 16, 256);
    const auto x = simulate_forward(s.spec, s.batch, s.u);
    EXPECT_LE(s.tr.iterations(), 2);
    for (int q = 0; q < 256; ++q)
        for (int i = 0; i <= 16; ++i) {
            EXPECT_EQ(s.tr.x(q, i)[0], x[static_cast<std::size_t>(q) * 17 + i]);
            EXPECT_EQ(s.tr.y(q, i)[0], 0.0);
            if (i < 16) {
                EXPECT_EQ(s.tr.z(q, i)[0], 0.0);
                EXPECT_EQ(s.tr.r(q, i, 0)[0], 0.0);
            }
        }
}

TEST(SolveFbsde, ConstantDriver) {
    auto p = scalar_zero(1);
    p.g.offset[0] = 0.5;
    p.sigma.offset[0] = 0.5;
    p.f.offset[0] = 1.5;
    const auto s = solve(p, 20, 512);
    for (int q = 0; q < 512; q += 17)
        for (int i = 0; i <= 20; ++i) {
            EXPECT_NEAR(s.tr.y(q, i)[0], 1.5 * (1.0 - i / 20.0), 1e-12);
            if (i < 20) {
                EXPECT_LT(std::abs(s.tr.z(q, i)[0]), 1e-12);
                EXPECT_LT(std::abs(s.tr.r(q, i, 0)[0]), 1e-12);
            }
        }
}

TEST(SolveFbsde, TerminalValueIsPinned) {
    auto p = scalar_zero(1);
    p.g.offset[0] = 0.4;
    p.f.linear(0, 0) = 0.3;
    p.xi_offset[0] = 0.7;
    p.xi_brownian(0, 0) = 0.2;
    p.xi_counts(0, 0) = -0.1;
    const auto s = solve(p, 12, 300);
    for (int q = 0; q < 300; ++q) {
        const double xi = 0.7 + 0.2 * s.batch.brownian_at(q, 12)[0] - 0.1 * s.batch.counts_at(q, 12)[0];
        EXPECT_NEAR(s.tr.y(q, 12)[0], xi, 1e-13);
    }
}

TEST(SolveFbsde, DivergenceIsSurfaced) {
    auto p = scalar_zero();
    p.T = 5.0;
    p.b.linear(0, 1) = 10.0;
    p.f.linear(0, 0) = 10.0;
    p.g.offset[0] = 0.2;
    p.a[0] = 1.0;
    ProblemSpec spec = make_affine_problem(p);
    const auto batch = batch_for(spec, 32, 256);
    EXPECT_THROW(solve_fbsde(spec, batch, constant_control(batch, 0.0)), PicardDiverged);
}

TEST(SolveFbsde, WorkerCountIsBitIdentical) {
    const auto spec = nonlinear_coupled_problem();
    const auto batch = batch_for(spec, 16, 1500);
    const auto u = constant_control(batch, 0.2);
    PicardConfig one, four;
    four.workers = 4;
    const auto a = solve_fbsde(spec, batch, u, one), b = solve_fbsde(spec, batch, u, four);
    EXPECT_EQ(a.store.forward, b.store.forward);
    EXPECT_EQ(a.store.y, b.store.y);
    EXPECT_EQ(a.store.bvals, b.store.bvals);
    EXPECT_EQ(a.residuals(), b.residuals());
}

TEST(SolveFbsde, ResidualsDecreaseAtTheEnd) {
    for (const auto& name : builtin_model_names()) {
        const auto spec = make_affine_problem(builtin_model(name));
        const auto batch = batch_for(spec, 32, 1024);
        const auto tr = solve_fbsde(spec, batch, constant_control(batch, 0.2));
        const auto& r = tr.residuals();
        ASSERT_TRUE(tr.store.converged) << name;
        for (std::size_t i = r.size() >= 3 ? r.size() - 3 : 0; i + 1 < r.size(); ++i) EXPECT_LT(r[i + 1], r[i]) << name;
    }
}

TEST(SolveFbsde, NoJumpModelHasNoJumpArrays) {
    const auto spec = make_affine_problem(no_jump_params());
    const auto batch = batch_for(spec, 8, 64);
    const auto tr = solve_fbsde(spec, batch, constant_control(batch, 0.1));
    EXPECT_EQ(tr.layout.marks, 0);
    EXPECT_EQ(batch.raw_dN().size(), 0u);
    const Linearization lin(spec, tr, constant_control(batch, 0.1));
    const auto adj = solve_adjoint(spec, batch, constant_control(batch, 0.1), tr, lin);
    EXPECT_EQ(adj.multipliers(0, 0).beta.size(), 0);
}

TEST(SolveFbsde, PureForwardReduction) {
    const auto spec = make_affine_problem(pure_forward_params());
    const auto batch = batch_for(spec, 16, 512);
    const auto tr = solve_fbsde(spec, batch, constant_control(batch, 0.3));
    for (int q = 0; q < 512; ++q)
        for (int i = 0; i < 16; ++i) {
            EXPECT_LE(std::abs(tr.y(q, i)[0]), 1e-8);
            EXPECT_LE(std::abs(tr.z(q, i)[0]), 1e-8);
            EXPECT_LE(std::abs(tr.r(q, i, 0)[0]), 1e-8);
        }
}

TEST(SolveAdjoint, ZeroDataGivesZeroAdjoint) {
    auto p = scalar_zero(1);
    p.b.offset[0] = 0.2;
    p.g.offset[0] = 0.3;
    p.sigma.offset[0] = 0.1;
    const auto s = solve(p, 8, 128);
    const Linearization lin(s.spec, s.tr, s.u);
    const auto adj = solve_adjoint(s.spec, s.batch, s.u, s.tr, lin);
    for (int q = 0; q < 128; ++q)
        for (int i = 0; i < 8; ++i) {
            const auto mu = adj.multipliers(q, i);
            EXPECT_EQ(mu.p.norm() + mu.q.norm() + mu.beta.norm() + mu.k.norm(), 0.0);
        }
}

TEST(SolveAdjoint, LinearTerminalCostGivesUnitP) {
    auto p = scalar_zero(1);
    p.g.offset[0] = 0.3;
    p.sigma.offset[0] = 0.1;
    p.phi.lin[0] = 1.0;
    const auto s = solve(p, 8, 128);
    const Linearization lin(s.spec, s.tr, s.u);
    const auto adj = solve_adjoint(s.spec, s.batch, s.u, s.tr, lin);
    for (int q = 0; q < 128; ++q)
        for (int i = 0; i <= 8; ++i) {
            EXPECT_NEAR(adj.p(q, i)[0], 1.0, 1e-12);
            if (i < 8) {
                EXPECT_LT(std::abs(adj.q(q, i)[0]), 1e-12);
                EXPECT_LT(std::abs(adj.beta(q, i, 0)[0]), 1e-12);
            }
        }
}

TEST(SolveAdjoint, LinearInitialCostGivesConstantK) {
    auto p = scalar_zero(1);
    p.g.offset[0] = 0.3;
    p.h.lin[0] = 1.0;
    const auto s = solve(p, 8, 128);
    const Linearization lin(s.spec, s.tr, s.u);
    const auto adj = solve_adjoint(s.spec, s.batch, s.u, s.tr, lin);
    for (int q = 0; q < 128; ++q)
        for (int i = 0; i <= 8; ++i) EXPECT_EQ(adj.k(q, i)[0], -1.0);
}

TEST(SolveVariational, ZeroDirection) {
    const auto spec = nonlinear_coupled_problem();
    const auto batch = batch_for(spec, 16, 512);
    const auto u = constant_control(batch, 0.2);
    const auto tr = solve_fbsde(spec, batch, u);
    const auto var = solve_variational(spec, batch, u, ControlProcess(512, 16, 1), tr);
    for (int q = 0; q < 512; ++q)
        for (int i = 0; i <= 16; ++i) {
            EXPECT_EQ(var.X1(q, i)[0], 0.0);
            EXPECT_EQ(var.Y1(q, i)[0], 0.0);
        }
}

TEST(SolveVariational, LinearInDirection) {
    const auto spec = nonlinear_coupled_problem();
    const auto batch = batch_for(spec, 16, 512);
    const auto u = constant_control(batch, 0.2);
    const auto tr = solve_fbsde(spec, batch, u);
    ControlProcess th(512, 16, 1), th2(512, 16, 1);
    for (int q = 0; q < 512; ++q)
        for (int i = 0; i < 16; ++i) {
            th.at(q, i)[0] = 0.3 + 0.2 * std::tanh(tr.x(q, i)[0]);
            th2.at(q, i)[0] = 2.0 * th.at(q, i)[0];
        }
    const auto a = solve_variational(spec, batch, u, th, tr), b = solve_variational(spec, batch, u, th2, tr);
    for (std::size_t e = 0; e < a.store.forward.size(); ++e) EXPECT_EQ(b.store.forward[e], 2.0 * a.store.forward[e]);
    for (std::size_t e = 0; e < a.store.bvals.size(); ++e) EXPECT_EQ(b.store.bvals[e], 2.0 * a.store.bvals[e]);
}

TEST(SolveVariational, MatchesDifferenceQuotient) {
    const auto spec = nonlinear_coupled_problem();
    const int P = 1024, N = 32;
    const auto batch = batch_for(spec, N, P);
    const auto u = constant_control(batch, 0.2);
    PicardConfig cfg;
    cfg.tolerance = 1e-10;
    cfg.max_iterations = 200;
    // The quotient differentiates the fitted surrogates themselves, so the gap
    // is the basis truncation error; cubic features keep it well inside 1e-2.
    cfg.regression.degree = 3;
    const auto tr = solve_fbsde(spec, batch, u, cfg);
    ControlProcess th(P, N, 1);
    for (int q = 0; q < P; ++q)
        for (int i = 0; i < N; ++i) th.at(q, i)[0] = 0.5 + 0.3 * std::tanh(tr.x(q, i)[0]);
    const auto var = solve_variational(spec, batch, u, th, tr, cfg);
    const double y = 1e-4;
    const auto up = solve_fbsde(spec, batch, u + th.scaled(y), cfg);
    double worst = 0.0;
    for (int q = 0; q < P; ++q)
        for (int i = 0; i <= N; ++i)
            worst = std::max(worst, std::abs((up.x(q, i)[0] - tr.x(q, i)[0]) / y - var.X1(q, i)[0]));
    EXPECT_LE(worst, 1e-2);
}

TEST(EstimateCost, UnitRunningCost) {
    auto p = scalar_zero();
    p.l.constant = 1.0;
    const auto s = solve(p, 16, 64);
    const auto c = estimate_cost(s.spec, s.batch, s.u, s.tr);
    EXPECT_DOUBLE_EQ(c.value, 1.0);
    EXPECT_EQ(c.se, 0.0);
    EXPECT_DOUBLE_EQ(c.admissibility, 1.0);
}

TEST(EstimateCost, TerminalCostOfDeterministicState) {
    auto p = scalar_zero();
    p.b.offset[0] = 2.0;
    p.phi.lin[0] = 1.0;
    const auto s = solve(p, 16, 64);
    EXPECT_DOUBLE_EQ(estimate_cost(s.spec, s.batch, s.u, s.tr).value, 2.0);
}

TEST(EstimateCost, InitialCostOfConstantBackward) {
    auto p = scalar_zero();
    p.g.offset[0] = 1.0;
    p.xi_offset[0] = 0.7;
    p.h.quad(0, 0) = 2.0;
    const auto s = solve(p, 16, 256);
    const auto c = estimate_cost(s.spec, s.batch, s.u, s.tr);
    EXPECT_NEAR(c.y0, 0.7, 1e-14);
    EXPECT_NEAR(c.value, 0.49, 1e-13);
}

TEST(TrajectoryCsv, HeaderAndPrecision) {
    auto p = scalar_zero(1);
    p.b.offset[0] = 1.0 / 3.0;
    const auto s = solve(p, 2, 1);
    std::ostringstream os;
    write_trajectory_csv(os, s.tr);
    std::istringstream is(os.str());
    std::string header, row;
    std::getline(is, header);
    EXPECT_EQ(header, "path,step,t,x_1,y_1,z_1_1,r_1_1");
    std::getline(is, row);
    std::getline(is, row);
    EXPECT_EQ(row.substr(0, row.find(',', 8)), "0,1,0.5,0.16666666666666666");
}
