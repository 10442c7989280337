#include "models.hpp"

#include <gtest/gtest.h>

using namespace fbsde;

namespace {

struct Geometric {
    double mu, vol, jump;
};

IbpProcess geometric(const Geometric& g, double y0) {
    IbpProcess pr;
    pr.y0 = Vec::Constant(1, y0);
    pr.b = [g](double, const Vec& y, Vec& out) { out = g.mu * y; };
    pr.g = [g](double, const Vec& y, Vec& out) { out = g.vol * y; };
    pr.sigma = [g](double, const Vec& y, std::size_t, Vec& out) { out = g.jump * y; };
    return pr;
}

/// E[X_N Y_N] for two Euler products driven by the same increments:
/// each step multiplies the mean by (1 + a dt)(1 + b dt) + (va vb + pi ja jb) dt.
double product_moment(const Geometric& a, const Geometric& b, double x0, double y0, double T, int N, double pi) {
    const double dt = T / N;
    const double f = (1.0 + a.mu * dt) * (1.0 + b.mu * dt) + (a.vol * b.vol + pi * a.jump * b.jump) * dt;
    return x0 * y0 * std::pow(f, N);
}

/// Sample standard error of X_N Y_N on the batch.
double product_se(const Geometric& a, const Geometric& b, double x0, double y0, const ScenarioBatch& batch) {
    const int P = batch.paths(), N = batch.steps(), M = batch.mark_count();
    const double dt = batch.grid().dt();
    double s = 0.0, s2 = 0.0;
    for (int p = 0; p < P; ++p) {
        double x = x0, y = y0;
        for (int i = 0; i < N; ++i) {
            double nx = a.mu * dt + a.vol * batch.dB(p, i, 0), ny = b.mu * dt + b.vol * batch.dB(p, i, 0);
            for (int j = 0; j < M; ++j) {
                nx += a.jump * batch.compensated(p, i, j);
                ny += b.jump * batch.compensated(p, i, j);
            }
            x *= 1.0 + nx;
            y *= 1.0 + ny;
        }
        s += x * y;
        s2 += x * y * x * y;
    }
    const double mean = s / P;
    return std::sqrt((s2 / P - mean * mean) / (P - 1));
}

} // namespace

TEST(IbpOracle, BrownianProductMoment) {
    const Geometric a{0.1, 0.2, 0.0}, b{-0.05, 0.3, 0.0};
    const auto batch = generate(TimeGrid(1.0, 32), MarkSpace{}, 1 << 14, 1, RngSpec{5});
    const auto rep = verify_ibp(geometric(a, 1.0), geometric(b, 2.0), batch);
    const double exact = product_moment(a, b, 1.0, 2.0, 1.0, 32, 0.0);
    const double se = product_se(a, b, 1.0, 2.0, batch);
    EXPECT_NEAR(rep.lhs, exact, 4.0 * se) << "se " << se;
    EXPECT_NEAR(rep.difference, 0.0, 3.0 * rep.se);
    EXPECT_NEAR(rep.lhs - rep.rhs, rep.difference, 1e-12);
}

TEST(IbpOracle, JumpProductMoment) {
    const Geometric a{0.1, 0.2, 0.3}, b{0.0, -0.1, 0.2};
    const MarkSpace marks{{1.0}, {2.0}};
    const auto batch = generate(TimeGrid(1.0, 32), marks, 1 << 14, 1, RngSpec{6});
    const auto rep = verify_ibp(geometric(a, 1.0), geometric(b, 1.0), batch);
    const double exact = product_moment(a, b, 1.0, 1.0, 1.0, 32, 2.0);
    const double se = product_se(a, b, 1.0, 1.0, batch);
    EXPECT_NEAR(rep.lhs, exact, 4.0 * se) << "se " << se;
    EXPECT_NEAR(rep.difference, 0.0, 3.0 * rep.se);
}

TEST(IbpOracle, DeterministicProductIsExactUpToCrossTerm) {
    // X = 1 + t, Y = 1 + 2t on N steps: the cross term sum dX dY is 2 T^2 / N.
    IbpProcess x, y;
    x.y0 = y.y0 = Vec::Ones(1);
    x.b = [](double, const Vec&, Vec& out) { out = Vec::Ones(1); };
    y.b = [](double, const Vec&, Vec& out) { out = Vec::Constant(1, 2.0); };
    x.g = y.g = [](double, const Vec&, Vec& out) { out = Vec::Zero(1); };
    x.sigma = y.sigma = [](double, const Vec&, std::size_t, Vec& out) { out = Vec::Zero(1); };
    for (int N : {10, 40}) {
        const auto batch = generate(TimeGrid(1.0, N), MarkSpace{}, 4, 1, RngSpec{1});
        const auto rep = verify_ibp(x, y, batch);
        EXPECT_NEAR(rep.lhs, 6.0, 1e-12);
        EXPECT_NEAR(rep.difference, 2.0 / N, 1e-12);
        EXPECT_EQ(rep.se, 0.0);
    }
}
