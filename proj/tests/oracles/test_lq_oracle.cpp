#include "models.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <fstream>

using namespace fbsde;
using fbsde::test::batch_for;

namespace {

// Reference values from a 30-digit evaluation of the closed-form Riccati
// solution and of the Euler dynamic programme at the default LQ parameters.
constexpr double kContinuousCost = 2.2362620443517525;
constexpr double kP0 = 2.0297813414696178;
constexpr double kPHalf = 1.5601360981694935;
constexpr double kDiscreteCost32 = 2.2382166953047212;
constexpr double kDiscreteCost64 = 2.2372817886910161;
constexpr double kAlpha0At64 = -1.0041500935286853;
constexpr double kBeta0At64 = -0.45915980665237474;
constexpr double kAlphaLastAt64 = -0.49883268482490272;

nlohmann::json fixture() {
    std::ifstream is(std::string(FBSDE_FIXTURE_DIR) + "/lq_oracle.json");
    return nlohmann::json::parse(is);
}

/// Scalar Riccati in time to maturity tau, dP/dtau = -alpha P^2 + kappa P + Q,
/// P(0) = G, written through its two equilibria.
struct ClosedFormRiccati {
    double alpha, p1, p2, K;

    explicit ClosedFormRiccati(const LqParams& q) {
        const double lam = q.jumps ? q.intensity : 0.0;
        alpha = q.B * q.B / q.R;
        const double kappa = 2.0 * q.A + q.C * q.C + lam * q.E * q.E;
        const double disc = std::sqrt(kappa * kappa + 4.0 * alpha * q.Q);
        p1 = (kappa + disc) / (2.0 * alpha);
        p2 = (kappa - disc) / (2.0 * alpha);
        K = (q.G - p1) / (q.G - p2);
    }

    double operator()(double tau) const {
        const double e = K * std::exp(-alpha * (p1 - p2) * tau);
        return (p1 - p2 * e) / (1.0 - e);
    }
};

/// Cost 0.5 P a^2 + S a + s with the linear and constant parts integrated by
/// RK4 against the closed-form P.
double closed_form_cost(const LqParams& q, int steps) {
    const ClosedFormRiccati P(q);
    const double lam = q.jumps ? q.intensity : 0.0;
    const double src = q.b0 + q.C * q.c0 + lam * q.E * q.e0, var0 = q.c0 * q.c0 + lam * q.e0 * q.e0;
    auto rhs = [&](double tau, double S, double, double& dS, double& ds) {
        const double p = P(tau);
        dS = (q.A - P.alpha * p) * S + src * p + q.f1;
        ds = q.b0 * S + 0.5 * var0 * p - 0.5 * P.alpha * S * S + q.f0;
    };
    double S = 0.0, s = 0.0;
    const double h = q.T / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = k * h;
        double k1S, k1s, k2S, k2s, k3S, k3s, k4S, k4s;
        rhs(t, S, s, k1S, k1s);
        rhs(t + 0.5 * h, S + 0.5 * h * k1S, s + 0.5 * h * k1s, k2S, k2s);
        rhs(t + 0.5 * h, S + 0.5 * h * k2S, s + 0.5 * h * k2s, k3S, k3s);
        rhs(t + h, S + h * k3S, s + h * k3s, k4S, k4s);
        S += h / 6.0 * (k1S + 2.0 * k2S + 2.0 * k3S + k4S);
        s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
    }
    return 0.5 * P(q.T) * q.a * q.a + S * q.a + s;
}

/// Euler dynamic programme over quadratic forms in (x, v, 1): V_i(x) = [x 1] M [x 1]^T.
struct MatrixDp {
    std::vector<double> alpha, beta;
    double cost = 0.0;
};

MatrixDp matrix_dp(const LqParams& q, int N) {
    using M2 = Eigen::Matrix2d;
    using M3 = Eigen::Matrix3d;
    const double dt = q.T / N;
    const double lam = q.jumps ? q.intensity : 0.0;
    M2 M;
    M << 0.5 * q.G, 0.0, 0.0, 0.0;
    Eigen::Matrix<double, 2, 3> F;
    F << 1.0 + q.A * dt, q.B * dt, q.b0 * dt, 0.0, 0.0, 1.0;
    M3 noise;
    const double vx = (q.C * q.C + lam * q.E * q.E) * dt, v1 = (q.C * q.c0 + lam * q.E * q.e0) * dt,
                 v0 = (q.c0 * q.c0 + lam * q.e0 * q.e0) * dt;
    noise << vx, 0.0, v1, 0.0, 0.0, 0.0, v1, 0.0, v0;
    M3 running;
    running << 0.5 * q.Q * dt, 0.0, 0.5 * q.f1 * dt, 0.0, 0.5 * q.R * dt, 0.0, 0.5 * q.f1 * dt, 0.0, q.f0 * dt;
    MatrixDp out;
    out.alpha.resize(static_cast<std::size_t>(N));
    out.beta.resize(static_cast<std::size_t>(N));
    for (int i = N - 1; i >= 0; --i) {
        const M3 H = F.transpose() * M * F + M(0, 0) * noise + running;
        const double g1 = -H(1, 0) / H(1, 1), g0 = -H(1, 2) / H(1, 1);
        Eigen::Matrix<double, 3, 2> S;
        S << 1.0, 0.0, g1, g0, 0.0, 1.0;
        M = S.transpose() * H * S;
        out.alpha[static_cast<std::size_t>(i)] = g1;
        out.beta[static_cast<std::size_t>(i)] = g0;
    }
    out.cost = M(0, 0) * q.a * q.a + 2.0 * M(0, 1) * q.a + M(1, 1);
    return out;
}

} // namespace

TEST(LqOracle, ClosedFormRiccatiMatchesReference) {
    const LqParams q;
    const ClosedFormRiccati P(q);
    EXPECT_NEAR(P(q.T), kP0, 1e-14);
    EXPECT_NEAR(P(0.5), kPHalf, 1e-14);
    EXPECT_DOUBLE_EQ(P(0.0), q.G);
    EXPECT_NEAR(closed_form_cost(q, 4096), kContinuousCost, 1e-12);
}

TEST(LqOracle, FixtureAgreesWithClosedForm) {
    const auto fx = fixture();
    const LqParams q;
    const ClosedFormRiccati P(q);
    EXPECT_NEAR(fx["cost"].get<double>(), kContinuousCost, 1e-12);
    const auto& grid = fx["P"];
    const int n = static_cast<int>(grid.size()) - 1;
    for (int i = 0; i <= n; ++i) EXPECT_NEAR(grid[static_cast<std::size_t>(i)].get<double>(), P(q.T * (n - i) / n), 1e-12) << i;
}

TEST(LqOracle, DiscreteProgrammeMatchesMatrixForm) {
    const LqParams q;
    for (int N : {32, 64}) {
        const auto lib = lq_discrete_solution(q, N);
        const auto ref = matrix_dp(q, N);
        EXPECT_NEAR(lib.cost, ref.cost, 1e-13);
        for (int i = 0; i < N; ++i) {
            EXPECT_NEAR(lib.alpha[static_cast<std::size_t>(i)], ref.alpha[static_cast<std::size_t>(i)], 1e-13);
            EXPECT_NEAR(lib.beta[static_cast<std::size_t>(i)], ref.beta[static_cast<std::size_t>(i)], 1e-13);
        }
    }
    EXPECT_NEAR(matrix_dp(q, 32).cost, kDiscreteCost32, 1e-13);
    const auto at64 = lq_discrete_solution(q, 64);
    EXPECT_NEAR(at64.cost, kDiscreteCost64, 1e-13);
    EXPECT_NEAR(at64.alpha.front(), kAlpha0At64, 1e-13);
    EXPECT_NEAR(at64.beta.front(), kBeta0At64, 1e-13);
    EXPECT_NEAR(at64.alpha.back(), kAlphaLastAt64, 1e-13);
}

TEST(LqOracle, DiscreteCostConvergesAtFirstOrder) {
    const LqParams q;
    const double e1 = lq_discrete_solution(q, 256).cost - kContinuousCost;
    const double e2 = lq_discrete_solution(q, 512).cost - kContinuousCost;
    EXPECT_GT(e1, 0.0);
    EXPECT_NEAR(e1 / e2, 2.0, 0.05);
    EXPECT_NEAR(2.0 * lq_discrete_solution(q, 2048).cost - lq_discrete_solution(q, 1024).cost, kContinuousCost, 1e-6);
}

TEST(LqOracle, SimulatedCostOfOptimalFeedback) {
    const LqParams q;
    const auto spec = lq_problem(q);
    const int N = 32;
    const auto batch = batch_for(spec, N, 1 << 14);
    const auto sol = lq_discrete_solution(q, N);
    const auto u = lq_feedback_control(q, sol, batch);
    const auto tr = solve_fbsde(spec, batch, u);
    for (int p = 0; p < batch.paths(); p += 97)
        for (int i = 0; i < N; ++i) {
            const double v = sol.alpha[static_cast<std::size_t>(i)] * tr.x(p, i)[0] + sol.beta[static_cast<std::size_t>(i)];
            ASSERT_NEAR(u.at(p, i)[0], std::clamp(v, -q.bound, q.bound), 1e-12);
        }
    const auto c = estimate_cost(spec, batch, u, tr);
    EXPECT_NEAR(c.value, sol.cost, 3.0 * c.se) << "se " << c.se;
    const auto cv = estimate_cost_cv(spec, batch, u, tr);
    EXPECT_NEAR(cv.value, sol.cost, 3.0 * cv.se) << "se " << cv.se;
}

TEST(LqOracle, OptimizerRecoversOptimalFeedback) {
    const LqParams q;
    const auto spec = lq_problem(q);
    const int N = 32, P = 1 << 14;
    const auto batch = batch_for(spec, N, P);
    OptimizerConfig cfg;
    cfg.gamma = 0.5;
    cfg.tolerance = 1e-4;
    const auto rep = optimize(spec, batch, test::constant_control(batch, 0.0), cfg, false);
    ASSERT_EQ(rep.termination, Termination::converged);
    const auto sol = lq_discrete_solution(q, N);
    const auto tr = solve_fbsde(spec, batch, rep.control);
    double num = 0.0, den = 0.0;
    for (int p = 0; p < P; ++p)
        for (int i = 0; i < N; ++i) {
            const double star = std::clamp(
                sol.alpha[static_cast<std::size_t>(i)] * tr.x(p, i)[0] + sol.beta[static_cast<std::size_t>(i)], -q.bound,
                q.bound);
            const double d = rep.control.at(p, i)[0] - star;
            num += d * d;
            den += star * star;
        }
    EXPECT_LT(std::sqrt(num / den), 0.02);
    EXPECT_NEAR(rep.final_J, sol.cost, 0.01 * sol.cost);
}
