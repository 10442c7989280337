// Integrates the LQ Riccati system backward with classical RK4 on a dense
// grid and writes the optimal cost and feedback gains as a JSON fixture.

#include "fbsde/benchmarks.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace {

using State = std::array<double, 3>;  // P, S, s

State rhs(const fbsde::LqParams& q, const State& y) {
    const double lam = q.jumps ? q.intensity : 0.0;
    const double E = q.jumps ? q.E : 0.0, e0 = q.jumps ? q.e0 : 0.0;
    const double P = y[0], S = y[1];
    // Time derivatives; the system is solved backward from P(T) = G.
    return {-(2.0 * q.A + q.C * q.C + lam * E * E) * P - q.Q + q.B * q.B * P * P / q.R,
            -(q.A - q.B * q.B * P / q.R) * S - (q.b0 + q.C * q.c0 + lam * E * e0) * P - q.f1,
            -q.b0 * S - 0.5 * q.c0 * q.c0 * P - 0.5 * lam * e0 * e0 * P + q.B * q.B * S * S / (2.0 * q.R) - q.f0};
}

State rk4_back(const fbsde::LqParams& q, const State& y, double h) {
    auto axpy = [](const State& a, const State& b, double s) {
        return State{a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]};
    };
    const State k1 = rhs(q, y);
    const State k2 = rhs(q, axpy(y, k1, -0.5 * h));
    const State k3 = rhs(q, axpy(y, k2, -0.5 * h));
    const State k4 = rhs(q, axpy(y, k3, -h));
    State out;
    for (int c = 0; c < 3; ++c) out[c] = y[c] - h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LQ Riccati oracle"};
    std::string out = "fixtures/lq_oracle.json";
    int grid = 64, substeps = 4096;
    app.add_option("--out", out, "output JSON path");
    app.add_option("--steps", grid, "grid steps at which gains are recorded");
    app.add_option("--substeps", substeps, "RK4 substeps per grid step");
    CLI11_PARSE(app, argc, argv);

    const fbsde::LqParams q;
    const double h = q.T / (static_cast<double>(grid) * substeps);
    std::vector<State> nodes(static_cast<std::size_t>(grid) + 1);
    State y{q.G, 0.0, 0.0};
    nodes[static_cast<std::size_t>(grid)] = y;
    for (int i = grid - 1; i >= 0; --i) {
        for (int s = 0; s < substeps; ++s) y = rk4_back(q, y, h);
        nodes[static_cast<std::size_t>(i)] = y;
    }
    std::vector<double> P, S, s, alpha, beta;
    for (const State& n : nodes) {
        P.push_back(n[0]);
        S.push_back(n[1]);
        s.push_back(n[2]);
        alpha.push_back(-q.B * n[0] / q.R);
        beta.push_back(-q.B * n[1] / q.R);
    }
    const State& y0 = nodes.front();
    nlohmann::json j;
    j["params"] = {{"T", q.T}, {"a", q.a}, {"A", q.A}, {"B", q.B}, {"b0", q.b0}, {"C", q.C}, {"c0", q.c0},
                   {"E", q.E}, {"e0", q.e0}, {"intensity", q.intensity}, {"Q", q.Q}, {"R", q.R}, {"G", q.G},
                   {"f1", q.f1}, {"f0", q.f0}, {"bound", q.bound}, {"jumps", q.jumps}};
    j["integrator"] = {{"method", "rk4"}, {"grid_steps", grid}, {"substeps", substeps}};
    j["cost"] = 0.5 * y0[0] * q.a * q.a + y0[1] * q.a + y0[2];
    j["P"] = P;
    j["S"] = S;
    j["s"] = s;
    j["alpha"] = alpha;
    j["beta"] = beta;
    std::ofstream os(out);
    if (!os) {
        std::cerr << "cannot write " << out << '\n';
        return 1;
    }
    os << std::setprecision(17) << j.dump(2) << '\n';
    std::cout << "cost " << std::setprecision(17) << j["cost"].get<double>() << '\n';
    return 0;
}
