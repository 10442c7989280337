// Computes the directional derivative of the cost on the coupled nonlinear
// model three ways: central finite differences, the variational system and
// the Hamiltonian gradient paired with the direction.
//
//   demo_gateaux_check [paths] [steps]

#include "fbsde/fbsde.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>

int main(int argc, char** argv) {
    using namespace fbsde;
    const int P = argc > 1 ? std::atoi(argv[1]) : 4096;
    const int N = argc > 2 ? std::atoi(argv[2]) : 32;

    const ProblemSpec spec = nonlinear_coupled_problem();
    const ScenarioBatch batch = generate(TimeGrid(spec.T, N), spec.marks, P, spec.dims.d, RngSpec{7});
    const ControlProcess u = ControlProcess::constant(P, N, Vec::Constant(1, 0.2));

    PicardConfig pc;
    pc.tolerance = 1e-9;
    pc.max_iterations = 200;
    const Trajectory tr = solve_fbsde(spec, batch, u, pc);
    const Linearization lin(spec, tr, u);
    const AdjointTrajectory adj = solve_adjoint(spec, batch, u, tr, lin, pc);
    const std::vector<Mat> hv = control_gradient(lin, adj);

    // theta = 0.4 + 0.3 tanh(x_t) on the middle half of the horizon.
    ControlProcess theta(P, N, 1);
    for (int p = 0; p < P; ++p)
        for (int i = N / 4; i < 3 * N / 4; ++i) theta.set(p, i, Vec::Constant(1, 0.4 + 0.3 * std::tanh(tr.x(p, i)[0])));

    const Estimate fd = gateaux_fd(spec, batch, u, theta, 1e-4, pc);
    const Estimate var = gateaux_variational(spec, batch, u, theta, tr, lin, pc);
    const Estimate ham = gateaux_hamiltonian(theta, hv, tr.dt);

    std::printf("picard iterations %d\n\n", tr.iterations());
    std::printf("%-20s %12s %10s\n", "estimator", "value", "se");
    std::printf("%-20s %12.6f %10.2e\n", "finite difference", fd.value, fd.se);
    std::printf("%-20s %12.6f %10.2e\n", "variational", var.value, var.se);
    std::printf("%-20s %12.6f %10.2e\n", "hamiltonian", ham.value, ham.se);
    std::printf("\nmax pairwise gap %.3e\n",
                std::max({std::abs(fd.value - var.value), std::abs(fd.value - ham.value), std::abs(var.value - ham.value)}));
    return 0;
}
