// Optimizes the scalar LQ problem with jumps and compares the result with the
// exact optimum of the discretized problem.
//
//   demo_lq_optimize [paths] [steps]

#include "fbsde/fbsde.hpp"

#include <cstdio>
#include <cstdlib>

int main(int argc, char** argv) {
    using namespace fbsde;
    const int P = argc > 1 ? std::atoi(argv[1]) : 4096;
    const int N = argc > 2 ? std::atoi(argv[2]) : 32;

    const LqParams q;
    const ProblemSpec spec = lq_problem(q);
    const ScenarioBatch batch = generate(TimeGrid(spec.T, N), spec.marks, P, spec.dims.d, RngSpec{42});
    const ControlProcess u0 = ControlProcess::constant(P, N, Vec::Zero(1));

    OptimizerConfig cfg;
    cfg.gamma = 0.5;
    cfg.tolerance = 1e-4;
    const OptimizerReport rep = optimize(spec, batch, u0, cfg);

    std::printf("%4s %12s %10s %12s %12s\n", "iter", "J", "se", "residual", "stationarity");
    for (std::size_t it = 0; it < rep.iterations.size(); ++it) {
        const IterationRecord& r = rep.iterations[it];
        std::printf("%4zu %12.6f %10.2e %12.3e %12.3e\n", it, r.J, r.se, r.residual, r.stationarity);
    }

    const LqDiscreteSolution dp = lq_discrete_solution(q, N);
    std::printf("\ntermination     %s\n", to_string(rep.termination));
    std::printf("optimized cost  %.6f +- %.6f\n", rep.final_J, rep.final_se);
    std::printf("discrete optimum %.6f\n", dp.cost);
    if (rep.sufficiency) {
        std::printf("convexity       %s\n", rep.sufficiency->hamiltonian.pass ? "pass" : "fail");
        std::printf("max condition   %s\n", rep.sufficiency->max_condition.pass() ? "pass" : "fail");
    }

    // Control at t = 0 is deterministic; compare it with the optimal feedback.
    std::printf("u(0)            %.6f (optimal %.6f)\n", rep.control.at(0, 0)[0],
                dp.alpha.front() * q.a + dp.beta.front());
    return rep.termination == Termination::diverged ? 1 : 0;
}
