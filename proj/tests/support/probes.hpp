#pragma once

#include "fbsde/fbsde.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fbsde::test {

/// Worst discrepancy of grad_H against central differences of eval_H, in units
/// of the tolerance max(rel * |fd|, floor). Values <= 1 pass.
struct GradProbeResult {
    double worst_ratio = 0.0;
    int worst_component = -1;
    int probes = 0;
};

inline Multipliers random_multipliers(const Layout& lay, std::mt19937_64& gen) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Multipliers mu = Multipliers::zero(lay);
    for (Vec* v : {&mu.p, &mu.q, &mu.beta, &mu.k})
        for (Eigen::Index i = 0; i < v->size(); ++i) (*v)[i] = u(gen);
    return mu;
}

inline GradProbeResult grad_h_fd_probe(const ProblemSpec& spec, int probes = 100, std::uint64_t seed = 1,
                                       double step = 1e-5, double rel = 1e-4, double floor = 1e-8) {
    const Layout lay = spec.layout();
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    GradProbeResult res;
    res.probes = probes;
    for (int s = 0; s < probes; ++s) {
        Point pt(lay);
        pt.t = 0.5 * (u(gen) + 1.0) * spec.T;
        for (int c = 0; c < lay.size; ++c) pt.w[c] = u(gen);
        const Multipliers mu = random_multipliers(lay, gen);
        const HamiltonianGradient g = grad_H(spec, pt, mu);
        for (int c = 0; c < lay.size; ++c) {
            Point hi = pt, lo = pt;
            hi.w[c] += step;
            lo.w[c] -= step;
            double fd = (eval_H(spec, hi, mu) - eval_H(spec, lo, mu)) / (2.0 * step);
            if (c >= lay.r_off && c < lay.v_off) fd /= spec.marks.weights[static_cast<std::size_t>((c - lay.r_off) / lay.m)];
            const double ratio = std::abs(g.stacked[c] - fd) / std::max(rel * std::abs(fd), floor);
            if (ratio > res.worst_ratio) {
                res.worst_ratio = ratio;
                res.worst_component = c;
            }
        }
    }
    return res;
}

} // namespace fbsde::test
