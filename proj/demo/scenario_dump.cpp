// Samples a driver batch, writes it in the binary scenario format, reads it
// back and prints summary statistics of the increments.
//
//   demo_scenario_dump [file] [paths] [steps]

#include "fbsde/fbsde.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

int main(int argc, char** argv) {
    using namespace fbsde;
    const std::string path = argc > 1 ? argv[1] : "scenario.bin";
    const int P = argc > 2 ? std::atoi(argv[2]) : 2048;
    const int N = argc > 3 ? std::atoi(argv[3]) : 16;

    const double T = 1.0;
    const MarkSpace marks{{0.5, 1.0}, {2.0, 0.5}};
    const ScenarioBatch batch = generate(TimeGrid(T, N), marks, P, 2, RngSpec{1234});
    dump_scenario(batch, path);
    const ScenarioBatch back = load_scenario(path, T, marks);
    std::printf("wrote %s: P=%d N=%d d=%d M=%d, reload %s\n", path.c_str(), P, N, batch.brownian_dim(),
                batch.mark_count(), back == batch ? "identical" : "DIFFERENT");

    const double dt = T / N;
    for (int c = 0; c < batch.brownian_dim(); ++c) {
        double s = 0.0, s2 = 0.0;
        for (int p = 0; p < P; ++p)
            for (int i = 0; i < N; ++i) {
                s += back.dB(p, i, c);
                s2 += back.dB(p, i, c) * back.dB(p, i, c);
            }
        const double n = static_cast<double>(P) * N;
        std::printf("dB_%d   mean %+.5f  var/dt %.4f\n", c + 1, s / n, (s2 / n - (s / n) * (s / n)) / dt);
    }
    for (int j = 0; j < batch.mark_count(); ++j) {
        double s = 0.0, c = 0.0;
        for (int p = 0; p < P; ++p)
            for (int i = 0; i < N; ++i) {
                s += back.dN(p, i, j);
                c += back.compensated(p, i, j);
            }
        const double n = static_cast<double>(P) * N;
        std::printf("dN_%d   rate %.4f (intensity %.2f)  compensated mean %+.5f\n", j + 1, s / n / dt,
                    marks.weights[static_cast<std::size_t>(j)], c / n);
    }
    return back == batch ? 0 : 1;
}
