#pragma once

#include "fbsde/errors.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/rng.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace fbsde {

/// Uniform grid t_i = i * T / N on [0, T].
struct TimeGrid {
    double T = 1.0;
    int N = 1;

    TimeGrid() = default;
    TimeGrid(double horizon, int steps) : T(horizon), N(steps) {
        if (!(horizon > 0.0) || steps < 1) throw InvalidSpec("TimeGrid requires T > 0 and N >= 1");
    }
    double dt() const noexcept { return T / N; }
    double t(int i) const noexcept { return i * dt(); }
};

struct RngSpec {
    std::uint64_t seed = 0;
};

/// Sampled driver noise on a grid: Brownian increments dB[p][i][c] and
/// per-mark jump counts dN[p][i][j] on (t_i, t_{i+1}].
class ScenarioBatch {
public:
    ScenarioBatch() = default;
    ScenarioBatch(TimeGrid grid, MarkSpace marks, int paths, int brownian_dim, std::uint64_t seed)
        : grid_(grid), marks_(std::move(marks)), paths_(paths), d_(brownian_dim), seed_(seed),
          dB_(static_cast<std::size_t>(paths) * grid.N * brownian_dim, 0.0),
          dN_(static_cast<std::size_t>(paths) * grid.N * marks_.size(), 0u) {}

    const TimeGrid& grid() const noexcept { return grid_; }
    const MarkSpace& marks() const noexcept { return marks_; }
    int paths() const noexcept { return paths_; }
    int steps() const noexcept { return grid_.N; }
    int brownian_dim() const noexcept { return d_; }
    int mark_count() const noexcept { return static_cast<int>(marks_.size()); }
    std::uint64_t seed() const noexcept { return seed_; }

    double dB(int p, int i, int c) const { return dB_[db_index(p, i, c)]; }
    double& dB(int p, int i, int c) { return dB_[db_index(p, i, c)]; }
    std::uint32_t dN(int p, int i, int j) const { return dN_[dn_index(p, i, j)]; }
    std::uint32_t& dN(int p, int i, int j) { return dN_[dn_index(p, i, j)]; }

    /// dN - pi_j dt, the increment of the compensated measure.
    double compensated(int p, int i, int j) const {
        return static_cast<double>(dN(p, i, j)) - marks_.weights[static_cast<std::size_t>(j)] * grid_.dt();
    }

    /// Brownian position B_{t_i} (i = 0..N) on path p.
    Vec brownian_at(int p, int i) const {
        Vec b = Vec::Zero(d_);
        for (int s = 0; s < i; ++s)
            for (int c = 0; c < d_; ++c) b[c] += dB(p, s, c);
        return b;
    }
    /// Jump totals N_j(t_i) (i = 0..N) on path p.
    Vec counts_at(int p, int i) const {
        Vec n = Vec::Zero(mark_count());
        for (int s = 0; s < i; ++s)
            for (int j = 0; j < mark_count(); ++j) n[j] += dN(p, s, j);
        return n;
    }

    const std::vector<double>& raw_dB() const noexcept { return dB_; }
    const std::vector<std::uint32_t>& raw_dN() const noexcept { return dN_; }
    std::vector<double>& raw_dB() noexcept { return dB_; }
    std::vector<std::uint32_t>& raw_dN() noexcept { return dN_; }

    /// Copy restricted to a subset of paths (in the given order).
    ScenarioBatch select_paths(const std::vector<int>& rows) const {
        ScenarioBatch out(grid_, marks_, static_cast<int>(rows.size()), d_, seed_);
        for (std::size_t q = 0; q < rows.size(); ++q) {
            const int p = rows[q];
            for (int i = 0; i < grid_.N; ++i) {
                for (int c = 0; c < d_; ++c) out.dB(static_cast<int>(q), i, c) = dB(p, i, c);
                for (int j = 0; j < mark_count(); ++j) out.dN(static_cast<int>(q), i, j) = dN(p, i, j);
            }
        }
        return out;
    }

    bool operator==(const ScenarioBatch& o) const {
        return grid_.T == o.grid_.T && grid_.N == o.grid_.N && paths_ == o.paths_ && d_ == o.d_ &&
               seed_ == o.seed_ && dB_ == o.dB_ && dN_ == o.dN_;
    }

private:
    std::size_t db_index(int p, int i, int c) const {
        check(p, i);
        if (c < 0 || c >= d_) throw IndexOutOfRange("Brownian channel out of range");
        return (static_cast<std::size_t>(p) * grid_.N + i) * d_ + c;
    }
    std::size_t dn_index(int p, int i, int j) const {
        check(p, i);
        if (j < 0 || j >= mark_count()) throw IndexOutOfRange("mark index out of range");
        return (static_cast<std::size_t>(p) * grid_.N + i) * marks_.size() + j;
    }
    void check(int p, int i) const {
        if (p < 0 || p >= paths_) throw IndexOutOfRange("path index out of range");
        if (i < 0 || i >= grid_.N) throw IndexOutOfRange("step index out of range");
    }

    TimeGrid grid_;
    MarkSpace marks_;
    int paths_ = 0;
    int d_ = 0;
    std::uint64_t seed_ = 0;
    std::vector<double> dB_;
    std::vector<std::uint32_t> dN_;
};

/// Default cap on P * N * (d + M) stored entries.
inline constexpr std::size_t kDefaultScenarioBudget = std::size_t{1} << 28;

/// Samples a batch. Draw (p, i, c) depends only on (seed, p, i, c), so the
/// result is bit-identical for any worker count.
inline ScenarioBatch generate(const TimeGrid& grid, const MarkSpace& marks, int paths, int brownian_dim,
                              const RngSpec& rng, int workers = 1,
                              std::size_t budget = kDefaultScenarioBudget) {
    if (paths < 1) throw InvalidSpec("generate: path count must be at least 1");
    if (brownian_dim < 0) throw InvalidSpec("generate: Brownian dimension must be non-negative");
    const std::size_t entries =
        static_cast<std::size_t>(paths) * static_cast<std::size_t>(grid.N) * (brownian_dim + marks.size());
    if (entries > budget)
        throw ResourceLimit("scenario batch needs " + std::to_string(entries) + " entries, budget is " +
                            std::to_string(budget));
    for (double w : marks.weights)
        if (w * grid.dt() > 700.0) throw InvalidSpec("generate: per-step jump mean too large for inversion");

    ScenarioBatch batch(grid, marks, paths, brownian_dim, rng.seed);
    const Philox4x32 gen(rng.seed);
    const double sqrt_dt = std::sqrt(grid.dt());
    for_each_chunk(static_cast<std::size_t>(paths), workers, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            const auto pp = static_cast<std::uint32_t>(p);
            for (int i = 0; i < grid.N; ++i) {
                const auto ii = static_cast<std::uint32_t>(i);
                for (int c = 0; c < brownian_dim; ++c)
                    batch.dB(static_cast<int>(p), i, c) =
                        sqrt_dt * standard_normal(stream_uniforms(gen, pp, ii, static_cast<std::uint32_t>(c)));
                for (std::size_t j = 0; j < marks.size(); ++j) {
                    const auto draw = stream_uniforms(gen, pp, ii, static_cast<std::uint32_t>(brownian_dim + j));
                    batch.dN(static_cast<int>(p), i, static_cast<int>(j)) = poisson_inverse(marks.weights[j] * grid.dt(), draw.u1);
                }
            }
        }
    });
    return batch;
}

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
    } else {
        os.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error("scenario file truncated");
    if constexpr (std::endian::native == std::endian::big)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

} // namespace detail

inline constexpr std::uint16_t kScenarioFormatVersion = 1;

/// Binary dump: "FBMP", u16 version, u32 P, N, d, M, u64 seed, then dB as
/// row-major f64 and dN as row-major u32, all little-endian.
inline void dump_scenario(const ScenarioBatch& batch, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write("FBMP", 4);
    detail::write_le<std::uint16_t>(os, kScenarioFormatVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(batch.paths()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(batch.steps()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(batch.brownian_dim()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(batch.mark_count()));
    detail::write_le<std::uint64_t>(os, batch.seed());
    for (double v : batch.raw_dB()) detail::write_le<double>(os, v);
    for (std::uint32_t v : batch.raw_dN()) detail::write_le<std::uint32_t>(os, v);
}

/// Loads a dump. The horizon and mark intensities are not stored in the file
/// and must be supplied; N and M are checked against them.
inline ScenarioBatch load_scenario(const std::string& path, double horizon, const MarkSpace& marks) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "FBMP", 4) != 0) throw Error("not a scenario file: bad magic");
    const auto version = detail::read_le<std::uint16_t>(is);
    if (version != kScenarioFormatVersion) throw Error("unsupported scenario file version");
    const auto P = detail::read_le<std::uint32_t>(is);
    const auto N = detail::read_le<std::uint32_t>(is);
    const auto d = detail::read_le<std::uint32_t>(is);
    const auto M = detail::read_le<std::uint32_t>(is);
    const auto seed = detail::read_le<std::uint64_t>(is);
    if (M != marks.size()) throw Error("scenario file mark count does not match the supplied mark space");
    ScenarioBatch batch(TimeGrid(horizon, static_cast<int>(N)), marks, static_cast<int>(P), static_cast<int>(d), seed);
    for (auto& v : batch.raw_dB()) v = detail::read_le<double>(is);
    for (auto& v : batch.raw_dN()) v = detail::read_le<std::uint32_t>(is);
    return batch;
}

} // namespace fbsde
