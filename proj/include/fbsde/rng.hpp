#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace fbsde {

/// Philox4x32-10 counter-based generator. A draw is a pure function of
/// (key, counter), so any stream can be reproduced without replaying others.
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    explicit Philox4x32(std::uint64_t seed)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    Counter operator()(Counter ctr) const {
        Key key = key_;
        for (int round = 0; round < 10; ++round) {
            ctr = single_round(ctr, key);
            key[0] += 0x9E3779B9u;
            key[1] += 0xBB67AE85u;
        }
        return ctr;
    }

private:
    static Counter single_round(const Counter& c, const Key& k) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(0xD2511F53u) * c[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(0xCD9E8D57u) * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }

    Key key_;
};

/// Two independent uniforms in (0, 1) for stream (path, step, channel).
/// Channel 0..d-1 are Brownian, d..d+M-1 are jump counts.
struct StreamDraw {
    double u1, u2;
};

inline StreamDraw stream_uniforms(const Philox4x32& gen, std::uint32_t path, std::uint32_t step, std::uint32_t channel) {
    const auto out = gen({path, step, channel, 0u});
    auto to_unit = [](std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32 | lo) >> 11;  // 53 bits
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    };
    return {to_unit(out[0], out[1]), to_unit(out[2], out[3])};
}

/// Box-Muller; libm-only so results do not depend on the standard library's
/// distribution implementations.
inline double standard_normal(const StreamDraw& d) {
    return std::sqrt(-2.0 * std::log(d.u1)) * std::cos(2.0 * std::numbers::pi * d.u2);
}

/// Poisson(mean) by CDF inversion of a single uniform.
inline std::uint32_t poisson_inverse(double mean, double u) {
    if (mean <= 0.0) return 0;
    double pmf = std::exp(-mean);
    double cdf = pmf;
    std::uint32_t k = 0;
    while (u > cdf && k < 100000u) {
        ++k;
        pmf *= mean / k;
        cdf += pmf;
        if (pmf == 0.0 && cdf < u) break;  // tail exhausted by rounding
    }
    return k;
}

} // namespace fbsde
