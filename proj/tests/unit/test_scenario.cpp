#include "models.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace fbsde;

namespace {

bool same(const ScenarioBatch& a, const ScenarioBatch& b) {
    return a.raw_dB() == b.raw_dB() && a.raw_dN() == b.raw_dN();
}

} // namespace

TEST(Generate, SameSeedIsBitIdentical) {
    const MarkSpace marks{{0.5, 1.0}, {1.0, 2.0}};
    const auto a = generate(TimeGrid(1.0, 16), marks, 300, 2, RngSpec{9});
    const auto b = generate(TimeGrid(1.0, 16), marks, 300, 2, RngSpec{9});
    const auto c = generate(TimeGrid(1.0, 16), marks, 300, 2, RngSpec{10});
    EXPECT_TRUE(same(a, b));
    EXPECT_FALSE(same(a, c));
}

TEST(Generate, WorkerCountDoesNotChangeDraws) {
    const MarkSpace marks{{1.0}, {2.0}};
    const auto a = generate(TimeGrid(1.0, 8), marks, 3000, 1, RngSpec{5}, 1);
    const auto b = generate(TimeGrid(1.0, 8), marks, 3000, 1, RngSpec{5}, 8);
    EXPECT_TRUE(same(a, b));
}

TEST(Generate, GaussianMoments) {
    const int P = 1 << 14;
    const auto batch = generate(TimeGrid(1.0, 8), MarkSpace{}, P, 1, RngSpec{1});
    const double dt = batch.grid().dt();
    for (int i = 0; i < batch.steps(); ++i) {
        double s = 0.0, s2 = 0.0;
        for (int p = 0; p < P; ++p) {
            s += batch.dB(p, i, 0);
            s2 += batch.dB(p, i, 0) * batch.dB(p, i, 0);
        }
        const double mean = s / P, var = s2 / P - mean * mean;
        EXPECT_LE(std::abs(mean), 3.0 * std::sqrt(dt / P)) << "step " << i;
        EXPECT_NEAR(var / dt, 1.0, 0.05) << "step " << i;
    }
}

TEST(Generate, PoissonMean) {
    const int P = 1 << 14;
    const auto batch = generate(TimeGrid(1.0, 10), MarkSpace{{1.0}, {2.0}}, P, 1, RngSpec{2});
    for (int i = 0; i < batch.steps(); ++i) {
        double s = 0.0;
        for (int p = 0; p < P; ++p) s += batch.dN(p, i, 0);
        EXPECT_LE(std::abs(s / P - 0.2), 3.0 * std::sqrt(0.2 / P)) << "step " << i;
    }
}

TEST(Generate, BudgetIsEnforced) {
    EXPECT_THROW(generate(TimeGrid(1.0, 100), MarkSpace{{1.0}, {1.0}}, 1000, 1, RngSpec{1}, 1, 1000), ResourceLimit);
    EXPECT_THROW(generate(TimeGrid(1.0, 10), MarkSpace{}, 0, 1, RngSpec{1}), InvalidSpec);
}

TEST(Compensated, Arithmetic) {
    auto batch = generate(TimeGrid(1.0, 10), MarkSpace{{1.0}, {2.0}}, 2, 1, RngSpec{1});
    batch.dN(0, 0, 0) = 0;
    batch.dN(1, 0, 0) = 1;
    EXPECT_DOUBLE_EQ(batch.compensated(0, 0, 0), -0.2);
    EXPECT_DOUBLE_EQ(batch.compensated(1, 0, 0), 0.8);
    EXPECT_THROW(batch.compensated(2, 0, 0), IndexOutOfRange);
    EXPECT_THROW(batch.compensated(0, 10, 0), IndexOutOfRange);
    EXPECT_THROW(batch.compensated(0, 0, 1), IndexOutOfRange);
}

TEST(Compensated, ZeroMeanOverAllIncrements) {
    const int P = 1 << 13;
    const auto batch = generate(TimeGrid(1.0, 16), MarkSpace{{1.0}, {2.0}}, P, 1, RngSpec{4});
    double s = 0.0, s2 = 0.0;
    const int n = P * batch.steps();
    for (int p = 0; p < P; ++p)
        for (int i = 0; i < batch.steps(); ++i) {
            const double c = batch.compensated(p, i, 0);
            s += c;
            s2 += c * c;
        }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    EXPECT_LE(std::abs(mean), 3.0 * se);
}

TEST(Compensated, UncorrelatedWithBrownian) {
    const int P = 1 << 14;
    const auto batch = generate(TimeGrid(1.0, 4), MarkSpace{{1.0}, {3.0}}, P, 1, RngSpec{6});
    for (int i = 0; i < batch.steps(); ++i) {
        double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
        for (int p = 0; p < P; ++p) {
            const double a = batch.dB(p, i, 0), b = batch.compensated(p, i, 0);
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        const double cov = sab / P - sa * sb / P / P;
        const double corr = cov / std::sqrt((saa / P - sa * sa / P / P) * (sbb / P - sb * sb / P / P));
        EXPECT_LE(std::abs(corr), 3.0 / std::sqrt(static_cast<double>(P)));
    }
}

TEST(ScenarioDump, RoundTrip) {
    const MarkSpace marks{{0.5, 1.5}, {1.0, 0.5}};
    const auto batch = generate(TimeGrid(2.0, 12), marks, 77, 2, RngSpec{123});
    const auto path = (std::filesystem::temp_directory_path() / "fbsde_scenario_roundtrip.bin").string();
    dump_scenario(batch, path);
    const auto back = load_scenario(path, 2.0, marks);
    EXPECT_TRUE(same(batch, back));
    EXPECT_EQ(back.seed(), 123u);
    EXPECT_EQ(back.paths(), 77);
    EXPECT_EQ(back.brownian_dim(), 2);
    EXPECT_THROW(load_scenario(path, 2.0, MarkSpace{{1.0}, {1.0}}), Error);
    std::filesystem::remove(path);
}

TEST(ScenarioDump, HeaderLayout) {
    const auto batch = generate(TimeGrid(1.0, 3), MarkSpace{{1.0}, {1.0}}, 2, 1, RngSpec{0x0102030405060708ull});
    const auto path = (std::filesystem::temp_directory_path() / "fbsde_scenario_header.bin").string();
    dump_scenario(batch, path);
    std::FILE* f = std::fopen(path.c_str(), "rb");
    ASSERT_NE(f, nullptr);
    unsigned char h[30];
    ASSERT_EQ(std::fread(h, 1, 30, f), 30u);
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fclose(f);
    std::filesystem::remove(path);
    EXPECT_EQ(std::string(reinterpret_cast<char*>(h), 4), "FBMP");
    EXPECT_EQ(h[4] | (h[5] << 8), 1);
    EXPECT_EQ(h[6], 2);   // P
    EXPECT_EQ(h[10], 3);  // N
    EXPECT_EQ(h[14], 1);  // d
    EXPECT_EQ(h[18], 1);  // M
    EXPECT_EQ(h[22], 0x08);
    EXPECT_EQ(h[29], 0x01);
    EXPECT_EQ(size, 30 + 2 * 3 * 8 + 2 * 3 * 4);
}
