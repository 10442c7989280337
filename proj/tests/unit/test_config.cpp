#include "fbsde/config.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace fbsde;

namespace {

std::vector<std::filesystem::path> fixture_configs() {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(std::filesystem::path(FBSDE_FIXTURE_DIR) / "configs"))
        if (e.path().extension() == ".json") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

TEST(Config, EmptyObjectGivesDefaults) {
    const RunConfig cfg = parse_config_text("{}");
    const RunConfig def;
    EXPECT_EQ(cfg.builtin, "lq");
    EXPECT_EQ(cfg.N, def.N);
    EXPECT_EQ(cfg.P, def.P);
    EXPECT_EQ(cfg.seed, def.seed);
    EXPECT_EQ(cfg.workers, 1);
    EXPECT_EQ(cfg.control.kind, ControlKind::constant);
    EXPECT_EQ(cfg.control.value.size(), cfg.model.dims.k);
    EXPECT_TRUE(cfg.output.csv);
    EXPECT_TRUE(cfg.output.json);
    EXPECT_EQ(to_json(cfg), to_json(def));
}

TEST(Config, UnknownKeysAreRejected) {
    EXPECT_THROW(parse_config_text(R"({"modle": {}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"numerics": {"N": 8, "tolerence": 1e-3}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"numerics": {"picard": {"dampening": 0.5}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"builtin": "affine", "b": {"slope": [1]}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"verify": {"direction": 3}})"), InvalidSpec);
}

TEST(Config, MalformedInputIsInvalidSpec) {
    EXPECT_THROW(parse_config_text("{\"numerics\": "), InvalidSpec);
    EXPECT_THROW(parse_config_text("[1, 2]"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"numerics": {"N": "eight"}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"builtin": "affine", "a": [[1]]}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"builtin": "affine", "b": {"linear": [[1, 2], [3]]}}})"),
                 InvalidSpec);
    EXPECT_THROW(load_config("/nonexistent/config.json"), InvalidSpec);
}

TEST(Config, UnknownEnumeratedValues) {
    EXPECT_THROW(parse_config_text(R"({"output": {"formats": ["xml"]}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"filtration": {"kind": "lagged"}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"control_set": {"kind": "cube"}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"terminal": {"kind": "random"}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"numerics": {"optimizer": {"rule": "armijo"}}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"control": {"kind": "file"}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"control": {"kind": "bang-bang"}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"builtin": "heston"}})"), InvalidSpec);
    EXPECT_THROW(parse_config_text(R"({"model": {"builtin": "affine", "dims": {"n": 0}}})"), InvalidSpec);
}

TEST(Config, FormatsSelectOutputs) {
    const RunConfig cfg = parse_config_text(R"({"output": {"dir": "x", "formats": ["json"]}})");
    EXPECT_EQ(cfg.output.dir, "x");
    EXPECT_FALSE(cfg.output.csv);
    EXPECT_TRUE(cfg.output.json);
}

TEST(Config, AffineModelStartsFromZeros) {
    const RunConfig cfg = parse_config_text(
        R"({"model": {"builtin": "affine", "dims": {"n": 2, "m": 1, "d": 3, "k": 1}, "marks": {"atoms": [1, 2], "weights": [0.5, 0.25]}}})");
    EXPECT_EQ(cfg.model.dims.n, 2);
    EXPECT_EQ(cfg.model.dims.d, 3);
    EXPECT_EQ(cfg.model.marks.size(), 2u);
    EXPECT_EQ(cfg.model.b.linear.norm(), 0.0);
    EXPECT_EQ(cfg.model.a.size(), 2);
}

TEST(Config, FixturesRoundTrip) {
    const auto files = fixture_configs();
    ASSERT_FALSE(files.empty());
    for (const auto& f : files) {
        const RunConfig cfg = load_config(f.string());
        const Json once = to_json(cfg);
        const RunConfig again = parse_config_text(once.dump());
        EXPECT_EQ(to_json(again), once) << f.filename();
        EXPECT_EQ(again.N, cfg.N) << f.filename();
        EXPECT_EQ(again.P, cfg.P) << f.filename();
        EXPECT_EQ(again.model.a, cfg.model.a) << f.filename();
        EXPECT_EQ(again.model.b.linear, cfg.model.b.linear) << f.filename();
        EXPECT_EQ(again.model.l.quad, cfg.model.l.quad) << f.filename();
        EXPECT_EQ(again.model.marks.weights, cfg.model.marks.weights) << f.filename();
    }
}

TEST(Config, DecimalValuesSurviveSerialization) {
    const RunConfig cfg = parse_config_text(R"({"numerics": {"ridge": 0.1, "optimizer": {"gamma": 0.1}}})");
    const RunConfig again = parse_config_text(to_json(cfg).dump());
    EXPECT_EQ(again.picard.regression.ridge, 0.1);
    EXPECT_EQ(again.optimizer.gamma, 0.1);
}

TEST(Config, SeedKeepsAllSixtyFourBits) {
    const RunConfig cfg = parse_config_text(R"({"numerics": {"seed": 18446744073709551615}})");
    EXPECT_EQ(cfg.seed, 18446744073709551615ull);
    EXPECT_EQ(parse_config_text(to_json(cfg).dump()).seed, cfg.seed);
}
