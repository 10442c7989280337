#include "fbsde/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Controlled forward-backward SDEs with jumps under partial information"};
    app.set_version_flag("--version", fbsde::cli::kToolVersion);
    app.require_subcommand(1);

    std::string config;
    std::uint64_t seed = 0;
    int paths = 0, steps = 0, workers = 0;
    std::string out;
    const char* blurbs[] = {"solve the state system for a given control",
                            "run the projected-gradient optimizer",
                            "check Gateaux consistency, stationarity and the maximum condition",
                            "run a reference benchmark"};
    const auto names = fbsde::cli::command_names();
    for (std::size_t c = 0; c < names.size(); ++c) {
        CLI::App* sub = app.add_subcommand(names[c], blurbs[c]);
        sub->add_option("--config", config, "JSON run configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override numerics.seed");
        sub->add_option("--paths", paths, "override numerics.P")->check(CLI::PositiveNumber);
        sub->add_option("--steps", steps, "override numerics.N")->check(CLI::PositiveNumber);
        sub->add_option("--workers", workers, "override numerics.workers")->check(CLI::PositiveNumber);
        sub->add_option("--out", out, "output directory");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : fbsde::cli::kExitValidation;
    }

    CLI::App* chosen = app.get_subcommands().front();
    fbsde::cli::Overrides ov;
    if (chosen->count("--seed")) ov.seed = seed;
    if (chosen->count("--paths")) ov.paths = paths;
    if (chosen->count("--steps")) ov.steps = steps;
    if (chosen->count("--workers")) ov.workers = workers;
    if (chosen->count("--out")) ov.out = out;
    return fbsde::cli::run_command(chosen->get_name(), config, ov, std::cerr);
}
