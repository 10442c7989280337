#pragma once

#include "fbsde/config.hpp"
#include "fbsde/fbsde.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#ifndef FBSDE_FIXTURE_DIR
#define FBSDE_FIXTURE_DIR "fixtures"
#endif

namespace fbsde::cli {

inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int {
    kExitOk = 0,
    kExitInternal = 1,
    kExitValidation = 2,
    kExitDivergence = 3,
    kExitVerification = 4,
};

/// Command-line values that take precedence over the config file.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> paths, steps, workers;
    std::optional<std::string> out;

    void apply(RunConfig& cfg) const {
        if (seed) cfg.seed = *seed;
        if (paths) cfg.P = *paths;
        if (steps) cfg.N = *steps;
        if (workers) cfg.workers = *workers;
        if (out) cfg.output.dir = *out;
    }

    Json to_json() const {
        Json j = Json::object();
        if (seed) j["seed"] = *seed;
        if (paths) j["paths"] = *paths;
        if (steps) j["steps"] = *steps;
        if (workers) j["workers"] = *workers;
        if (out) j["out"] = *out;
        return j;
    }
};

class ValidationFailure : public InvalidSpec {
public:
    explicit ValidationFailure(ValidationReport r) : InvalidSpec("model failed validation"), report(std::move(r)) {}
    ValidationReport report;
};

inline Json to_json(const ValidationReport& rep) {
    Json j = Json::array();
    for (const auto& v : rep.violations) j.push_back({{"location", v.location}, {"message", v.message}});
    return j;
}

inline ProblemSpec build_problem(const RunConfig& cfg) {
    if (cfg.N < 1 || cfg.P < 1) throw InvalidSpec("numerics: N and P must be at least 1");
    if (cfg.workers < 1) throw InvalidSpec("numerics: workers must be at least 1");
    ValidationReport shapes = check_shapes(cfg.model);
    if (!shapes.ok()) throw ValidationFailure(std::move(shapes));
    ProblemSpec spec = make_affine_problem(cfg.model);
    ValidationReport rep = validate(spec);
    if (!rep.ok()) throw ValidationFailure(std::move(rep));
    return spec;
}

inline PicardConfig picard_config(const RunConfig& cfg) {
    PicardConfig p = cfg.picard;
    p.workers = cfg.workers;
    return p;
}

inline OptimizerConfig optimizer_config(const RunConfig& cfg) {
    OptimizerConfig o = cfg.optimizer;
    o.picard = picard_config(cfg);
    return o;
}

inline ScenarioBatch make_batch(const RunConfig& cfg, const ProblemSpec& spec, std::uint64_t seed) {
    return generate(TimeGrid(spec.T, cfg.N), spec.marks, cfg.P, spec.dims.d, RngSpec{seed}, cfg.workers);
}

/// Seed of the out-of-sample batch used to re-evaluate optimized controls.
inline std::uint64_t fresh_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ull; }

/// Reads a control table in the layout of write_control_csv.
inline ControlProcess read_control_csv(const std::string& path, int P, int N, int k, const FiltrationSpec& f) {
    std::ifstream is(path);
    if (!is) throw InvalidSpec("cannot read control file '" + path + "'");
    std::string line;
    std::getline(is, line);
    ControlProcess u(P, N, k, f);
    std::vector<char> seen(static_cast<std::size_t>(P) * N, 0);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (static_cast<int>(cells.size()) != 3 + k) throw InvalidSpec("control file: expected " + std::to_string(3 + k) + " columns");
        const int p = std::stoi(cells[0]), i = std::stoi(cells[1]);
        if (p < 0 || p >= P || i < 0 || i >= N) throw InvalidSpec("control file: path or step out of range");
        for (int a = 0; a < k; ++a) u.at(p, i)[a] = std::strtod(cells[static_cast<std::size_t>(3 + a)].c_str(), nullptr);
        seen[static_cast<std::size_t>(p) * N + i] = 1;
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw InvalidSpec("control file does not cover every (path, step) of the run");
    return u;
}

/// Time-constant affine feedback v = Proj_U(gain x_info + offset).
inline FeedbackPolicy linear_feedback(const ProblemSpec& spec, int N, const Mat& gain, const Vec& offset) {
    const int n = spec.dims.n, k = spec.dims.k;
    if (gain.rows() != k || gain.cols() != n) throw InvalidSpec("control.gain must be k x n");
    if (offset.size() != k) throw InvalidSpec("control.offset must have length k");
    FeedbackPolicy pol;
    pol.filtration = spec.filtration;
    pol.filtration.degree = 1;
    pol.set = spec.control_set;
    pol.k = k;
    const bool trivial = spec.filtration.kind == FiltrationKind::trivial;
    const int q = n + RegressorChoice::for_spec(spec).extra(spec.dims.d, static_cast<int>(spec.marks.size()));
    Mat coef = Mat::Zero(trivial ? 1 : 1 + q, k);
    coef.row(0) = offset.transpose();
    if (!trivial) coef.middleRows(1, n) = gain.transpose();
    pol.fits.assign(static_cast<std::size_t>(N), RegressionFit{coef});
    return pol;
}

/// Either an open-loop table on the batch or a closed-loop feedback policy.
struct ControlSource {
    std::optional<ControlProcess> table;
    std::optional<FeedbackPolicy> policy;
};

inline ControlSource resolve_control(const RunConfig& cfg, const ProblemSpec& spec, const ScenarioBatch& batch) {
    const int P = batch.paths(), N = batch.steps(), k = spec.dims.k;
    ControlSource src;
    switch (cfg.control.kind) {
    case ControlKind::constant:
        if (cfg.control.value.size() != k) throw InvalidSpec("control.value must have length k");
        if (!in_control_set(cfg.control.value, spec.control_set, 1e-12))
            throw InvalidSpec("control.value lies outside the control set");
        src.table = ControlProcess::constant(P, N, cfg.control.value, spec.filtration);
        break;
    case ControlKind::feedback: src.policy = linear_feedback(spec, N, cfg.control.gain, cfg.control.offset); break;
    case ControlKind::file:
        src.table = read_control_csv(cfg.control.path, P, N, k, spec.filtration);
        if (!src.table->admissible(spec.control_set, 1e-12)) throw InvalidSpec("control file leaves the control set");
        break;
    case ControlKind::lq_oracle: {
        const auto q = lq_params_of(cfg.model);
        if (!q) throw InvalidSpec("control.kind lq-oracle needs a model of the scalar LQ shape");
        if (spec.filtration.kind != FiltrationKind::full)
            throw InvalidSpec("control.kind lq-oracle is the full-information optimum; use filtration kind full");
        src.table = lq_feedback_control(*q, lq_discrete_solution(*q, N), batch, spec.filtration);
        break;
    }
    }
    return src;
}

struct Solved {
    ControlProcess u;
    Trajectory tr;
};

inline Solved solve_with(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlSource& src,
                         const PicardConfig& pc) {
    if (src.table) return {*src.table, solve_fbsde(spec, batch, *src.table, pc)};
    ControlProcess applied;
    Evaluation ev = evaluate_policy(spec, batch, *src.policy, pc, &applied);
    applied.filtration = spec.filtration;
    return {std::move(applied), std::move(ev.tr)};
}

class Stopwatch {
public:
    double lap() {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        return s;
    }
    double total() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now(), last_ = start_;
};

inline Json to_json(const ConvexityReport& c) {
    return {{"pass", c.pass}, {"worst_gap", c.worst}, {"samples", c.samples}};
}

inline Json to_json(const MaxConditionReport& m) {
    Json failing = Json::array();
    for (std::size_t i = 0; i < m.steps.size(); ++i)
        if (!m.steps[i].pass) failing.push_back(i);
    return {{"pass", m.pass()}, {"worst_slack", m.worst_slack()}, {"failing_steps", failing}};
}

inline Json to_json(const SufficiencyReport& s) {
    return {{"hamiltonian_convexity", to_json(s.hamiltonian)},
            {"phi_convexity", to_json(s.phi)},
            {"h_convexity", to_json(s.h)},
            {"max_condition", to_json(s.max_condition)}};
}

inline bool passes(const SufficiencyReport& s) {
    return s.hamiltonian.pass && s.phi.pass && s.h.pass && s.max_condition.pass();
}

inline Json picard_json(const Trajectory& tr) {
    return {{"iterations", tr.iterations()}, {"converged", tr.store.converged}, {"residuals", tr.residuals()}};
}

inline std::filesystem::path prepare_dir(const RunConfig& cfg) {
    const std::filesystem::path dir(cfg.output.dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << text;
}

template <typename Writer>
void write_csv(const RunConfig& cfg, const std::string& name, Writer&& writer) {
    if (!cfg.output.csv) return;
    std::ostringstream os;
    writer(os);
    write_file(prepare_dir(cfg) / name, os.str());
}

/// Bounded direction adapted to the filtration: on a random window of steps,
/// theta = c1 + c2 tanh(x_info) per axis. Entries where u +- y theta would
/// leave U are zeroed, which keeps theta adapted since u is.
inline ControlProcess random_direction(const Trajectory& tr, const ControlProcess& u, const ControlSet& set, double y,
                                       std::mt19937_64& gen) {
    const int P = u.P, N = u.N, k = u.k;
    std::uniform_real_distribution<double> coef(-0.5, 0.5);
    Vec c1(k), c2(k);
    for (int a = 0; a < k; ++a) {
        c1[a] = coef(gen);
        c2[a] = u.filtration.kind == FiltrationKind::trivial ? 0.0 : coef(gen);
    }
    std::uniform_int_distribution<int> start(0, std::max(0, N / 2 - 1));
    std::uniform_int_distribution<int> length(std::max(1, N / 4), std::max(1, N / 2));
    const int first = start(gen), last = std::min(N, first + length(gen));
    ControlProcess theta(P, N, k, u.filtration);
    for (int p = 0; p < P; ++p)
        for (int i = first; i < last; ++i) {
            const double s = std::tanh(tr.x(p, information_step(u.filtration, i, tr.dt))[0]);
            const Vec dir = c1 + c2 * s;
            const Vec base = u.vec(p, i);
            if (in_control_set(base + y * dir, set, 1e-12) && in_control_set(base - y * dir, set, 1e-12)) theta.set(p, i, dir);
        }
    return theta;
}

struct GateauxComparison {
    Estimate hamiltonian, variational, fd;
    double worst_excess = 0.0;  ///< max over pairs of |a - b| - (3 pooled SE + abs)
    bool pass = true;
};

inline GateauxComparison compare_gateaux(const ProblemSpec& spec, const ScenarioBatch& batch, const ControlProcess& u,
                                         const ControlProcess& theta, const Trajectory& tr, const Linearization& lin,
                                         const std::vector<Mat>& hv, const PicardConfig& pc, double fd_step,
                                         double agreement_abs) {
    GateauxComparison g;
    g.hamiltonian = gateaux_hamiltonian(theta, hv, tr.dt);
    g.variational = gateaux_variational(spec, batch, u, theta, tr, lin, pc);
    g.fd = gateaux_fd(spec, batch, u, theta, fd_step, pc);
    const Estimate* e[3] = {&g.hamiltonian, &g.variational, &g.fd};
    g.worst_excess = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
            const double excess =
                std::abs(e[a]->value - e[b]->value) - (3.0 * pooled_se(e[a]->se, e[b]->se) + agreement_abs);
            g.worst_excess = std::max(g.worst_excess, excess);
        }
    g.pass = g.worst_excess <= 0.0;
    return g;
}

inline Json to_json(const GateauxComparison& g) {
    auto est = [](const Estimate& e) { return Json{{"value", e.value}, {"se", e.se}}; };
    return {{"hamiltonian", est(g.hamiltonian)},
            {"variational", est(g.variational)},
            {"finite_difference", est(g.fd)},
            {"worst_excess", g.worst_excess},
            {"pass", g.pass}};
}

/// Test pairs for the product rule: deterministic, Brownian and jump.
struct IbpFixture {
    std::string name;
    IbpProcess a, b;
    bool jumps = false;
};

inline std::vector<IbpFixture> ibp_fixtures() {
    auto scalar = [](double y0, std::function<double(double, double)> b, std::function<double(double, double)> g,
                     std::function<double(double, double)> s) {
        IbpProcess pr;
        pr.y0 = Vec::Constant(1, y0);
        pr.b = [b](double t, const Vec& y, Vec& out) { out = Vec::Constant(1, b(t, y[0])); };
        pr.g = [g](double t, const Vec& y, Vec& out) { out = Vec::Constant(1, g(t, y[0])); };
        pr.sigma = [s](double t, const Vec& y, std::size_t, Vec& out) { out = Vec::Constant(1, s(t, y[0])); };
        return pr;
    };
    auto zero = [](double, double) { return 0.0; };
    std::vector<IbpFixture> out;
    out.push_back({"deterministic", scalar(1.0, [](double, double y) { return 0.5 * y; }, zero, zero),
                   scalar(0.5, [](double, double y) { return 1.0 - 0.3 * y; }, zero, zero), false});
    out.push_back({"brownian",
                   scalar(1.0, [](double, double y) { return 0.1 * y; }, [](double, double y) { return 0.3 + 0.1 * y; }, zero),
                   scalar(0.5, [](double, double) { return -0.2; }, [](double t, double y) { return 0.2 - 0.1 * y + 0.1 * t; }, zero),
                   false});
    out.push_back({"jump",
                   scalar(1.0, [](double, double) { return 0.1; }, zero, [](double, double y) { return 0.5 + 0.1 * y; }),
                   scalar(0.5, [](double, double y) { return -0.1 * y; }, [](double, double) { return 0.2; },
                          [](double, double y) { return 0.3 - 0.1 * y; }),
                   true});
    return out;
}

/// Driver batch for the product-rule suite: T = 1, d = 1, one mark of rate 2.
inline ScenarioBatch ibp_batch(int N, int P, std::uint64_t seed, int workers = 1) {
    return generate(TimeGrid(1.0, N), MarkSpace{{1.0}, {2.0}}, P, 1, RngSpec{seed}, workers);
}

inline constexpr double kIbpSlope = 2.0;

struct IbpCheck {
    IbpReport report;
    double bound = 0.0;
    bool pass = true;
};

inline IbpCheck check_ibp(const IbpFixture& fx, const ScenarioBatch& batch) {
    IbpCheck c;
    c.report = verify_ibp(fx.a, fx.b, batch);
    c.bound = 3.0 * c.report.se + kIbpSlope * batch.grid().dt();
    c.pass = std::abs(c.report.difference) <= c.bound;
    return c;
}

inline Json to_json(const IbpCheck& c) {
    return {{"lhs", c.report.lhs},   {"rhs", c.report.rhs},   {"difference", c.report.difference},
            {"se", c.report.se},     {"bound", c.bound},      {"pass", c.pass}};
}

struct CommandContext {
    RunConfig cfg;
    Json& report;
    Stopwatch clock;
};

inline int cmd_simulate(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    Json& rep = ctx.report;
    const ProblemSpec spec = build_problem(cfg);
    if (spec.terminal.experimental) rep["warnings"].push_back("state-dependent terminal value is experimental");
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    rep["timings"]["scenario_s"] = ctx.clock.lap();
    const PicardConfig pc = picard_config(cfg);
    const Solved s = solve_with(spec, batch, resolve_control(cfg, spec, batch), pc);
    rep["timings"]["solve_s"] = ctx.clock.lap();
    rep["picard"] = picard_json(s.tr);
    const CostEstimate cost = estimate_cost(spec, batch, s.u, s.tr, pc.workers);
    rep["cost"] = {{"J", cost.value}, {"se", cost.se}, {"y0", cost.y0}, {"admissibility", cost.admissibility}};
    write_csv(cfg, "trajectory.csv", [&](std::ostream& os) { write_trajectory_csv(os, s.tr); });
    write_csv(cfg, "control.csv", [&](std::ostream& os) { write_control_csv(os, s.u, batch.grid().dt()); });
    rep["timings"]["write_s"] = ctx.clock.lap();
    return kExitOk;
}

inline void write_iterations_csv(std::ostream& os, const std::vector<IterationRecord>& its) {
    os << "iteration,J,se,residual,stationarity,gamma,accepted\n" << std::setprecision(17);
    for (std::size_t it = 0; it < its.size(); ++it) {
        const auto& r = its[it];
        os << it << ',' << r.J << ',' << r.se << ',' << r.residual << ',' << r.stationarity << ',' << r.gamma << ','
           << (r.accepted ? 1 : 0) << '\n';
    }
}

inline Json to_json(const OptimizerReport& r) {
    Json j = {{"termination", to_string(r.termination)},
              {"message", r.message},
              {"iterations", r.iterations.size()},
              {"final_J", r.final_J},
              {"final_se", r.final_se},
              {"final_residual", r.final_residual},
              {"final_stationarity", r.final_stationarity}};
    if (r.fresh) j["fresh"] = {{"J", r.fresh->value}, {"se", r.fresh->se}};
    if (r.sufficiency) j["sufficiency"] = to_json(*r.sufficiency);
    return j;
}

/// Initial control table for the optimizer.
inline ControlProcess initial_control(const RunConfig& cfg, const ProblemSpec& spec, const ScenarioBatch& batch) {
    const ControlSource src = resolve_control(cfg, spec, batch);
    if (src.table) return *src.table;
    return solve_with(spec, batch, src, picard_config(cfg)).u;
}

struct MonotonicityCheck {
    double partial_J = 0.0, partial_se = 0.0, full_J = 0.0, full_se = 0.0, margin = 0.0;
    bool pass = true;
};

/// Restricted information cannot beat full information: J_partial >=
/// J_full - 3 pooled SE.
inline MonotonicityCheck monotonicity(const OptimizerReport& partial, const OptimizerReport& full) {
    MonotonicityCheck m{partial.final_J, partial.final_se, full.final_J, full.final_se};
    m.margin = partial.final_J - full.final_J + 3.0 * pooled_se(partial.final_se, full.final_se);
    m.pass = m.margin >= 0.0;
    return m;
}

inline Json to_json(const MonotonicityCheck& m) {
    return {{"partial_J", m.partial_J}, {"partial_se", m.partial_se}, {"full_J", m.full_J},
            {"full_se", m.full_se},     {"margin", m.margin},         {"pass", m.pass}};
}

inline OptimizerReport optimize_full_information(const RunConfig& cfg, const ScenarioBatch& batch) {
    RunConfig full = cfg;
    full.model.filtration = FiltrationSpec{};
    const ProblemSpec spec = build_problem(full);
    ControlProcess u0 = initial_control(full, spec, batch);
    u0.filtration = spec.filtration;
    return optimize(spec, batch, u0, optimizer_config(full), false);
}

inline int cmd_optimize(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    Json& rep = ctx.report;
    const ProblemSpec spec = build_problem(cfg);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const ScenarioBatch fresh = make_batch(cfg, spec, fresh_seed(cfg.seed));
    rep["timings"]["scenario_s"] = ctx.clock.lap();
    const ControlProcess u0 = initial_control(cfg, spec, batch);
    const OptimizerReport res = optimize(spec, batch, u0, optimizer_config(cfg), true, &fresh);
    rep["timings"]["optimize_s"] = ctx.clock.lap();
    rep["optimizer"] = to_json(res);
    rep["measurable"] = check_measurability(res.control, spec.control_set);
    write_csv(cfg, "iterations.csv", [&](std::ostream& os) { write_iterations_csv(os, res.iterations); });
    write_csv(cfg, "control.csv", [&](std::ostream& os) { write_control_csv(os, res.control, batch.grid().dt()); });
    if (res.termination == Termination::diverged) return kExitDivergence;
    if (spec.filtration.kind != FiltrationKind::full) {
        const OptimizerReport full = optimize_full_information(cfg, batch);
        rep["timings"]["full_information_s"] = ctx.clock.lap();
        if (full.termination == Termination::diverged) {
            rep["information_monotonicity"] = {{"pass", false}, {"message", full.message}};
            return kExitDivergence;
        }
        const MonotonicityCheck mono = monotonicity(res, full);
        rep["information_monotonicity"] = to_json(mono);
        if (!mono.pass) return kExitVerification;
    }
    return kExitOk;
}

struct VerifyOutcome {
    Json checks = Json::object();
    bool pass = true;

    void add(const std::string& name, Json detail, bool ok) {
        detail["pass"] = ok;
        checks[name] = std::move(detail);
        pass = pass && ok;
    }
};

/// Verification battery at a given control on one batch.
inline VerifyOutcome verify_control(const RunConfig& cfg, const ProblemSpec& spec, const ScenarioBatch& batch,
                                    const ControlSource& src, Json& rep, Stopwatch& clock) {
    const VerifyConfig& vc = cfg.verify;
    PicardConfig pc = picard_config(cfg);
    pc.tolerance = std::min(pc.tolerance, vc.picard_tolerance);
    pc.max_iterations = std::max(pc.max_iterations, 200);
    const Solved s = solve_with(spec, batch, src, pc);
    const ControlProcess& u = s.u;
    Evaluation ev;
    ev.tr = s.tr;
    ev.cost = estimate_cost(spec, batch, u, ev.tr, pc.workers);
    ev.lin = Linearization(spec, ev.tr, u, pc.workers);
    ev.adj = solve_adjoint(spec, batch, u, ev.tr, ev.lin, pc);
    const std::vector<Mat> hv = control_gradient(ev.lin, ev.adj, pc.workers);
    const DriverHistory hist(batch);
    ev.stat = stationarity_residual(hv, u.filtration, ev.tr, hist, pc.regression.ridge, pc.workers);
    rep["picard"] = picard_json(ev.tr);
    rep["cost"] = {{"J", ev.cost.value}, {"se", ev.cost.se}, {"y0", ev.cost.y0}};
    rep["timings"]["solve_s"] = clock.lap();

    VerifyOutcome out;
    std::mt19937_64 gen(vc.direction_seed);
    Json dirs = Json::array();
    bool gateaux_ok = true;
    for (int d = 0; d < vc.directions; ++d) {
        const ControlProcess theta = random_direction(ev.tr, u, spec.control_set, vc.fd_step, gen);
        const GateauxComparison g =
            compare_gateaux(spec, batch, u, theta, ev.tr, ev.lin, hv, pc, vc.fd_step, vc.agreement_abs);
        dirs.push_back(to_json(g));
        gateaux_ok = gateaux_ok && g.pass;
    }
    out.add("gateaux", {{"directions", dirs}}, gateaux_ok);
    rep["timings"]["gateaux_s"] = clock.lap();

    const StationarityError se = stationarity_error(spec, batch, u, ev.tr, u.filtration, pc, vc.sections);
    const double stat_bound = 3.0 * se.max_se + vc.stationarity_abs;
    out.add("stationarity", {{"norm", ev.stat.norm}, {"max_se", se.max_se}, {"bound", stat_bound}},
            ev.stat.norm <= stat_bound);
    rep["timings"]["stationarity_s"] = clock.lap();

    const SufficiencyReport suff = sufficiency(spec, batch, u, ev, optimizer_config(cfg));
    out.add("max_condition", to_json(suff.max_condition), suff.max_condition.pass());
    out.add("convexity",
            {{"hamiltonian", to_json(suff.hamiltonian)}, {"phi", to_json(suff.phi)}, {"h", to_json(suff.h)}},
            suff.hamiltonian.pass && suff.phi.pass && suff.h.pass);
    rep["timings"]["sufficiency_s"] = clock.lap();

    const bool no_jumps = spec.marks.size() == 0;
    const ScenarioBatch ib = ibp_batch(cfg.N, cfg.P, cfg.seed, cfg.workers);
    Json ibp = Json::object();
    bool ibp_ok = true;
    for (const auto& fx : ibp_fixtures()) {
        if (fx.jumps && no_jumps) {
            ibp[fx.name] = {{"skipped", true}};
            continue;
        }
        const IbpCheck c = check_ibp(fx, ib);
        ibp[fx.name] = to_json(c);
        ibp_ok = ibp_ok && c.pass;
    }
    out.add("ibp", ibp, ibp_ok);

    Json moments = Json::array();
    bool moments_ok = true;
    for (const auto& m : moment_diagnostics(spec, ev.tr, ev.adj, ev.lin, u, vc.moment_threshold)) {
        Json e = {{"name", m.name}, {"skipped", m.skipped}, {"warning", m.warning}};
        if (!m.skipped) e["value"] = m.value;
        moments.push_back(e);
        moments_ok = moments_ok && !m.warning;
    }
    out.add("moments", {{"entries", moments}, {"threshold", vc.moment_threshold}}, moments_ok);
    rep["timings"]["diagnostics_s"] = clock.lap();

    if (no_jumps)
        rep["reductions"]["no_jumps"] = {{"M", 0},
                                         {"note", "mark space is empty: jump-specific entries are skipped"}};
    return out;
}

inline int cmd_verify(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const ProblemSpec spec = build_problem(cfg);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const ControlSource src = resolve_control(cfg, spec, batch);
    const VerifyOutcome out = verify_control(cfg, spec, batch, src, ctx.report, ctx.clock);
    ctx.report["checks"] = out.checks;
    ctx.report["verified"] = out.pass;
    write_csv(cfg, "checks.csv", [&](std::ostream& os) {
        os << "check,pass\n";
        for (const auto& [name, detail] : out.checks.items()) os << name << ',' << (detail["pass"].get<bool>() ? 1 : 0) << '\n';
    });
    return out.pass ? kExitOk : kExitVerification;
}

/// One row of a benchmark summary.
struct BenchMetric {
    std::string name;
    double value = 0.0, reference = 0.0, tolerance = 0.0;
    bool pass = true;
};

struct BenchOutcome {
    std::vector<BenchMetric> metrics;
    Json detail = Json::object();

    bool pass() const {
        return std::all_of(metrics.begin(), metrics.end(), [](const auto& m) { return m.pass; });
    }
    void add(std::string name, double value, double reference, double tolerance, bool ok) {
        metrics.push_back({std::move(name), value, reference, tolerance, ok});
    }
};

inline std::vector<std::string> bench_names() {
    return {"lq-full", "lq-delayed", "pure-forward", "no-jump", "nonlinear-coupled"};
}

inline std::string fixture_dir() {
    if (const char* env = std::getenv("FBSDE_FIXTURE_DIR")) return env;
    return FBSDE_FIXTURE_DIR;
}

/// Cost of the continuous-time LQ problem from the committed oracle fixture.
/// The fixture's parameters must equal those of the model being benchmarked.
inline double lq_oracle_cost(const LqParams& q) {
    const std::string path = fixture_dir() + "/lq_oracle.json";
    std::ifstream is(path);
    if (!is) throw InvalidSpec("missing oracle fixture " + path);
    const auto j = nlohmann::json::parse(is);
    const auto& p = j.at("params");
    const std::pair<const char*, double> expect[] = {
        {"T", q.T}, {"a", q.a}, {"A", q.A}, {"B", q.B}, {"b0", q.b0}, {"C", q.C}, {"c0", q.c0},
        {"E", q.E}, {"e0", q.e0}, {"intensity", q.intensity}, {"Q", q.Q}, {"R", q.R}, {"G", q.G},
        {"f1", q.f1}, {"f0", q.f0}};
    for (const auto& [key, value] : expect)
        if (p.at(key).get<double>() != value) throw InvalidSpec(std::string("oracle fixture parameter mismatch: ") + key);
    if (p.at("jumps").get<bool>() != q.jumps) throw InvalidSpec("oracle fixture parameter mismatch: jumps");
    return j.at("cost").get<double>();
}

inline RunConfig with_model(const RunConfig& cfg, const std::string& builtin, AffineModelParams model) {
    RunConfig out = cfg;
    out.builtin = builtin;
    out.model = std::move(model);
    out.control = ControlConfig{};
    out.control.kind = ControlKind::constant;
    out.control.value = Vec::Zero(out.model.dims.k);
    return out;
}

inline BenchOutcome bench_lq_full(const RunConfig& base) {
    const RunConfig cfg = with_model(base, "lq", lq_params(LqParams{}));
    const ProblemSpec spec = build_problem(cfg);
    const double oracle = lq_oracle_cost(LqParams{});
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const OptimizerReport res = optimize(spec, batch, initial_control(cfg, spec, batch), optimizer_config(cfg), true);
    BenchOutcome b;
    b.detail["optimizer"] = to_json(res);
    b.detail["oracle_cost"] = oracle;
    if (res.termination == Termination::diverged) throw PicardDiverged(res.message, {});
    b.add("relative_cost_error", std::abs(res.final_J - oracle) / std::abs(oracle), 0.0, 0.01,
          std::abs(res.final_J - oracle) <= 0.01 * std::abs(oracle));
    b.add("stationarity", res.final_stationarity, 0.0, 1e-3, res.final_stationarity <= 1e-3);
    b.add("converged", res.termination == Termination::converged ? 1.0 : 0.0, 1.0, 0.0,
          res.termination == Termination::converged);
    b.add("sufficiency", passes(*res.sufficiency) ? 1.0 : 0.0, 1.0, 0.0, passes(*res.sufficiency));
    return b;
}

inline BenchOutcome bench_lq_delayed(const RunConfig& base) {
    FiltrationSpec delayed{FiltrationKind::delayed, 0.25 * LqParams{}.T, 2};
    const RunConfig cfg = with_model(base, "lq", lq_params(LqParams{}, delayed));
    const ProblemSpec spec = build_problem(cfg);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const OptimizerReport res = optimize(spec, batch, initial_control(cfg, spec, batch), optimizer_config(cfg), true);
    if (res.termination == Termination::diverged) throw PicardDiverged(res.message, {});
    const OptimizerReport full = optimize_full_information(cfg, batch);
    if (full.termination == Termination::diverged) throw PicardDiverged(full.message, {});
    const MonotonicityCheck mono = monotonicity(res, full);
    BenchOutcome b;
    b.detail["delayed"] = to_json(res);
    b.detail["full"] = to_json(full);
    b.detail["information_monotonicity"] = to_json(mono);
    b.add("monotonicity_margin", mono.margin, 0.0, 0.0, mono.pass);
    b.add("measurable", check_measurability(res.control, spec.control_set) ? 1.0 : 0.0, 1.0, 0.0,
          check_measurability(res.control, spec.control_set));
    b.add("sufficiency", passes(*res.sufficiency) ? 1.0 : 0.0, 1.0, 0.0, passes(*res.sufficiency));
    return b;
}

inline double max_abs_backward(const Trajectory& tr) {
    double worst = 0.0;
    for (int p = 0; p < tr.paths(); ++p) {
        for (int i = 0; i <= tr.steps(); ++i) worst = std::max(worst, tr.y(p, i).cwiseAbs().maxCoeff());
        for (int i = 0; i < tr.steps(); ++i) {
            worst = std::max(worst, tr.z(p, i).cwiseAbs().maxCoeff());
            for (int j = 0; j < tr.layout.marks; ++j) worst = std::max(worst, tr.r(p, i, j).cwiseAbs().maxCoeff());
        }
    }
    return worst;
}

inline BenchOutcome bench_pure_forward(const RunConfig& base) {
    RunConfig cfg = with_model(base, "pure-forward", pure_forward_params());
    cfg.control.value = Vec::Constant(1, 0.3);
    const ProblemSpec spec = build_problem(cfg);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const Solved s = solve_with(spec, batch, resolve_control(cfg, spec, batch), picard_config(cfg));
    const double worst = max_abs_backward(s.tr);
    const CostEstimate cost = estimate_cost(spec, batch, s.u, s.tr, cfg.workers);
    // Without the backward component the cost is the forward-only functional
    // E[ sum l dt + phi(x_T) ], accumulated here independently.
    std::vector<double> direct(static_cast<std::size_t>(batch.paths()));
    Point pt(spec.layout());
    for (int p = 0; p < batch.paths(); ++p) {
        double acc = 0.0;
        for (int i = 0; i < batch.steps(); ++i) {
            s.tr.fill_point(p, i, s.u, pt);
            acc += spec.coeffs.l(pt) * s.tr.dt;
        }
        direct[static_cast<std::size_t>(p)] = acc + spec.coeffs.phi(Vec(s.tr.x(p, batch.steps())));
    }
    const Estimate fwd = mean_and_se(direct);
    BenchOutcome b;
    b.detail["picard"] = picard_json(s.tr);
    b.detail["cost"] = {{"J", cost.value}, {"forward_only_J", fwd.value}};
    b.add("max_abs_y_z_r", worst, 0.0, 1e-8, worst <= 1e-8);
    b.add("forward_only_cost_gap", std::abs(cost.value - fwd.value), 0.0, 1e-12 * (1.0 + std::abs(fwd.value)),
          std::abs(cost.value - fwd.value) <= 1e-12 * (1.0 + std::abs(fwd.value)));
    return b;
}

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

/// The M = 0 model against the same diffusion run inside the jump-capable
/// model with its jump coefficients zeroed: x, y, z and the cost must agree
/// bit for bit.
inline BenchOutcome bench_no_jump(const RunConfig& base) {
    RunConfig cfg = with_model(base, "lq-no-jump", no_jump_params());
    cfg.control.value = Vec::Constant(1, 0.3);
    const ProblemSpec spec = build_problem(cfg);
    AffineModelParams muted = lq_params(LqParams{});
    muted.name = "lq-muted-jumps";
    muted.sigma = AffineMap::zero(1, muted.sigma.linear.cols());
    RunConfig ref_cfg = with_model(base, "affine", muted);
    ref_cfg.control.value = cfg.control.value;
    const ProblemSpec ref = build_problem(ref_cfg);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    const ScenarioBatch ref_batch = make_batch(ref_cfg, ref, cfg.seed);
    const PicardConfig pc = picard_config(cfg);
    const Solved a = solve_with(spec, batch, resolve_control(cfg, spec, batch), pc);
    const Solved b = solve_with(ref, ref_batch, resolve_control(ref_cfg, ref, ref_batch), pc);
    long mismatches = 0;
    for (int p = 0; p < batch.paths(); ++p) {
        for (int i = 0; i <= batch.steps(); ++i)
            if (!same_bits(a.tr.x(p, i)[0], b.tr.x(p, i)[0]) || !same_bits(a.tr.y(p, i)[0], b.tr.y(p, i)[0])) ++mismatches;
        for (int i = 0; i < batch.steps(); ++i)
            if (!same_bits(a.tr.z(p, i)[0], b.tr.z(p, i)[0])) ++mismatches;
    }
    const CostEstimate ca = estimate_cost(spec, batch, a.u, a.tr, pc.workers);
    const CostEstimate cb = estimate_cost(ref, ref_batch, b.u, b.tr, pc.workers);
    BenchOutcome out;
    out.detail["reductions"]["no_jumps"] = {{"M", 0}, {"note", "mark space is empty: jump-specific entries are skipped"}};
    out.detail["cost"] = {{"J", ca.value}, {"diffusion_reference_J", cb.value}};
    out.add("mismatched_entries", static_cast<double>(mismatches), 0.0, 0.0, mismatches == 0);
    out.add("cost_bit_identical", same_bits(ca.value, cb.value) ? 1.0 : 0.0, 1.0, 0.0, same_bits(ca.value, cb.value));
    return out;
}

inline BenchOutcome bench_nonlinear_coupled(const RunConfig& base) {
    RunConfig cfg = with_model(base, "nonlinear-coupled", nonlinear_coupled_params());
    cfg.control.value = Vec::Constant(1, 0.2);
    const ProblemSpec spec = build_problem(cfg);
    const DerivativeCheckReport deriv = check_derivatives(spec, 100, 1e-5, 1e-4);
    const ScenarioBatch batch = make_batch(cfg, spec, cfg.seed);
    PicardConfig pc = picard_config(cfg);
    pc.tolerance = std::min(pc.tolerance, cfg.verify.picard_tolerance);
    pc.max_iterations = std::max(pc.max_iterations, 200);
    const Solved s = solve_with(spec, batch, resolve_control(cfg, spec, batch), pc);
    const Linearization lin(spec, s.tr, s.u, pc.workers);
    const AdjointTrajectory adj = solve_adjoint(spec, batch, s.u, s.tr, lin, pc);
    const std::vector<Mat> hv = control_gradient(lin, adj, pc.workers);
    std::mt19937_64 gen(cfg.verify.direction_seed);
    BenchOutcome b;
    b.add("derivatives", deriv.pass() ? 1.0 : 0.0, 1.0, 0.0, deriv.pass());
    Json dirs = Json::array();
    for (int d = 0; d < cfg.verify.directions; ++d) {
        const ControlProcess theta = random_direction(s.tr, s.u, spec.control_set, cfg.verify.fd_step, gen);
        const GateauxComparison g = compare_gateaux(spec, batch, s.u, theta, s.tr, lin, hv, pc, cfg.verify.fd_step,
                                                    cfg.verify.agreement_abs);
        dirs.push_back(to_json(g));
        b.add("gateaux_excess_" + std::to_string(d), g.worst_excess, 0.0, 0.0, g.pass);
    }
    b.detail["gateaux"] = dirs;
    b.detail["picard"] = picard_json(s.tr);
    return b;
}

inline BenchOutcome run_bench(const std::string& name, const RunConfig& cfg) {
    if (name == "lq-full") return bench_lq_full(cfg);
    if (name == "lq-delayed") return bench_lq_delayed(cfg);
    if (name == "pure-forward") return bench_pure_forward(cfg);
    if (name == "no-jump") return bench_no_jump(cfg);
    if (name == "nonlinear-coupled") return bench_nonlinear_coupled(cfg);
    throw InvalidSpec("unknown benchmark '" + name + "'");
}

inline int cmd_bench(CommandContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    if (cfg.benchmark.empty()) throw InvalidSpec("benchmark: name required for the bench command");
    const BenchOutcome b = run_bench(cfg.benchmark, cfg);
    ctx.report["timings"]["bench_s"] = ctx.clock.lap();
    Json metrics = Json::array();
    for (const auto& m : b.metrics)
        metrics.push_back({{"name", m.name}, {"value", m.value}, {"reference", m.reference},
                           {"tolerance", m.tolerance}, {"pass", m.pass}});
    ctx.report["benchmark"] = {{"name", cfg.benchmark}, {"pass", b.pass()}, {"metrics", metrics}, {"detail", b.detail}};
    write_csv(cfg, "summary.csv", [&](std::ostream& os) {
        os << "benchmark,metric,value,reference,tolerance,pass\n" << std::setprecision(17);
        for (const auto& m : b.metrics)
            os << cfg.benchmark << ',' << m.name << ',' << m.value << ',' << m.reference << ',' << m.tolerance << ','
               << (m.pass ? 1 : 0) << '\n';
    });
    return b.pass() ? kExitOk : kExitVerification;
}

inline std::vector<std::string> command_names() { return {"simulate", "optimize", "verify", "bench"}; }

/// True when no residual after the first improves on the best seen before it.
inline bool stalled(const std::vector<double>& residuals) {
    if (residuals.size() < 2) return false;
    double best = residuals.front();
    for (std::size_t i = 1; i < residuals.size(); ++i) best = std::min(best, residuals[i]);
    return residuals.back() > best || !std::isfinite(residuals.back());
}

/// Runs one command end to end. The report is written even on failure; the
/// return value is the process exit code.
inline int run_command(const std::string& command, const std::string& config_path, const Overrides& ov,
                       std::ostream& log) {
    Json report;
    report["tool"] = "fbsde";
    report["version"] = kToolVersion;
    report["command"] = command;
    report["config_path"] = config_path;
    report["overrides"] = ov.to_json();
    report["warnings"] = Json::array();
    report["timings"] = Json::object();
    RunConfig cfg;
    cfg.output.dir = ov.out.value_or(cfg.output.dir);
    int code = kExitOk;
    Stopwatch total;
    try {
        cfg = load_config(config_path);
        ov.apply(cfg);
        report["seed"] = cfg.seed;
        report["workers"] = cfg.workers;
        report["config"] = to_json(cfg);
        CommandContext ctx{cfg, report, {}};
        if (command == "simulate") code = cmd_simulate(ctx);
        else if (command == "optimize") code = cmd_optimize(ctx);
        else if (command == "verify") code = cmd_verify(ctx);
        else if (command == "bench") code = cmd_bench(ctx);
        else throw InvalidSpec("unknown command '" + command + "'");
    } catch (const ValidationFailure& e) {
        code = kExitValidation;
        report["error"] = e.what();
        report["violations"] = to_json(e.report);
    } catch (const InvalidSpec& e) {
        code = kExitValidation;
        report["error"] = e.what();
    } catch (const ResourceLimit& e) {
        code = kExitValidation;
        report["error"] = e.what();
    } catch (const PicardDiverged& e) {
        code = kExitDivergence;
        report["error"] = e.what();
        report["picard"] = {{"converged", false}, {"residuals", e.residuals()}, {"stalled", stalled(e.residuals())}};
    } catch (const Error& e) {
        // Non-finite states, values or costs and singular regressions are
        // numerical breakdowns of the solver.
        code = kExitDivergence;
        report["error"] = e.what();
    } catch (const std::exception& e) {
        code = kExitInternal;
        report["error"] = e.what();
    }
    report["timings"]["total_s"] = total.total();
    report["exit_code"] = code;
    report["status"] = code == kExitOk ? "ok"
                       : code == kExitValidation ? "validation_failure"
                       : code == kExitDivergence ? "divergence"
                       : code == kExitVerification ? "verification_failure"
                                                   : "internal_error";
    if (cfg.output.json) {
        try {
            write_file(prepare_dir(cfg) / "report.json", report.dump(2) + "\n");
        } catch (const std::exception& e) {
            log << "fbsde: cannot write report: " << e.what() << '\n';
            if (code == kExitOk) code = kExitInternal;
        }
    }
    log << "fbsde " << command << ": " << report["status"].get<std::string>() << " (exit " << code << ")";
    if (report.contains("error")) log << ": " << report["error"].get<std::string>();
    log << '\n';
    return code;
}

} // namespace fbsde::cli
