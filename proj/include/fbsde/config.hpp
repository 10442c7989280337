#pragma once

#include "fbsde/affine_model.hpp"
#include "fbsde/benchmarks.hpp"
#include "fbsde/errors.hpp"
#include "fbsde/optimizer.hpp"
#include "fbsde/picard.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fbsde {

using Json = nlohmann::ordered_json;

enum class ControlKind { constant, feedback, file, lq_oracle };

/// Control to simulate, verify or start the optimizer from.
struct ControlConfig {
    ControlKind kind = ControlKind::constant;
    Vec value;   ///< constant
    Mat gain;    ///< feedback: v = Proj_U(gain * x_info + offset)
    Vec offset;
    std::string path;  ///< file: CSV written by write_control_csv
};

struct VerifyConfig {
    int directions = 5;
    double fd_step = 1e-4;
    std::uint64_t direction_seed = 7;
    double agreement_abs = 1e-3;
    int sections = 8;
    double stationarity_abs = 1e-4;
    double moment_threshold = 1e12;
    double picard_tolerance = 1e-9;
};

struct OutputConfig {
    std::string dir = "out";
    bool csv = true;
    bool json = true;
};

struct RunConfig {
    std::string builtin = "lq";
    AffineModelParams model = builtin_model("lq");
    int N = 64;
    int P = 4096;
    std::uint64_t seed = 42;
    int workers = 1;
    PicardConfig picard;
    OptimizerConfig optimizer;
    ControlConfig control;
    VerifyConfig verify;
    std::string benchmark;
    OutputConfig output;

    RunConfig() { control.value = Vec::Zero(model.dims.k); }
};

namespace detail {

inline void require_object(const Json& j, const std::string& where) {
    if (!j.is_object()) throw InvalidSpec(where + ": expected an object");
}

/// Unknown keys are hard errors so that a misspelt tolerance cannot pass
/// silently.
inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    require_object(j, where);
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items())
        if (!ok.count(key)) throw InvalidSpec(where + ": unknown key '" + key + "'");
}

template <typename T>
T get(const Json& j, const std::string& where) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InvalidSpec(where + ": wrong type");
    }
}

inline Vec vec_from(const Json& j, const std::string& where) {
    if (!j.is_array()) throw InvalidSpec(where + ": expected an array of numbers");
    Vec v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t a = 0; a < j.size(); ++a) v[static_cast<Eigen::Index>(a)] = get<double>(j[a], where);
    return v;
}

inline Mat mat_from(const Json& j, const std::string& where) {
    if (!j.is_array()) throw InvalidSpec(where + ": expected an array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].is_array() ? j[0].size() : 0);
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Json& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw InvalidSpec(where + ": rows must be arrays of equal length");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get<double>(row[static_cast<std::size_t>(c)], where);
    }
    return m;
}

inline Json to_json(const Vec& v) {
    Json j = Json::array();
    for (Eigen::Index a = 0; a < v.size(); ++a) j.push_back(v[a]);
    return j;
}

inline Json to_json(const Mat& m) {
    Json j = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(row);
    }
    return j;
}

inline void read_map(const Json& j, AffineMap& m, const std::string& where) {
    check_keys(j, {"offset", "linear", "scale"}, where);
    if (j.contains("offset")) m.offset = vec_from(j["offset"], where + ".offset");
    if (j.contains("linear")) m.linear = mat_from(j["linear"], where + ".linear");
    if (j.contains("scale")) m.scale = get<double>(j["scale"], where + ".scale");
}

inline Json write_map(const AffineMap& m) {
    return {{"offset", to_json(m.offset)}, {"linear", to_json(m.linear)}, {"scale", m.scale}};
}

inline void read_form(const Json& j, QuadraticForm& q, const std::string& where) {
    check_keys(j, {"quad", "lin", "constant"}, where);
    if (j.contains("quad")) q.quad = mat_from(j["quad"], where + ".quad");
    if (j.contains("lin")) q.lin = vec_from(j["lin"], where + ".lin");
    if (j.contains("constant")) q.constant = get<double>(j["constant"], where + ".constant");
}

inline Json write_form(const QuadraticForm& q) {
    return {{"quad", to_json(q.quad)}, {"lin", to_json(q.lin)}, {"constant", q.constant}};
}

inline const char* filtration_name(FiltrationKind k) {
    switch (k) {
    case FiltrationKind::full: return "full";
    case FiltrationKind::delayed: return "delayed";
    case FiltrationKind::trivial: return "trivial";
    }
    return "full";
}

inline FiltrationKind filtration_kind(const std::string& s) {
    if (s == "full") return FiltrationKind::full;
    if (s == "delayed") return FiltrationKind::delayed;
    if (s == "trivial") return FiltrationKind::trivial;
    throw InvalidSpec("model.filtration.kind: unknown filtration '" + s + "'");
}

inline void read_model(const Json& j, RunConfig& cfg) {
    check_keys(j, {"builtin", "name", "dims", "marks", "T", "a", "b", "g", "sigma", "f", "l", "phi", "h", "terminal",
                   "control_set", "filtration"},
               "model");
    if (j.contains("builtin")) cfg.builtin = get<std::string>(j["builtin"], "model.builtin");
    if (cfg.builtin == "affine") {
        Dimensions dims;
        MarkSpace marks;
        if (j.contains("dims")) {
            check_keys(j["dims"], {"n", "m", "d", "k"}, "model.dims");
            const Json& dj = j["dims"];
            if (dj.contains("n")) dims.n = get<int>(dj["n"], "model.dims.n");
            if (dj.contains("m")) dims.m = get<int>(dj["m"], "model.dims.m");
            if (dj.contains("d")) dims.d = get<int>(dj["d"], "model.dims.d");
            if (dj.contains("k")) dims.k = get<int>(dj["k"], "model.dims.k");
        }
        if (dims.n < 1 || dims.m < 1 || dims.d < 0 || dims.k < 1)
            throw InvalidSpec("model.dims: need n, m, k >= 1 and d >= 0");
        if (j.contains("marks")) {
            check_keys(j["marks"], {"atoms", "weights"}, "model.marks");
            marks.atoms = get<std::vector<double>>(j["marks"].value("atoms", Json::array()), "model.marks.atoms");
            marks.weights = get<std::vector<double>>(j["marks"].value("weights", Json::array()), "model.marks.weights");
        }
        cfg.model = AffineModelParams::zeros(dims, marks);
    } else {
        cfg.model = builtin_model(cfg.builtin);
        if (j.contains("dims")) {
            check_keys(j["dims"], {"n", "m", "d", "k"}, "model.dims");
            Dimensions d = cfg.model.dims;
            const Json& dj = j["dims"];
            d.n = dj.value("n", d.n);
            d.m = dj.value("m", d.m);
            d.d = dj.value("d", d.d);
            d.k = dj.value("k", d.k);
            cfg.model.dims = d;
        }
        if (j.contains("marks")) {
            check_keys(j["marks"], {"atoms", "weights"}, "model.marks");
            if (j["marks"].contains("atoms"))
                cfg.model.marks.atoms = get<std::vector<double>>(j["marks"]["atoms"], "model.marks.atoms");
            if (j["marks"].contains("weights"))
                cfg.model.marks.weights = get<std::vector<double>>(j["marks"]["weights"], "model.marks.weights");
        }
    }
    AffineModelParams& m = cfg.model;
    if (j.contains("name")) m.name = get<std::string>(j["name"], "model.name");
    if (j.contains("T")) m.T = get<double>(j["T"], "model.T");
    if (j.contains("a")) m.a = vec_from(j["a"], "model.a");
    if (j.contains("b")) read_map(j["b"], m.b, "model.b");
    if (j.contains("g")) read_map(j["g"], m.g, "model.g");
    if (j.contains("sigma")) read_map(j["sigma"], m.sigma, "model.sigma");
    if (j.contains("f")) read_map(j["f"], m.f, "model.f");
    if (j.contains("l")) read_form(j["l"], m.l, "model.l");
    if (j.contains("phi")) read_form(j["phi"], m.phi, "model.phi");
    if (j.contains("h")) read_form(j["h"], m.h, "model.h");
    if (j.contains("terminal")) {
        const Json& t = j["terminal"];
        check_keys(t, {"kind", "offset", "brownian", "counts", "state"}, "model.terminal");
        if (t.contains("kind")) {
            const auto kind = get<std::string>(t["kind"], "model.terminal.kind");
            if (kind == "driver") m.terminal_kind = TerminalKind::driver;
            else if (kind == "state") m.terminal_kind = TerminalKind::state;
            else throw InvalidSpec("model.terminal.kind: unknown kind '" + kind + "'");
        }
        if (t.contains("offset")) m.xi_offset = vec_from(t["offset"], "model.terminal.offset");
        if (t.contains("brownian")) m.xi_brownian = mat_from(t["brownian"], "model.terminal.brownian");
        if (t.contains("counts")) m.xi_counts = mat_from(t["counts"], "model.terminal.counts");
        if (t.contains("state")) m.xi_state = mat_from(t["state"], "model.terminal.state");
    }
    if (j.contains("control_set")) {
        const Json& c = j["control_set"];
        check_keys(c, {"kind", "lower", "upper", "center", "radius", "total"}, "model.control_set");
        const auto kind = get<std::string>(c.value("kind", Json("box")), "model.control_set.kind");
        if (kind == "box") {
            m.control_set = ControlSet::box(vec_from(c.value("lower", Json::array()), "model.control_set.lower"),
                                            vec_from(c.value("upper", Json::array()), "model.control_set.upper"));
        } else if (kind == "ball") {
            m.control_set = ControlSet::ball(vec_from(c.value("center", Json::array()), "model.control_set.center"),
                                             get<double>(c.value("radius", Json(1.0)), "model.control_set.radius"));
        } else if (kind == "simplex") {
            m.control_set = ControlSet::simplex(m.dims.k, get<double>(c.value("total", Json(1.0)), "model.control_set.total"));
        } else {
            throw InvalidSpec("model.control_set.kind: unknown kind '" + kind + "'");
        }
    }
    if (j.contains("filtration")) {
        const Json& f = j["filtration"];
        check_keys(f, {"kind", "delay", "degree"}, "model.filtration");
        if (f.contains("kind")) m.filtration.kind = filtration_kind(get<std::string>(f["kind"], "model.filtration.kind"));
        if (f.contains("delay")) m.filtration.delay = get<double>(f["delay"], "model.filtration.delay");
        if (f.contains("degree")) m.filtration.degree = get<int>(f["degree"], "model.filtration.degree");
    }
}

inline Json write_model(const RunConfig& cfg) {
    const AffineModelParams& m = cfg.model;
    Json j;
    j["builtin"] = cfg.builtin;
    j["name"] = m.name;
    j["dims"] = {{"n", m.dims.n}, {"m", m.dims.m}, {"d", m.dims.d}, {"k", m.dims.k}};
    j["marks"] = {{"atoms", m.marks.atoms}, {"weights", m.marks.weights}};
    j["T"] = m.T;
    j["a"] = to_json(m.a);
    j["b"] = write_map(m.b);
    j["g"] = write_map(m.g);
    j["sigma"] = write_map(m.sigma);
    j["f"] = write_map(m.f);
    j["l"] = write_form(m.l);
    j["phi"] = write_form(m.phi);
    j["h"] = write_form(m.h);
    Json t;
    t["kind"] = m.terminal_kind == TerminalKind::driver ? "driver" : "state";
    t["offset"] = to_json(m.xi_offset);
    t["brownian"] = to_json(m.xi_brownian);
    t["counts"] = to_json(m.xi_counts);
    t["state"] = to_json(m.xi_state);
    j["terminal"] = t;
    Json c;
    switch (m.control_set.kind) {
    case ControlSetKind::box:
        c = {{"kind", "box"}, {"lower", to_json(m.control_set.lower)}, {"upper", to_json(m.control_set.upper)}};
        break;
    case ControlSetKind::ball:
        c = {{"kind", "ball"}, {"center", to_json(m.control_set.center)}, {"radius", m.control_set.radius}};
        break;
    case ControlSetKind::simplex: c = {{"kind", "simplex"}, {"total", m.control_set.total}}; break;
    }
    j["control_set"] = c;
    j["filtration"] = {{"kind", filtration_name(m.filtration.kind)},
                       {"delay", m.filtration.delay},
                       {"degree", m.filtration.degree}};
    return j;
}

inline void read_numerics(const Json& j, RunConfig& cfg) {
    check_keys(j, {"N", "P", "seed", "workers", "basis_degree", "ridge", "picard", "optimizer"}, "numerics");
    if (j.contains("N")) cfg.N = get<int>(j["N"], "numerics.N");
    if (j.contains("P")) cfg.P = get<int>(j["P"], "numerics.P");
    if (j.contains("seed")) cfg.seed = get<std::uint64_t>(j["seed"], "numerics.seed");
    if (j.contains("workers")) cfg.workers = get<int>(j["workers"], "numerics.workers");
    if (j.contains("basis_degree")) cfg.picard.regression.degree = get<int>(j["basis_degree"], "numerics.basis_degree");
    if (j.contains("ridge")) cfg.picard.regression.ridge = get<double>(j["ridge"], "numerics.ridge");
    if (j.contains("picard")) {
        const Json& p = j["picard"];
        check_keys(p, {"max_iterations", "damping", "tolerance", "stall_window"}, "numerics.picard");
        if (p.contains("max_iterations")) cfg.picard.max_iterations = get<int>(p["max_iterations"], "numerics.picard.max_iterations");
        if (p.contains("damping")) cfg.picard.damping = get<double>(p["damping"], "numerics.picard.damping");
        if (p.contains("tolerance")) cfg.picard.tolerance = get<double>(p["tolerance"], "numerics.picard.tolerance");
        if (p.contains("stall_window")) cfg.picard.stall_window = get<int>(p["stall_window"], "numerics.picard.stall_window");
    }
    if (j.contains("optimizer")) {
        const Json& o = j["optimizer"];
        check_keys(o, {"gamma", "rule", "max_iterations", "tolerance", "candidates_per_axis", "convexity_samples",
                       "max_condition_bins", "control_variate"},
                   "numerics.optimizer");
        OptimizerConfig& oc = cfg.optimizer;
        if (o.contains("gamma")) oc.gamma = get<double>(o["gamma"], "numerics.optimizer.gamma");
        if (o.contains("rule")) {
            const auto rule = get<std::string>(o["rule"], "numerics.optimizer.rule");
            if (rule == "fixed") oc.rule = StepRule::fixed;
            else if (rule == "halving") oc.rule = StepRule::halving;
            else throw InvalidSpec("numerics.optimizer.rule: unknown rule '" + rule + "'");
        }
        if (o.contains("max_iterations")) oc.max_iterations = get<int>(o["max_iterations"], "numerics.optimizer.max_iterations");
        if (o.contains("tolerance")) oc.tolerance = get<double>(o["tolerance"], "numerics.optimizer.tolerance");
        if (o.contains("candidates_per_axis"))
            oc.candidates_per_axis = get<int>(o["candidates_per_axis"], "numerics.optimizer.candidates_per_axis");
        if (o.contains("convexity_samples"))
            oc.convexity_samples = get<int>(o["convexity_samples"], "numerics.optimizer.convexity_samples");
        if (o.contains("max_condition_bins"))
            oc.max_condition_bins = get<int>(o["max_condition_bins"], "numerics.optimizer.max_condition_bins");
        if (o.contains("control_variate"))
            oc.control_variate = get<bool>(o["control_variate"], "numerics.optimizer.control_variate");
    }
}

inline Json write_numerics(const RunConfig& cfg) {
    const OptimizerConfig& oc = cfg.optimizer;
    return {{"N", cfg.N},
            {"P", cfg.P},
            {"seed", cfg.seed},
            {"workers", cfg.workers},
            {"basis_degree", cfg.picard.regression.degree},
            {"ridge", cfg.picard.regression.ridge},
            {"picard",
             {{"max_iterations", cfg.picard.max_iterations},
              {"damping", cfg.picard.damping},
              {"tolerance", cfg.picard.tolerance},
              {"stall_window", cfg.picard.stall_window}}},
            {"optimizer",
             {{"gamma", oc.gamma},
              {"rule", oc.rule == StepRule::fixed ? "fixed" : "halving"},
              {"max_iterations", oc.max_iterations},
              {"tolerance", oc.tolerance},
              {"candidates_per_axis", oc.candidates_per_axis},
              {"convexity_samples", oc.convexity_samples},
              {"max_condition_bins", oc.max_condition_bins},
              {"control_variate", oc.control_variate}}}};
}

inline void read_control(const Json& j, RunConfig& cfg) {
    check_keys(j, {"kind", "value", "gain", "offset", "path"}, "control");
    ControlConfig& c = cfg.control;
    const auto kind = get<std::string>(j.value("kind", Json("constant")), "control.kind");
    if (kind == "constant") {
        c.kind = ControlKind::constant;
        c.value = j.contains("value") ? vec_from(j["value"], "control.value") : Vec::Zero(cfg.model.dims.k);
    } else if (kind == "feedback") {
        c.kind = ControlKind::feedback;
        c.gain = j.contains("gain") ? mat_from(j["gain"], "control.gain") : Mat::Zero(cfg.model.dims.k, cfg.model.dims.n);
        c.offset = j.contains("offset") ? vec_from(j["offset"], "control.offset") : Vec::Zero(cfg.model.dims.k);
    } else if (kind == "file") {
        c.kind = ControlKind::file;
        c.path = get<std::string>(j.value("path", Json("")), "control.path");
        if (c.path.empty()) throw InvalidSpec("control.path: required for a file control");
    } else if (kind == "lq-oracle") {
        c.kind = ControlKind::lq_oracle;
    } else {
        throw InvalidSpec("control.kind: unknown kind '" + kind + "'");
    }
}

inline Json write_control(const ControlConfig& c) {
    switch (c.kind) {
    case ControlKind::constant: return {{"kind", "constant"}, {"value", to_json(c.value)}};
    case ControlKind::feedback: return {{"kind", "feedback"}, {"gain", to_json(c.gain)}, {"offset", to_json(c.offset)}};
    case ControlKind::file: return {{"kind", "file"}, {"path", c.path}};
    case ControlKind::lq_oracle: return {{"kind", "lq-oracle"}};
    }
    return {};
}

inline void read_verify(const Json& j, VerifyConfig& v) {
    check_keys(j, {"directions", "fd_step", "direction_seed", "agreement_abs", "sections", "stationarity_abs",
                   "moment_threshold", "picard_tolerance"},
               "verify");
    if (j.contains("directions")) v.directions = get<int>(j["directions"], "verify.directions");
    if (j.contains("fd_step")) v.fd_step = get<double>(j["fd_step"], "verify.fd_step");
    if (j.contains("direction_seed")) v.direction_seed = get<std::uint64_t>(j["direction_seed"], "verify.direction_seed");
    if (j.contains("agreement_abs")) v.agreement_abs = get<double>(j["agreement_abs"], "verify.agreement_abs");
    if (j.contains("sections")) v.sections = get<int>(j["sections"], "verify.sections");
    if (j.contains("stationarity_abs")) v.stationarity_abs = get<double>(j["stationarity_abs"], "verify.stationarity_abs");
    if (j.contains("moment_threshold")) v.moment_threshold = get<double>(j["moment_threshold"], "verify.moment_threshold");
    if (j.contains("picard_tolerance"))
        v.picard_tolerance = get<double>(j["picard_tolerance"], "verify.picard_tolerance");
}

inline Json write_verify(const VerifyConfig& v) {
    return {{"directions", v.directions},       {"fd_step", v.fd_step},
            {"direction_seed", v.direction_seed}, {"agreement_abs", v.agreement_abs},
            {"sections", v.sections},           {"stationarity_abs", v.stationarity_abs},
            {"moment_threshold", v.moment_threshold}, {"picard_tolerance", v.picard_tolerance}};
}

} // namespace detail

/// Parses a run configuration. Missing sections keep their defaults; unknown
/// keys at any level raise InvalidSpec.
inline RunConfig parse_config(const Json& j) {
    detail::check_keys(j, {"model", "numerics", "control", "verify", "benchmark", "output"}, "config");
    RunConfig cfg;
    if (j.contains("model")) detail::read_model(j["model"], cfg);
    cfg.control.value = Vec::Zero(cfg.model.dims.k);
    if (j.contains("numerics")) detail::read_numerics(j["numerics"], cfg);
    if (j.contains("control")) detail::read_control(j["control"], cfg);
    if (j.contains("verify")) detail::read_verify(j["verify"], cfg.verify);
    if (j.contains("benchmark")) cfg.benchmark = detail::get<std::string>(j["benchmark"], "benchmark");
    if (j.contains("output")) {
        const Json& o = j["output"];
        detail::check_keys(o, {"dir", "formats"}, "output");
        if (o.contains("dir")) cfg.output.dir = detail::get<std::string>(o["dir"], "output.dir");
        if (o.contains("formats")) {
            const auto formats = detail::get<std::vector<std::string>>(o["formats"], "output.formats");
            cfg.output.csv = cfg.output.json = false;
            for (const auto& f : formats) {
                if (f == "csv") cfg.output.csv = true;
                else if (f == "json") cfg.output.json = true;
                else throw InvalidSpec("output.formats: unknown format '" + f + "'");
            }
        }
    }
    return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidSpec(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidSpec("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

/// Fully resolved configuration; parse_config(to_json(c)) reproduces c.
inline Json to_json(const RunConfig& cfg) {
    Json j;
    j["model"] = detail::write_model(cfg);
    j["numerics"] = detail::write_numerics(cfg);
    j["control"] = detail::write_control(cfg.control);
    j["verify"] = detail::write_verify(cfg.verify);
    j["benchmark"] = cfg.benchmark;
    Json formats = Json::array();
    if (cfg.output.csv) formats.push_back("csv");
    if (cfg.output.json) formats.push_back("json");
    j["output"] = {{"dir", cfg.output.dir}, {"formats", formats}};
    return j;
}

} // namespace fbsde
