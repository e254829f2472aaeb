#pragma once

// Experiment configuration: JSON ingestion with strict schema validation
// (unknown keys rejected, key paths in error messages), defaults expanded
// into a resolved config that every run writes next to its outputs.

#include "feq/common.hpp"
#include "feq/game.hpp"
#include "feq/perturb.hpp"
#include "feq/sysflow.hpp"
#include "feq/thermo.hpp"

#include <json.hpp>

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace feq {

using Json = nlohmann::json;

namespace cfg_detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& allowed,
                           const std::string& path) {
    if (!j.is_object()) throw SchemaError("config: " + path + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw SchemaError("config: unknown key " + path + "." + it.key());
}

template <class T>
T get_or(const Json& j, const std::string& key, const T& def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw SchemaError("config: bad value for " + key + ": " + e.what());
    }
}

template <class T>
T require(const Json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) throw SchemaError("config: missing key " + path + "." + key);
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw SchemaError("config: bad value for " + path + "." + key + ": " + e.what());
    }
}

inline Matrix parse_matrix(const Json& j, const std::string& path) {
    if (!j.is_array() || j.empty() || !j.front().is_array())
        throw SchemaError("config: " + path + " must be a row-major matrix (array of rows)");
    const std::size_t rows = j.size(), cols = j.front().size();
    Matrix M(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            throw SchemaError("config: " + path + " has ragged rows");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number())
                throw SchemaError("config: " + path + " entries must be numbers");
            M(r, c) = j[r][c].get<double>();
        }
    }
    return M;
}

inline Vector parse_vector(const Json& j, const std::string& path) {
    if (!j.is_array()) throw SchemaError("config: " + path + " must be an array of numbers");
    Vector v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw SchemaError("config: " + path + " entries must be numbers");
        v[i] = j[i].get<double>();
    }
    return v;
}

inline Json matrix_json(const Matrix& M) {
    Json rows = Json::array();
    for (int r = 0; r < M.rows(); ++r) {
        Json row = Json::array();
        for (int c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline Json vector_json(const Vector& v) {
    Json a = Json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

} // namespace cfg_detail

// ---------------------------------------------------------------------------

struct ThermoBlock {
    int m = 64;
    int samples_per_cell = 256;
    double tau = 1.0;
    double tol = 1e-10;
    long max_iter = 100000;
    int max_block_depth = 8;
    std::string phi_type = "zero";
    double phi_c = 0.0;
    Vector phi_a;   // linear
    Matrix phi_q;   // quadratic
};

struct GameBlock {
    std::vector<double> taus{1.0};
    double eps_eq = 1e-9;
    int max_rounds = 50;
    double gain_bound = 1.0;
    double grid_step = 0.5;
};

struct PerturbBlock {
    double epsilon = 0.0;
    std::vector<double> eps_sweep;   // when non-empty, resilience runs the sweep
    Matrix sigma;
    double dt_sde = 0.01;
    long n_paths = 10000;
    double horizon = 3.0;
    std::vector<double> times{2.0, 3.0};
    double delta = 1e-9;
    double pass_threshold = 0.1;
};

struct SimulateBlock {
    std::vector<Vector> x0;
    double t_final = 5.0;
    int out_every = 1;   // emit every k-th integration step
};

struct ExperimentConfig {
    std::uint64_t seed = 0;

    // system: continuous model and/or direct discrete map
    std::optional<SystemSpec> system;
    std::optional<GainSet> gains;
    std::optional<Matrix> direct_phi;
    Box domain;

    ThermoBlock thermo;
    GameBlock game;
    PerturbBlock perturb;
    SimulateBlock simulate;
    std::string out_dir = "out";

    Potential make_potential() const {
        if (thermo.phi_type == "zero") return Potential::zero();
        if (thermo.phi_type == "constant") return Potential::constant(thermo.phi_c);
        if (thermo.phi_type == "linear") return Potential::linear(thermo.phi_a, domain);
        if (thermo.phi_type == "quadratic") return Potential::quadratic(thermo.phi_q, domain);
        throw SchemaError("config: unknown potential type " + thermo.phi_type);
    }

    /// The time-tau flow map: direct discrete map when configured, otherwise
    /// the integrated closed loop.
    FlowMap make_flow_map(double tau, bool wrap) const {
        if (direct_phi) return FlowMap::direct(*direct_phi, domain, wrap);
        if (!system || !gains)
            throw SchemaError("config: system + gains required without a direct_map");
        return FlowMap(*system, *gains, tau, wrap);
    }

    FreeEnergyConfig fe_config(int threads = 1) const {
        FreeEnergyConfig fe;
        fe.samples_per_cell = thermo.samples_per_cell;
        fe.seed = substream_seed(seed, "ulam-master", 0);
        fe.tol = thermo.tol;
        fe.max_iter = thermo.max_iter;
        fe.max_block_depth = thermo.max_block_depth;
        fe.threads = threads;
        return fe;
    }
};

// ---------------------------------------------------------------------------

inline ExperimentConfig parse_config(const Json& root) {
    using namespace cfg_detail;
    reject_unknown(root, {"seed", "system", "gains", "thermo", "game", "perturb",
                          "simulate", "output"},
                   "$");
    ExperimentConfig cfg;
    cfg.seed = get_or<std::uint64_t>(root, "seed", 0);

    if (!root.contains("system")) throw SchemaError("config: missing key $.system");
    const Json& sys = root.at("system");
    reject_unknown(sys, {"d", "dt", "A", "channels", "domain", "direct_map"}, "$.system");

    const Json& dom = [&]() -> const Json& {
        if (!sys.contains("domain")) throw SchemaError("config: missing key $.system.domain");
        return sys.at("domain");
    }();
    reject_unknown(dom, {"lo", "hi", "wrap"}, "$.system.domain");
    cfg.domain.lo = parse_vector(require<Json>(dom, "lo", "$.system.domain"), "$.system.domain.lo");
    cfg.domain.hi = parse_vector(require<Json>(dom, "hi", "$.system.domain"), "$.system.domain.hi");
    cfg.domain.wrap = get_or<bool>(dom, "wrap", true);
    cfg.domain.validate();

    if (sys.contains("direct_map")) {
        reject_unknown(sys.at("direct_map"), {"Phi"}, "$.system.direct_map");
        cfg.direct_phi = parse_matrix(require<Json>(sys.at("direct_map"), "Phi",
                                                    "$.system.direct_map"),
                                      "$.system.direct_map.Phi");
    }

    if (sys.contains("A") || sys.contains("channels") || sys.contains("d")) {
        SystemSpec spec;
        spec.d = require<int>(sys, "d", "$.system");
        spec.dt = get_or<double>(sys, "dt", 1e-3);
        spec.domain = cfg.domain;

        const Json& a = require<Json>(sys, "A", "$.system");
        if (a.is_array()) {
            spec.A.switch_times = {0.0};
            spec.A.mats = {parse_matrix(a, "$.system.A")};
        } else {
            reject_unknown(a, {"segments"}, "$.system.A");
            const Json& segs = require<Json>(a, "segments", "$.system.A");
            if (!segs.is_array() || segs.empty())
                throw SchemaError("config: $.system.A.segments must be a non-empty array");
            for (std::size_t k = 0; k < segs.size(); ++k) {
                std::string p = "$.system.A.segments[" + std::to_string(k) + "]";
                reject_unknown(segs[k], {"t", "matrix"}, p);
                spec.A.switch_times.push_back(require<double>(segs[k], "t", p));
                spec.A.mats.push_back(parse_matrix(require<Json>(segs[k], "matrix", p),
                                                   p + ".matrix"));
            }
        }

        const Json& channels = require<Json>(sys, "channels", "$.system");
        if (!channels.is_array() || channels.empty())
            throw SchemaError("config: $.system.channels must be a non-empty array");
        spec.N = static_cast<int>(channels.size());
        for (std::size_t j = 0; j < channels.size(); ++j) {
            std::string p = "$.system.channels[" + std::to_string(j) + "]";
            reject_unknown(channels[j], {"B"}, p);
            spec.B.push_back(parse_matrix(require<Json>(channels[j], "B", p), p + ".B"));
        }
        spec.validate();
        cfg.system = std::move(spec);
    }
    if (!cfg.system && !cfg.direct_phi)
        throw SchemaError("config: $.system needs either a model (d/A/channels) or a direct_map");

    if (root.contains("gains")) {
        const Json& g = root.at("gains");
        reject_unknown(g, {"K", "bound"}, "$.gains");
        GainSet gs;
        gs.bound = get_or<double>(g, "bound", 1.0);
        const Json& ks = require<Json>(g, "K", "$.gains");
        if (!ks.is_array()) throw SchemaError("config: $.gains.K must be an array of matrices");
        for (std::size_t j = 0; j < ks.size(); ++j)
            gs.K.push_back(parse_matrix(ks[j], "$.gains.K[" + std::to_string(j) + "]"));
        if (cfg.system) gs.validate(*cfg.system);
        cfg.gains = std::move(gs);
    } else if (cfg.system) {
        // default: zero gains with unit bound
        GainSet gs;
        gs.bound = 1.0;
        for (int j = 0; j < cfg.system->N; ++j)
            gs.K.push_back(Matrix::Zero(cfg.system->B[j].cols(), cfg.system->d));
        cfg.gains = std::move(gs);
    }

    if (root.contains("thermo")) {
        const Json& t = root.at("thermo");
        reject_unknown(t, {"m", "samples_per_cell", "tau", "tol", "max_iter",
                           "max_block_depth", "phi"},
                       "$.thermo");
        cfg.thermo.m = get_or<int>(t, "m", cfg.thermo.m);
        cfg.thermo.samples_per_cell = get_or<int>(t, "samples_per_cell",
                                                  cfg.thermo.samples_per_cell);
        cfg.thermo.tau = get_or<double>(t, "tau", cfg.thermo.tau);
        cfg.thermo.tol = get_or<double>(t, "tol", cfg.thermo.tol);
        cfg.thermo.max_iter = get_or<long>(t, "max_iter", cfg.thermo.max_iter);
        cfg.thermo.max_block_depth = get_or<int>(t, "max_block_depth",
                                                 cfg.thermo.max_block_depth);
        if (t.contains("phi")) {
            const Json& ph = t.at("phi");
            reject_unknown(ph, {"type", "c", "a", "Q"}, "$.thermo.phi");
            cfg.thermo.phi_type = require<std::string>(ph, "type", "$.thermo.phi");
            cfg.thermo.phi_c = get_or<double>(ph, "c", 0.0);
            if (ph.contains("a")) cfg.thermo.phi_a = parse_vector(ph.at("a"), "$.thermo.phi.a");
            if (ph.contains("Q")) cfg.thermo.phi_q = parse_matrix(ph.at("Q"), "$.thermo.phi.Q");
        }
    }

    if (root.contains("game")) {
        const Json& g = root.at("game");
        reject_unknown(g, {"taus", "eps_eq", "max_rounds", "gain_bound", "grid_step"}, "$.game");
        cfg.game.taus = get_or<std::vector<double>>(g, "taus", cfg.game.taus);
        cfg.game.eps_eq = get_or<double>(g, "eps_eq", cfg.game.eps_eq);
        cfg.game.max_rounds = get_or<int>(g, "max_rounds", cfg.game.max_rounds);
        cfg.game.gain_bound = get_or<double>(g, "gain_bound", cfg.game.gain_bound);
        cfg.game.grid_step = get_or<double>(g, "grid_step", cfg.game.grid_step);
    }

    if (root.contains("perturb")) {
        const Json& p = root.at("perturb");
        reject_unknown(p, {"epsilon", "eps_sweep", "sigma", "dt_sde", "n_paths", "horizon",
                           "times", "delta", "pass_threshold"},
                       "$.perturb");
        cfg.perturb.epsilon = get_or<double>(p, "epsilon", cfg.perturb.epsilon);
        cfg.perturb.eps_sweep = get_or<std::vector<double>>(p, "eps_sweep",
                                                            cfg.perturb.eps_sweep);
        if (p.contains("sigma"))
            cfg.perturb.sigma = parse_matrix(p.at("sigma"), "$.perturb.sigma");
        cfg.perturb.dt_sde = get_or<double>(p, "dt_sde", cfg.perturb.dt_sde);
        cfg.perturb.n_paths = get_or<long>(p, "n_paths", cfg.perturb.n_paths);
        cfg.perturb.horizon = get_or<double>(p, "horizon", cfg.perturb.horizon);
        cfg.perturb.times = get_or<std::vector<double>>(p, "times", cfg.perturb.times);
        cfg.perturb.delta = get_or<double>(p, "delta", cfg.perturb.delta);
        cfg.perturb.pass_threshold = get_or<double>(p, "pass_threshold",
                                                    cfg.perturb.pass_threshold);
    }
    if (cfg.perturb.sigma.size() == 0 && cfg.system)
        cfg.perturb.sigma = Matrix::Identity(cfg.system->d, cfg.system->d);

    if (root.contains("simulate")) {
        const Json& s = root.at("simulate");
        reject_unknown(s, {"x0", "t_final", "out_every"}, "$.simulate");
        if (s.contains("x0")) {
            const Json& xs = s.at("x0");
            if (!xs.is_array()) throw SchemaError("config: $.simulate.x0 must be an array");
            for (std::size_t i = 0; i < xs.size(); ++i)
                cfg.simulate.x0.push_back(
                    parse_vector(xs[i], "$.simulate.x0[" + std::to_string(i) + "]"));
        }
        cfg.simulate.t_final = get_or<double>(s, "t_final", cfg.simulate.t_final);
        cfg.simulate.out_every = get_or<int>(s, "out_every", cfg.simulate.out_every);
    }

    if (root.contains("output")) {
        const Json& o = root.at("output");
        reject_unknown(o, {"dir"}, "$.output");
        cfg.out_dir = get_or<std::string>(o, "dir", cfg.out_dir);
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("config: cannot open " + path);
    Json root;
    try {
        in >> root;
    } catch (const Json::exception& e) {
        throw SchemaError("config: JSON parse failure in " + path + ": " + e.what());
    }
    return parse_config(root);
}

/// Fully resolved config (defaults expanded), written next to run outputs.
inline Json resolved_config(const ExperimentConfig& cfg) {
    using namespace cfg_detail;
    Json root;
    root["seed"] = cfg.seed;

    Json sys;
    sys["domain"] = {{"lo", vector_json(cfg.domain.lo)},
                     {"hi", vector_json(cfg.domain.hi)},
                     {"wrap", cfg.domain.wrap}};
    if (cfg.direct_phi) sys["direct_map"] = {{"Phi", matrix_json(*cfg.direct_phi)}};
    if (cfg.system) {
        sys["d"] = cfg.system->d;
        sys["dt"] = cfg.system->dt;
        Json segs = Json::array();
        for (std::size_t k = 0; k < cfg.system->A.mats.size(); ++k)
            segs.push_back({{"t", cfg.system->A.switch_times[k]},
                            {"matrix", matrix_json(cfg.system->A.mats[k])}});
        sys["A"] = {{"segments", segs}};
        Json channels = Json::array();
        for (const auto& B : cfg.system->B) channels.push_back({{"B", matrix_json(B)}});
        sys["channels"] = channels;
    }
    root["system"] = sys;

    if (cfg.gains) {
        Json ks = Json::array();
        for (const auto& K : cfg.gains->K) ks.push_back(matrix_json(K));
        root["gains"] = {{"K", ks}, {"bound", cfg.gains->bound}};
    }

    Json phi = {{"type", cfg.thermo.phi_type}};
    if (cfg.thermo.phi_type == "constant") phi["c"] = cfg.thermo.phi_c;
    if (cfg.thermo.phi_type == "linear") phi["a"] = vector_json(cfg.thermo.phi_a);
    if (cfg.thermo.phi_type == "quadratic") phi["Q"] = matrix_json(cfg.thermo.phi_q);
    root["thermo"] = {{"m", cfg.thermo.m},
                      {"samples_per_cell", cfg.thermo.samples_per_cell},
                      {"tau", cfg.thermo.tau},
                      {"tol", cfg.thermo.tol},
                      {"max_iter", cfg.thermo.max_iter},
                      {"max_block_depth", cfg.thermo.max_block_depth},
                      {"phi", phi}};

    root["game"] = {{"taus", cfg.game.taus},
                    {"eps_eq", cfg.game.eps_eq},
                    {"max_rounds", cfg.game.max_rounds},
                    {"gain_bound", cfg.game.gain_bound},
                    {"grid_step", cfg.game.grid_step}};

    Json pj = {{"epsilon", cfg.perturb.epsilon},
               {"dt_sde", cfg.perturb.dt_sde},
               {"n_paths", cfg.perturb.n_paths},
               {"horizon", cfg.perturb.horizon},
               {"times", cfg.perturb.times},
               {"delta", cfg.perturb.delta},
               {"pass_threshold", cfg.perturb.pass_threshold}};
    if (!cfg.perturb.eps_sweep.empty()) pj["eps_sweep"] = cfg.perturb.eps_sweep;
    if (cfg.perturb.sigma.size() > 0) pj["sigma"] = matrix_json(cfg.perturb.sigma);
    root["perturb"] = pj;

    Json xs = Json::array();
    for (const auto& x : cfg.simulate.x0) xs.push_back(vector_json(x));
    root["simulate"] = {{"x0", xs},
                        {"t_final", cfg.simulate.t_final},
                        {"out_every", cfg.simulate.out_every}};
    root["output"] = {{"dir", cfg.out_dir}};
    return root;
}

} // namespace feq
