// feq command-line tool: four experiment commands over one config format.
//
//   feq simulate    --config cfg.json [--out dir]   trajectories + decomposition check
//   feq thermo      --config cfg.json [--out dir]   free-energy report + invariant measure
//   feq equilibrium --config cfg.json [--oracle]    best-response search + certificate
//   feq resilience  --config cfg.json [--eps-sweep] perturbation KL report + verdict
//
// Exit codes: 0 success, 2 schema error, 3 convergence error, 4 numeric-range
// error, 5 resource error.

#include "feq/config.hpp"
#include "feq/game.hpp"
#include "feq/io.hpp"
#include "feq/perturb.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace feq;

namespace {

constexpr const char* kVersion = "feq 0.1.0";

struct GlobalOpts {
    std::string config_path;
    std::string out_dir;     // overrides config output.dir when set
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 1;
};

struct RunDir {
    fs::path dir;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    RunDir(const ExperimentConfig& cfg, const GlobalOpts& g) {
        dir = g.out_dir.empty() ? fs::path(cfg.out_dir) : fs::path(g.out_dir);
        fs::create_directories(dir);
        std::ofstream out(dir / "resolved_config.json", std::ios::binary);
        out << resolved_config(cfg).dump(2) << '\n';
    }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    void write_manifest(const std::string& command) const {
        auto wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
        std::ofstream out(dir / "manifest.txt", std::ios::binary);
        out << "artifact: " << kVersion << '\n'
            << "command: " << command << '\n'
            << "wall_seconds: " << fmt_double(wall.count()) << '\n';
    }
};

ExperimentConfig load(const GlobalOpts& g) {
    if (g.config_path.empty()) throw SchemaError("--config is required");
    ExperimentConfig cfg = load_config(g.config_path);
    if (g.seed_set) cfg.seed = g.seed;
    return cfg;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const GlobalOpts& g) {
    ExperimentConfig cfg = load(g);
    if (!cfg.system) throw SchemaError("simulate: requires a continuous system block");
    const SystemSpec& spec = *cfg.system;
    const GainSet& gains = *cfg.gains;
    gains.validate(spec);
    RunDir run(cfg, g);

    std::vector<Vector> x0s = cfg.simulate.x0;
    if (x0s.empty()) x0s.push_back(Vector::Ones(spec.d));

    std::vector<std::string> header{"traj", "step", "t"};
    for (int i = 0; i < spec.d; ++i) header.push_back("x_" + std::to_string(i));
    for (int j = 1; j <= spec.N; ++j) header.push_back("decomp_check_ch" + std::to_string(j));
    CsvWriter csv(run.path("trajectory.csv"), header);

    const long n_steps = static_cast<long>(std::llround(cfg.simulate.t_final / spec.dt));
    const int every = std::max(1, cfg.simulate.out_every);

    for (std::size_t traj = 0; traj < x0s.size(); ++traj) {
        if (x0s[traj].size() != spec.d) throw SchemaError("simulate: x0 dimension mismatch");
        std::vector<FactorStepper> steppers;
        for (int j = 1; j <= spec.N; ++j) steppers.emplace_back(spec, gains, j);

        Matrix phi_direct = Matrix::Identity(spec.d, spec.d);
        for (long s = 0; s <= n_steps; ++s) {
            double t = s * spec.dt;
            if (s > 0) {
                double t0 = (s - 1) * spec.dt;
                Matrix Acl = detail::closed_loop_without(spec, gains, spec.A.segment_at(t0), -1);
                phi_direct = (Acl * spec.dt).exp() * phi_direct;
                if (!phi_direct.allFinite())
                    throw NumericRangeError("simulate: state blew up by t = " + fmt_double(t));
                for (auto& st : steppers) st.advance_to(t);
            }
            if (s % every != 0 && s != n_steps) continue;
            Vector x = phi_direct * x0s[traj];
            std::vector<double> row{static_cast<double>(s), t};
            for (int i = 0; i < spec.d; ++i) row.push_back(x[i]);
            for (auto& st : steppers)
                row.push_back((st.product() - phi_direct).norm());
            csv.write_row({std::to_string(traj)}, row);
        }
    }
    run.write_manifest("simulate");
    std::cout << "simulate: wrote " << run.path("trajectory.csv") << '\n';
    return 0;
}

int cmd_thermo(const GlobalOpts& g) {
    ExperimentConfig cfg = load(g);
    RunDir run(cfg, g);

    FlowMap map = cfg.make_flow_map(cfg.thermo.tau, /*wrap=*/true);
    Partition part(cfg.domain, cfg.thermo.m);
    Potential phi = cfg.make_potential();
    FreeEnergyConfig fe = cfg.fe_config(g.threads);

    FreeEnergyReport rep = free_energy(map, part, phi, fe);

    {
        std::ofstream out(run.path("free_energy.txt"), std::ios::binary);
        out << "method: " << rep.method << '\n'
            << "entropy_nats: " << fmt_double(rep.h) << '\n'
            << "block_depth: " << rep.block_depth << '\n'
            << "phi_integral_nats: " << fmt_double(rep.phi_integral) << '\n'
            << "pressure_variational_nats: " << fmt_double(rep.pressure_variational) << '\n'
            << "pressure_spectral_nats: " << fmt_double(rep.pressure_spectral) << '\n'
            << "weighted_log_growth: " << fmt_double(rep.log_growth) << '\n'
            << "nonunique_invariant_warning: " << (rep.nonunique_warning ? "yes" : "no") << '\n';
    }

    UlamMatrix U = ulam_matrix(map, part, fe.samples_per_cell, fe.seed, 1, g.threads);
    auto inv = invariant_measure(U, fe.tol, fe.max_iter);
    write_ulam_triplets(run.path("ulam.txt"), U);

    std::vector<std::string> header{"cell"};
    for (int a = 0; a < part.dim(); ++a) header.push_back("center_" + std::to_string(a));
    header.push_back("mass");
    CsvWriter csv(run.path("invariant_measure.csv"), header);
    for (long i = 0; i < part.total; ++i) {
        Vector c = part.center(i);
        std::vector<double> row;
        for (int a = 0; a < part.dim(); ++a) row.push_back(c[a]);
        row.push_back(inv.measure.pi[i]);
        csv.write_row({std::to_string(i)}, row);
    }

    run.write_manifest("thermo");
    std::cout << "pressure_variational = " << fmt_double(rep.pressure_variational)
              << ", pressure_spectral = " << fmt_double(rep.pressure_spectral) << '\n';
    return 0;
}

int cmd_equilibrium(const GlobalOpts& g, bool oracle, double grid_step_flag,
                    double gain_bound_flag, const std::string& taus_flag,
                    const std::string& phi_flag, int max_rounds_flag) {
    ExperimentConfig cfg = load(g);
    if (!cfg.system) throw SchemaError("equilibrium: requires a continuous system block");
    RunDir run(cfg, g);

    GameContext ctx;
    ctx.spec = *cfg.system;
    ctx.phi = cfg.make_potential();
    ctx.taus = cfg.game.taus;
    ctx.m = cfg.thermo.m;
    ctx.fe = cfg.fe_config(g.threads);
    ctx.gain_bound = cfg.game.gain_bound;
    if (grid_step_flag > 0) cfg.game.grid_step = grid_step_flag;
    if (gain_bound_flag > 0) ctx.gain_bound = gain_bound_flag;
    if (!taus_flag.empty()) {
        ctx.taus.clear();
        std::stringstream ss(taus_flag);
        std::string tok;
        while (std::getline(ss, tok, ',')) ctx.taus.push_back(std::stod(tok));
    }
    if (phi_flag == "zero") ctx.phi = Potential::zero();
    else if (!phi_flag.empty()) ctx.phi = Potential::constant(std::stod(phi_flag));
    int max_rounds = max_rounds_flag > 0 ? max_rounds_flag : cfg.game.max_rounds;

    StrategyGrid grid = make_uniform_grid(ctx.spec, ctx.gain_bound, cfg.game.grid_step);

    GainSet initial;
    initial.bound = ctx.gain_bound;
    for (int j = 0; j < ctx.spec.N; ++j) initial.K.push_back(grid.candidates[j].front());
    if (cfg.gains && static_cast<int>(cfg.gains->K.size()) == ctx.spec.N) {
        bool on_grid = true;
        for (int j = 0; j < ctx.spec.N && on_grid; ++j) {
            on_grid = false;
            for (const auto& c : grid.candidates[j])
                if ((c - cfg.gains->K[j]).cwiseAbs().maxCoeff() < 1e-12) on_grid = true;
        }
        if (on_grid) initial.K = cfg.gains->K;
    }

    BrResult res = br_iteration(ctx, grid, initial, max_rounds, cfg.game.eps_eq);

    std::ofstream cert_out(run.path("certificate.txt"), std::ios::binary);
    if (res.converged) {
        const auto& cert = *res.certificate;
        cert_out << "status: converged\nrounds: " << res.rounds << '\n'
                 << "valid: " << (cert.valid ? "yes" : "no") << '\n'
                 << "eps_eq: " << fmt_double(cert.eps_eq) << '\n'
                 << "objective: " << fmt_double(cert.objective_value) << '\n';
        for (std::size_t k = 0; k < cert.taus.size(); ++k)
            cert_out << "objective_tau_" << fmt_double(cert.taus[k]) << ": "
                     << fmt_double(cert.objective_per_tau[k]) << '\n';
        for (std::size_t j = 0; j < cert.delta.size(); ++j)
            cert_out << "delta_ch" << j + 1 << ": " << fmt_double(cert.delta[j]) << '\n';
        for (int j = 0; j < ctx.spec.N; ++j) {
            cert_out << "K_" << j + 1 << ":";
            const auto& K = cert.gains.K[j];
            for (int r = 0; r < K.rows(); ++r)
                for (int c = 0; c < K.cols(); ++c) cert_out << ' ' << fmt_double(K(r, c));
            cert_out << '\n';
        }
        auto dists = fixed_point_diagnostics(ctx, cert.gains);
        cert_out << "fixed_point_l1_distances:";
        for (double dd : dists) cert_out << ' ' << fmt_double(dd);
        cert_out << '\n';
        std::cout << "equilibrium: converged, valid = " << (cert.valid ? "yes" : "no") << '\n';
    } else {
        cert_out << "status: non-convergence\nrounds: " << res.rounds << '\n'
                 << "cycle_length: " << res.visited_cycle.size() << '\n';
        for (std::size_t k = 0; k < res.visited_cycle.size(); ++k) {
            cert_out << "cycle_profile_" << k << ":";
            for (double v : detail::flatten(res.visited_cycle[k]))
                cert_out << ' ' << fmt_double(v);
            cert_out << '\n';
        }
        std::cout << "equilibrium: non-convergence (cycle of length "
                  << res.visited_cycle.size() << ")\n";
    }

    // Profile table: enumerate the whole grid when small enough, with per-tau
    // objectives and per-channel unilateral improvements.
    long n_entries = 0;
    for (const auto& K : initial.K) n_entries += K.size();
    std::vector<std::string> header{"profile"};
    for (long e = 0; e < n_entries; ++e) header.push_back("k" + std::to_string(e));
    for (double tau : ctx.taus) header.push_back("objective_tau_" + fmt_double(tau));
    for (int j = 1; j <= ctx.spec.N; ++j) header.push_back("delta_ch" + std::to_string(j));
    CsvWriter csv(run.path("profiles.csv"), header);

    std::vector<GainSet> oracle_list;
    if (grid.profile_count() <= 10000) {
        std::vector<std::size_t> idx(ctx.spec.N, 0);
        long pid = 0;
        while (true) {
            GainSet gset;
            gset.bound = ctx.gain_bound;
            for (int j = 0; j < ctx.spec.N; ++j) gset.K.push_back(grid.candidates[j][idx[j]]);
            auto cert = verify_equilibrium(ctx, grid, gset, cfg.game.eps_eq);
            if (cert.valid) oracle_list.push_back(gset);
            std::vector<double> row = detail::flatten(gset);
            for (double v : cert.objective_per_tau) row.push_back(v);
            for (double v : cert.delta) row.push_back(v);
            csv.write_row({std::to_string(pid)}, row);
            ++pid;
            int j = ctx.spec.N - 1;
            while (j >= 0 && ++idx[j] == grid.candidates[j].size()) idx[j--] = 0;
            if (j < 0) break;
        }
    }

    if (oracle) {
        std::ofstream odiff(run.path("oracle_diff.txt"), std::ios::binary);
        auto eqs = brute_force_equilibria(ctx, grid, cfg.game.eps_eq, ctx.gain_bound);
        bool br_in_oracle = !res.converged;
        for (const auto& e : eqs)
            if (res.converged &&
                detail::flatten(e) == detail::flatten(res.certificate->gains))
                br_in_oracle = true;
        odiff << "oracle_equilibria: " << eqs.size() << '\n';
        for (const auto& e : eqs) {
            odiff << "profile:";
            for (double v : detail::flatten(e)) odiff << ' ' << fmt_double(v);
            odiff << '\n';
        }
        odiff << "br_result_in_oracle_set: "
              << (res.converged ? (br_in_oracle ? "yes" : "NO (DISAGREEMENT)") : "n/a") << '\n';
        if (res.converged && !br_in_oracle) {
            std::cerr << "equilibrium: oracle disagreement\n";
            run.write_manifest("equilibrium");
            return 3;
        }
    }

    run.write_manifest("equilibrium");
    return 0;
}

int cmd_resilience(const GlobalOpts& g, double eps_flag, const std::string& sweep_flag,
                   double sigma_flag, long paths_flag, double horizon_flag,
                   double dt_sde_flag, const std::string& times_flag) {
    ExperimentConfig cfg = load(g);
    if (!cfg.system) throw SchemaError("resilience: requires a continuous system block");
    RunDir run(cfg, g);

    const SystemSpec& spec = *cfg.system;
    PerturbSpec p;
    p.epsilon = eps_flag >= 0 ? eps_flag : cfg.perturb.epsilon;
    p.sigma = sigma_flag >= 0 ? Matrix(sigma_flag * Matrix::Identity(spec.d, spec.d))
                              : cfg.perturb.sigma;
    p.dt_sde = dt_sde_flag > 0 ? dt_sde_flag : cfg.perturb.dt_sde;
    p.n_paths = paths_flag > 0 ? paths_flag : cfg.perturb.n_paths;
    p.horizon = horizon_flag > 0 ? horizon_flag : cfg.perturb.horizon;
    p.seed = substream_seed(cfg.seed, "perturb-master", 0);

    std::vector<double> times = cfg.perturb.times;
    if (!times_flag.empty()) {
        times.clear();
        std::stringstream ss(times_flag);
        std::string tok;
        while (std::getline(ss, tok, ',')) times.push_back(std::stod(tok));
    }
    std::vector<double> sweep = cfg.perturb.eps_sweep;
    if (!sweep_flag.empty()) {
        sweep.clear();
        std::stringstream ss(sweep_flag);
        std::string tok;
        while (std::getline(ss, tok, ',')) sweep.push_back(std::stod(tok));
    }

    Partition part(cfg.domain, cfg.thermo.m);
    ResilienceConfig rc;
    rc.tau_ulam = cfg.thermo.tau;
    rc.delta = cfg.perturb.delta;
    rc.threads = g.threads;
    rc.fe = cfg.fe_config(g.threads);

    CsvWriter csv(run.path("resilience.csv"),
                  {"epsilon", "t", "kl", "pinsker_lhs", "slack", "rho_hat"});
    std::string verdict;

    if (!sweep.empty()) {
        SweepResult sw = convergence_sweep(spec, *cfg.gains, p, part, sweep, times, rc,
                                           cfg.perturb.pass_threshold);
        for (std::size_t k = 0; k < sw.reports.size(); ++k)
            for (const auto& row : sw.reports[k].rows)
                csv.write_row({sw.eps_list[k], row.t, row.kl, row.pinsker_lhs, row.slack,
                               sw.reports[k].rho_hat});
        verdict = sw.verdict + " (noise_floor = " + fmt_double(sw.noise_floor) +
                  ", final rho_hat = " + fmt_double(sw.reports.back().rho_hat) + ")";
    } else {
        ResilienceReport rep = resilience_run(spec, *cfg.gains, p, part, times, rc);
        for (const auto& row : rep.rows)
            csv.write_row({rep.epsilon, row.t, row.kl, row.pinsker_lhs, row.slack,
                           rep.rho_hat});
        verdict = "rho_hat = " + fmt_double(rep.rho_hat);
    }

    {
        std::ofstream vout(run.path("verdict.txt"), std::ios::binary);
        vout << verdict << '\n';
    }
    std::cout << verdict << '\n';
    run.write_manifest("resilience");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Free-energy equilibrium gains and resilience testing"};
    app.require_subcommand(1);
    app.fallthrough();  // accept the global options after the subcommand too

    GlobalOpts g;
    app.add_option("--config", g.config_path, "experiment config file (JSON)");
    app.add_option("--out", g.out_dir, "output directory (overrides config)");
    auto* seed_opt = app.add_option("--seed", g.seed, "master seed (overrides config)");
    app.add_option("--threads", g.threads, "worker threads")->default_val(1);

    auto* sim = app.add_subcommand("simulate", "integrate trajectories + decomposition check");
    auto* thermo = app.add_subcommand("thermo", "free-energy / pressure report");

    auto* eq = app.add_subcommand("equilibrium", "best-response equilibrium search");
    bool oracle = false;
    double grid_step = -1, gain_bound = -1;
    int max_rounds = -1;
    std::string taus_flag, phi_flag;
    eq->add_flag("--oracle", oracle, "run the brute-force oracle and diff");
    eq->add_option("--grid-step", grid_step, "per-entry grid step");
    eq->add_option("--gain-bound", gain_bound, "uniform gain entry bound M");
    eq->add_option("--taus", taus_flag, "comma-separated map times");
    eq->add_option("--phi", phi_flag, "potential: 'zero' or a constant value");
    eq->add_option("--max-rounds", max_rounds, "best-response round budget");

    auto* res = app.add_subcommand("resilience", "perturbation KL report / sweep");
    double eps_flag = -1, sigma_flag = -1, horizon_flag = -1, dt_sde_flag = -1;
    long paths_flag = -1;
    std::string sweep_flag, times_flag;
    res->add_option("--epsilon", eps_flag, "perturbation level");
    res->add_option("--eps-sweep", sweep_flag, "comma-separated decreasing epsilons");
    res->add_option("--sigma", sigma_flag, "diffusion scale (sigma = s * I)");
    res->add_option("--paths", paths_flag, "number of SDE paths");
    res->add_option("--horizon", horizon_flag, "final SDE time");
    res->add_option("--dt-sde", dt_sde_flag, "SDE step");
    res->add_option("--times", times_flag, "comma-separated sample times");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        if (sim->parsed()) return cmd_simulate(g);
        if (thermo->parsed()) return cmd_thermo(g);
        if (eq->parsed())
            return cmd_equilibrium(g, oracle, grid_step, gain_bound, taus_flag, phi_flag,
                                   max_rounds);
        if (res->parsed())
            return cmd_resilience(g, eps_flag, sweep_flag, sigma_flag, paths_flag,
                                  horizon_flag, dt_sde_flag, times_flag);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
