#pragma once

// Best-response search for equilibrium feedback gains on a finite strategy
// grid, equilibrium verification, and a brute-force enumeration oracle.
// The objective is the free-energy pressure of the wrapped closed-loop map,
// min-aggregated over a sampled list of map times.

#include "feq/common.hpp"
#include "feq/sysflow.hpp"
#include "feq/thermo.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace feq {

// ---------------------------------------------------------------------------
// Finite per-channel grids of candidate gain matrices.

struct StrategyGrid {
    std::vector<std::vector<Matrix>> candidates;  // candidates[j] for channel j

    void validate(const SystemSpec& spec, double bound) const {
        if (static_cast<int>(candidates.size()) != spec.N)
            throw SchemaError("grid: need one candidate list per channel");
        for (int j = 0; j < spec.N; ++j) {
            if (candidates[j].empty())
                throw SchemaError("grid: empty candidate list for channel " + std::to_string(j));
            for (const auto& K : candidates[j]) {
                if (K.rows() != spec.B[j].cols() || K.cols() != spec.d)
                    throw SchemaError("grid: candidate shape mismatch on channel " +
                                      std::to_string(j));
                if (K.cwiseAbs().maxCoeff() > bound + 1e-15)
                    throw SchemaError("grid: candidate violates the gain bound");
            }
        }
    }

    long profile_count() const {
        long n = 1;
        for (const auto& c : candidates) n *= static_cast<long>(c.size());
        return n;
    }
};

/// Grid with per-entry values {-M, -M+step, ..., M} for every gain entry,
/// full cartesian product per channel.
inline StrategyGrid make_uniform_grid(const SystemSpec& spec, double bound, double step) {
    if (!(bound > 0.0) || !(step > 0.0)) throw SchemaError("grid: bound and step must be positive");
    std::vector<double> values;
    long npts = static_cast<long>(std::floor(2.0 * bound / step + 1e-9)) + 1;
    for (long k = 0; k < npts; ++k) values.push_back(-bound + k * step);

    StrategyGrid grid;
    grid.candidates.resize(spec.N);
    for (int j = 0; j < spec.N; ++j) {
        int rows = static_cast<int>(spec.B[j].cols()), cols = spec.d;
        int entries = rows * cols;
        long count = 1;
        for (int e = 0; e < entries; ++e) {
            if (count > 1000000 / static_cast<long>(values.size()))
                throw ResourceError("grid: per-channel candidate count too large");
            count *= values.size();
        }
        for (long c = 0; c < count; ++c) {
            Matrix K(rows, cols);
            long rem = c;
            for (int e = 0; e < entries; ++e) {
                K(e / cols, e % cols) = values[rem % values.size()];
                rem /= values.size();
            }
            grid.candidates[j].push_back(K);
        }
    }
    return grid;
}

namespace detail {

/// Strict lexicographic order on flattened entries (tie-break rule).
inline bool lex_less(const Matrix& a, const Matrix& b) {
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            if (a(i, j) < b(i, j)) return true;
            if (a(i, j) > b(i, j)) return false;
        }
    return false;
}

inline std::vector<double> flatten(const GainSet& g) {
    std::vector<double> out;
    for (const auto& K : g.K)
        for (int i = 0; i < K.rows(); ++i)
            for (int j = 0; j < K.cols(); ++j) out.push_back(K(i, j));
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Evaluation context. Immutable settings plus a memo of evaluated profiles.

struct GameContext {
    SystemSpec spec;
    Potential phi = Potential::zero();
    std::vector<double> taus{0.5, 1.0, 2.0};
    int m = 64;                       // partition resolution
    FreeEnergyConfig fe;
    double gain_bound = 1.0;

    // Optional replacement payoff. Lets callers study the best-response
    // dynamics on synthetic objectives without the pressure pipeline.
    std::function<double(const GainSet&)> objective_override;

    mutable std::map<std::vector<double>, double> cache;
    mutable std::map<std::vector<double>, std::vector<double>> per_tau_cache;

    void validate() const {
        spec.validate();
        if (taus.empty()) throw SchemaError("game: tau list must be non-empty");
        for (double t : taus)
            if (!(t > 0.0)) throw SchemaError("game: all taus must be positive");
    }
};

/// Min over sampled taus of the spectral pressure of the wrapped time-tau
/// closed-loop map (conservative stand-in for the all-times quantifier).
inline double objective(const GameContext& ctx, const GainSet& gains) {
    auto key = detail::flatten(gains);
    if (auto it = ctx.cache.find(key); it != ctx.cache.end()) return it->second;

    std::vector<double> per_tau;
    double best = std::numeric_limits<double>::infinity();
    if (ctx.objective_override) {
        best = ctx.objective_override(gains);
        per_tau.assign(ctx.taus.size(), best);
    } else {
        Partition part(ctx.spec.domain, ctx.m);
        for (double tau : ctx.taus) {
            FlowMap map(ctx.spec, gains, tau, /*wrap=*/true);
            FreeEnergyReport rep = free_energy(map, part, ctx.phi, ctx.fe);
            per_tau.push_back(rep.pressure_spectral);
            best = std::min(best, rep.pressure_spectral);
        }
    }
    ctx.cache.emplace(key, best);
    ctx.per_tau_cache.emplace(std::move(key), std::move(per_tau));
    return best;
}

inline const std::vector<double>& objective_per_tau(const GameContext& ctx,
                                                    const GainSet& gains) {
    objective(ctx, gains);
    return ctx.per_tau_cache.at(detail::flatten(gains));
}

// ---------------------------------------------------------------------------
// Best response and equilibrium machinery.

/// Grid candidate maximizing the objective for channel j with the others
/// frozen; ties broken toward the lexicographically smallest matrix.
inline Matrix best_response(const GameContext& ctx, const StrategyGrid& grid,
                            const GainSet& gains, int j) {
    if (j < 0 || j >= ctx.spec.N) throw SchemaError("best_response: channel out of range");
    const auto& cands = grid.candidates[j];
    if (cands.empty()) throw SchemaError("best_response: empty grid for channel");

    std::optional<Matrix> best;
    double best_val = -std::numeric_limits<double>::infinity();
    std::string last_err;
    for (const auto& K : cands) {
        GainSet trial = gains;
        trial.K[j] = K;
        double v;
        try {
            v = objective(ctx, trial);
        } catch (const Error& e) {
            last_err = e.what();
            continue;
        }
        if (!best || v > best_val + 1e-12 ||
            (std::abs(v - best_val) <= 1e-12 && detail::lex_less(K, *best))) {
            best = K;
            best_val = v;
        }
    }
    if (!best)
        throw Error(2, "best_response: every candidate failed evaluation; last: " + last_err);
    return *best;
}

struct EquilibriumCertificate {
    GainSet gains;
    std::vector<double> delta;          // max unilateral improvement per channel
    std::vector<double> taus;
    std::vector<double> objective_per_tau;
    double objective_value = 0.0;
    double eps_eq = 0.0;
    bool valid = false;
    // Eq. 16 diagnostic: pairwise L1 distances between per-channel transfer
    // fixed points at the certified gains (reported, never gating).
    std::vector<double> fixed_point_l1_distances;
};

inline EquilibriumCertificate verify_equilibrium(const GameContext& ctx,
                                                 const StrategyGrid& grid,
                                                 const GainSet& gains, double eps_eq) {
    ctx.validate();
    grid.validate(ctx.spec, ctx.gain_bound);
    EquilibriumCertificate cert;
    cert.gains = gains;
    cert.taus = ctx.taus;
    cert.eps_eq = eps_eq;
    cert.objective_value = objective(ctx, gains);
    cert.objective_per_tau = objective_per_tau(ctx, gains);

    double worst = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < ctx.spec.N; ++j) {
        double dj = -std::numeric_limits<double>::infinity();
        for (const auto& K : grid.candidates[j]) {
            GainSet trial = gains;
            trial.K[j] = K;
            dj = std::max(dj, objective(ctx, trial) - cert.objective_value);
        }
        cert.delta.push_back(dj);
        worst = std::max(worst, dj);
    }
    cert.valid = worst <= eps_eq;
    return cert;
}

struct BrResult {
    bool converged = false;
    std::optional<EquilibriumCertificate> certificate;
    std::vector<GainSet> visited_cycle;  // profiles of the detected cycle, if any
    int rounds = 0;
};

/// Cyclic (Gauss-Seidel) best response over channels 1..N. Stops when a full
/// round changes nothing; a revisited profile is reported as a cycle.
inline BrResult br_iteration(const GameContext& ctx, const StrategyGrid& grid,
                             GainSet gains, int max_rounds, double eps_eq) {
    ctx.validate();
    grid.validate(ctx.spec, ctx.gain_bound);
    if (max_rounds < 1) throw SchemaError("br_iteration: max_rounds must be >= 1");

    BrResult res;
    std::vector<std::vector<double>> history{detail::flatten(gains)};
    std::vector<GainSet> profiles{gains};

    for (int round = 0; round < max_rounds; ++round) {
        res.rounds = round + 1;
        bool changed = false;
        for (int j = 0; j < ctx.spec.N; ++j) {
            Matrix br = best_response(ctx, grid, gains, j);
            if ((br - gains.K[j]).cwiseAbs().maxCoeff() > 0.0) {
                gains.K[j] = br;
                changed = true;
            }
        }
        if (!changed) {
            res.converged = true;
            res.certificate = verify_equilibrium(ctx, grid, gains, eps_eq);
            return res;
        }
        auto key = detail::flatten(gains);
        for (std::size_t h = 0; h < history.size(); ++h) {
            if (history[h] == key) {
                res.visited_cycle.assign(profiles.begin() + h, profiles.end());
                res.visited_cycle.push_back(gains);
                return res;  // cycle detected, non-convergence
            }
        }
        history.push_back(std::move(key));
        profiles.push_back(gains);
    }
    return res;  // round budget exhausted
}

/// Exhaustive enumeration oracle: every profile satisfying the equilibrium
/// condition on the grid.
inline std::vector<GainSet> brute_force_equilibria(const GameContext& ctx,
                                                   const StrategyGrid& grid,
                                                   double eps_eq, double bound,
                                                   long profile_cap = 10000) {
    ctx.validate();
    grid.validate(ctx.spec, bound);
    if (grid.profile_count() > profile_cap)
        throw ResourceError("brute_force_equilibria: profile count " +
                            std::to_string(grid.profile_count()) + " exceeds the cap");

    std::vector<GainSet> out;
    std::vector<std::size_t> idx(ctx.spec.N, 0);
    while (true) {
        GainSet g;
        g.bound = bound;
        for (int j = 0; j < ctx.spec.N; ++j) g.K.push_back(grid.candidates[j][idx[j]]);
        auto cert = verify_equilibrium(ctx, grid, g, eps_eq);
        if (cert.valid) out.push_back(g);

        int j = ctx.spec.N - 1;
        while (j >= 0 && ++idx[j] == grid.candidates[j].size()) idx[j--] = 0;
        if (j < 0) break;
    }
    return out;
}

/// Eq. 16 diagnostic: transfer fixed points computed per channel context at
/// the given gains; returns pairwise L1 distances (upper triangle, row-major).
inline std::vector<double> fixed_point_diagnostics(const GameContext& ctx,
                                                   const GainSet& gains) {
    Partition part(ctx.spec.domain, ctx.m);
    std::vector<Vector> fps;
    for (double tau : ctx.taus) {
        FlowMap map(ctx.spec, gains, tau, true);
        UlamMatrix U = ulam_matrix(map, part, ctx.fe.samples_per_cell, ctx.fe.seed, 1,
                                   ctx.fe.threads);
        UlamMatrix L = weighted_ulam(std::move(U), ctx.phi, part);
        fps.push_back(transfer_fixed_point(L, 1e-10, ctx.fe.max_iter).density);
    }
    std::vector<double> dists;
    for (std::size_t a = 0; a < fps.size(); ++a)
        for (std::size_t b = a + 1; b < fps.size(); ++b)
            dists.push_back((fps[a] - fps[b]).lpNorm<1>());
    return dists;
}

} // namespace feq
