#pragma once

// Stochastically perturbed closed loop: Euler-Maruyama simulation with
// per-path RNG substreams, empirical cell measures, relative entropy with
// smoothing, the Pinsker lower-bound check, resilience reports and the
// epsilon -> 0 convergence sweep.

#include "feq/common.hpp"
#include "feq/sysflow.hpp"
#include "feq/thermo.hpp"

#include <cmath>
#include <functional>
#include <future>
#include <string>
#include <vector>

namespace feq {

struct PerturbSpec {
    double epsilon = 0.0;     // perturbation level >= 0
    Matrix sigma;             // constant d x d diffusion matrix
    double dt_sde = 0.0;
    long n_paths = 0;
    double horizon = 0.0;
    std::uint64_t seed = 0;

    void validate(int d) const {
        if (epsilon < 0.0) throw SchemaError("perturb: epsilon must be >= 0");
        if (!(dt_sde > 0.0)) throw SchemaError("perturb: dt_sde must be positive");
        if (n_paths < 1) throw SchemaError("perturb: n_paths must be >= 1");
        if (horizon < dt_sde) throw SchemaError("perturb: horizon must be >= dt_sde");
        if (sigma.rows() != d || sigma.cols() != d)
            throw SchemaError("perturb: sigma must be d x d");
    }
};

/// Raw (unwrapped) path states at each sampled time: endpoints[k] is an
/// n_paths x d matrix for sample_times[k]. Wrapping happens at observation,
/// i.e. when histogramming into a partition.
struct PathEnsemble {
    std::vector<double> sample_times;
    std::vector<Matrix> endpoints;
};

using X0Sampler = std::function<Vector(std::mt19937_64&)>;

inline X0Sampler uniform_x0_sampler(const Box& box) {
    return [box](std::mt19937_64& rng) {
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        Vector x(box.dim());
        for (int i = 0; i < box.dim(); ++i)
            x[i] = box.lo[i] + uni(rng) * (box.hi[i] - box.lo[i]);
        return x;
    };
}

/// Fixed-step Euler-Maruyama for dZ = A_cl Z dt + sqrt(eps) sigma dW.
/// Deterministic given the seed: path p draws x0 and noise from substream
/// ("sde", p). Paths are simulated in parallel chunks; the result layout is
/// fixed by path index, so the output is bit-identical to the serial order.
inline PathEnsemble euler_maruyama(const SystemSpec& spec, const GainSet& gains,
                                   const PerturbSpec& p, const X0Sampler& x0_sampler,
                                   std::vector<double> sample_times, int threads = 1) {
    spec.validate();
    gains.validate(spec);
    p.validate(spec.d);
    if (sample_times.empty()) throw SchemaError("euler_maruyama: no sample times");
    for (double t : sample_times)
        if (t < 0.0 || t > p.horizon + 1e-12)
            throw SchemaError("euler_maruyama: sample time outside [0, horizon]");

    const int d = spec.d;
    const double h = p.dt_sde;
    const long n_steps = static_cast<long>(std::llround(p.horizon / h));
    const double noise_scale = std::sqrt(p.epsilon) * std::sqrt(h);

    // step indices at which to record
    std::vector<long> record_at;
    for (double t : sample_times) record_at.push_back(std::llround(t / h));

    PathEnsemble out;
    out.sample_times = std::move(sample_times);
    out.endpoints.assign(record_at.size(), Matrix(p.n_paths, d));

    // Per-step drift propagators I + h*A_cl(t); A_cl is piecewise constant,
    // so cache by segment.
    std::vector<Matrix> drift_step(spec.A.mats.size());
    for (std::size_t k = 0; k < spec.A.mats.size(); ++k)
        drift_step[k] = Matrix::Identity(d, d) + h * detail::closed_loop_without(spec, gains, k, -1);

    const bool has_noise = p.epsilon > 0.0 && p.sigma.cwiseAbs().maxCoeff() > 0.0;

    auto run_range = [&](long lo, long hi) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        Vector z(d), dw(d);
        for (long path = lo; path < hi; ++path) {
            auto rng = make_rng(p.seed, "sde", static_cast<std::uint64_t>(path));
            z = x0_sampler(rng);
            std::size_t rec = 0;
            while (rec < record_at.size() && record_at[rec] == 0) {
                out.endpoints[rec].row(path) = z.transpose();
                ++rec;
            }
            for (long s = 0; s < n_steps; ++s) {
                double t = s * h;
                z = drift_step[spec.A.segment_at(t)] * z;
                if (has_noise) {
                    for (int i = 0; i < d; ++i) dw[i] = gauss(rng);
                    z += noise_scale * (p.sigma * dw);
                }
                if (!z.allFinite())
                    throw NumericRangeError("euler_maruyama: path " + std::to_string(path) +
                                            " blew up at t = " + fmt_double(t + h));
                while (rec < record_at.size() && record_at[rec] == s + 1) {
                    out.endpoints[rec].row(path) = z.transpose();
                    ++rec;
                }
            }
        }
    };

    if (threads <= 1 || p.n_paths < 2 * threads) {
        run_range(0, p.n_paths);
    } else {
        std::vector<std::future<void>> futs;
        long chunk = (p.n_paths + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            long lo = t * chunk, hi = std::min<long>(p.n_paths, lo + chunk);
            if (lo >= hi) break;
            futs.push_back(std::async(std::launch::async, run_range, lo, hi));
        }
        for (auto& f : futs) f.get();
    }
    return out;
}

/// Normalized cell histogram of endpoints, wrapped into the partition box.
inline MeasureVector empirical_measure(const Matrix& endpoints, const Partition& part) {
    if (endpoints.rows() < 1) throw SchemaError("empirical_measure: need at least one path");
    if (endpoints.cols() != part.dim())
        throw SchemaError("empirical_measure: dimension mismatch");
    Vector counts = Vector::Zero(part.total);
    for (long r = 0; r < endpoints.rows(); ++r) {
        Vector x = part.domain.wrap_point(endpoints.row(r).transpose());
        counts[part.index_of(x)] += 1.0;
    }
    MeasureVector mv;
    mv.pi = counts / static_cast<double>(endpoints.rows());
    return mv;
}

// ---------------------------------------------------------------------------
// Relative entropy and Pinsker.

namespace detail {

inline Vector smooth_normalize(const Vector& v, double delta) {
    Vector s = v.array() + delta;
    return s / s.sum();
}

} // namespace detail

/// KL(p || q) after additive smoothing by delta. delta = 0 requires the
/// support of p to lie inside the support of q (absolute continuity).
inline double kl_divergence(const MeasureVector& p, const MeasureVector& q, double delta) {
    if (p.pi.size() != q.pi.size()) throw SchemaError("kl_divergence: length mismatch");
    if (delta < 0.0) throw SchemaError("kl_divergence: delta must be >= 0");
    if (delta == 0.0) {
        for (long i = 0; i < p.pi.size(); ++i)
            if (p.pi[i] > 0.0 && q.pi[i] == 0.0)
                throw NumericRangeError(
                    "kl_divergence: absolute continuity violated at cell " + std::to_string(i));
    }
    Vector pt = detail::smooth_normalize(p.pi, delta);
    Vector qt = detail::smooth_normalize(q.pi, delta);
    double kl = 0.0;
    for (long i = 0; i < pt.size(); ++i) {
        if (pt[i] > 0.0)
            kl += pt[i] * std::log(std::max(pt[i], 1e-300) / std::max(qt[i], 1e-300));
    }
    return kl;
}

struct PinskerResult {
    double lhs = 0.0;    // 0.5 * (L1 distance)^2
    double kl = 0.0;
    double slack = 0.0;  // kl - lhs, must be >= -1e-12
};

inline PinskerResult pinsker_check(const MeasureVector& p, const MeasureVector& q,
                                   double delta) {
    PinskerResult r;
    r.kl = kl_divergence(p, q, delta);
    Vector pt = detail::smooth_normalize(p.pi, delta);
    Vector qt = detail::smooth_normalize(q.pi, delta);
    double l1 = (pt - qt).lpNorm<1>();
    r.lhs = 0.5 * l1 * l1;
    r.slack = r.kl - r.lhs;
    return r;
}

// ---------------------------------------------------------------------------
// Resilience: perturbed empirical measures against the unperturbed Ulam
// evolution at matched step counts.

struct ResilienceRow {
    double t = 0.0;
    double kl = 0.0;
    double pinsker_lhs = 0.0;
    double slack = 0.0;
};

struct ResilienceReport {
    std::vector<ResilienceRow> rows;
    double rho_hat = 0.0;    // entropy gap: max over sampled t of KL
    double epsilon = 0.0;
    double delta = 0.0;      // smoothing used
    bool gains_warning = false;
};

struct ResilienceConfig {
    double tau_ulam = 1.0;     // map time of one Ulam step
    double delta = 1e-9;       // KL smoothing
    int threads = 1;
    FreeEnergyConfig fe;
    bool gains_certified = true;  // warn (not refuse) when false
};

/// For each sampled t: p = empirical measure of perturbed endpoints,
/// q = unweighted Ulam power of the uniform initial density at the matched
/// step count round(t / tau_ulam).
inline ResilienceReport resilience_run(const SystemSpec& spec, const GainSet& gains,
                                       const PerturbSpec& p, const Partition& part,
                                       const std::vector<double>& t_samples,
                                       const ResilienceConfig& cfg) {
    if (t_samples.empty()) throw SchemaError("resilience_run: no sample times");

    FlowMap map(spec, gains, cfg.tau_ulam, /*wrap=*/true);
    UlamMatrix U = ulam_matrix(map, part, cfg.fe.samples_per_cell, cfg.fe.seed, 1, cfg.threads);

    PathEnsemble paths = euler_maruyama(spec, gains, p, uniform_x0_sampler(part.domain),
                                        t_samples, cfg.threads);

    ResilienceReport rep;
    rep.epsilon = p.epsilon;
    rep.delta = cfg.delta;
    rep.gains_warning = !cfg.gains_certified;

    Vector q0 = Vector::Ones(part.total) / static_cast<double>(part.total);
    long steps_done = 0;
    Vector q = q0;
    for (std::size_t k = 0; k < t_samples.size(); ++k) {
        long steps = std::llround(t_samples[k] / cfg.tau_ulam);
        for (; steps_done < steps; ++steps_done) q = detail::left_apply(U.P, q);

        MeasureVector pm = empirical_measure(paths.endpoints[k], part);
        MeasureVector qm{q};
        PinskerResult pr = pinsker_check(pm, qm, cfg.delta);

        ResilienceRow row;
        row.t = t_samples[k];
        row.kl = pr.kl;
        row.pinsker_lhs = pr.lhs;
        row.slack = pr.slack;
        rep.rows.push_back(row);
        rep.rho_hat = std::max(rep.rho_hat, pr.kl);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// epsilon -> 0 convergence sweep.

struct SweepResult {
    std::vector<double> eps_list;
    std::vector<ResilienceReport> reports;
    double noise_floor = 0.0;    // split-half KL floor at the smallest epsilon
    double final_threshold = 0.0;
    bool pass = false;
    std::string verdict;
};

/// Runs resilience per epsilon (strictly decreasing list). PASS when rho_hat
/// decreases monotonically (one inversion allowed below 2x the split-half
/// sampling-noise floor) and the smallest epsilon's rho_hat is below the
/// threshold.
inline SweepResult convergence_sweep(const SystemSpec& spec, const GainSet& gains,
                                     PerturbSpec p, const Partition& part,
                                     const std::vector<double>& eps_list,
                                     const std::vector<double>& t_samples,
                                     const ResilienceConfig& cfg,
                                     double final_threshold = 0.1) {
    if (eps_list.empty()) throw SchemaError("convergence_sweep: empty epsilon list");
    for (std::size_t k = 1; k < eps_list.size(); ++k)
        if (!(eps_list[k] < eps_list[k - 1]))
            throw SchemaError("convergence_sweep: epsilon list must be strictly decreasing");
    for (double e : eps_list)
        if (e < 0.0) throw SchemaError("convergence_sweep: epsilon must be >= 0");

    SweepResult sw;
    sw.eps_list = eps_list;
    sw.final_threshold = final_threshold;
    for (double e : eps_list) {
        PerturbSpec pe = p;
        pe.epsilon = e;
        sw.reports.push_back(resilience_run(spec, gains, pe, part, t_samples, cfg));
    }

    // Split-half noise floor at the smallest epsilon: KL between the two
    // half-ensemble empirical measures, maxed over sampled times.
    {
        PerturbSpec pe = p;
        pe.epsilon = eps_list.back();
        PathEnsemble paths = euler_maruyama(spec, gains, pe, uniform_x0_sampler(part.domain),
                                            t_samples, cfg.threads);
        long half = pe.n_paths / 2;
        if (half >= 1) {
            for (std::size_t k = 0; k < t_samples.size(); ++k) {
                MeasureVector a = empirical_measure(paths.endpoints[k].topRows(half), part);
                MeasureVector b = empirical_measure(
                    paths.endpoints[k].bottomRows(pe.n_paths - half), part);
                sw.noise_floor = std::max(sw.noise_floor, kl_divergence(a, b, cfg.delta));
            }
        }
    }

    int inversions = 0;
    bool big_inversion = false;
    for (std::size_t k = 1; k < sw.reports.size(); ++k) {
        double rise = sw.reports[k].rho_hat - sw.reports[k - 1].rho_hat;
        if (rise > 0.0) {
            ++inversions;
            if (rise >= 2.0 * sw.noise_floor) big_inversion = true;
        }
    }
    bool monotone_ok = inversions <= 1 && !big_inversion;
    bool final_ok = sw.reports.back().rho_hat < final_threshold;
    sw.pass = monotone_ok && final_ok;
    sw.verdict = sw.pass ? "PASS" : "FAIL";
    if (!monotone_ok) sw.verdict += " (rho_hat not decreasing beyond noise floor)";
    else if (!final_ok) sw.verdict += " (final rho_hat above threshold)";
    return sw;
}

} // namespace feq
