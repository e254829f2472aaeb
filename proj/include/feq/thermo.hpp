#pragma once

// Ulam discretization of the transfer operator: uniform partition, weighted
// and unweighted cell-transition matrices, invariant measures, entropy rate,
// potential integrals, free energy and pressure (variational and spectral
// routes), and transfer-operator fixed points.

#include "feq/common.hpp"
#include "feq/sysflow.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <functional>
#include <future>
#include <string>
#include <thread>
#include <vector>

namespace feq {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Uniform grid partition. Cell indexing is row-major over axes: in d
// dimensions the cell with multi-index (i_0, ..., i_{d-1}) has linear index
// ((i_0 * m + i_1) * m + ...) + i_{d-1}.

struct Partition {
    Box domain;
    int m = 0;             // cells per axis
    long total = 0;        // m^d

    static constexpr long kDefaultCellCap = 1L << 20;

    Partition(Box dom, int cells_per_axis, long cell_cap = kDefaultCellCap)
        : domain(std::move(dom)), m(cells_per_axis) {
        domain.validate();
        if (m < 2) throw SchemaError("partition: m must be >= 2");
        long t = 1;
        for (int a = 0; a < domain.dim(); ++a) {
            if (t > cell_cap / m)
                throw ResourceError("partition: m^d exceeds the cell cap, use a smaller m");
            t *= m;
        }
        total = t;
    }

    int dim() const { return domain.dim(); }

    double width(int axis) const { return (domain.hi[axis] - domain.lo[axis]) / m; }

    Vector center(long idx) const {
        Vector c(dim());
        for (int a = dim() - 1; a >= 0; --a) {
            long i = idx % m;
            idx /= m;
            c[a] = domain.lo[a] + (static_cast<double>(i) + 0.5) * width(a);
        }
        return c;
    }

    Vector cell_lo(long idx) const {
        Vector c(dim());
        for (int a = dim() - 1; a >= 0; --a) {
            long i = idx % m;
            idx /= m;
            c[a] = domain.lo[a] + static_cast<double>(i) * width(a);
        }
        return c;
    }

    /// Linear cell index of a point inside the box.
    long index_of(const Vector& x) const {
        long idx = 0;
        for (int a = 0; a < dim(); ++a) {
            double u = (x[a] - domain.lo[a]) / width(a);
            long i = static_cast<long>(std::floor(u));
            i = std::clamp<long>(i, 0, m - 1);
            idx = idx * m + i;
        }
        return idx;
    }
};

inline Partition build_partition(const Box& domain, int m,
                                 long cell_cap = Partition::kDefaultCellCap) {
    return Partition(domain, m, cell_cap);
}

// ---------------------------------------------------------------------------
// Potentials: bounded continuous functions on the state space.

struct Potential {
    std::function<double(const Vector&)> eval;
    double lo = 0.0;
    double hi = 0.0;
    std::string name = "zero";

    static Potential zero() {
        return {[](const Vector&) { return 0.0; }, 0.0, 0.0, "zero"};
    }
    static Potential constant(double c) {
        return {[c](const Vector&) { return c; }, c, c, "constant"};
    }
    /// a . x with bounds over the given box.
    static Potential linear(Vector a, const Box& box) {
        double lo = 0.0, hi = 0.0;
        for (int i = 0; i < box.dim(); ++i) {
            double p = a[i] * box.lo[i], q = a[i] * box.hi[i];
            lo += std::min(p, q);
            hi += std::max(p, q);
        }
        return {[a = std::move(a)](const Vector& x) { return a.dot(x); }, lo, hi, "linear"};
    }
    /// -x^T Q x with crude interval bounds over the box.
    static Potential quadratic(Matrix Q, const Box& box) {
        double r = 0.0;
        for (int i = 0; i < box.dim(); ++i)
            r = std::max({r, std::abs(box.lo[i]), std::abs(box.hi[i])});
        double bound = Q.cwiseAbs().sum() * r * r;
        return {[Q = std::move(Q)](const Vector& x) { return -x.dot(Q * x); },
                -bound, bound, "quadratic"};
    }

    double operator()(const Vector& x) const {
        double v = eval(x);
        if (!std::isfinite(v))
            throw Error(4, "potential: non-finite value at a cell center");
        return v;
    }
};

// ---------------------------------------------------------------------------
// Ulam matrix.

struct UlamMatrix {
    SparseMatrix P;            // row-stochastic cell-transition matrix
    int samples_per_cell = 0;
    std::uint64_t seed = 0;
    bool weighted = false;
    Vector w;                  // weighted: w_i = exp(phi(center_i)), L_ij = P_ij w_j
};

struct MeasureVector {
    Vector pi;

    void validate() const {
        if (pi.minCoeff() < 0.0) throw SchemaError("measure: negative entry");
        if (std::abs(pi.sum() - 1.0) > 1e-12) throw SchemaError("measure: does not sum to 1");
    }
};

namespace detail {

// Kronecker-sequence directions per axis: fractional powers of the plastic
// number, a standard low-discrepancy choice in low dimension.
inline std::vector<double> lattice_alphas(int d) {
    const double plastic = 1.32471795724474602596;
    std::vector<double> a(d);
    double g = 1.0;
    for (int i = 0; i < d; ++i) {
        g /= plastic;
        a[i] = g;
    }
    return a;
}

} // namespace detail

/// Ulam/Galerkin discretization: P_ij = fraction of a deterministic
/// low-discrepancy point set in cell i that lands in cell j under `map`,
/// iterated `map_steps` times. Rows sum to exactly 1.
inline UlamMatrix ulam_matrix(const FlowMap& map, const Partition& part,
                              int samples_per_cell, std::uint64_t seed,
                              int map_steps = 1, int threads = 1) {
    if (samples_per_cell < 1) throw SchemaError("ulam_matrix: samples_per_cell must be >= 1");
    if (map_steps < 1) throw SchemaError("ulam_matrix: map_steps must be >= 1");
    if (!map.wrap()) throw SchemaError("ulam_matrix: flow map must wrap (compact domain)");
    const int d = part.dim();
    if (map.domain().dim() != d)
        throw SchemaError("ulam_matrix: map domain dimension != partition dimension");

    const long n = part.total;
    const auto alphas = detail::lattice_alphas(d);
    const double S = static_cast<double>(samples_per_cell);

    std::vector<std::vector<std::pair<long, int>>> rows(n);

    auto do_range = [&](long lo_cell, long hi_cell) {
        Vector x(d);
        std::vector<std::pair<long, int>> hits;
        for (long i = lo_cell; i < hi_cell; ++i) {
            // per-cell lattice offset from a named substream: bit-identical
            // regardless of the thread schedule
            auto rng = make_rng(seed, "ulam", static_cast<std::uint64_t>(i));
            std::uniform_real_distribution<double> uni(0.0, 1.0);
            Vector off(d);
            for (int a = 0; a < d; ++a) off[a] = uni(rng);
            Vector clo = part.cell_lo(i);

            hits.clear();
            for (int k = 0; k < samples_per_cell; ++k) {
                for (int a = 0; a < d; ++a) {
                    double u = std::fmod(off[a] + k * alphas[a], 1.0);
                    x[a] = clo[a] + u * part.width(a);
                }
                Vector y = map.evaluate_iter(x, map_steps);
                if (!map.domain().contains(y))
                    throw Error(4, "ulam_matrix: sample left the domain (cell " +
                                       std::to_string(i) + ")");
                long jdx = part.index_of(y);
                auto it = std::find_if(hits.begin(), hits.end(),
                                       [jdx](const auto& p) { return p.first == jdx; });
                if (it == hits.end()) hits.emplace_back(jdx, 1);
                else ++it->second;
            }
            std::sort(hits.begin(), hits.end());
            rows[i] = hits;
        }
    };

    if (threads <= 1 || n < 2 * threads) {
        do_range(0, n);
    } else {
        std::vector<std::future<void>> futs;
        long chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            long lo = t * chunk, hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            futs.push_back(std::async(std::launch::async, do_range, lo, hi));
        }
        for (auto& f : futs) f.get();
    }

    UlamMatrix U;
    U.samples_per_cell = samples_per_cell;
    U.seed = seed;
    std::vector<Eigen::Triplet<double>> trips;
    for (long i = 0; i < n; ++i)
        for (const auto& [j, c] : rows[i])
            trips.emplace_back(static_cast<int>(i), static_cast<int>(j), c / S);
    U.P.resize(n, n);
    U.P.setFromTriplets(trips.begin(), trips.end());
    return U;
}

/// Attach transfer-operator weights w_i = exp(phi(center_i)).
inline UlamMatrix weighted_ulam(UlamMatrix U, const Potential& phi, const Partition& part) {
    U.weighted = true;
    U.w.resize(part.total);
    for (long i = 0; i < part.total; ++i) {
        double v = phi(part.center(i));
        if (v < phi.lo - 1e-12 || v > phi.hi + 1e-12)
            throw SchemaError("potential: value outside declared bounds at cell " +
                              std::to_string(i));
        U.w[i] = std::exp(v);
    }
    return U;
}

// ---------------------------------------------------------------------------
// Invariant measure by power iteration.

struct InvariantResult {
    MeasureVector measure;
    bool nonunique_warning = false;
    long iterations = 0;
    double residual = 0.0;
};

namespace detail {

inline Vector left_apply(const SparseMatrix& P, const Vector& v) {
    return P.transpose() * v;
}

inline Vector power_fixed_point(const SparseMatrix& P, Vector start, double tol,
                                long max_iter, long* iters_out, double* resid_out) {
    Vector pi = std::move(start);
    pi /= pi.sum();
    double resid = 0.0;
    for (long it = 0; it < max_iter; ++it) {
        Vector next = left_apply(P, pi);
        resid = (next - pi).lpNorm<1>();
        pi = next;
        pi /= pi.sum();
        if (resid < tol) {
            if (iters_out) *iters_out = it + 1;
            if (resid_out) *resid_out = resid;
            return pi;
        }
    }
    throw ConvergenceError("invariant_measure: max_iter exceeded, residual = " +
                           fmt_double(resid));
}

} // namespace detail

/// Power iteration pi <- pi P from the uniform start. A second randomized
/// start flags (heuristically) a non-unique invariant measure.
inline InvariantResult invariant_measure(const UlamMatrix& U, double tol = 1e-10,
                                         long max_iter = 100000) {
    if (U.weighted) throw SchemaError("invariant_measure: expects an unweighted matrix");
    if (!(tol > 0.0)) throw SchemaError("invariant_measure: tol must be positive");
    const long n = U.P.rows();

    InvariantResult out;
    Vector pi = detail::power_fixed_point(U.P, Vector::Ones(n), tol, max_iter,
                                          &out.iterations, &out.residual);

    auto rng = make_rng(U.seed, "invariant-restart", 0);
    std::uniform_real_distribution<double> uni(0.1, 1.0);
    Vector start(n);
    for (long i = 0; i < n; ++i) start[i] = uni(rng);
    Vector pi2 = detail::power_fixed_point(U.P, std::move(start), tol, max_iter, nullptr, nullptr);
    out.nonunique_warning = (pi - pi2).lpNorm<1>() > 10.0 * tol;

    out.measure.pi = pi;
    return out;
}

// ---------------------------------------------------------------------------
// Entropy rate of the Ulam chain: -sum_i pi_i sum_j P_ij log P_ij, with
// 0 log 0 = 0 and probabilities clamped at 1e-300 inside logs.

inline double entropy_rate(const UlamMatrix& U, const MeasureVector& pi) {
    if (U.weighted) throw SchemaError("entropy_rate: expects an unweighted matrix");
    if (pi.pi.size() != U.P.rows()) throw SchemaError("entropy_rate: dimension mismatch");
    double h = 0.0;
    for (int i = 0; i < U.P.outerSize(); ++i) {
        double row_h = 0.0;
        for (SparseMatrix::InnerIterator it(U.P, i); it; ++it) {
            double p = it.value();
            if (p > 0.0) row_h -= p * std::log(std::max(p, 1e-300));
        }
        h += pi.pi[i] * row_h;
    }
    return h;
}

/// Midpoint quadrature of the potential against a cell measure.
inline double potential_integral(const Potential& phi, const Partition& part,
                                 const MeasureVector& pi) {
    if (pi.pi.size() != part.total) throw SchemaError("potential_integral: dimension mismatch");
    double s = 0.0;
    for (long i = 0; i < part.total; ++i) s += pi.pi[i] * phi(part.center(i));
    return s;
}

// ---------------------------------------------------------------------------
// Transfer operator: one application and the normalized fixed point.

/// One application of the weighted operator: (rho L)_j = sum_i rho_i P_ij w_j.
inline Vector transfer_apply(const UlamMatrix& U, const Vector& rho) {
    if (!U.weighted) throw SchemaError("transfer_apply: expects a weighted matrix");
    if (rho.size() != U.P.rows()) throw SchemaError("transfer_apply: dimension mismatch");
    if (rho.minCoeff() < 0.0) throw SchemaError("transfer_apply: negative input entries");
    return detail::left_apply(U.P, rho).cwiseProduct(U.w);
}

struct TransferFixedPoint {
    Vector density;       // limiting normalized density (equilibrium candidate)
    double log_growth;    // log of the asymptotic L1 growth factor of L
    long iterations = 0;
};

/// Iterate rho <- normalize_1(rho L). The growth factor is the L1-norm ratio
/// of successive un-normalized iterates, averaged over the last 10 iterations.
/// `start` defaults to the uniform density.
inline TransferFixedPoint transfer_fixed_point(const UlamMatrix& U, double tol = 1e-12,
                                               long max_iter = 100000,
                                               const Vector* start = nullptr) {
    if (!U.weighted) throw SchemaError("transfer_fixed_point: expects a weighted matrix");
    if (!(tol > 0.0)) throw SchemaError("transfer_fixed_point: tol must be positive");
    const long n = U.P.rows();
    Vector rho = start ? *start : Vector(Vector::Ones(n) / static_cast<double>(n));
    if (rho.size() != n || rho.minCoeff() < 0.0 || !(rho.lpNorm<1>() > 0.0))
        throw SchemaError("transfer_fixed_point: start must be a nonnegative nonzero density");
    rho /= rho.lpNorm<1>();

    double delta = 0.0, prev_delta = 0.0;
    for (long it = 0; it < max_iter; ++it) {
        Vector next = transfer_apply(U, rho);
        double norm = next.lpNorm<1>();
        if (!(norm > 0.0))
            throw ConvergenceError("transfer_fixed_point: iterate vanished");
        next /= norm;
        prev_delta = delta;
        delta = (next - rho).lpNorm<1>();
        rho = next;
        if (delta < tol) {
            // Growth factor from 10 further applications, all past the
            // transient: rho is normalized, so each norm is one factor.
            double g = 0.0;
            for (int k = 0; k < 10; ++k) {
                Vector post = transfer_apply(U, rho);
                double pn = post.lpNorm<1>();
                g += std::log(pn);
                rho = post / pn;
            }
            TransferFixedPoint out;
            out.density = rho;
            out.log_growth = g / 10.0;
            out.iterations = it + 1;
            return out;
        }
    }
    throw ConvergenceError(
        "transfer_fixed_point: no convergence after max_iter; last two L1 deltas " +
        fmt_double(prev_delta) + ", " + fmt_double(delta) +
        (std::abs(delta - prev_delta) < 1e-12 ? " (possible oscillation)" : ""));
}

// ---------------------------------------------------------------------------
// Free energy / pressure.

struct FreeEnergyConfig {
    int samples_per_cell = 256;
    std::uint64_t seed = 0;
    double tol = 1e-10;
    long max_iter = 100000;
    int max_block_depth = 8;   // cap on the iterated-map entropy depth
    int threads = 1;
};

struct FreeEnergyReport {
    double h = 0.0;                  // entropy estimate (nats per map step)
    double phi_integral = 0.0;       // integral of phi against the invariant measure
    double pressure_variational = 0.0;  // h + phi_integral
    double pressure_spectral = 0.0;     // h + log growth of the weighted operator
    double log_growth = 0.0;            // weighted-operator growth term alone
    int block_depth = 1;                // entropy-difference depth used
    bool nonunique_warning = false;
    std::string method = "ulam-block-entropy";
};

namespace detail {

/// Entropy rate of the Ulam chain of the n-fold iterated map, against that
/// chain's own invariant measure.
inline double iterated_entropy(const FlowMap& map, const Partition& part,
                               const FreeEnergyConfig& cfg, int n) {
    UlamMatrix Un = ulam_matrix(map, part, cfg.samples_per_cell, cfg.seed, n, cfg.threads);
    auto inv = invariant_measure(Un, cfg.tol, cfg.max_iter);
    return entropy_rate(Un, inv.measure);
}

} // namespace detail

/// Entropy estimate via block-entropy differences on iterated-map Ulam
/// matrices: h = H(n) - H(n-1). One-step chain entropy is biased up by
/// transverse cell-cutting; the difference cancels that bias. Depth rule:
/// the n-step row support ~ exp(h1 n) must stay within the square root of
/// the total cell count, so per-row sampling error stays controlled.
inline std::pair<double, int> entropy_estimate(const FlowMap& map, const Partition& part,
                                               const FreeEnergyConfig& cfg, double h1) {
    int n = 1;
    double half_log_total = 0.5 * part.dim() * std::log(static_cast<double>(part.m));
    while (n < cfg.max_block_depth && h1 * (n + 1) <= half_log_total + 1e-12) ++n;
    if (n == 1) return {h1, 1};
    double hn = detail::iterated_entropy(map, part, cfg, n);
    double hn1 = (n - 1 == 1) ? h1 : detail::iterated_entropy(map, part, cfg, n - 1);
    return {hn - hn1, n};
}

/// Full pipeline: Ulam matrix, invariant measure, entropy estimate, potential
/// integral, and both pressure routes.
inline FreeEnergyReport free_energy(const FlowMap& map, const Partition& part,
                                    const Potential& phi, const FreeEnergyConfig& cfg) {
    UlamMatrix U = ulam_matrix(map, part, cfg.samples_per_cell, cfg.seed, 1, cfg.threads);
    auto inv = invariant_measure(U, cfg.tol, cfg.max_iter);
    double h1 = entropy_rate(U, inv.measure);
    auto [h, depth] = entropy_estimate(map, part, cfg, h1);

    FreeEnergyReport rep;
    rep.h = h;
    rep.block_depth = depth;
    rep.nonunique_warning = inv.nonunique_warning;
    rep.phi_integral = potential_integral(phi, part, inv.measure);
    rep.pressure_variational = rep.h + rep.phi_integral;

    UlamMatrix L = weighted_ulam(U, phi, part);
    auto fp = transfer_fixed_point(L, std::max(cfg.tol, 1e-13), cfg.max_iter);
    rep.log_growth = fp.log_growth;
    rep.pressure_spectral = rep.h + fp.log_growth;
    return rep;
}

/// phi = 0 pressure, spectral route.
inline double topological_entropy(const FlowMap& map, const Partition& part,
                                  const FreeEnergyConfig& cfg = {}) {
    return free_energy(map, part, Potential::zero(), cfg).pressure_spectral;
}

} // namespace feq
