#pragma once

// Multi-channel linear system: closed-loop dynamics, exact per-segment
// transition matrices, the two-factor transition decomposition, and the
// time-tau flow maps consumed by the measure machinery.

#include "feq/common.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace feq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// State domain: axis-aligned box, optionally identified as a torus.

struct Box {
    Vector lo;
    Vector hi;
    bool wrap = false;

    int dim() const { return static_cast<int>(lo.size()); }

    void validate() const {
        if (lo.size() == 0 || lo.size() != hi.size())
            throw SchemaError("domain: lo/hi size mismatch or empty");
        for (int i = 0; i < dim(); ++i)
            if (!(hi[i] > lo[i]))
                throw SchemaError("domain: hi must exceed lo on axis " + std::to_string(i));
    }

    bool contains(const Vector& x) const {
        for (int i = 0; i < dim(); ++i)
            if (x[i] < lo[i] || x[i] >= hi[i]) return false;
        return true;
    }

    /// Reduce per axis by (x - lo) mod (hi - lo).
    Vector wrap_point(const Vector& x) const {
        Vector y(dim());
        for (int i = 0; i < dim(); ++i) {
            double w = hi[i] - lo[i];
            double r = std::fmod(x[i] - lo[i], w);
            if (r < 0) r += w;
            if (r >= w) r = 0.0;  // fmod rounding at the top edge
            y[i] = lo[i] + r;
        }
        return y;
    }
};

// ---------------------------------------------------------------------------
// Piecewise-constant drift schedule. A single segment means time-invariant.

struct ASchedule {
    std::vector<double> switch_times;  // strictly increasing, starts at 0
    std::vector<Matrix> mats;

    void validate(int d) const {
        if (mats.empty() || mats.size() != switch_times.size())
            throw SchemaError("A schedule: need one matrix per switch time");
        if (switch_times.front() != 0.0)
            throw SchemaError("A schedule: first switch time must be 0");
        for (std::size_t k = 1; k < switch_times.size(); ++k)
            if (!(switch_times[k] > switch_times[k - 1]))
                throw SchemaError("A schedule: switch times must be strictly increasing");
        for (const auto& m : mats)
            if (m.rows() != d || m.cols() != d)
                throw SchemaError("A schedule: matrix is not d x d");
    }

    /// Index of the segment active at time t (t >= 0).
    std::size_t segment_at(double t) const {
        std::size_t k = switch_times.size() - 1;
        while (k > 0 && switch_times[k] > t) --k;
        return k;
    }

    const Matrix& at(double t) const { return mats[segment_at(t)]; }
};

struct SystemSpec {
    int d = 0;                  // state dimension
    int N = 0;                  // channel count
    ASchedule A;
    std::vector<Matrix> B;      // B[j] is d x r_j
    Box domain;
    double dt = 0.0;            // integration step

    void validate() const {
        if (d <= 0) throw SchemaError("system: d must be positive");
        if (N <= 0) throw SchemaError("system: channel count must be positive");
        if (!(dt > 0.0)) throw SchemaError("system: dt must be positive");
        A.validate(d);
        if (static_cast<int>(B.size()) != N)
            throw SchemaError("system: need one B matrix per channel");
        for (int j = 0; j < N; ++j)
            if (B[j].rows() != d || B[j].cols() < 1)
                throw SchemaError("system: B[" + std::to_string(j) + "] has wrong row count");
        domain.validate();
        if (domain.dim() != d) throw SchemaError("system: domain dimension != d");
    }
};

struct GainSet {
    std::vector<Matrix> K;      // K[j] is r_j x d
    double bound = 0.0;         // uniform entry bound M > 0

    void validate(const SystemSpec& spec) const {
        if (static_cast<int>(K.size()) != spec.N)
            throw SchemaError("gains: need one gain matrix per channel");
        if (!(bound > 0.0)) throw SchemaError("gains: bound must be positive");
        for (int j = 0; j < spec.N; ++j) {
            if (K[j].rows() != spec.B[j].cols() || K[j].cols() != spec.d)
                throw SchemaError("gains: K[" + std::to_string(j) + "] is not r_j x d");
            if (K[j].cwiseAbs().maxCoeff() > bound + 1e-15)
                throw SchemaError("gains: K[" + std::to_string(j) + "] violates entry bound");
        }
    }
};

// ---------------------------------------------------------------------------
// Closed-loop matrix and exact transition matrices.

/// A(t) + sum_j B_j K_j, using the active drift segment at time t.
inline Matrix closed_loop_matrix(const SystemSpec& spec, const GainSet& gains, double t) {
    gains.validate(spec);
    Matrix Acl = spec.A.at(t);
    for (int j = 0; j < spec.N; ++j) Acl += spec.B[j] * gains.K[j];
    return Acl;
}

namespace detail {

/// Closed loop with channel j removed (j < 0 keeps all channels).
inline Matrix closed_loop_without(const SystemSpec& spec, const GainSet& gains,
                                  std::size_t segment, int skip_j) {
    Matrix Acl = spec.A.mats[segment];
    for (int i = 0; i < spec.N; ++i)
        if (i != skip_j) Acl += spec.B[i] * gains.K[i];
    return Acl;
}

/// Walk the piecewise-constant schedule over [0, t], calling
/// f(segment_index, seg_start, seg_len) per covered piece.
template <class F>
void for_each_segment(const ASchedule& A, double t, F&& f) {
    for (std::size_t k = 0; k < A.mats.size(); ++k) {
        double s0 = A.switch_times[k];
        double s1 = (k + 1 < A.mats.size()) ? A.switch_times[k + 1] : t;
        if (s0 >= t) break;
        if (s1 > t) s1 = t;
        if (s1 > s0) f(k, s0, s1 - s0);
    }
}

} // namespace detail

/// State-transition matrix of the full closed loop over [0, t], exact per
/// constant segment.
inline Matrix transition_matrix(const SystemSpec& spec, const GainSet& gains, double t) {
    Matrix Phi = Matrix::Identity(spec.d, spec.d);
    detail::for_each_segment(spec.A, t, [&](std::size_t k, double, double len) {
        Matrix Acl = detail::closed_loop_without(spec, gains, k, -1);
        Phi = (Acl * len).exp() * Phi;
        if (!Phi.allFinite())
            throw NumericRangeError("transition matrix overflowed near t = " +
                                    fmt_double(spec.A.switch_times[k] + len));
    });
    return Phi;
}

/// Solution of xdot = (A + sum B_j K_j) x at time t. No domain wrap.
inline Vector integrate_flow(const SystemSpec& spec, const GainSet& gains,
                             const Vector& x0, double t) {
    if (t < 0.0) throw SchemaError("integrate_flow: t must be >= 0");
    if (!x0.allFinite()) throw SchemaError("integrate_flow: x0 not finite");
    if (x0.size() != spec.d) throw SchemaError("integrate_flow: x0 dimension mismatch");
    Vector x = transition_matrix(spec, gains, t) * x0;
    if (!x.allFinite())
        throw NumericRangeError("integrate_flow: state blew up by t = " + fmt_double(t));
    return x;
}

// ---------------------------------------------------------------------------
// Transition-matrix factor decomposition: Phi = PhiNoJ * PhiJ, where PhiNoJ
// solves the closed loop with channel j removed and PhiJ solves
// dPhiJ/dt = Bstar_j(t) PhiJ with Bstar_j = PhiNoJ^{-1} B_j K_j PhiNoJ.

struct TransitionFactors {
    int j = 0;
    Matrix phi_no_j;
    Matrix phi_j;
    Matrix product;
};

/// Incremental integrator for one channel's factor pair. Advance in steps of
/// at most spec.dt: PhiNoJ by exact segment exponentials, PhiJ by classical
/// RK4 on dPhiJ/dt = Bstar(t) PhiJ with Bstar = PhiNoJ^{-1} B_j K_j PhiNoJ.
class FactorStepper {
public:
    FactorStepper(const SystemSpec& spec, const GainSet& gains, int channel)
        : spec_(&spec), gains_(&gains), jj_(checked_channel(channel, spec.N) - 1),
          bk_(spec.B[jj_] * gains.K[jj_]),
          phi_no_j_(Matrix::Identity(spec.d, spec.d)),
          phi_j_(Matrix::Identity(spec.d, spec.d)) {}

    double time() const { return t_; }
    const Matrix& phi_no_j() const { return phi_no_j_; }
    const Matrix& phi_j() const { return phi_j_; }
    Matrix product() const { return phi_no_j_ * phi_j_; }

    /// Advance from the current time to t_end.
    void advance_to(double t_end) {
        while (t_end - t_ > 1e-15) {
            std::size_t seg = spec_->A.segment_at(t_);
            double seg_end = (seg + 1 < spec_->A.switch_times.size())
                                 ? spec_->A.switch_times[seg + 1]
                                 : t_end;
            double stop = std::min(seg_end, t_end);
            double len = stop - t_;
            long n = std::max<long>(1, static_cast<long>(std::ceil(len / spec_->dt - 1e-12)));
            double h = len / static_cast<double>(n);
            Matrix Anj = detail::closed_loop_without(*spec_, *gains_, seg, jj_);
            Matrix Eh2 = (Anj * (h / 2.0)).exp();  // exact half-step propagator

            for (long s = 0; s < n; ++s) {
                Matrix pnj0 = phi_no_j_;
                Matrix pnj_half = Eh2 * pnj0;
                Matrix pnj1 = Eh2 * pnj_half;

                Matrix B0 = bstar(pnj0);
                Matrix Bh = bstar(pnj_half);
                Matrix B1 = bstar(pnj1);
                Matrix k1 = B0 * phi_j_;
                Matrix k2 = Bh * (phi_j_ + (h / 2.0) * k1);
                Matrix k3 = Bh * (phi_j_ + (h / 2.0) * k2);
                Matrix k4 = B1 * (phi_j_ + h * k3);
                phi_j_ += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                phi_no_j_ = pnj1;
            }
            t_ = stop;
        }
    }

private:
    static int checked_channel(int channel, int n) {
        if (channel < 1 || channel > n)
            throw SchemaError("transition_factors: channel index out of range");
        return channel;
    }

    Matrix bstar(const Matrix& pnj) const {
        Eigen::PartialPivLU<Matrix> lu(pnj);
        double det = std::abs(lu.determinant());
        if (!(det > 0.0) || !std::isfinite(det)) {
            double cond = pnj.norm() * (det > 0 ? lu.inverse().norm()
                                                : std::numeric_limits<double>::infinity());
            throw Error(4, "transition_factors: PhiNoJ numerically singular, cond ~= " +
                               fmt_double(cond));
        }
        return lu.solve(bk_ * pnj);
    }

    const SystemSpec* spec_;
    const GainSet* gains_;
    int jj_;
    Matrix bk_;
    Matrix phi_no_j_;
    Matrix phi_j_;
    double t_ = 0.0;
};

inline TransitionFactors transition_factors(const SystemSpec& spec, const GainSet& gains,
                                            int j, double tau) {
    gains.validate(spec);
    if (!(tau > 0.0)) throw SchemaError("transition_factors: tau must be positive");
    FactorStepper stepper(spec, gains, j);
    stepper.advance_to(tau);
    TransitionFactors out;
    out.j = j;
    out.phi_no_j = stepper.phi_no_j();
    out.phi_j = stepper.phi_j();
    out.product = out.phi_no_j * out.phi_j;
    return out;
}

// ---------------------------------------------------------------------------
// Time-tau flow map. Evaluation is pure; safe to share across threads.

class FlowMap {
public:
    /// Continuous construction: Phi over [0, tau] from the closed loop.
    FlowMap(const SystemSpec& spec, const GainSet& gains, double tau, bool wrap)
        : domain_(spec.domain), tau_(tau), wrap_(wrap) {
        if (!(tau > 0.0)) throw SchemaError("flow_map: tau must be positive");
        spec.validate();
        phi_ = transition_matrix(spec, gains, tau);
        check_invertible();
    }

    /// Direct discrete-map construction: Phi given explicitly (one map step).
    static FlowMap direct(Matrix phi, Box domain, bool wrap) {
        if (phi.rows() != phi.cols() || phi.rows() != domain.dim())
            throw SchemaError("flow_map: direct Phi must be d x d matching the domain");
        domain.validate();
        return FlowMap(std::move(phi), std::move(domain), wrap);
    }

    const Matrix& phi() const { return phi_; }
    const Box& domain() const { return domain_; }
    bool wrap() const { return wrap_; }
    double tau() const { return tau_; }

    // Phi acts in absolute coordinates; the wrap then reduces into the box.
    // This keeps wrapped and unwrapped dynamics identical whenever the image
    // stays inside the box, for boxes not anchored at the origin too.
    Vector evaluate(const Vector& x) const {
        Vector y = phi_ * x;
        if (wrap_) return domain_.wrap_point(y);
        return y;
    }

    /// n-fold composition, wrapping between steps when wrap is on.
    Vector evaluate_iter(const Vector& x, int n) const {
        Vector y = x;
        for (int k = 0; k < n; ++k) y = evaluate(y);
        return y;
    }

private:
    FlowMap(Matrix phi, Box domain, bool wrap)
        : domain_(std::move(domain)), tau_(1.0), wrap_(wrap), phi_(std::move(phi)) {
        check_invertible();
    }

    void check_invertible() const {
        double det = phi_.determinant();
        if (!(std::abs(det) > 0.0) || !std::isfinite(det))
            throw NumericRangeError("flow_map: Phi is singular or non-finite");
    }

    Box domain_;
    double tau_;
    bool wrap_;
    Matrix phi_;
};

inline FlowMap flow_map(const SystemSpec& spec, const GainSet& gains, double tau, bool wrap) {
    return FlowMap(spec, gains, tau, wrap);
}

} // namespace feq
