#include "feq/perturb.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace feq;

namespace {

Box sym_box(int d, double r, bool wrap) {
    Box b;
    b.lo = Vector::Constant(d, -r);
    b.hi = Vector::Constant(d, r);
    b.wrap = wrap;
    return b;
}

SystemSpec scalar_spec(double a, Box domain) {
    SystemSpec s;
    s.d = 1;
    s.N = 1;
    s.A.switch_times = {0.0};
    Matrix A(1, 1);
    A << a;
    s.A.mats = {A};
    s.B = {Matrix::Identity(1, 1)};
    s.domain = std::move(domain);
    s.dt = 1e-3;
    return s;
}

GainSet zero_gains(const SystemSpec& spec) {
    GainSet g;
    g.bound = 1.0;
    for (int j = 0; j < spec.N; ++j)
        g.K.push_back(Matrix::Zero(spec.B[j].cols(), spec.d));
    return g;
}

PerturbSpec base_perturb(int d, double eps, double horizon, long n_paths,
                         std::uint64_t seed = 42) {
    PerturbSpec p;
    p.epsilon = eps;
    p.sigma = Matrix::Identity(d, d);
    p.dt_sde = 0.01;
    p.n_paths = n_paths;
    p.horizon = horizon;
    p.seed = seed;
    return p;
}

MeasureVector mv(std::initializer_list<double> vals) {
    Vector v(static_cast<long>(vals.size()));
    long i = 0;
    for (double x : vals) v[i++] = x;
    return MeasureVector{v};
}

} // namespace

TEST_CASE("euler_maruyama") {
    SECTION("eps = 0 tracks the exact flow within step error") {
        SystemSpec s = scalar_spec(-1.0, sym_box(1, 5.0, false));
        GainSet g = zero_gains(s);
        PerturbSpec p = base_perturb(1, 0.0, 2.0, 64);
        p.dt_sde = 0.001;  // first-order Euler needs a fine step for this bound
        auto ens = euler_maruyama(s, g, p, uniform_x0_sampler(s.domain), {1.0, 2.0});
        for (std::size_t k = 0; k < ens.sample_times.size(); ++k) {
            double t = ens.sample_times[k];
            for (long path = 0; path < p.n_paths; ++path) {
                auto rng = make_rng(p.seed, "sde", static_cast<std::uint64_t>(path));
                Vector x0 = uniform_x0_sampler(s.domain)(rng);
                Vector exact = integrate_flow(s, g, x0, t);
                REQUIRE(std::abs(ens.endpoints[k](path, 0) - exact[0]) < 1e-3);
            }
        }
    }
    SECTION("pure Brownian motion has variance ~ horizon") {
        SystemSpec s = scalar_spec(0.0, sym_box(1, 5.0, false));
        GainSet g = zero_gains(s);
        PerturbSpec p = base_perturb(1, 1.0, 2.0, 10000);
        X0Sampler at_zero = [](std::mt19937_64&) { return Vector::Zero(1); };
        auto ens = euler_maruyama(s, g, p, at_zero, {2.0});
        double mean = ens.endpoints[0].col(0).mean();
        double var = (ens.endpoints[0].col(0).array() - mean).square().sum() /
                     static_cast<double>(p.n_paths - 1);
        REQUIRE(std::abs(var - 2.0) / 2.0 < 0.10);
    }
    SECTION("sigma = 0 is bit-identical to eps = 0") {
        SystemSpec s = scalar_spec(-0.5, sym_box(1, 5.0, false));
        GainSet g = zero_gains(s);
        PerturbSpec noiseless = base_perturb(1, 0.0, 1.0, 32);
        PerturbSpec zero_sigma = base_perturb(1, 2.0, 1.0, 32);
        zero_sigma.sigma = Matrix::Zero(1, 1);
        auto a = euler_maruyama(s, g, noiseless, uniform_x0_sampler(s.domain), {0.5, 1.0});
        auto b = euler_maruyama(s, g, zero_sigma, uniform_x0_sampler(s.domain), {0.5, 1.0});
        for (std::size_t k = 0; k < a.endpoints.size(); ++k)
            REQUIRE((a.endpoints[k] - b.endpoints[k]).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("identical specs give bit-identical ensembles across thread counts") {
        SystemSpec s = scalar_spec(-1.0, sym_box(1, 5.0, false));
        GainSet g = zero_gains(s);
        PerturbSpec p = base_perturb(1, 0.5, 1.0, 200);
        auto a = euler_maruyama(s, g, p, uniform_x0_sampler(s.domain), {1.0}, 1);
        auto b = euler_maruyama(s, g, p, uniform_x0_sampler(s.domain), {1.0}, 4);
        REQUIRE((a.endpoints[0] - b.endpoints[0]).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("unstable loop blow-up raises a numeric-range error with the path id") {
        SystemSpec s = scalar_spec(100.0, sym_box(1, 5.0, false));
        s.dt = 0.1;
        GainSet g = zero_gains(s);
        PerturbSpec p = base_perturb(1, 0.0, 60.0, 4);
        p.dt_sde = 0.1;
        REQUIRE_THROWS_AS(euler_maruyama(s, g, p, uniform_x0_sampler(s.domain), {60.0}),
                          NumericRangeError);
    }
    SECTION("OU stationary variance matches eps/2 within 10%") {
        SystemSpec s = scalar_spec(-1.0, sym_box(1, 5.0, false));
        GainSet g = zero_gains(s);
        X0Sampler at_zero = [](std::mt19937_64&) { return Vector::Zero(1); };
        for (double eps : {0.1, 1.0}) {
            PerturbSpec p = base_perturb(1, eps, 8.0, 20000);
            auto ens = euler_maruyama(s, g, p, at_zero, {8.0});
            double mean = ens.endpoints[0].col(0).mean();
            double var = (ens.endpoints[0].col(0).array() - mean).square().sum() /
                         static_cast<double>(p.n_paths - 1);
            REQUIRE(std::abs(var - eps / 2.0) / (eps / 2.0) < 0.10);
        }
    }
}

TEST_CASE("empirical_measure") {
    Partition part(sym_box(1, 1.0, true), 2);
    SECTION("all endpoints in one cell form a point mass") {
        Matrix e(3, 1);
        e << -0.5, -0.6, -0.9;
        MeasureVector m = empirical_measure(e, part);
        REQUIRE(m.pi[0] == 1.0);
        REQUIRE(m.pi[1] == 0.0);
    }
    SECTION("uniform synthetic endpoints split evenly") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> uni(-1.0, 1.0);
        Matrix e(100000, 1);
        for (long i = 0; i < e.rows(); ++i) e(i, 0) = uni(rng);
        MeasureVector m = empirical_measure(e, part);
        REQUIRE(std::abs(m.pi[0] - 0.5) < 0.01);
    }
    SECTION("a single path is a valid point mass") {
        Matrix e(1, 1);
        e << 0.25;
        MeasureVector m = empirical_measure(e, part);
        m.validate();
        REQUIRE(m.pi[1] == 1.0);
    }
    SECTION("out-of-box endpoints wrap before binning") {
        Matrix e(1, 1);
        e << 2.5;  // wraps to 0.5 in [-1, 1)
        MeasureVector m = empirical_measure(e, part);
        REQUIRE(m.pi[1] == 1.0);
    }
}

TEST_CASE("kl_divergence") {
    SECTION("identical measures give exactly zero") {
        REQUIRE(kl_divergence(mv({0.3, 0.7}), mv({0.3, 0.7}), 0.0) == 0.0);
    }
    SECTION("two-point closed form") {
        REQUIRE(kl_divergence(mv({1.0, 0.0}), mv({0.5, 0.5}), 0.0) ==
                Catch::Approx(std::log(2.0)).margin(1e-14));
    }
    SECTION("support violation with delta = 0 raises the absolute-continuity error") {
        REQUIRE_THROWS_AS(kl_divergence(mv({0.5, 0.5}), mv({1.0, 0.0}), 0.0),
                          NumericRangeError);
    }
    SECTION("smoothing repairs the support violation") {
        REQUIRE(std::isfinite(kl_divergence(mv({0.5, 0.5}), mv({1.0, 0.0}), 1e-9)));
    }
    SECTION("nonnegativity over random pairs") {
        std::mt19937_64 rng(11);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        for (int trial = 0; trial < 200; ++trial) {
            Vector p(8), q(8);
            for (int i = 0; i < 8; ++i) {
                p[i] = uni(rng);
                q[i] = uni(rng);
            }
            p /= p.sum();
            q /= q.sum();
            REQUIRE(kl_divergence(MeasureVector{p}, MeasureVector{q}, 0.0) >= -1e-12);
        }
    }
}

TEST_CASE("pinsker_check") {
    SECTION("identical measures give all zeros") {
        auto r = pinsker_check(mv({0.2, 0.8}), mv({0.2, 0.8}), 0.0);
        REQUIRE(r.lhs == 0.0);
        REQUIRE(r.kl == 0.0);
        REQUIRE(r.slack == 0.0);
    }
    SECTION("hand-computed two-point case") {
        auto r = pinsker_check(mv({1.0, 0.0}), mv({0.5, 0.5}), 0.0);
        REQUIRE(r.lhs == Catch::Approx(0.5).margin(1e-14));
        REQUIRE(r.kl == Catch::Approx(std::log(2.0)).margin(1e-14));
        REQUIRE(r.slack == Catch::Approx(std::log(2.0) - 0.5).margin(1e-14));
    }
    SECTION("the inequality holds over 1e3 random pairs") {
        std::mt19937_64 rng(13);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        for (int trial = 0; trial < 1000; ++trial) {
            Vector p(16), q(16);
            for (int i = 0; i < 16; ++i) {
                p[i] = uni(rng);
                q[i] = uni(rng);
            }
            p /= p.sum();
            q /= q.sum();
            auto r = pinsker_check(MeasureVector{p}, MeasureVector{q}, 1e-9);
            REQUIRE(r.slack >= -1e-12);
        }
    }
}

TEST_CASE("resilience_run on a contracting loop") {
    SystemSpec s = scalar_spec(-1.0, sym_box(1, 1.0, true));
    GainSet g = zero_gains(s);
    Partition part(s.domain, 4);
    ResilienceConfig rc;
    rc.fe.samples_per_cell = 256;
    rc.fe.seed = 42;

    SECTION("eps = 0 stays at the sampling-noise floor") {
        PerturbSpec p = base_perturb(1, 0.0, 3.0, 20000);
        auto rep = resilience_run(s, g, p, part, {2.0, 3.0}, rc);
        REQUIRE(rep.rho_hat < 0.05);
        for (const auto& row : rep.rows) REQUIRE(row.slack >= -1e-12);
    }
    SECTION("sigma = 0 reproduces the eps = 0 report exactly") {
        PerturbSpec p0 = base_perturb(1, 0.0, 3.0, 5000);
        PerturbSpec ps = base_perturb(1, 3.0, 3.0, 5000);
        ps.sigma = Matrix::Zero(1, 1);
        auto a = resilience_run(s, g, p0, part, {2.0, 3.0}, rc);
        auto b = resilience_run(s, g, ps, part, {2.0, 3.0}, rc);
        for (std::size_t k = 0; k < a.rows.size(); ++k)
            REQUIRE(a.rows[k].kl == b.rows[k].kl);
    }
    SECTION("rho_hat grows with the perturbation level") {
        double prev = -1.0;
        for (double eps : {0.01, 0.1, 1.0}) {
            PerturbSpec p = base_perturb(1, eps, 3.0, 20000);
            auto rep = resilience_run(s, g, p, part, {2.0, 3.0}, rc);
            REQUIRE(rep.rho_hat > prev);
            prev = rep.rho_hat;
        }
    }
    SECTION("uncertified gains only warn") {
        ResilienceConfig warn_rc = rc;
        warn_rc.gains_certified = false;
        PerturbSpec p = base_perturb(1, 0.1, 3.0, 1000);
        auto rep = resilience_run(s, g, p, part, {3.0}, warn_rc);
        REQUIRE(rep.gains_warning);
    }
}

TEST_CASE("convergence_sweep") {
    SystemSpec s = scalar_spec(-1.0, sym_box(1, 1.0, true));
    GainSet g = zero_gains(s);
    Partition part(s.domain, 4);
    ResilienceConfig rc;
    rc.fe.samples_per_cell = 256;
    rc.fe.seed = 42;

    SECTION("contracting loop passes a decreasing sweep") {
        PerturbSpec p = base_perturb(1, 0.0, 3.0, 20000);
        auto sw = convergence_sweep(s, g, p, part, {0.5, 0.1, 0.02}, {2.0, 3.0}, rc, 0.1);
        REQUIRE(sw.pass);
        REQUIRE(sw.reports.back().rho_hat < 0.1);
    }
    SECTION("eps_list = {0} passes at the noise floor") {
        PerturbSpec p = base_perturb(1, 0.0, 3.0, 10000);
        auto sw = convergence_sweep(s, g, p, part, {0.0}, {2.0, 3.0}, rc, 0.1);
        REQUIRE(sw.pass);
    }
    SECTION("non-decreasing epsilon list rejected") {
        PerturbSpec p = base_perturb(1, 0.0, 3.0, 100);
        REQUIRE_THROWS_AS(convergence_sweep(s, g, p, part, {0.1, 0.5}, {3.0}, rc, 0.1),
                          SchemaError);
    }
    SECTION("blow-up surfaces the numeric-range error") {
        SystemSpec bad = scalar_spec(100.0, sym_box(1, 1.0, true));
        bad.dt = 0.1;
        GainSet gb = zero_gains(bad);
        PerturbSpec p = base_perturb(1, 0.0, 60.0, 8);
        p.dt_sde = 0.1;
        Partition pb(bad.domain, 4);
        REQUIRE_THROWS_AS(convergence_sweep(bad, gb, p, pb, {0.1}, {60.0}, rc, 0.1),
                          NumericRangeError);
    }
}
