#include "feq/config.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace feq;

namespace {

Json minimal_direct() {
    return Json::parse(R"({
      "seed": 7,
      "system": {
        "domain": {"lo": [0.0], "hi": [1.0], "wrap": true},
        "direct_map": {"Phi": [[2.0]]}
      }
    })");
}

Json minimal_system() {
    return Json::parse(R"({
      "seed": 7,
      "system": {
        "d": 1,
        "dt": 0.001,
        "A": [[0.2]],
        "channels": [{"B": [[1.0]]}, {"B": [[1.0]]}],
        "domain": {"lo": [0.0], "hi": [1.0], "wrap": true}
      }
    })");
}

} // namespace

TEST_CASE("parse_config accepts the two system modes") {
    SECTION("direct map only") {
        ExperimentConfig cfg = parse_config(minimal_direct());
        REQUIRE(cfg.direct_phi.has_value());
        REQUIRE_FALSE(cfg.system.has_value());
        FlowMap f = cfg.make_flow_map(1.0, true);
        Vector x(1);
        x << 0.4;
        REQUIRE(f.evaluate(x)[0] == Catch::Approx(0.8));
    }
    SECTION("continuous system gets default zero gains") {
        ExperimentConfig cfg = parse_config(minimal_system());
        REQUIRE(cfg.system.has_value());
        REQUIRE(cfg.gains.has_value());
        REQUIRE(cfg.gains->K.size() == 2);
        REQUIRE(cfg.gains->K[0].cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(cfg.perturb.sigma.isIdentity(0.0));
    }
}

TEST_CASE("parse_config rejects malformed input with key paths") {
    SECTION("unknown top-level key") {
        Json j = minimal_direct();
        j["surprise"] = 1;
        REQUIRE_THROWS_WITH(parse_config(j), Catch::Matchers::ContainsSubstring("surprise"));
    }
    SECTION("unknown nested key names the path") {
        Json j = minimal_direct();
        j["system"]["domain"]["wrp"] = true;
        REQUIRE_THROWS_WITH(parse_config(j),
                            Catch::Matchers::ContainsSubstring("$.system.domain.wrp"));
    }
    SECTION("missing domain") {
        Json j = minimal_direct();
        j["system"].erase("domain");
        REQUIRE_THROWS_AS(parse_config(j), SchemaError);
    }
    SECTION("ragged matrix") {
        Json j = minimal_system();
        j["system"]["A"] = Json::parse("[[1.0, 2.0], [3.0]]");
        REQUIRE_THROWS_AS(parse_config(j), SchemaError);
    }
    SECTION("system without model or direct map") {
        Json j = Json::parse(R"({"system": {"domain": {"lo": [0.0], "hi": [1.0]}}})");
        REQUIRE_THROWS_AS(parse_config(j), SchemaError);
    }
    SECTION("gain bound violation caught at parse time") {
        Json j = minimal_system();
        j["gains"] = Json::parse(R"({"K": [[[2.0]], [[0.0]]], "bound": 1.0})");
        REQUIRE_THROWS_AS(parse_config(j), SchemaError);
    }
}

TEST_CASE("potential factory covers the documented types") {
    ExperimentConfig cfg = parse_config(minimal_direct());
    SECTION("zero") {
        Potential p = cfg.make_potential();
        REQUIRE(p(Vector::Constant(1, 0.3)) == 0.0);
    }
    SECTION("constant") {
        cfg.thermo.phi_type = "constant";
        cfg.thermo.phi_c = 2.5;
        REQUIRE(cfg.make_potential()(Vector::Constant(1, 0.3)) == 2.5);
    }
    SECTION("linear") {
        cfg.thermo.phi_type = "linear";
        cfg.thermo.phi_a = Vector::Constant(1, 3.0);
        REQUIRE(cfg.make_potential()(Vector::Constant(1, 0.5)) == Catch::Approx(1.5));
    }
    SECTION("quadratic") {
        cfg.thermo.phi_type = "quadratic";
        cfg.thermo.phi_q = Matrix::Identity(1, 1);
        REQUIRE(cfg.make_potential()(Vector::Constant(1, 0.5)) == Catch::Approx(-0.25));
    }
    SECTION("unknown type rejected") {
        cfg.thermo.phi_type = "cubic";
        REQUIRE_THROWS_AS(cfg.make_potential(), SchemaError);
    }
}

TEST_CASE("resolved_config round-trips through parse_config") {
    ExperimentConfig cfg = parse_config(minimal_system());
    Json expanded = resolved_config(cfg);
    ExperimentConfig cfg2 = parse_config(expanded);
    REQUIRE(cfg2.seed == cfg.seed);
    REQUIRE(cfg2.system->d == cfg.system->d);
    REQUIRE(cfg2.thermo.m == cfg.thermo.m);
    REQUIRE(cfg2.game.eps_eq == cfg.game.eps_eq);
    REQUIRE(cfg2.perturb.n_paths == cfg.perturb.n_paths);
    REQUIRE(resolved_config(cfg2) == expanded);
}

TEST_CASE("error types map to the CLI exit-code contract") {
    REQUIRE(SchemaError("x").exit_code() == 2);
    REQUIRE(ConvergenceError("x").exit_code() == 3);
    REQUIRE(NumericRangeError("x").exit_code() == 4);
    REQUIRE(ResourceError("x").exit_code() == 5);
}

TEST_CASE("substreams are stable and independent") {
    REQUIRE(substream_seed(1, "ulam", 0) != substream_seed(1, "sde", 0));
    REQUIRE(substream_seed(1, "ulam", 0) != substream_seed(1, "ulam", 1));
    REQUIRE(substream_seed(1, "ulam", 5) == substream_seed(1, "ulam", 5));
    REQUIRE(substream_seed(2, "ulam", 5) != substream_seed(1, "ulam", 5));
}
