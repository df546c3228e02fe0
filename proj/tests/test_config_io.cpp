#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "parq/config.hpp"
#include "parq/harness.hpp"
#include "parq/io.hpp"

using namespace parq;
using nlohmann::json;

namespace {

std::string preset_path(const std::string& name) {
    return std::string(PARQ_SOURCE_DIR) + "/presets/" + name;
}

json minimal_config_json() {
    return json::parse(R"({
        "system": {"n_servers": 2, "lambda": 1.0, "mu": [1.0, 2.0], "seed": 1},
        "basis": {"shared": [{"kind": "power", "exponent": 1.0},
                             {"kind": "power", "exponent": 1.5}],
                  "h_index": 1},
        "cost": {"kind": "aggregate_log"},
        "policy": {"kind": "softmax", "iota": 0.1},
        "horizon": 100
    })");
}

std::filesystem::path fresh_temp_dir(const std::string& tag) {
    const auto dir = std::filesystem::temp_directory_path() /
                     ("parq_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("presets parse and validate") {
    const RunConfig hetero = load_run_config(preset_path("n3_logcost.json"));
    CHECK(hetero.system.n_servers == 3);
    CHECK(hetero.system.lambda == 2.0);
    CHECK(hetero.system.mu == std::vector<double>{0.5, 2.5, 5.0});
    CHECK(hetero.basis.per_server_count() == 4);
    CHECK(hetero.basis.h_index == 3);
    CHECK(std::holds_alternative<AggregateLogCost>(hetero.cost));
    CHECK(std::get<SoftmaxPolicy>(hetero.policy).iota == 0.01);
    CHECK(hetero.learner.gamma == 0.99);
    CHECK(hetero.horizon == 2000000);

    const RunConfig toy = load_run_config(preset_path("n2_toy.json"));
    CHECK(toy.system.n_servers == 2);
    CHECK(toy.basis.per_server_count() == 3);
    CHECK(std::holds_alternative<AggregateLogCost>(toy.cost));
    CHECK(toy.learner.gamma == 0.9);
    CHECK(toy.learner.w_l == 0.01);
}

TEST_CASE("unknown keys are hard errors") {
    json j = minimal_config_json();
    j["learner"] = {{"gamma", 0.9}, {"momentum", 0.5}};
    CHECK_THROWS_AS(parse_run_config(j), ConfigError);

    json j2 = minimal_config_json();
    j2["system"]["n_server"] = 3;  // typo
    CHECK_THROWS_AS(parse_run_config(j2), ConfigError);

    json j3 = minimal_config_json();
    j3["frobnicate"] = true;
    CHECK_THROWS_AS(parse_run_config(j3), ConfigError);
}

TEST_CASE("config structural errors") {
    SUBCASE("basis needs exactly one of shared/per_server") {
        json j = minimal_config_json();
        j["basis"]["per_server"] = json::array();
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("unknown kinds") {
        json j = minimal_config_json();
        j["policy"] = {{"kind", "epsilon_greedy"}};
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
        json j2 = minimal_config_json();
        j2["cost"] = {{"kind", "quadratic"}};
        CHECK_THROWS_AS(parse_run_config(j2), ConfigError);
    }
    SUBCASE("semantic validation still applies") {
        json j = minimal_config_json();
        j["system"]["lambda"] = -1.0;
        CHECK_THROWS_AS(parse_run_config(j), ConfigError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_run_config("/nonexistent/path.json"), ConfigError);
    }
}

TEST_CASE("config round-trips through its canonical form") {
    const RunConfig config = load_run_config(preset_path("n2_toy.json"));
    const RunConfig reparsed = parse_run_config(run_config_to_json(config));
    CHECK(run_config_to_json(config) == run_config_to_json(reparsed));
    CHECK(config_hash(config) == config_hash(reparsed));

    RunConfig tweaked = config;
    tweaked.system.seed += 1;
    CHECK(config_hash(config) != config_hash(tweaked));

    SUBCASE("separable cost round-trips too") {
        json j = minimal_config_json();
        j["cost"] = {{"kind", "separable"},
                     {"per_server", json::array({{{"kind", "power"}, {"exponent", 1.0}},
                                                 {{"kind", "log"}, {"offset", 2.0}}})}};
        const RunConfig sep = parse_run_config(j);
        REQUIRE(std::holds_alternative<SeparableCost>(sep.cost));
        const RunConfig again = parse_run_config(run_config_to_json(sep));
        CHECK(run_config_to_json(sep) == run_config_to_json(again));
    }
}

TEST_CASE("trajectory logs round-trip through both formats") {
    std::mt19937_64 rng(2718);
    std::vector<TrajectoryRecord> records;
    for (int k = 0; k < 300; ++k) {
        TrajectoryRecord rec;
        rec.k = k;
        rec.x = {static_cast<int>(rng() % 30), static_cast<int>(rng() % 30),
                 static_cast<int>(rng() % 30)};
        rec.action = static_cast<int>(rng() % 3);
        rec.event = {rng() % 2 == 0 ? EventKind::Arrival : EventKind::Departure,
                     static_cast<int>(rng() % 3)};
        rec.dt = uniform01(rng) * 3.0;
        rec.cost = uniform01(rng) - 0.5;
        records.push_back(std::move(rec));
    }

    auto check_equal = [&](const std::vector<TrajectoryRecord>& got) {
        REQUIRE(got.size() == records.size());
        for (std::size_t i = 0; i < records.size(); ++i) {
            CHECK(got[i].k == records[i].k);
            CHECK(got[i].x == records[i].x);
            CHECK(got[i].action == records[i].action);
            CHECK(got[i].event.kind == records[i].event.kind);
            CHECK(got[i].event.server == records[i].event.server);
            CHECK(got[i].dt == records[i].dt);      // %.17g survives the round trip
            CHECK(got[i].cost == records[i].cost);
        }
    };

    SUBCASE("jsonl") {
        std::stringstream buf;
        const TrajectorySink sink = make_jsonl_sink(buf);
        for (const auto& rec : records) sink(rec);
        check_equal(read_trajectory(buf, TrajectoryFormat::Jsonl));
    }
    SUBCASE("binary") {
        std::stringstream buf;
        const TrajectorySink sink = make_binary_sink(buf, 3);
        for (const auto& rec : records) sink(rec);
        check_equal(read_trajectory(buf, TrajectoryFormat::Binary));
    }
    SUBCASE("binary rejects corrupt headers") {
        std::stringstream buf;
        buf << "NOTMAGIC";
        CHECK_THROWS_AS(read_trajectory(buf, TrajectoryFormat::Binary),
                        std::runtime_error);
    }
}

TEST_CASE("run_training writes reproducible artifacts") {
    RunConfig config = load_run_config(preset_path("n2_toy.json"));
    config.horizon = 5000;
    config.snapshot_every = 500;

    const auto dir1 = fresh_temp_dir("train1");
    const auto dir2 = fresh_temp_dir("train2");
    run_training(config, dir1.string());
    run_training(config, dir2.string());

    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    for (const char* name : {"trace.csv", "metrics.csv", "weights.json"}) {
        const std::string a = slurp(dir1 / name);
        CHECK(a.size() > 0);
        CHECK(a == slurp(dir2 / name));
    }
    CHECK(std::filesystem::exists(dir1 / "metadata.json"));

    // Changing the seed must change the metrics.
    RunConfig reseeded = config;
    reseeded.system.seed += 1;
    const auto dir3 = fresh_temp_dir("train3");
    run_training(reseeded, dir3.string());
    CHECK(slurp(dir1 / "metrics.csv") != slurp(dir3 / "metrics.csv"));

    const std::vector<double> w = load_weights((dir1 / "weights.json").string());
    CHECK(static_cast<int>(w.size()) == config.basis.dim());

    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
    std::filesystem::remove_all(dir3);
}

TEST_CASE("evaluation is deterministic and replication-order independent") {
    RunConfig config = load_run_config(preset_path("n2_toy.json"));
    const std::vector<double> no_weights;
    const EvalSummary serial =
        evaluate_policy(config.system, config.basis, config.cost, JsqPolicy{}, "jsq",
                        no_weights, 20000, 4, config.system.seed, 1);
    const EvalSummary parallel =
        evaluate_policy(config.system, config.basis, config.cost, JsqPolicy{}, "jsq",
                        no_weights, 20000, 4, config.system.seed, 4);
    CHECK(serial.rep_costs == parallel.rep_costs);
    CHECK(serial.rep_qlens == parallel.rep_qlens);

    SUBCASE("zero horizon is rejected") {
        CHECK_THROWS_AS(evaluate_policy(config.system, config.basis, config.cost,
                                        JsqPolicy{}, "jsq", no_weights, 0, 1,
                                        config.system.seed, 1),
                        ConfigError);
    }
}

TEST_CASE("comparison table normalizes by the base row") {
    EvalSummary a;
    a.policy_name = "sgs";
    a.avg_cost = 0.5;
    EvalSummary b;
    b.policy_name = "jsq";
    b.avg_cost = 1.25;
    const ComparisonTable table = make_comparison({a, b}, "sgs");
    CHECK(table.rows[0].norm_cost == 1.0);
    CHECK(table.rows[1].norm_cost == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(table.to_csv().find("policy,avg_cost") == 0);
    CHECK_THROWS_AS(make_comparison({a, b}, "nns"), ConfigError);

    SUBCASE("single-row table") {
        const ComparisonTable single = make_comparison({a}, "sgs");
        CHECK(single.rows.size() == 1);
        CHECK(single.rows[0].norm_cost == 1.0);
    }

    SUBCASE("normalized costs are invariant under cost rescaling") {
        EvalSummary a2 = a, b2 = b;
        a2.avg_cost *= 7.5;
        b2.avg_cost *= 7.5;
        const ComparisonTable scaled = make_comparison({a2, b2}, "sgs");
        CHECK(scaled.rows[1].norm_cost ==
              doctest::Approx(table.rows[1].norm_cost).epsilon(1e-12));
    }
}
