#include <doctest.h>

#include <cmath>
#include <random>

#include "parq/diagnostics.hpp"
#include "parq/oracle.hpp"
#include "parq/rng.hpp"

using namespace parq;

namespace {

BasisSpec pow4_basis(int n_servers) {
    const std::vector<Basis> block{AffinePowerBasis{1.0, 0.01}, PowerBasis{0.2},
                                   PowerBasis{1.0}, PowerBasis{1.5}};
    BasisSpec spec;
    spec.per_server.assign(static_cast<std::size_t>(n_servers), block);
    spec.h_index = 3;
    return spec;
}

SystemConfig hetero3() {
    return SystemConfig{3, 2.0, {0.5, 2.5, 5.0}, 42};
}

std::vector<TrajectoryRecord> constant_trajectory(const State& x, std::int64_t n,
                                                  double dt) {
    std::vector<TrajectoryRecord> records;
    records.reserve(static_cast<std::size_t>(n));
    for (std::int64_t k = 0; k < n; ++k)
        records.push_back({k, x, 0, {EventKind::Arrival, 0}, dt, 0.0});
    return records;
}

}  // namespace

TEST_CASE("lyapunov_value") {
    const BasisSpec basis = pow4_basis(3);
    const std::vector<double> zero(12, 0.0);
    CHECK(lyapunov_value(basis, zero, 0.1, {4, 0, 9}) == 3.0);  // N terms of exp(0)

    SUBCASE("single linear block") {
        BasisSpec lin;
        lin.per_server = {{PowerBasis{1.0}}};
        lin.h_index = 0;
        const std::vector<double> one{1.0};
        CHECK(lyapunov_value(lin, one, 0.1, {3}) ==
              doctest::Approx(std::exp(0.3)).epsilon(1e-12));
    }
    SUBCASE("monotone in each coordinate for non-negative weights") {
        const std::vector<double> w(12, 0.3);
        for (int n = 0; n < 3; ++n)
            for (int v = 0; v < 12; ++v) {
                State lo{2, 2, 2}, hi{2, 2, 2};
                lo[n] = v;
                hi[n] = v + 1;
                CHECK(lyapunov_value(basis, w, 0.05, hi) >=
                      lyapunov_value(basis, w, 0.05, lo));
            }
    }
    SUBCASE("overflow returns the +inf sentinel") {
        const std::vector<double> w(12, 10.0);
        CHECK(std::isinf(lyapunov_value(basis, w, 10.0, {100, 0, 0})));
    }
}

TEST_CASE("drift operator") {
    const SystemConfig config = hetero3();
    const BasisSpec basis = pow4_basis(3);

    SUBCASE("zero weights give exactly zero drift everywhere") {
        const std::vector<double> zero(12, 0.0);
        std::mt19937_64 rng(1);
        for (int trial = 0; trial < 50; ++trial) {
            const State x{static_cast<int>(rng() % 30), static_cast<int>(rng() % 30),
                          static_cast<int>(rng() % 30)};
            CHECK(drift(config, basis, zero, 0.01, 0.001, x) == 0.0);
        }
    }

    SUBCASE("empty state: arrivals only, non-negative drift for non-negative w") {
        const std::vector<double> w(12, 0.4);
        CHECK(drift(config, basis, w, 0.01, 0.01, {0, 0, 0}) >= 0.0);
    }

    SUBCASE("constant test functions are null for the generic operator") {
        std::mt19937_64 rng(2);
        std::vector<double> w(12);
        for (double& v : w) v = uniform01(rng);
        const auto constant = [](const State&) { return 7.5; };
        for (int trial = 0; trial < 20; ++trial) {
            const State x{static_cast<int>(rng() % 10), static_cast<int>(rng() % 10),
                          static_cast<int>(rng() % 10)};
            CHECK(std::abs(apply_drift_operator(config, basis, w, 0.1, x, constant)) <=
                  1e-12);
        }
    }

    SUBCASE("hand-enumerated two-server expectation") {
        const SystemConfig two{2, 2.0, {1.0, 1.0}, 0};
        const BasisSpec basis2 = pow4_basis(2);
        std::vector<double> w(8);
        std::mt19937_64 rng(3);
        for (double& v : w) v = uniform01(rng);
        const double nu = 0.05, iota = 0.3;
        const State x{1, 0};

        const PolicyParams policy = SoftmaxPolicy{iota};
        const auto probs = action_probabilities(policy, &basis2, w, x);
        auto we = [&](const State& s) { return lyapunov_value(basis2, w, nu, s); };
        // rate 3: departure from server 0 w.p. 1/3, arrival w.p. 2/3 to the
        // routed server.
        const double w_here = we(x);
        const double expected =
            probs[0] * ((1.0 / 3.0) * (we({0, 0}) - w_here) +
                        (2.0 / 3.0) * (we({2, 0}) - w_here)) +
            probs[1] * ((1.0 / 3.0) * (we({0, 0}) - w_here) +
                        (2.0 / 3.0) * (we({1, 1}) - w_here));
        CHECK(drift(two, basis2, w, iota, nu, x) ==
              doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("decomposed drift equals the generic operator on W_e") {
        std::mt19937_64 rng(4);
        std::vector<double> w(12);
        for (double& v : w) v = 0.5 * uniform01(rng);
        const double nu = 0.01, iota = 0.05;
        for (int trial = 0; trial < 30; ++trial) {
            const State x{static_cast<int>(rng() % 12), static_cast<int>(rng() % 12),
                          static_cast<int>(rng() % 12)};
            const auto we = [&](const State& s) {
                return lyapunov_value(basis, w, nu, s);
            };
            const double generic = apply_drift_operator(config, basis, w, iota, x, we);
            CHECK(drift(config, basis, w, iota, nu, x) ==
                  doctest::Approx(generic).epsilon(1e-12));
        }
    }
}

TEST_CASE("stationarity balance: expected drift vanishes under d_w") {
    const SystemConfig two{2, 0.8, {1.0, 1.5}, 0};
    const TruncatedMdp mdp = build_truncated(
        two, SeparableCost{{PowerBasis{1.0}, PowerBasis{1.0}}}, 6);
    const BasisSpec basis = pow4_basis(2);
    std::mt19937_64 rng(6);
    std::vector<double> w(8);
    for (double& v : w) v = uniform01(rng);
    const double iota = 0.4;
    const PolicyTable pi = softmax_policy_table(mdp, basis, w, iota);
    const auto d = stationary_distribution(mdp, pi, 1e-13);

    for (int probe = 0; probe < 3; ++probe) {
        std::vector<double> f(static_cast<std::size_t>(mdp.n_states));
        for (double& v : f) v = uniform01(rng);
        double balance = 0.0;
        for (int s = 0; s < mdp.n_states; ++s)
            for (int a = 0; a < 2; ++a) {
                const double rho = d[s] * pi[s * 2 + a];
                for (const auto& arc : mdp.row(s, a))
                    balance += rho * arc.prob * (f[arc.next] - f[s]);
            }
        CHECK(std::abs(balance) <= 1e-8);
    }
}

TEST_CASE("find_nu certificates") {
    const SystemConfig config = hetero3();
    const BasisSpec basis = pow4_basis(3);

    SUBCASE("coercive floor-only weights admit a certificate") {
        std::vector<double> w(12, 0.0);
        for (int n = 0; n < 3; ++n) w[n * 4 + 3] = 1.0;
        const DriftReport report = find_nu(config, basis, w, 0.01, 5, 30);
        CHECK(report.pass);
        CHECK(report.max_drift_outside < 0.0);
        CHECK(report.nu > 0.0);
        CHECK(report.b_e_est > 0.0);
        CHECK(report.checked_states > 0);
    }

    SUBCASE("zero weights never certify (drift is identically zero)") {
        const std::vector<double> zero(12, 0.0);
        const DriftReport report = find_nu(config, basis, zero, 0.01, 5, 20);
        CHECK_FALSE(report.pass);
    }

    SUBCASE("an overloaded system never certifies") {
        SystemConfig overload = config;
        overload.lambda = 10.0;
        std::vector<double> w(12, 0.0);
        for (int n = 0; n < 3; ++n) w[n * 4 + 3] = 1.0;
        const DriftReport report = find_nu(overload, basis, w, 0.01, 5, 30);
        CHECK_FALSE(report.pass);
        CHECK(report.max_drift_outside >= 0.0);
        CHECK_FALSE(report.worst_state.empty());
    }
}

TEST_CASE("mgf time average") {
    const BasisSpec basis = pow4_basis(2);
    std::vector<double> w(8, 0.2);

    SUBCASE("constant trajectory gives a constant series") {
        const auto records = constant_trajectory({0, 0}, 200, 0.1);
        const auto series = mgf_time_average(records, basis, w, 0.1);
        REQUIRE(series.size() == 200);
        // g at the empty state: both servers contribute exp(nu * w . fwd(0)).
        double score = 0.0;
        for (int j = 0; j < 4; ++j)
            score += 0.2 * (basis_value(basis.at(0, j), 1.0) -
                            basis_value(basis.at(0, j), 0.0));
        const double expected = 2.0 * std::exp(0.1 * score);
        for (double v : series) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("doubling nu never decreases the final average") {
        std::vector<TrajectoryRecord> records;
        std::mt19937_64 rng(8);
        for (int k = 0; k < 500; ++k)
            records.push_back({k,
                               {static_cast<int>(rng() % 7), static_cast<int>(rng() % 7)},
                               0,
                               {EventKind::Arrival, 0},
                               0.1,
                               0.0});
        const auto lo = mgf_time_average(records, basis, w, 0.05);
        const auto hi = mgf_time_average(records, basis, w, 0.10);
        CHECK(hi.back() >= lo.back());
    }

    SUBCASE("empty trajectory is an error") {
        CHECK_THROWS_AS(mgf_time_average({}, basis, w, 0.1), std::invalid_argument);
    }
}

TEST_CASE("stability metrics") {
    SUBCASE("all-empty trajectory averages to zero") {
        const auto records = constant_trajectory({0, 0}, 5000, 0.25);
        const auto series = stability_metrics(records, 1000);
        CHECK(series.cumulative_average == 0.0);
        for (double v : series.window_means) CHECK(v == 0.0);
    }

    SUBCASE("M/M/1 mean queue length matches rho/(1-rho)") {
        const SystemConfig mm1{1, 1.0, {2.0}, 0};
        RngStreams streams(314159);
        const ActionSource only = [](const State&, std::mt19937_64&) { return 0; };
        const CostFn zero_cost = [](const State&, double) { return 0.0; };
        StabilityMetrics acc(100000);
        const TrajectorySink sink = [&](const TrajectoryRecord& rec) {
            acc.add(rec.x, rec.dt);
        };
        simulate_trajectory(mm1, only, zero_cost, 1000000, streams, {}, &sink);
        CHECK(std::abs(acc.cumulative_average() - 1.0) <= 0.1);
    }

    SUBCASE("overloaded single server grows decade over decade") {
        const SystemConfig overload{1, 4.0, {1.0}, 0};
        RngStreams streams(99);
        const ActionSource only = [](const State&, std::mt19937_64&) { return 0; };
        const CostFn zero_cost = [](const State&, double) { return 0.0; };
        StabilityMetrics acc(10000);
        const TrajectorySink sink = [&](const TrajectoryRecord& rec) {
            acc.add(rec.x, rec.dt);
        };
        simulate_trajectory(overload, only, zero_cost, 100000, streams, {}, &sink);
        REQUIRE(acc.windows().size() == 10);
        for (std::size_t i = 1; i < acc.windows().size(); ++i)
            CHECK(acc.windows()[i] > acc.windows()[i - 1]);
    }
}

TEST_CASE("total-variation window distances") {
    SUBCASE("identical windows have distance zero") {
        const auto records = constant_trajectory({1, 2}, 4000, 0.1);
        const auto distances = tv_window_distance(records, 1000);
        REQUIRE(distances.size() == 3);
        for (double d : distances) CHECK(d == 0.0);
    }

    SUBCASE("disjoint-support windows have distance one") {
        std::vector<TrajectoryRecord> records = constant_trajectory({0, 0}, 1000, 0.1);
        const auto tail = constant_trajectory({5, 5}, 1000, 0.1);
        records.insert(records.end(), tail.begin(), tail.end());
        const auto distances = tv_window_distance(records, 1000);
        REQUIRE(distances.size() == 1);
        CHECK(distances[0] == 1.0);
    }

    SUBCASE("distances stay in [0, 1] on random data") {
        std::vector<TrajectoryRecord> records;
        std::mt19937_64 rng(12);
        for (int k = 0; k < 10000; ++k)
            records.push_back({k,
                               {static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)},
                               0,
                               {EventKind::Arrival, 0},
                               0.1,
                               0.0});
        for (double d : tv_window_distance(records, 1000)) {
            CHECK(d >= 0.0);
            CHECK(d <= 1.0);
        }
    }

    SUBCASE("undersized windows are rejected") {
        CHECK_THROWS_AS(TvWindowDistance(999), std::invalid_argument);
    }
}

TEST_CASE("weight convergence series") {
    std::vector<TrainSnapshot> trace;
    const std::vector<double> target{1.0, 2.0};
    for (int i = 0; i < 5; ++i) {
        TrainSnapshot snap;
        snap.k = i * 100;
        snap.w = target;
        trace.push_back(snap);
    }

    SUBCASE("trace at the target is identically zero") {
        const auto series = weight_convergence(trace, target);
        for (double d : series.distances) CHECK(d == 0.0);
    }

    SUBCASE("scaling snapshots and target doubles every entry") {
        std::vector<TrainSnapshot> off = trace;
        for (int i = 0; i < 5; ++i) off[i].w = {1.0 + 0.1 * i, 2.0 - 0.2 * i};
        const auto base = weight_convergence(off, target);

        std::vector<TrainSnapshot> scaled = off;
        for (auto& snap : scaled)
            for (double& v : snap.w) v *= 2.0;
        const std::vector<double> target2{2.0, 4.0};
        const auto doubled = weight_convergence(scaled, target2);
        for (std::size_t i = 0; i < base.distances.size(); ++i)
            CHECK(doubled.distances[i] ==
                  doctest::Approx(2.0 * base.distances[i]).epsilon(1e-12));
    }

    SUBCASE("a decaying series fits a positive rate") {
        std::vector<TrainSnapshot> decay;
        for (int i = 0; i < 10; ++i) {
            TrainSnapshot snap;
            snap.k = i * 1000;
            snap.w = {1.0 + std::exp(-0.001 * snap.k), 2.0};
            decay.push_back(snap);
        }
        const auto series = weight_convergence(decay, target);
        for (std::size_t i = 1; i < series.distances.size(); ++i)
            CHECK(series.distances[i] < series.distances[i - 1]);
        CHECK(series.decay_rate == doctest::Approx(0.001).epsilon(1e-3));
    }

    SUBCASE("dimension mismatch is an error") {
        const std::vector<double> bad{1.0};
        CHECK_THROWS_AS(weight_convergence(trace, bad), std::invalid_argument);
    }
}
