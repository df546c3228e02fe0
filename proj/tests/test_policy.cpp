#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "parq/basis.hpp"
#include "parq/policy.hpp"
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

BasisSpec linear_basis(int n_servers) {
    BasisSpec spec;
    spec.per_server.assign(static_cast<std::size_t>(n_servers),
                           std::vector<Basis>{PowerBasis{1.0}});
    spec.h_index = 0;
    return spec;
}

// Independent softmax path over full Q-hat values, used to cross-check the
// forward-difference formulation.
std::vector<double> naive_softmax(const BasisSpec& basis, const std::vector<double>& w,
                                  const State& x, double iota, double q_shift = 0.0) {
    const int n = basis.n_servers();
    std::vector<double> q(static_cast<std::size_t>(n));
    double qmin = std::numeric_limits<double>::infinity();
    for (int a = 0; a < n; ++a) {
        q[a] = q_hat(basis, w, x, a) + q_shift;
        qmin = std::min(qmin, q[a]);
    }
    double sum = 0.0;
    for (int a = 0; a < n; ++a) {
        q[a] = std::exp(-(q[a] - qmin) / iota);
        sum += q[a];
    }
    for (double& v : q) v /= sum;
    return q;
}

}  // namespace

TEST_CASE("softmax with zero weights is uniform") {
    const BasisSpec basis = pow4_basis(3);
    const std::vector<double> w(12, 0.0);
    const auto probs = action_probabilities(SoftmaxPolicy{0.01}, &basis, w, {5, 0, 2});
    for (double p : probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax approaches greedy as the temperature vanishes") {
    // Unit forward differences, so the scores equal the weights directly.
    const BasisSpec basis = linear_basis(3);
    const std::vector<double> w{0.02, 0.01, 0.03};  // argmin is server 1, gap 0.01
    const auto probs = action_probabilities(SoftmaxPolicy{1e-6}, &basis, w, {0, 0, 0});
    CHECK(probs[1] >= 1.0 - 1e-9);
    for (double p : probs) CHECK(p > 0.0);  // positivity survives underflow clamping
    double sum = 0.0;
    for (double p : probs) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("softmax matches the naive full-Q path and ignores constant shifts") {
    const BasisSpec basis = pow4_basis(3);
    std::mt19937_64 rng(321);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> w(12);
        for (double& v : w) v = uniform01(rng) - 0.3;
        const State x{static_cast<int>(rng() % 8), static_cast<int>(rng() % 8),
                      static_cast<int>(rng() % 8)};
        const double iota = 0.5;
        const auto lib = action_probabilities(SoftmaxPolicy{iota}, &basis, w, x);
        const auto naive = naive_softmax(basis, w, x, iota);
        const auto shifted = naive_softmax(basis, w, x, iota, 17.25);
        double sum = 0.0;
        for (int a = 0; a < 3; ++a) {
            CHECK(lib[a] == doctest::Approx(naive[a]).epsilon(1e-12));
            CHECK(lib[a] == doctest::Approx(shifted[a]).epsilon(1e-12));
            CHECK(lib[a] > 0.0);
            sum += lib[a];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax survives extreme score magnitudes") {
    // Scores up to 1e4 at iota = 0.01 push |Q|/iota to 1e6; the shifted
    // computation must stay finite, positive and normalized.
    const BasisSpec basis = linear_basis(3);
    const std::vector<double> w{9999.0, -9999.0, 0.5};  // scores equal weights
    const auto probs = action_probabilities(SoftmaxPolicy{0.01}, &basis, w, {7, 3, 0});
    double sum = 0.0;
    for (double p : probs) {
        CHECK(std::isfinite(p));
        CHECK(p > 0.0);
        sum += p;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    CHECK(probs[1] >= 1.0 - 1e-9);  // the -9999 score takes all the mass
}

TEST_CASE("JSQ routes to the shortest queue, lowest index on ties") {
    std::vector<double> empty;
    const auto p1 = action_probabilities(JsqPolicy{}, nullptr, empty, {3, 1, 2});
    CHECK(p1[1] == 1.0);
    const auto p2 = action_probabilities(JsqPolicy{}, nullptr, empty, {1, 1, 2});
    CHECK(p2[0] == 1.0);

    std::mt19937_64 rng(9);
    CHECK(sample_action(JsqPolicy{}, nullptr, empty, {3, 1, 2}, rng) == 1);
    CHECK(sample_action(JsqPolicy{}, nullptr, empty, {1, 1, 2}, rng) == 0);
}

TEST_CASE("Bernoulli routing follows its simplex") {
    std::vector<double> empty;
    std::mt19937_64 rng(10);
    const BernoulliPolicy sure{{1.0, 0.0, 0.0}};
    for (int i = 0; i < 50; ++i)
        CHECK(sample_action(sure, nullptr, empty, {0, 0, 0}, rng) == 0);

    CHECK_THROWS_AS(validate_policy(BernoulliPolicy{{0.5, 0.2}}, 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_policy(BernoulliPolicy{{0.5, 0.5}}, 3),
                    std::invalid_argument);
    CHECK_THROWS_AS(validate_policy(SoftmaxPolicy{0.0}, 3), std::invalid_argument);
}

TEST_CASE("sampled action frequencies match the exact probabilities") {
    const BasisSpec basis = pow4_basis(3);
    std::vector<double> w(12);
    std::mt19937_64 init(77);
    for (double& v : w) v = uniform01(init);
    const State x{2, 0, 1};
    const PolicyParams policy = SoftmaxPolicy{0.5};
    const auto probs = action_probabilities(policy, &basis, w, x);

    std::mt19937_64 rng(404);
    const int n_draws = 100000;
    std::map<int, int> counts;
    for (int i = 0; i < n_draws; ++i)
        counts[sample_action(policy, &basis, w, x, rng)] += 1;
    for (int a = 0; a < 3; ++a) {
        const double expected = probs[a] * n_draws;
        const double sigma = std::sqrt(n_draws * probs[a] * (1.0 - probs[a]));
        CHECK(std::abs(counts[a] - expected) <= 3.0 * sigma + 1.0);
    }
}

TEST_CASE("every policy kind returns a simplex") {
    const BasisSpec basis = pow4_basis(3);
    std::mt19937_64 rng(31337);
    const std::vector<PolicyParams> kinds{SoftmaxPolicy{0.01}, GreedyPolicy{},
                                          JsqPolicy{},
                                          BernoulliPolicy{{0.2, 0.3, 0.5}}};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> w(12);
        for (double& v : w) v = 3.0 * (uniform01(rng) - 0.5);
        const State x{static_cast<int>(rng() % 20), static_cast<int>(rng() % 20),
                      static_cast<int>(rng() % 20)};
        for (const auto& policy : kinds) {
            const auto probs = action_probabilities(policy, &basis, w, x);
            double sum = 0.0;
            for (double p : probs) {
                CHECK(p >= 0.0);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("greedy over a convex power basis with unit weights reproduces JSQ") {
    // With x^2 per server the action part of Q-hat is 2*x_a + 1, increasing
    // in the queue length, so argmin Q-hat is argmin x_a with matching ties.
    // (A linear basis would make Q-hat action-independent: every forward
    // difference is 1, so greedy degenerates to the lowest index.)
    BasisSpec basis;
    basis.per_server.assign(4, std::vector<Basis>{PowerBasis{2.0}});
    basis.h_index = 0;
    const std::vector<double> unit(4, 1.0);
    std::vector<double> empty;
    std::mt19937_64 rng(64);
    for (int trial = 0; trial < 300; ++trial) {
        State x(4);
        for (int& v : x) v = static_cast<int>(rng() % 4);  // frequent ties
        const int greedy = sample_action(GreedyPolicy{}, &basis, unit, x, rng);
        const int jsq = sample_action(JsqPolicy{}, nullptr, empty, x, rng);
        CHECK(greedy == jsq);
    }

    // Degenerate linear case: constant scores, ties resolve to server 0.
    const BasisSpec lin = linear_basis(4);
    std::mt19937_64 rng2(65);
    for (int trial = 0; trial < 20; ++trial) {
        State x{static_cast<int>(rng2() % 4), static_cast<int>(rng2() % 4),
                static_cast<int>(rng2() % 4), static_cast<int>(rng2() % 4)};
        CHECK(sample_action(GreedyPolicy{}, &lin, unit, x, rng2) == 0);
    }
}

TEST_CASE("deterministic policies are repeatable and consume no randomness") {
    const BasisSpec basis = pow4_basis(2);
    const std::vector<double> w{0.3, 0.1, 0.2, 0.4, 0.1, 0.5, 0.2, 0.3};
    std::mt19937_64 rng(5);
    const std::uint64_t before = rng();
    std::mt19937_64 replay(5);
    const int a1 = sample_action(GreedyPolicy{}, &basis, w, {1, 2}, replay);
    const int a2 = sample_action(GreedyPolicy{}, &basis, w, {1, 2}, replay);
    CHECK(a1 == a2);
    CHECK(replay() == before);  // stream untouched
}

TEST_CASE("lipschitz probe") {
    const BasisSpec basis = pow4_basis(2);
    std::vector<State> states;
    for (int i = 0; i <= 10; ++i)
        for (int j = 0; j <= 10; ++j) states.push_back({i, j});

    std::vector<double> w(8, 0.5), w2(8, 0.5);
    w2[3] += 0.05;
    w2[6] -= 0.02;

    SUBCASE("identical weights are a precondition violation") {
        CHECK_THROWS_AS(lipschitz_probe(basis, states, w, w, 0.1),
                        std::invalid_argument);
    }
    SUBCASE("larger temperature flattens the policy") {
        const double tight = lipschitz_probe(basis, states, w, w2, 0.1);
        const double loose = lipschitz_probe(basis, states, w, w2, 1.0);
        CHECK(tight > 0.0);
        CHECK(loose < tight);
    }
    SUBCASE("finite on far-out states") {
        std::vector<State> far;
        for (int i = 0; i <= 1000; i += 111)
            for (int j = 0; j <= 1000; j += 111) far.push_back({i, j});
        const double probe = lipschitz_probe(basis, far, w, w2, 0.01);
        CHECK(std::isfinite(probe));
    }
}
