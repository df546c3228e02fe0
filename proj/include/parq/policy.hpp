#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "parq/basis.hpp"
#include "parq/rng.hpp"
#include "parq/system.hpp"

namespace parq {

struct SoftmaxPolicy {
    double iota = 0.01;  // temperature; > 0
};
struct GreedyPolicy {};
struct JsqPolicy {};
struct BernoulliPolicy {
    std::vector<double> p;  // simplex over servers
};

using PolicyParams = std::variant<SoftmaxPolicy, GreedyPolicy, JsqPolicy, BernoulliPolicy>;

inline void validate_policy(const PolicyParams& policy, int n_servers) {
    if (const auto* sm = std::get_if<SoftmaxPolicy>(&policy)) {
        if (!(sm->iota > 0.0))
            throw std::invalid_argument("policy: softmax iota must be > 0");
    } else if (const auto* br = std::get_if<BernoulliPolicy>(&policy)) {
        if (static_cast<int>(br->p.size()) != n_servers)
            throw std::invalid_argument("policy: bernoulli p must have one entry per server");
        double s = 0.0;
        for (double v : br->p) {
            if (!(v >= 0.0))
                throw std::invalid_argument("policy: bernoulli p entries must be >= 0");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument("policy: bernoulli p must sum to 1");
    }
}

/// Action-dependent part of Q-hat: score_a = w_a . (phi_a(x_a + 1) - phi_a(x_a)).
/// The remaining terms of Q-hat are common to all actions and cancel inside
/// softmax and argmin comparisons, which also keeps the exponentials small.
inline std::vector<double> action_scores(const BasisSpec& basis, std::span<const double> w,
                                         const State& x) {
    if (static_cast<int>(w.size()) != basis.dim())
        throw std::invalid_argument("action_scores: weight dimension mismatch");
    const int n_servers = basis.n_servers();
    const int p = basis.per_server_count();
    std::vector<double> scores(static_cast<std::size_t>(n_servers), 0.0);
    for (int a = 0; a < n_servers; ++a) {
        const std::vector<double> diff = phi_forward_diff(basis, a, x[a]);
        double s = 0.0;
        for (int j = 0; j < p; ++j) s += w[static_cast<std::size_t>(a) * p + j] * diff[j];
        scores[a] = s;
    }
    return scores;
}

namespace detail {
inline int argmin_lowest_index(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] < v[best]) best = i;
    return best;
}

inline std::vector<double> softmax_from_scores(const std::vector<double>& scores,
                                               double iota) {
    // pi_a proportional to exp(-score_a / iota), shifted so the best action
    // maps to exp(0). Entries that underflow are clamped to the smallest
    // positive double; every action keeps strictly positive mass.
    const int n = static_cast<int>(scores.size());
    std::vector<double> z(static_cast<std::size_t>(n));
    double zmax = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < n; ++a) {
        z[a] = -scores[a] / iota;
        zmax = std::max(zmax, z[a]);
    }
    double sum = 0.0;
    for (int a = 0; a < n; ++a) {
        double e = std::exp(z[a] - zmax);
        if (e <= 0.0) e = std::numeric_limits<double>::min();
        z[a] = e;
        sum += e;
    }
    for (int a = 0; a < n; ++a) z[a] /= sum;
    return z;
}
}  // namespace detail

/// Routing distribution over servers. Softmax and Greedy need the basis and a
/// weight vector; JSQ and Bernoulli ignore them (pass nullptr / empty).
inline std::vector<double> action_probabilities(const PolicyParams& policy,
                                                const BasisSpec* basis,
                                                std::span<const double> w,
                                                const State& x) {
    const int n_servers = static_cast<int>(x.size());
    if (const auto* sm = std::get_if<SoftmaxPolicy>(&policy)) {
        if (basis == nullptr)
            throw std::invalid_argument("action_probabilities: softmax needs a basis");
        return detail::softmax_from_scores(action_scores(*basis, w, x), sm->iota);
    }
    if (std::holds_alternative<GreedyPolicy>(policy)) {
        if (basis == nullptr)
            throw std::invalid_argument("action_probabilities: greedy needs a basis");
        std::vector<double> probs(static_cast<std::size_t>(n_servers), 0.0);
        probs[detail::argmin_lowest_index(action_scores(*basis, w, x))] = 1.0;
        return probs;
    }
    if (std::holds_alternative<JsqPolicy>(policy)) {
        std::vector<double> probs(static_cast<std::size_t>(n_servers), 0.0);
        int best = 0;
        for (int n = 1; n < n_servers; ++n)
            if (x[n] < x[best]) best = n;
        probs[best] = 1.0;
        return probs;
    }
    const auto& br = std::get<BernoulliPolicy>(policy);
    if (static_cast<int>(br.p.size()) != n_servers)
        throw std::invalid_argument("action_probabilities: bernoulli p size mismatch");
    return br.p;
}

/// Draw a server. Deterministic kinds (Greedy, JSQ) consume no randomness;
/// stochastic kinds consume exactly one uniform from the given stream.
inline int sample_action(const PolicyParams& policy, const BasisSpec* basis,
                         std::span<const double> w, const State& x,
                         std::mt19937_64& rng) {
    if (std::holds_alternative<GreedyPolicy>(policy)) {
        if (basis == nullptr)
            throw std::invalid_argument("sample_action: greedy needs a basis");
        return detail::argmin_lowest_index(action_scores(*basis, w, x));
    }
    if (std::holds_alternative<JsqPolicy>(policy)) {
        int best = 0;
        for (int n = 1; n < static_cast<int>(x.size()); ++n)
            if (x[n] < x[best]) best = n;
        return best;
    }
    const std::vector<double> probs = action_probabilities(policy, basis, w, x);
    const double u = uniform01(rng);
    double acc = 0.0;
    for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
        acc += probs[a];
        if (u < acc) return a;
    }
    return static_cast<int>(probs.size()) - 1;
}

/// Empirical lower bound on the policy Lipschitz constant: the largest
/// |pi_w(a|x) - pi_w'(a|x)| / |w - w'|_2 over the sampled states.
inline double lipschitz_probe(const BasisSpec& basis, const std::vector<State>& states,
                              std::span<const double> w, std::span<const double> w2,
                              double iota) {
    if (w.size() != w2.size())
        throw std::invalid_argument("lipschitz_probe: weight dimension mismatch");
    double dist2 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = w[i] - w2[i];
        dist2 += d * d;
    }
    if (dist2 == 0.0)
        throw std::invalid_argument("lipschitz_probe: w and w' must differ");
    const double dist = std::sqrt(dist2);
    const PolicyParams policy = SoftmaxPolicy{iota};
    double worst = 0.0;
    for (const State& x : states) {
        const std::vector<double> p1 = action_probabilities(policy, &basis, w, x);
        const std::vector<double> p2 = action_probabilities(policy, &basis, w2, x);
        for (std::size_t a = 0; a < p1.size(); ++a)
            worst = std::max(worst, std::abs(p1[a] - p2[a]) / dist);
    }
    return worst;
}

}  // namespace parq
