#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parq/basis.hpp"
#include "parq/cost.hpp"
#include "parq/linalg.hpp"
#include "parq/policy.hpp"
#include "parq/system.hpp"

namespace parq {

/// Finite restriction of the embedded chain to {0..x_max}^N with blocked
/// arrivals turned into self-loops. States enumerate lexicographically in
/// (x_1, ..., x_N); kernels are stored per (state, action) in CSR form.
/// Expected one-step costs use the expected sojourn 1/rate, so everything in
/// here is deterministic.
struct TruncatedMdp {
    SystemConfig config;
    CostModel cost;
    int x_max = 0;
    int n_states = 0;

    struct Arc {
        int next = 0;
        double prob = 0.0;
    };
    std::vector<std::size_t> row_offset;  // n_states * n_actions + 1 entries
    std::vector<Arc> arcs;
    std::vector<double> expected_cost;  // per (state, action)
    std::vector<double> cost_of_state;  // cost rate per state
    std::vector<double> rate_of_state;

    int n_actions() const { return config.n_servers; }

    State state_of(int idx) const {
        State x(static_cast<std::size_t>(config.n_servers), 0);
        const int base = x_max + 1;
        for (int n = config.n_servers - 1; n >= 0; --n) {
            x[n] = idx % base;
            idx /= base;
        }
        return x;
    }

    int index_of(const State& x) const {
        const int base = x_max + 1;
        int idx = 0;
        for (int n = 0; n < config.n_servers; ++n) idx = idx * base + x[n];
        return idx;
    }

    std::span<const Arc> row(int s, int a) const {
        const std::size_t r = static_cast<std::size_t>(s) * n_actions() + a;
        return {arcs.data() + row_offset[r], arcs.data() + row_offset[r + 1]};
    }

    /// Total probability on states with any coordinate at the cap.
    double boundary_mass(std::span<const double> d) const {
        double mass = 0.0;
        for (int s = 0; s < n_states; ++s) {
            const State x = state_of(s);
            for (int v : x)
                if (v == x_max) {
                    mass += d[s];
                    break;
                }
        }
        return mass;
    }
};

inline TruncatedMdp build_truncated(const SystemConfig& config, const CostModel& cost,
                                    int x_max) {
    config.validate();
    validate_cost(cost, config.n_servers);
    if (x_max < 1) throw std::invalid_argument("build_truncated: x_max must be >= 1");
    double states_est = 1.0;
    for (int n = 0; n < config.n_servers; ++n) states_est *= (x_max + 1);
    if (states_est > 1e7) {
        const double bytes = states_est * config.n_servers * (config.n_servers + 2) * 16.0;
        throw std::invalid_argument(
            "build_truncated: " + std::to_string(static_cast<std::int64_t>(states_est)) +
            " states exceed the 1e7 guard (approx " +
            std::to_string(bytes / 1e9) + " GB of kernel storage)");
    }

    TruncatedMdp mdp;
    mdp.config = config;
    mdp.cost = cost;
    mdp.x_max = x_max;
    mdp.n_states = static_cast<int>(states_est);
    const int n_actions = config.n_servers;

    mdp.cost_of_state.resize(static_cast<std::size_t>(mdp.n_states));
    mdp.rate_of_state.resize(static_cast<std::size_t>(mdp.n_states));
    for (int s = 0; s < mdp.n_states; ++s) {
        const State x = mdp.state_of(s);
        mdp.cost_of_state[s] = state_cost(cost, x);
        mdp.rate_of_state[s] = total_rate(config, x);
    }

    mdp.row_offset.assign(static_cast<std::size_t>(mdp.n_states) * n_actions + 1, 0);
    mdp.expected_cost.resize(static_cast<std::size_t>(mdp.n_states) * n_actions);
    mdp.arcs.reserve(static_cast<std::size_t>(mdp.n_states) * n_actions * 2);

    for (int s = 0; s < mdp.n_states; ++s) {
        const State x = mdp.state_of(s);
        const double rate = mdp.rate_of_state[s];
        for (int a = 0; a < n_actions; ++a) {
            const std::size_t r = static_cast<std::size_t>(s) * n_actions + a;
            // Arrival first (self-loop when the target queue is full), then
            // departures in server order.
            if (x[a] + 1 <= x_max) {
                State up = x;
                up[a] += 1;
                mdp.arcs.push_back({mdp.index_of(up), config.lambda / rate});
            } else {
                mdp.arcs.push_back({s, config.lambda / rate});
            }
            for (int n = 0; n < n_actions; ++n) {
                if (x[n] > 0) {
                    State down = x;
                    down[n] -= 1;
                    mdp.arcs.push_back({mdp.index_of(down), config.mu[n] / rate});
                }
            }
            mdp.row_offset[r + 1] = mdp.arcs.size();
            double cbar = 0.0;
            for (std::size_t i = mdp.row_offset[r]; i < mdp.row_offset[r + 1]; ++i)
                cbar += mdp.arcs[i].prob * mdp.cost_of_state[mdp.arcs[i].next];
            mdp.expected_cost[r] = cbar / rate;
        }
    }
    return mdp;
}

struct QTable {
    int n_states = 0, n_actions = 0;
    std::vector<double> q;

    double& at(int s, int a) { return q[static_cast<std::size_t>(s) * n_actions + a]; }
    double at(int s, int a) const {
        return q[static_cast<std::size_t>(s) * n_actions + a];
    }
};

/// Value iteration to sup-norm accuracy tol: sweeps stop once the successive
/// difference drops below tol*(1-gamma)/gamma (one exact sweep when gamma=0).
/// The residual sequence is monitored and must not increase after the first
/// sweep.
inline QTable value_iteration(const TruncatedMdp& mdp, double gamma, double tol,
                              int max_sweeps = 1000000,
                              std::vector<double>* residuals = nullptr) {
    if (!(gamma >= 0.0 && gamma < 1.0))
        throw std::invalid_argument("value_iteration: gamma must be in [0,1)");
    if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be > 0");
    QTable qt;
    qt.n_states = mdp.n_states;
    qt.n_actions = mdp.n_actions();
    qt.q.assign(static_cast<std::size_t>(mdp.n_states) * qt.n_actions, 0.0);

    const double threshold = gamma > 0.0
                                 ? tol * (1.0 - gamma) / gamma
                                 : std::numeric_limits<double>::infinity();
    std::vector<double> min_q(static_cast<std::size_t>(mdp.n_states), 0.0);
    std::vector<double> next(qt.q.size(), 0.0);
    double residual = std::numeric_limits<double>::infinity();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        for (int s = 0; s < mdp.n_states; ++s) {
            double m = qt.at(s, 0);
            for (int a = 1; a < qt.n_actions; ++a) m = std::min(m, qt.at(s, a));
            min_q[s] = m;
        }
        double diff = 0.0;
        for (int s = 0; s < mdp.n_states; ++s)
            for (int a = 0; a < qt.n_actions; ++a) {
                const std::size_t r = static_cast<std::size_t>(s) * qt.n_actions + a;
                double v = mdp.expected_cost[r];
                if (gamma > 0.0) {
                    double exp_min = 0.0;
                    for (const auto& arc : mdp.row(s, a))
                        exp_min += arc.prob * min_q[arc.next];
                    v += gamma * exp_min;
                }
                next[r] = v;
                diff = std::max(diff, std::abs(v - qt.q[r]));
            }
        qt.q.swap(next);
        residual = diff;
        if (residuals) residuals->push_back(diff);
        if (diff <= threshold) return qt;
    }
    throw std::runtime_error("value_iteration: no convergence after " +
                             std::to_string(max_sweeps) +
                             " sweeps, residual=" + std::to_string(residual));
}

/// Greedy table: argmin_a Q(s, a), lowest index on ties.
inline std::vector<int> greedy_policy(const QTable& qt) {
    std::vector<int> pi(static_cast<std::size_t>(qt.n_states), 0);
    for (int s = 0; s < qt.n_states; ++s) {
        int best = 0;
        for (int a = 1; a < qt.n_actions; ++a)
            if (qt.at(s, a) < qt.at(s, best)) best = a;
        pi[s] = best;
    }
    return pi;
}

/// Row-stochastic policy table over the enumeration, n_states * n_actions.
using PolicyTable = std::vector<double>;

inline PolicyTable one_hot_policy(const std::vector<int>& actions, int n_actions) {
    PolicyTable table(actions.size() * static_cast<std::size_t>(n_actions), 0.0);
    for (std::size_t s = 0; s < actions.size(); ++s)
        table[s * n_actions + actions[s]] = 1.0;
    return table;
}

inline PolicyTable softmax_policy_table(const TruncatedMdp& mdp, const BasisSpec& basis,
                                        std::span<const double> w, double iota) {
    const PolicyParams policy = SoftmaxPolicy{iota};
    PolicyTable table(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions());
    for (int s = 0; s < mdp.n_states; ++s) {
        const State x = mdp.state_of(s);
        const std::vector<double> probs = action_probabilities(policy, &basis, w, x);
        for (int a = 0; a < mdp.n_actions(); ++a)
            table[static_cast<std::size_t>(s) * mdp.n_actions() + a] = probs[a];
    }
    return table;
}

/// Stationary distribution of the policy-averaged kernel by damped power
/// iteration (the half-lazy chain shares the stationary law and cannot be
/// periodic). Residual is checked on the undamped kernel.
inline std::vector<double> stationary_distribution(const TruncatedMdp& mdp,
                                                   const PolicyTable& policy,
                                                   double tol = 1e-12,
                                                   int max_iters = 2000000) {
    const int n_actions = mdp.n_actions();
    if (static_cast<int>(policy.size()) != mdp.n_states * n_actions)
        throw std::invalid_argument("stationary_distribution: policy table size mismatch");
    for (int s = 0; s < mdp.n_states; ++s) {
        double sum = 0.0;
        for (int a = 0; a < n_actions; ++a)
            sum += policy[static_cast<std::size_t>(s) * n_actions + a];
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("stationary_distribution: policy row " +
                                        std::to_string(s) + " is not a simplex");
    }

    std::vector<double> d(static_cast<std::size_t>(mdp.n_states),
                          1.0 / mdp.n_states);
    std::vector<double> next(d.size());
    for (int it = 0; it < max_iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int s = 0; s < mdp.n_states; ++s) {
            if (d[s] == 0.0) continue;
            for (int a = 0; a < n_actions; ++a) {
                const double w = d[s] * policy[static_cast<std::size_t>(s) * n_actions + a];
                if (w == 0.0) continue;
                for (const auto& arc : mdp.row(s, a)) next[arc.next] += w * arc.prob;
            }
        }
        double residual = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) residual += std::abs(next[i] - d[i]);
        if (residual <= tol) {
            double norm = 0.0;
            for (double v : next) norm += v;
            for (double& v : next) v /= norm;
            return next;
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            next[i] = 0.5 * (next[i] + d[i]);
            norm += next[i];
        }
        for (double& v : next) v /= norm;
        d.swap(next);
    }
    throw std::runtime_error(
        "stationary_distribution: no convergence (possibly reducible or periodic chain)");
}

struct WeightedLsqResult {
    std::vector<double> w;
    double residual = 0.0;   // sqrt of the weighted squared error
    double condition = 0.0;  // 1-norm condition of the normal matrix
};

/// Least squares fit of Q to the feature span, weighted by d(x) * pi(a|x):
/// the projection target defined on the truncated space. Throws when the
/// weighted Gram matrix is rank-deficient, naming the dependent column.
inline WeightedLsqResult optimal_weights(const TruncatedMdp& mdp, const QTable& qt,
                                         const PolicyTable& policy,
                                         std::span<const double> d,
                                         const BasisSpec& basis) {
    const int dim = basis.dim();
    const int n_actions = mdp.n_actions();
    linalg::Matrix gram(dim, dim);
    std::vector<double> rhs(static_cast<std::size_t>(dim), 0.0);
    for (int s = 0; s < mdp.n_states; ++s) {
        if (d[s] == 0.0) continue;
        const State x = mdp.state_of(s);
        for (int a = 0; a < n_actions; ++a) {
            const double rho = d[s] * policy[static_cast<std::size_t>(s) * n_actions + a];
            if (rho == 0.0) continue;
            const FeatureVector f = phi(basis, x, a);
            for (int i = 0; i < dim; ++i) {
                rhs[i] += rho * f[i] * qt.at(s, a);
                for (int j = 0; j < dim; ++j) gram(i, j) += rho * f[i] * f[j];
            }
        }
    }
    WeightedLsqResult result;
    try {
        result.w = linalg::solve(gram, rhs);
    } catch (const linalg::SingularMatrixError& e) {
        const int p = basis.per_server_count();
        throw std::runtime_error(
            "optimal_weights: dependent feature column " + std::to_string(e.column) +
            " (server " + std::to_string(e.column / p) + ", basis " +
            std::to_string(e.column % p) + ")");
    }
    result.condition = linalg::condition_1(gram);
    double sse = 0.0;
    for (int s = 0; s < mdp.n_states; ++s) {
        if (d[s] == 0.0) continue;
        const State x = mdp.state_of(s);
        for (int a = 0; a < n_actions; ++a) {
            const double rho = d[s] * policy[static_cast<std::size_t>(s) * n_actions + a];
            if (rho == 0.0) continue;
            const FeatureVector f = phi(basis, x, a);
            double fit = 0.0;
            for (int i = 0; i < dim; ++i) fit += result.w[i] * f[i];
            const double err = qt.at(s, a) - fit;
            sse += rho * err * err;
        }
    }
    result.residual = std::sqrt(sse);
    return result;
}

struct FixedPointResult {
    std::vector<double> w;
    double residual = 0.0;       // |gbar * w + rbar|_2 at the returned w
    double boundary_mass = 0.0;  // cap occupancy under the final d_w
    int iterations = 0;
    std::vector<double> d_w;
};

namespace detail {
// gbar = E[phi(x,a) (gamma phi(x',a') - phi(x,a))^T], rbar = E[phi(x,a) cbar(x,a)]
// under x ~ d, a ~ pi(.|x), x' ~ p, a' ~ pi(.|x'). Features are passed in
// precomputed per (state, action).
inline void assemble_mean_update(const TruncatedMdp& mdp, const PolicyTable& pi,
                                 std::span<const double> d,
                                 const std::vector<FeatureVector>& features,
                                 double gamma, linalg::Matrix& gbar,
                                 std::vector<double>& rbar) {
    const int dim = static_cast<int>(rbar.size());
    const int n_actions = mdp.n_actions();
    std::fill(gbar.a.begin(), gbar.a.end(), 0.0);
    std::fill(rbar.begin(), rbar.end(), 0.0);
    std::vector<double> mean_next(static_cast<std::size_t>(dim));
    for (int s = 0; s < mdp.n_states; ++s) {
        if (d[s] == 0.0) continue;
        for (int a = 0; a < n_actions; ++a) {
            const std::size_t r = static_cast<std::size_t>(s) * n_actions + a;
            const double rho = d[s] * pi[r];
            if (rho == 0.0) continue;
            const FeatureVector& f = features[r];
            // E[phi(x',a') | x, a]: kernel row averaged over the next action.
            std::fill(mean_next.begin(), mean_next.end(), 0.0);
            for (const auto& arc : mdp.row(s, a)) {
                for (int a2 = 0; a2 < n_actions; ++a2) {
                    const std::size_t r2 =
                        static_cast<std::size_t>(arc.next) * n_actions + a2;
                    const double w2 = arc.prob * pi[r2];
                    if (w2 == 0.0) continue;
                    const FeatureVector& f2 = features[r2];
                    for (int i = 0; i < dim; ++i) mean_next[i] += w2 * f2[i];
                }
            }
            for (int i = 0; i < dim; ++i) {
                rbar[i] += rho * f[i] * mdp.expected_cost[r];
                const double fi = rho * f[i];
                for (int j = 0; j < dim; ++j)
                    gbar(i, j) += fi * (gamma * mean_next[j] - f[j]);
            }
        }
    }
}
}  // namespace detail

/// Weight vector where the stationary-averaged TD update direction vanishes:
/// iterate d_w under the softmax policy, assemble the mean update, solve
/// gbar * w = -rbar, and repeat until the defining residual
/// |gbar_w * w + rbar_w|_2 drops below tol. Damping halves on residual
/// increase, so a chattering policy still settles deterministically.
inline FixedPointResult sarsa_fixed_point(const TruncatedMdp& mdp,
                                          const BasisSpec& basis, double gamma,
                                          double iota, std::vector<double> w_init,
                                          double tol = 1e-10, int max_iters = 300) {
    basis.validate();
    if (static_cast<int>(w_init.size()) != basis.dim())
        throw std::invalid_argument("sarsa_fixed_point: w_init dimension mismatch");
    const int dim = basis.dim();
    const int n_actions = mdp.n_actions();

    std::vector<FeatureVector> features(
        static_cast<std::size_t>(mdp.n_states) * n_actions);
    for (int s = 0; s < mdp.n_states; ++s) {
        const State x = mdp.state_of(s);
        for (int a = 0; a < n_actions; ++a)
            features[static_cast<std::size_t>(s) * n_actions + a] = phi(basis, x, a);
    }

    FixedPointResult result;
    std::vector<double> w = std::move(w_init);
    linalg::Matrix gbar(dim, dim);
    std::vector<double> rbar(static_cast<std::size_t>(dim));
    double damping = 1.0;
    double prev_residual = std::numeric_limits<double>::infinity();

    for (int it = 0; it < max_iters; ++it) {
        const PolicyTable pi = softmax_policy_table(mdp, basis, w, iota);
        const std::vector<double> d = stationary_distribution(mdp, pi, 1e-13);
        detail::assemble_mean_update(mdp, pi, d, features, gamma, gbar, rbar);

        double res = 0.0;
        for (int i = 0; i < dim; ++i) {
            double s = rbar[i];
            for (int j = 0; j < dim; ++j) s += gbar(i, j) * w[j];
            res += s * s;
        }
        res = std::sqrt(res);
        result.iterations = it + 1;
        if (res <= tol) {
            result.w = w;
            result.residual = res;
            result.boundary_mass = mdp.boundary_mass(d);
            result.d_w = d;
            return result;
        }

        std::vector<double> neg_r(rbar.size());
        for (std::size_t i = 0; i < rbar.size(); ++i) neg_r[i] = -rbar[i];
        std::vector<double> w_solve;
        try {
            w_solve = linalg::solve(gbar, neg_r);
        } catch (const linalg::SingularMatrixError& e) {
            throw std::runtime_error(
                "sarsa_fixed_point: singular mean-update matrix (column " +
                std::to_string(e.column) + ") at iteration " + std::to_string(it));
        }

        if (res > prev_residual) damping = std::max(damping * 0.5, 1.0 / 64.0);
        prev_residual = res;

        for (int i = 0; i < dim; ++i) w[i] += damping * (w_solve[i] - w[i]);
    }
    throw std::runtime_error("sarsa_fixed_point: no convergence after " +
                             std::to_string(max_iters) + " iterations, last residual " +
                             std::to_string(prev_residual));
}

}  // namespace parq
