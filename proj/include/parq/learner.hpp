#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parq/basis.hpp"
#include "parq/cost.hpp"
#include "parq/policy.hpp"
#include "parq/rng.hpp"
#include "parq/system.hpp"

namespace parq {

/// alpha_k = alpha0 * tau / (tau + k). Harmonic-type decay: the partial sums
/// diverge while the squared sums stay finite.
struct StepSchedule {
    double alpha0 = 0.05;
    double tau = 1e5;

    double alpha(std::int64_t k) const {
        return alpha0 * tau / (tau + static_cast<double>(k));
    }
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LearnerState {
    std::vector<double> w;
    std::int64_t k = 0;
    double gamma = 0.99;   // discount, in (0,1)
    double w_l = 0.05;     // floor on the highest-degree weights
    double eps_l = 1e-3;   // initialization slack above the floor
    StepSchedule schedule;
    double last_b_alpha = 1.0;

    void validate(const BasisSpec& basis) const {
        if (static_cast<int>(w.size()) != basis.dim())
            throw std::invalid_argument("learner: weight dimension mismatch");
        if (!(gamma > 0.0 && gamma < 1.0))
            throw std::invalid_argument("learner: gamma must be in (0,1)");
        if (!(w_l > 0.0)) throw std::invalid_argument("learner: w_l must be > 0");
        if (!(eps_l > 0.0)) throw std::invalid_argument("learner: eps_l must be > 0");
        const int p = basis.per_server_count();
        for (int n = 0; n < basis.n_servers(); ++n)
            if (w[static_cast<std::size_t>(n) * p + basis.h_index] < w_l)
                throw std::invalid_argument("learner: w_{n,H} below the floor w_l");
    }
};

/// Fresh learner with w ~ U[low, high) per coordinate; the floor-protected
/// coordinates are raised to at least w_l + eps_l.
inline LearnerState make_learner(const BasisSpec& basis, double gamma, double w_l,
                                 double eps_l, StepSchedule schedule,
                                 std::mt19937_64& rng, double init_low = 0.0,
                                 double init_high = 1.0) {
    LearnerState learner;
    learner.gamma = gamma;
    learner.w_l = w_l;
    learner.eps_l = eps_l;
    learner.schedule = schedule;
    const int p = basis.per_server_count();
    learner.w.resize(static_cast<std::size_t>(basis.dim()));
    for (double& v : learner.w)
        v = init_low + (init_high - init_low) * uniform01(rng);
    for (int n = 0; n < basis.n_servers(); ++n) {
        double& h = learner.w[static_cast<std::size_t>(n) * p + basis.h_index];
        h = std::max(h, w_l + eps_l);
    }
    learner.validate(basis);
    return learner;
}

/// Scalar TD error c + gamma * Q-hat(x', a') - Q-hat(x, a). The semi-gradient
/// direction is this value times phi(x, a).
inline double td_error(const BasisSpec& basis, std::span<const double> w, double gamma,
                       const State& x, int a, double c, const State& x2, int a2) {
    return c + gamma * q_hat(basis, w, x2, a2) - q_hat(basis, w, x, a);
}

/// Restraint divisor: B = max_n { alpha * delta * phi_{n,H}(x,a) / (w_l - w_{n,H}), 1 }.
/// Dividing the raw step by B keeps every floor-protected weight at or above
/// w_l. Coordinates sitting exactly on the floor are left to the caller's
/// landing clamp (their ratio would be infinite).
inline double restraint(double alpha_k, double delta, const FeatureVector& phi_xa,
                        std::span<const double> w, double w_l, int per_server,
                        int h_index) {
    double b = 1.0;
    const int n_servers = static_cast<int>(w.size()) / per_server;
    for (int n = 0; n < n_servers; ++n) {
        const std::size_t idx = static_cast<std::size_t>(n) * per_server + h_index;
        const double denom = w_l - w[idx];  // <= 0 under the learner invariant
        if (denom < 0.0) {
            const double numer = alpha_k * delta * phi_xa[idx];
            b = std::max(b, numer / denom);
        }
    }
    return b;
}

/// One restrained semi-gradient update:
/// w <- w + (alpha_k / B) * delta * phi(x, a), then floor-protected weights
/// are clamped at w_l (exact landing for the binding coordinate, no-op for
/// the rest). Aborts with a state dump on non-finite inputs.
inline void sgs_step(LearnerState& learner, const BasisSpec& basis, const State& x,
                     int a, double c, const State& x2, int a2) {
    const FeatureVector f = phi(basis, x, a);
    const FeatureVector f2 = phi(basis, x2, a2);
    double q = 0.0, q2 = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        q += learner.w[i] * f[i];
        q2 += learner.w[i] * f2[i];
    }
    const double delta = c + learner.gamma * q2 - q;
    if (!std::isfinite(delta))
        throw DivergenceError("sgs_step: non-finite TD error at k=" +
                              std::to_string(learner.k) + ", state " +
                              state_to_string(x));
    const double alpha = learner.schedule.alpha(learner.k);
    const int p = basis.per_server_count();
    const double b = restraint(alpha, delta, f, learner.w, learner.w_l, p, basis.h_index);
    const double scale = alpha * delta / b;
    for (std::size_t i = 0; i < f.size(); ++i) learner.w[i] += scale * f[i];
    for (int n = 0; n < basis.n_servers(); ++n) {
        double& h = learner.w[static_cast<std::size_t>(n) * p + basis.h_index];
        h = std::max(h, learner.w_l);
    }
    learner.last_b_alpha = b;
    learner.k += 1;
}

struct TrainOptions {
    std::int64_t horizon = 0;
    std::int64_t snapshot_every = 10000;
    double divergence_ceiling = 1e9;  // abort when |w|_inf exceeds this
    SimOptions sim;
    bool force = false;  // run even when the config is not stabilizable
    State initial_state; // empty means all zeros
};

struct TrainSnapshot {
    std::int64_t k = 0;
    double sim_time = 0.0;  // cumulative simulated seconds
    std::vector<double> w;
    double window_cost = 0.0;   // time-averaged cost since the last snapshot
    double window_qlen = 0.0;   // time-averaged |x|_1 since the last snapshot
    double b_alpha_max = 1.0;   // largest restraint divisor in the window
};

using StepHook = std::function<void(const LearnerState&, const TrajectoryRecord&)>;

struct TrainResult {
    LearnerState learner;
    std::vector<TrainSnapshot> trace;
    TrajectorySummary summary;
};

/// On-policy training loop: sample a ~ pi_w(.|x), step the chain, price the
/// transition, sample a' ~ pi_w(.|x') with the pre-update weights, then apply
/// the restrained update. The per-epoch draw order matches
/// simulate_trajectory exactly, so a frozen learner (alpha0 = 0) reproduces a
/// plain simulation under the same seed.
inline TrainResult train(const SystemConfig& config, const BasisSpec& basis,
                         const CostModel& cost, const SoftmaxPolicy& policy,
                         LearnerState learner, const TrainOptions& opts,
                         RngStreams& streams, const TrajectorySink* sink = nullptr,
                         const StepHook* hook = nullptr) {
    config.validate();
    basis.validate();
    validate_cost(cost, config.n_servers);
    learner.validate(basis);
    if (opts.horizon < 0) throw std::invalid_argument("train: horizon must be >= 0");
    if (!is_stabilizable(config) && !opts.force)
        throw std::invalid_argument(
            "train: config is not stabilizable (lambda >= sum mu); pass force to override");

    TrainResult result;
    State x = opts.initial_state.empty()
                  ? State(static_cast<std::size_t>(config.n_servers), 0)
                  : opts.initial_state;
    if (static_cast<int>(x.size()) != config.n_servers)
        throw std::invalid_argument("train: initial state size mismatch");

    const PolicyParams pp = policy;
    auto record_snapshot = [&](std::int64_t k, double sim_time, double wc, double wq,
                               double bmax) {
        result.trace.push_back(TrainSnapshot{k, sim_time, learner.w, wc, wq, bmax});
    };

    if (opts.horizon == 0) {
        result.learner = std::move(learner);
        result.summary.final_state = std::move(x);
        return result;
    }
    record_snapshot(0, 0.0, 0.0, 0.0, 1.0);

    TrajectorySummary& summary = result.summary;
    double window_time = 0.0, window_cost = 0.0, window_qlen = 0.0, window_bmax = 1.0;

    int a = sample_action(pp, &basis, learner.w, x, streams.action);
    for (std::int64_t k = 0; k < opts.horizon; ++k) {
        TransitionSample ts = sample_transition(config, x, a, streams, opts.sim, k);
        const double c = one_step_cost(cost, ts.next_state, ts.holding_time);
        const int a2 = sample_action(pp, &basis, learner.w, ts.next_state, streams.action);
        sgs_step(learner, basis, x, a, c, ts.next_state, a2);

        summary.total_time += ts.holding_time;
        summary.total_cost += c;
        summary.qlen_time_integral += static_cast<double>(l1_norm(x)) * ts.holding_time;
        window_time += ts.holding_time;
        window_cost += c;
        window_qlen += static_cast<double>(l1_norm(x)) * ts.holding_time;
        window_bmax = std::max(window_bmax, learner.last_b_alpha);

        if (sink || hook) {
            const TrajectoryRecord rec{k, x, a, ts.event, ts.holding_time, c};
            if (sink) (*sink)(rec);
            if (hook) (*hook)(learner, rec);
        }

        double winf = 0.0;
        for (double v : learner.w) winf = std::max(winf, std::abs(v));
        if (winf > opts.divergence_ceiling)
            throw DivergenceError("train: |w|_inf=" + std::to_string(winf) +
                                  " exceeded the divergence ceiling at k=" +
                                  std::to_string(k) + ", state " + state_to_string(x));

        x = std::move(ts.next_state);
        a = a2;

        if ((k + 1) % opts.snapshot_every == 0 || k + 1 == opts.horizon) {
            const double wt = window_time > 0.0 ? window_time : 1.0;
            record_snapshot(k + 1, summary.total_time, window_cost / wt,
                            window_qlen / wt, window_bmax);
            window_time = window_cost = window_qlen = 0.0;
            window_bmax = 1.0;
        }
    }

    summary.epochs = opts.horizon;
    summary.final_state = x;
    result.learner = std::move(learner);
    return result;
}

}  // namespace parq
