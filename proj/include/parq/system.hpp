#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "parq/rng.hpp"

namespace parq {

// Queue lengths of the N parallel servers, indexed from 0.
using State = std::vector<int>;

inline std::int64_t l1_norm(const State& x) {
    std::int64_t s = 0;
    for (int v : x) s += v;
    return s;
}

inline std::string state_to_string(const State& x) {
    std::string out = "(";
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(x[i]);
    }
    out += ")";
    return out;
}

/// Arrival rate, per-server service rates and the base RNG seed. Fixes the
/// continuous-time chain whose embedded jump chain everything else runs on.
struct SystemConfig {
    int n_servers = 0;
    double lambda = 0.0;      // jobs/sec
    std::vector<double> mu;   // jobs/sec, one entry per server
    std::uint64_t seed = 0;

    double total_mu() const {
        double s = 0.0;
        for (double m : mu) s += m;
        return s;
    }

    void validate() const {
        if (n_servers < 1)
            throw std::invalid_argument("system: n_servers must be >= 1");
        if (!(lambda > 0.0))
            throw std::invalid_argument("system: lambda must be > 0");
        if (static_cast<int>(mu.size()) != n_servers)
            throw std::invalid_argument("system: mu must have n_servers entries");
        for (std::size_t n = 0; n < mu.size(); ++n)
            if (!(mu[n] > 0.0))
                throw std::invalid_argument("system: mu[" + std::to_string(n) +
                                            "] must be > 0");
    }
};

// lambda < sum(mu): some split of the load keeps every queue drained.
inline bool is_stabilizable(const SystemConfig& config) {
    return config.lambda < config.total_mu();
}

// lambda + sum of service rates over busy servers. Strictly positive.
inline double total_rate(const SystemConfig& config, const State& x) {
    double rate = config.lambda;
    for (int n = 0; n < config.n_servers; ++n)
        if (x[n] > 0) rate += config.mu[n];
    return rate;
}

enum class EventKind { Arrival, Departure };

struct Event {
    EventKind kind = EventKind::Arrival;
    int server = 0;  // routed server for arrivals, departing server otherwise
};

struct TransitionSample {
    Event event;
    State next_state;
    double holding_time = 0.0;  // seconds spent in the pre-transition state
    std::int64_t epoch = 0;
};

/// One-step distribution of the embedded chain given a routing action.
/// The arrival entry comes first, then departures in server order; no
/// zero-probability entries are emitted.
inline std::vector<std::pair<State, double>> transition_distribution(
        const SystemConfig& config, const State& x, int action) {
    if (action < 0 || action >= config.n_servers)
        throw std::invalid_argument("transition_distribution: action " +
                                    std::to_string(action) + " out of range");
    const double rate = total_rate(config, x);
    std::vector<std::pair<State, double>> out;
    out.reserve(static_cast<std::size_t>(config.n_servers) + 1);
    State up = x;
    up[action] += 1;
    out.emplace_back(std::move(up), config.lambda / rate);
    for (int n = 0; n < config.n_servers; ++n) {
        if (x[n] > 0) {
            State down = x;
            down[n] -= 1;
            out.emplace_back(std::move(down), config.mu[n] / rate);
        }
    }
    return out;
}

enum class HoldingTimeMode {
    Sampled,   // exponential draw at the state's total rate
    Expected,  // deterministic 1/rate, variance reduction
    Fixed,     // constant dt per epoch
};

struct SimOptions {
    HoldingTimeMode holding = HoldingTimeMode::Sampled;
    double fixed_dt = 0.1;  // used by HoldingTimeMode::Fixed only
};

/// Draw one transition. The event uses the event stream, the holding time the
/// holding stream (skipped entirely in Expected/Fixed modes), in that order.
inline TransitionSample sample_transition(const SystemConfig& config, const State& x,
                                          int action, RngStreams& streams,
                                          const SimOptions& opts = {},
                                          std::int64_t epoch = 0) {
    if (action < 0 || action >= config.n_servers)
        throw std::invalid_argument("sample_transition: action " +
                                    std::to_string(action) + " out of range");
    const double rate = total_rate(config, x);
    const bool any_busy = rate > config.lambda;
    const double u = uniform01(streams.event) * rate;

    TransitionSample out;
    out.epoch = epoch;
    out.next_state = x;
    if (u < config.lambda || !any_busy) {
        out.event = {EventKind::Arrival, action};
        out.next_state[action] += 1;
    } else {
        double acc = config.lambda;
        int chosen = -1;
        for (int n = 0; n < config.n_servers; ++n) {
            if (x[n] > 0) {
                acc += config.mu[n];
                chosen = n;
                if (u < acc) break;
            }
        }
        out.event = {EventKind::Departure, chosen};
        out.next_state[chosen] -= 1;
    }

    switch (opts.holding) {
        case HoldingTimeMode::Sampled:
            out.holding_time = sample_exponential(streams.holding, rate);
            break;
        case HoldingTimeMode::Expected:
            out.holding_time = 1.0 / rate;
            break;
        case HoldingTimeMode::Fixed:
            out.holding_time = opts.fixed_dt;
            break;
    }
    return out;
}

struct TrajectoryRecord {
    std::int64_t k = 0;
    State x;        // state before the transition
    int action = 0;
    Event event;
    double dt = 0.0;
    double cost = 0.0;
};

// Action chosen at every epoch; draws (if any) must come from the given
// action stream.
using ActionSource = std::function<int(const State&, std::mt19937_64&)>;
// Cost of one epoch, evaluated at the post-transition state.
using CostFn = std::function<double(const State&, double dt)>;
using TrajectorySink = std::function<void(const TrajectoryRecord&)>;

struct TrajectorySummary {
    std::int64_t epochs = 0;
    double total_time = 0.0;
    double total_cost = 0.0;
    double qlen_time_integral = 0.0;  // integral of |x(s)|_1 ds
    State final_state;

    double avg_cost() const { return total_time > 0.0 ? total_cost / total_time : 0.0; }
    double avg_qlen() const { return total_time > 0.0 ? qlen_time_integral / total_time : 0.0; }
};

namespace detail {
inline int checked_action(int a, const SystemConfig& config, std::int64_t epoch,
                          const State& x) {
    if (a < 0 || a >= config.n_servers)
        throw std::runtime_error("policy callback returned invalid action " +
                                 std::to_string(a) + " at epoch " +
                                 std::to_string(epoch) + ", state " +
                                 state_to_string(x));
    return a;
}
}  // namespace detail

/// Run the embedded chain for `horizon` epochs under the given action source.
/// An action is drawn at every epoch, including those that resolve as
/// departures, so on-policy learners always see the bootstrap pair. The draw
/// order per epoch is fixed (event, holding, next action); two runs with the
/// same seed produce identical logs.
inline TrajectorySummary simulate_trajectory(const SystemConfig& config,
                                             const ActionSource& next_action,
                                             const CostFn& cost, std::int64_t horizon,
                                             RngStreams& streams,
                                             const SimOptions& opts = {},
                                             const TrajectorySink* sink = nullptr,
                                             State initial = {}) {
    config.validate();
    if (horizon < 0)
        throw std::invalid_argument("simulate_trajectory: horizon must be >= 0");
    State x = initial.empty() ? State(static_cast<std::size_t>(config.n_servers), 0)
                              : std::move(initial);
    if (static_cast<int>(x.size()) != config.n_servers)
        throw std::invalid_argument("simulate_trajectory: initial state size mismatch");

    TrajectorySummary summary;
    if (horizon == 0) {
        summary.final_state = std::move(x);
        return summary;
    }

    int a = detail::checked_action(next_action(x, streams.action), config, 0, x);
    for (std::int64_t k = 0; k < horizon; ++k) {
        TransitionSample ts = sample_transition(config, x, a, streams, opts, k);
        const double c = cost(ts.next_state, ts.holding_time);
        summary.total_time += ts.holding_time;
        summary.total_cost += c;
        summary.qlen_time_integral += static_cast<double>(l1_norm(x)) * ts.holding_time;
        if (sink) (*sink)(TrajectoryRecord{k, x, a, ts.event, ts.holding_time, c});
        x = std::move(ts.next_state);
        a = detail::checked_action(next_action(x, streams.action), config, k + 1, x);
    }
    summary.epochs = horizon;
    summary.final_state = std::move(x);
    return summary;
}

}  // namespace parq
