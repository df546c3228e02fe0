#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "parq/basis.hpp"
#include "parq/learner.hpp"
#include "parq/policy.hpp"
#include "parq/system.hpp"

namespace parq {

// Exponents above this are treated as overflow and flagged.
inline constexpr double kExpOverflow = 700.0;

/// W_e(x) = sum_n exp(nu * w_n . phi_n(x_n)). Returns +inf as a sentinel when
/// any exponent exceeds the overflow guard.
inline double lyapunov_value(const BasisSpec& basis, std::span<const double> w,
                             double nu, const State& x) {
    if (!(nu > 0.0)) throw std::invalid_argument("lyapunov_value: nu must be > 0");
    const int p = basis.per_server_count();
    double total = 0.0;
    for (int n = 0; n < basis.n_servers(); ++n) {
        double dot = 0.0;
        for (int j = 0; j < p; ++j)
            dot += w[static_cast<std::size_t>(n) * p + j] *
                   basis_value(basis.at(n, j), static_cast<double>(x[n]));
        const double e = nu * dot;
        if (e > kExpOverflow) return std::numeric_limits<double>::infinity();
        total += std::exp(e);
    }
    return total;
}

/// Exact one-step expected change of an arbitrary test function under the
/// kernel and the softmax policy: L_w f(x). Used for drift cross-checks and
/// the stationarity balance probe.
inline double apply_drift_operator(const SystemConfig& config, const BasisSpec& basis,
                                   std::span<const double> w, double iota,
                                   const State& x,
                                   const std::function<double(const State&)>& f) {
    const PolicyParams policy = SoftmaxPolicy{iota};
    const std::vector<double> probs = action_probabilities(policy, &basis, w, x);
    const double fx = f(x);
    double total = 0.0;
    for (int a = 0; a < config.n_servers; ++a) {
        double inner = 0.0;
        for (const auto& [next, prob] : transition_distribution(config, x, a))
            inner += prob * (f(next) - fx);
        total += probs[a] * inner;
    }
    return total;
}

/// L_w W_e(x), evaluated exactly through the one-coordinate decomposition of
/// W_e differences. Returns NaN when the overflow sentinel is touched
/// anywhere on the one-step neighborhood.
inline double drift(const SystemConfig& config, const BasisSpec& basis,
                    std::span<const double> w, double iota, double nu,
                    const State& x) {
    if (!(nu > 0.0)) throw std::invalid_argument("drift: nu must be > 0");
    const int p = basis.per_server_count();
    const int n_servers = config.n_servers;
    const double rate = total_rate(config, x);

    auto block_dot = [&](int n, int v) {
        double dot = 0.0;
        for (int j = 0; j < p; ++j)
            dot += w[static_cast<std::size_t>(n) * p + j] *
                   basis_value(basis.at(n, j), static_cast<double>(v));
        return dot;
    };

    std::vector<double> e_here(static_cast<std::size_t>(n_servers));
    std::vector<double> e_up(static_cast<std::size_t>(n_servers));
    std::vector<double> e_down(static_cast<std::size_t>(n_servers), 0.0);
    bool overflow = false;
    for (int n = 0; n < n_servers; ++n) {
        const double s0 = nu * block_dot(n, x[n]);
        const double s1 = nu * block_dot(n, x[n] + 1);
        if (s0 > kExpOverflow || s1 > kExpOverflow) overflow = true;
        e_here[n] = std::exp(s0);
        e_up[n] = std::exp(s1);
        if (x[n] > 0) {
            const double sm = nu * block_dot(n, x[n] - 1);
            if (sm > kExpOverflow) overflow = true;
            e_down[n] = std::exp(sm);
        }
    }
    if (overflow) return std::numeric_limits<double>::quiet_NaN();

    double departures = 0.0;
    for (int n = 0; n < n_servers; ++n)
        if (x[n] > 0) departures += config.mu[n] / rate * (e_down[n] - e_here[n]);

    const PolicyParams policy = SoftmaxPolicy{iota};
    const std::vector<double> probs = action_probabilities(policy, &basis, w, x);
    double arrivals = 0.0;
    for (int a = 0; a < n_servers; ++a)
        arrivals += probs[a] * (config.lambda / rate) * (e_up[a] - e_here[a]);
    return departures + arrivals;
}

/// Drift certificate over a finite annulus of the state space.
struct DriftReport {
    double nu = 0.0;
    int l1_min = 0;
    int l1_max = 0;
    double max_drift_outside = std::numeric_limits<double>::infinity();
    State worst_state;
    double b_w_est = 0.0;  // drift at the empty state plus one
    double b_e_est = 0.0;  // min of -drift/g over checked states (margin per MGF gauge)
    std::int64_t flagged_states = 0;  // overflow sentinels, excluded from pass/fail
    std::int64_t checked_states = 0;
    bool pass = false;
};

namespace detail {
// Enumerate all states with l1 norm in [l1_min, l1_max], calling fn on each.
inline void for_each_state_in_annulus(int n_servers, int l1_min, int l1_max,
                                      const std::function<void(const State&)>& fn) {
    State x(static_cast<std::size_t>(n_servers), 0);
    std::function<void(int, int)> rec = [&](int pos, int remaining) {
        if (pos == n_servers - 1) {
            for (int v = 0; v <= remaining; ++v) {
                x[pos] = v;
                const std::int64_t total = l1_norm(x);
                if (total >= l1_min && total <= l1_max) fn(x);
            }
            x[pos] = 0;
            return;
        }
        for (int v = 0; v <= remaining; ++v) {
            x[pos] = v;
            rec(pos + 1, remaining - v);
        }
        x[pos] = 0;
    };
    rec(0, l1_max);
}

// Drift scan at one nu over the annulus, with per-coordinate value tables so
// the inner loop is lookups and a handful of exps.
struct NuScan {
    double max_drift = -std::numeric_limits<double>::infinity();
    State worst_state;
    double min_margin = std::numeric_limits<double>::infinity();  // -drift/g
    std::int64_t flagged = 0;
    std::int64_t checked = 0;
};

inline NuScan scan_annulus(const SystemConfig& config, const BasisSpec& basis,
                           std::span<const double> w, double iota, double nu,
                           int l1_min, int l1_max) {
    const int n_servers = config.n_servers;
    const int p = basis.per_server_count();
    const int cap = l1_max + 1;

    // value[n][v] = w_n . phi_n(v); exps flagged past the overflow guard.
    std::vector<std::vector<double>> dots(static_cast<std::size_t>(n_servers));
    std::vector<std::vector<double>> exps(static_cast<std::size_t>(n_servers));
    std::vector<std::vector<char>> flag(static_cast<std::size_t>(n_servers));
    for (int n = 0; n < n_servers; ++n) {
        dots[n].resize(static_cast<std::size_t>(cap) + 1);
        exps[n].resize(static_cast<std::size_t>(cap) + 1);
        flag[n].resize(static_cast<std::size_t>(cap) + 1, 0);
        for (int v = 0; v <= cap; ++v) {
            double dot = 0.0;
            for (int j = 0; j < p; ++j)
                dot += w[static_cast<std::size_t>(n) * p + j] *
                       basis_value(basis.at(n, j), static_cast<double>(v));
            dots[n][v] = dot;
            const double e = nu * dot;
            flag[n][v] = e > kExpOverflow ? 1 : 0;
            exps[n][v] = std::exp(std::min(e, kExpOverflow));
        }
    }

    NuScan scan;
    std::vector<double> scores(static_cast<std::size_t>(n_servers));
    for_each_state_in_annulus(n_servers, l1_min, l1_max, [&](const State& x) {
        scan.checked += 1;
        bool overflow = false;
        for (int n = 0; n < n_servers; ++n)
            if (flag[n][x[n]] || flag[n][x[n] + 1] || (x[n] > 0 && flag[n][x[n] - 1]))
                overflow = true;
        if (overflow) {
            scan.flagged += 1;
            return;
        }
        double rate = config.lambda;
        for (int n = 0; n < n_servers; ++n)
            if (x[n] > 0) rate += config.mu[n];

        double departures = 0.0;
        double g = 0.0;
        for (int n = 0; n < n_servers; ++n) {
            if (x[n] > 0)
                departures += config.mu[n] / rate * (exps[n][x[n] - 1] - exps[n][x[n]]);
            scores[n] = dots[n][x[n] + 1] - dots[n][x[n]];
            g += std::exp(std::min(nu * scores[n], kExpOverflow));
        }
        const std::vector<double> probs = detail::softmax_from_scores(scores, iota);
        double arrivals = 0.0;
        for (int a = 0; a < n_servers; ++a)
            arrivals += probs[a] * (config.lambda / rate) * (exps[a][x[a] + 1] - exps[a][x[a]]);
        const double value = departures + arrivals;
        if (value > scan.max_drift) {
            scan.max_drift = value;
            scan.worst_state = x;
        }
        if (g > 0.0) scan.min_margin = std::min(scan.min_margin, -value / g);
    });
    return scan;
}
}  // namespace detail

/// Search the geometric grid nu = 1e-4 * 2^i for the first value whose drift
/// is strictly negative on every checked state with |x|_1 in [l1_min, l1_max].
/// Falls back to the attempt with the smallest worst-case drift when none
/// passes. States that overflow the exponential guard are excluded from the
/// pass decision and counted in the report.
inline DriftReport find_nu(const SystemConfig& config, const BasisSpec& basis,
                           std::span<const double> w, double iota, int l1_min = 20,
                           int l1_max = 200) {
    config.validate();
    basis.validate();
    if (l1_min < 1 || l1_max < l1_min)
        throw std::invalid_argument("find_nu: need 1 <= l1_min <= l1_max");

    DriftReport best;
    best.l1_min = l1_min;
    best.l1_max = l1_max;
    const State zero(static_cast<std::size_t>(config.n_servers), 0);
    for (int i = 0; i <= 26; ++i) {
        const double nu = 1e-4 * std::pow(2.0, static_cast<double>(i));
        const detail::NuScan scan =
            detail::scan_annulus(config, basis, w, iota, nu, l1_min, l1_max);
        if (scan.checked == scan.flagged) continue;  // nothing checkable at this nu
        const bool pass = scan.max_drift < 0.0;
        if (pass || scan.max_drift < best.max_drift_outside) {
            best.nu = nu;
            best.max_drift_outside = scan.max_drift;
            best.worst_state = scan.worst_state;
            best.b_e_est = scan.min_margin;
            best.flagged_states = scan.flagged;
            best.checked_states = scan.checked;
            best.pass = pass;
            const double drift0 = drift(config, basis, w, iota, nu, zero);
            best.b_w_est = (std::isfinite(drift0) ? drift0 : 0.0) + 1.0;
        }
        if (pass) break;
    }
    return best;
}

/// Running epoch-average of g(x) = sum_n exp(nu * w_n . (phi_n(x_n+1) - phi_n(x_n))).
/// The series is sampled every `stride` epochs; an overflow truncates it.
class MgfTimeAverage {
public:
    MgfTimeAverage(const BasisSpec& basis, std::vector<double> w, double nu,
                   std::int64_t stride = 1)
        : basis_(&basis), w_(std::move(w)), nu_(nu), stride_(stride) {
        if (!(nu > 0.0)) throw std::invalid_argument("MgfTimeAverage: nu must be > 0");
        if (stride < 1) throw std::invalid_argument("MgfTimeAverage: stride must be >= 1");
    }

    void add(const State& x) {
        if (truncated_) return;
        const int p = basis_->per_server_count();
        double g = 0.0;
        for (int n = 0; n < basis_->n_servers(); ++n) {
            double dot = 0.0;
            for (int j = 0; j < p; ++j) {
                const Basis& b = basis_->at(n, j);
                dot += w_[static_cast<std::size_t>(n) * p + j] *
                       (basis_value(b, static_cast<double>(x[n]) + 1.0) -
                        basis_value(b, static_cast<double>(x[n])));
            }
            const double e = nu_ * dot;
            if (e > kExpOverflow) {
                truncated_ = true;
                return;
            }
            g += std::exp(e);
        }
        count_ += 1;
        sum_ += g;
        if (count_ % stride_ == 0) series_.push_back(sum_ / static_cast<double>(count_));
    }

    double mean() const { return count_ > 0 ? sum_ / static_cast<double>(count_) : 0.0; }
    std::int64_t count() const { return count_; }
    bool truncated() const { return truncated_; }
    const std::vector<double>& series() const { return series_; }

private:
    const BasisSpec* basis_;
    std::vector<double> w_;
    double nu_;
    std::int64_t stride_;
    std::int64_t count_ = 0;
    double sum_ = 0.0;
    bool truncated_ = false;
    std::vector<double> series_;
};

inline std::vector<double> mgf_time_average(const std::vector<TrajectoryRecord>& records,
                                            const BasisSpec& basis,
                                            std::vector<double> w, double nu) {
    if (records.empty())
        throw std::invalid_argument("mgf_time_average: trajectory is empty");
    MgfTimeAverage acc(basis, std::move(w), nu);
    for (const auto& rec : records) acc.add(rec.x);
    return acc.series();
}

/// Time-weighted windowed means of |x|_1 plus the cumulative time average,
/// with holding times as integration weights.
class StabilityMetrics {
public:
    explicit StabilityMetrics(std::int64_t window_epochs) : window_(window_epochs) {
        if (window_epochs < 1)
            throw std::invalid_argument("StabilityMetrics: window must be >= 1");
    }

    void add(const State& x, double dt) {
        const double q = static_cast<double>(l1_norm(x));
        window_time_ += dt;
        window_integral_ += q * dt;
        total_time_ += dt;
        total_integral_ += q * dt;
        count_ += 1;
        if (count_ % window_ == 0) {
            windows_.push_back(window_time_ > 0.0 ? window_integral_ / window_time_ : 0.0);
            window_time_ = window_integral_ = 0.0;
        }
    }

    const std::vector<double>& windows() const { return windows_; }
    double cumulative_average() const {
        return total_time_ > 0.0 ? total_integral_ / total_time_ : 0.0;
    }

private:
    std::int64_t window_;
    std::int64_t count_ = 0;
    double window_time_ = 0.0, window_integral_ = 0.0;
    double total_time_ = 0.0, total_integral_ = 0.0;
    std::vector<double> windows_;
};

struct StabilitySeries {
    std::vector<double> window_means;
    double cumulative_average = 0.0;
};

inline StabilitySeries stability_metrics(const std::vector<TrajectoryRecord>& records,
                                         std::int64_t window) {
    StabilityMetrics acc(window);
    for (const auto& rec : records) acc.add(rec.x, rec.dt);
    return {acc.windows(), acc.cumulative_average()};
}

namespace detail {
struct StateHash {
    std::size_t operator()(const State& x) const {
        std::uint64_t h = 1469598103934665603ULL;
        for (int v : x) {
            h ^= static_cast<std::uint64_t>(v) + 0x9E3779B97F4A7C15ULL;
            h *= 1099511628211ULL;
        }
        return static_cast<std::size_t>(h);
    }
};
}  // namespace detail

/// Total-variation distance between the empirical state histograms of
/// consecutive fixed-length windows. Values live in [0, 1]; a falling series
/// signals distributional settling.
class TvWindowDistance {
public:
    explicit TvWindowDistance(std::int64_t window_epochs) : window_(window_epochs) {
        if (window_epochs < 1000)
            throw std::invalid_argument("TvWindowDistance: window must be >= 1000");
    }

    void add(const State& x) {
        current_[x] += 1;
        count_ += 1;
        if (count_ % window_ == 0) {
            if (!previous_.empty()) distances_.push_back(tv(previous_, current_));
            previous_ = std::move(current_);
            current_.clear();
        }
    }

    const std::vector<double>& distances() const { return distances_; }

private:
    using Histogram = std::unordered_map<State, std::int64_t, detail::StateHash>;

    double tv(const Histogram& a, const Histogram& b) const {
        const double na = static_cast<double>(window_);
        double dist = 0.0;
        for (const auto& [state, cnt] : a) {
            const auto it = b.find(state);
            const double pb = it == b.end() ? 0.0 : static_cast<double>(it->second) / na;
            dist += std::abs(static_cast<double>(cnt) / na - pb);
        }
        for (const auto& [state, cnt] : b)
            if (a.find(state) == a.end()) dist += static_cast<double>(cnt) / na;
        return 0.5 * dist;
    }

    std::int64_t window_;
    std::int64_t count_ = 0;
    Histogram previous_, current_;
    std::vector<double> distances_;
};

inline std::vector<double> tv_window_distance(const std::vector<TrajectoryRecord>& records,
                                              std::int64_t window) {
    TvWindowDistance acc(window);
    for (const auto& rec : records) acc.add(rec.x);
    return acc.distances();
}

struct ConvergenceSeries {
    std::vector<double> distances;  // |w_k - target|_2 per snapshot
    double decay_rate = 0.0;        // fitted rate over the longest non-increasing run
};

inline ConvergenceSeries weight_convergence(const std::vector<TrainSnapshot>& trace,
                                            std::span<const double> target) {
    ConvergenceSeries out;
    out.distances.reserve(trace.size());
    for (const auto& snap : trace) {
        if (snap.w.size() != target.size())
            throw std::invalid_argument("weight_convergence: target dimension mismatch");
        double d2 = 0.0;
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double d = snap.w[i] - target[i];
            d2 += d * d;
        }
        out.distances.push_back(std::sqrt(d2));
    }

    // Longest contiguous non-increasing run, then a log-linear fit over it.
    std::size_t best_lo = 0, best_hi = 0, lo = 0;
    for (std::size_t i = 1; i <= out.distances.size(); ++i) {
        if (i == out.distances.size() || out.distances[i] > out.distances[i - 1]) {
            if (i - 1 - lo > best_hi - best_lo) {
                best_lo = lo;
                best_hi = i - 1;
            }
            lo = i;
        }
    }
    if (best_hi > best_lo) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        double count = 0;
        for (std::size_t i = best_lo; i <= best_hi; ++i) {
            const double k = static_cast<double>(trace[i].k);
            const double y = std::log(std::max(out.distances[i], 1e-300));
            sx += k;
            sy += y;
            sxx += k * k;
            sxy += k * y;
            count += 1;
        }
        const double denom = count * sxx - sx * sx;
        if (denom > 0.0) out.decay_rate = -(count * sxy - sx * sy) / denom;
    }
    return out;
}

}  // namespace parq
