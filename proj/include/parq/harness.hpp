#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "parq/config.hpp"
#include "parq/diagnostics.hpp"
#include "parq/io.hpp"
#include "parq/learner.hpp"
#include "parq/oracle.hpp"
#include "parq/policy.hpp"
#include "parq/system.hpp"

namespace parq {

inline constexpr const char* kVersionString = "parq 0.1.0";

/// Frozen-policy evaluation result: time-weighted average cost and queue
/// length with standard errors across replications.
struct EvalSummary {
    std::string policy_name;
    int replications = 0;
    std::int64_t horizon = 0;
    double avg_cost = 0.0;
    double se_cost = 0.0;
    double avg_qlen = 0.0;
    double se_qlen = 0.0;
    double wall_seconds = 0.0;
    std::vector<double> rep_costs;
    std::vector<double> rep_qlens;
};

namespace detail {
inline std::pair<double, double> mean_and_se(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    if (v.size() < 2) return {mean, 0.0};
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= (n - 1.0);
    return {mean, std::sqrt(var / n)};
}
}  // namespace detail

/// Simulate `replications` independent trajectories of the frozen policy.
/// Replication r uses the seed derived from (base_seed, r), so results do not
/// depend on worker count or execution order.
inline EvalSummary evaluate_policy(const SystemConfig& system, const BasisSpec& basis,
                                   const CostModel& cost, const PolicyParams& policy,
                                   std::string policy_name,
                                   std::span<const double> weights,
                                   std::int64_t horizon, int replications,
                                   std::uint64_t base_seed, int workers = 1,
                                   const SimOptions& sim = {},
                                   const TrajectorySink* first_rep_sink = nullptr) {
    system.validate();
    basis.validate();
    validate_cost(cost, system.n_servers);
    validate_policy(policy, system.n_servers);
    if (horizon < 1) throw ConfigError("evaluate: horizon must be >= 1");
    if (replications < 1) throw ConfigError("evaluate: replications must be >= 1");
    const bool needs_weights = std::holds_alternative<SoftmaxPolicy>(policy) ||
                               std::holds_alternative<GreedyPolicy>(policy);
    if (needs_weights && static_cast<int>(weights.size()) != basis.dim())
        throw ConfigError("evaluate: weights dimension mismatch, expected " +
                          std::to_string(basis.dim()));

    EvalSummary summary;
    summary.policy_name = std::move(policy_name);
    summary.replications = replications;
    summary.horizon = horizon;
    summary.rep_costs.resize(static_cast<std::size_t>(replications));
    summary.rep_qlens.resize(static_cast<std::size_t>(replications));

    const std::vector<double> w(weights.begin(), weights.end());
    const auto t0 = std::chrono::steady_clock::now();

    auto run_one = [&](int rep) {
        RngStreams streams(derive_seed(base_seed, 100 + static_cast<std::uint64_t>(rep)));
        const ActionSource actions = [&](const State& x, std::mt19937_64& rng) {
            return sample_action(policy, &basis, w, x, rng);
        };
        const CostFn cost_fn = [&](const State& next, double dt) {
            return one_step_cost(cost, next, dt);
        };
        const TrajectorySink* sink = rep == 0 ? first_rep_sink : nullptr;
        const TrajectorySummary ts =
            simulate_trajectory(system, actions, cost_fn, horizon, streams, sim, sink);
        summary.rep_costs[rep] = ts.avg_cost();
        summary.rep_qlens[rep] = ts.avg_qlen();
    };

    int n_workers = std::max(1, workers);
    n_workers = std::min(n_workers, replications);
    if (n_workers == 1) {
        for (int rep = 0; rep < replications; ++rep) run_one(rep);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(n_workers));
        for (int t = 0; t < n_workers; ++t)
            threads.emplace_back([&, t]() {
                for (int rep = t; rep < replications; rep += n_workers) run_one(rep);
            });
        for (auto& th : threads) th.join();
    }

    summary.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::tie(summary.avg_cost, summary.se_cost) = detail::mean_and_se(summary.rep_costs);
    std::tie(summary.avg_qlen, summary.se_qlen) = detail::mean_and_se(summary.rep_qlens);
    return summary;
}

struct ComparisonRow {
    std::string name;
    double avg_cost = 0.0;
    double se_cost = 0.0;
    double norm_cost = 0.0;
    double avg_qlen = 0.0;
    double wall_seconds = 0.0;
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;
    std::string base;

    std::string to_csv() const {
        CsvBuilder csv({"policy", "avg_cost", "se_cost", "norm_cost", "avg_qlen",
                        "wall_seconds"});
        for (const auto& r : rows) {
            csv.begin_row();
            csv.add(r.name);
            csv.add(r.avg_cost);
            csv.add(r.se_cost);
            csv.add(r.norm_cost);
            csv.add(r.avg_qlen);
            csv.add(r.wall_seconds);
            csv.end_row();
        }
        return csv.str();
    }

    std::string to_text() const {
        std::ostringstream out;
        out << std::left << std::setw(16) << "policy" << std::right << std::setw(14)
            << "avg_cost" << std::setw(12) << "se" << std::setw(12) << "norm"
            << std::setw(12) << "avg_qlen" << std::setw(12) << "wall_s" << '\n';
        for (const auto& r : rows) {
            out << std::left << std::setw(16) << r.name << std::right << std::fixed
                << std::setprecision(6) << std::setw(14) << r.avg_cost << std::setw(12)
                << r.se_cost << std::setprecision(4) << std::setw(12) << r.norm_cost
                << std::setw(12) << r.avg_qlen << std::setprecision(2) << std::setw(12)
                << r.wall_seconds << '\n';
        }
        return out.str();
    }
};

/// Normalize costs by the named base row (its normalized cost is exactly 1).
inline ComparisonTable make_comparison(const std::vector<EvalSummary>& evals,
                                       const std::string& base) {
    ComparisonTable table;
    table.base = base;
    double base_cost = 0.0;
    bool found = false;
    for (const auto& e : evals)
        if (e.policy_name == base) {
            base_cost = e.avg_cost;
            found = true;
        }
    if (!found) throw ConfigError("compare: base row '" + base + "' not in policy set");
    for (const auto& e : evals) {
        ComparisonRow row;
        row.name = e.policy_name;
        row.avg_cost = e.avg_cost;
        row.se_cost = e.se_cost;
        row.norm_cost = e.policy_name == base
                            ? 1.0
                            : (base_cost != 0.0 ? e.avg_cost / base_cost : 0.0);
        row.avg_qlen = e.avg_qlen;
        row.wall_seconds = e.wall_seconds;
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline std::string trace_to_csv(const std::vector<TrainSnapshot>& trace, int dim) {
    std::vector<std::string> header = {"k", "wall_time"};
    for (int i = 0; i < dim; ++i) header.push_back("w" + std::to_string(i));
    header.insert(header.end(), {"window_cost", "window_q_len", "b_alpha_max"});
    CsvBuilder csv(header);
    for (const auto& snap : trace) {
        csv.begin_row();
        csv.add(snap.k);
        csv.add(snap.sim_time);
        for (double v : snap.w) csv.add(v);
        csv.add(snap.window_cost);
        csv.add(snap.window_qlen);
        csv.add(snap.b_alpha_max);
        csv.end_row();
    }
    return csv.str();
}

inline std::string metrics_to_csv(const std::vector<TrainSnapshot>& trace) {
    CsvBuilder csv({"k", "window_cost", "window_q_len", "b_alpha_max"});
    for (const auto& snap : trace) {
        csv.begin_row();
        csv.add(snap.k);
        csv.add(snap.window_cost);
        csv.add(snap.window_qlen);
        csv.add(snap.b_alpha_max);
        csv.end_row();
    }
    return csv.str();
}

inline std::string weights_to_json(std::span<const double> w) {
    nlohmann::json j;
    j["w"] = std::vector<double>(w.begin(), w.end());
    return j.dump(2) + "\n";
}

inline std::vector<double> load_weights(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("weights: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("weights: parse error in '" + path + "': " + e.what());
    }
    if (!j.contains("w")) throw ConfigError("weights: missing 'w' array in '" + path + "'");
    return j.at("w").get<std::vector<double>>();
}

struct TrainArtifacts {
    TrainResult result;
    BasisRegularityReport regularity;
    std::string out_dir;
};

/// Run learner training from a config and write the artifact set (trace CSV,
/// metrics CSV, final weights, metadata sidecar) atomically into out_dir.
inline TrainArtifacts run_training(const RunConfig& config, const std::string& out_dir,
                                   bool force = false,
                                   const TrajectorySink* sink = nullptr,
                                   const StepHook* hook = nullptr) {
    config.validate();
    const auto* softmax = std::get_if<SoftmaxPolicy>(&config.policy);
    if (softmax == nullptr)
        throw ConfigError("train: policy must be softmax for on-policy training");

    TrainArtifacts artifacts;
    artifacts.out_dir = out_dir;
    artifacts.regularity = check_basis_regularity(config.basis, config.system, 10000,
                                              RegularityScope::HighestOnly);

    RngStreams streams(config.system.seed);
    LearnerState learner = make_learner(
        config.basis, config.learner.gamma, config.learner.w_l, config.learner.eps_l,
        config.learner.schedule(), streams.init, config.learner.w_init.low,
        config.learner.w_init.high);

    TrainOptions opts;
    opts.horizon = config.horizon;
    opts.snapshot_every = config.snapshot_every;
    opts.divergence_ceiling = config.learner.divergence_ceiling;
    opts.sim = config.learner.sim_options();
    opts.force = force;

    const auto t0 = std::chrono::steady_clock::now();
    artifacts.result = train(config.system, config.basis, config.cost, *softmax,
                             std::move(learner), opts, streams, sink, hook);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    write_file_atomic(out_dir + "/trace.csv",
                      trace_to_csv(artifacts.result.trace, config.basis.dim()));
    write_file_atomic(out_dir + "/metrics.csv", metrics_to_csv(artifacts.result.trace));
    write_file_atomic(out_dir + "/weights.json",
                      weights_to_json(artifacts.result.learner.w));

    nlohmann::json meta;
    meta["version"] = kVersionString;
    meta["config_hash"] = config_hash(config);
    meta["seed"] = config.system.seed;
    meta["horizon"] = config.horizon;
    meta["wall_time_seconds"] = wall;
    meta["stabilizable"] = is_stabilizable(config.system);
    meta["basis_regularity_pass"] = artifacts.regularity.pass;
    meta["basis_regularity_scope"] = "h_only";
    meta["avg_cost"] = artifacts.result.summary.avg_cost();
    meta["avg_qlen"] = artifacts.result.summary.avg_qlen();
    meta["final_b_alpha"] = artifacts.result.learner.last_b_alpha;
    write_file_atomic(out_dir + "/metadata.json", meta.dump(2) + "\n");
    return artifacts;
}

/// Bernoulli routing proportional to service rates; stabilizing whenever the
/// system is.
inline BernoulliPolicy bernoulli_mu(const SystemConfig& system) {
    BernoulliPolicy policy;
    policy.p.resize(system.mu.size());
    const double total = system.total_mu();
    for (std::size_t n = 0; n < system.mu.size(); ++n)
        policy.p[n] = system.mu[n] / total;
    return policy;
}

}  // namespace parq
