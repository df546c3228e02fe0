// Command-line harness: train, evaluate, compare, oracle, check, diagnose.
// Exit codes: 0 ok, 1 failed check or internal error, 2 config/validation
// error, 3 runtime divergence.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "parq/parq.hpp"

namespace {

using nlohmann::json;

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    bool force = false;
    int workers = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "run config file (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--seed", args.seed, "override the config seed");
    cmd->add_option("--out", args.out_dir, "override the output directory");
    cmd->add_flag("--force", args.force, "bypass the stabilizability refusal");
    cmd->add_option("--workers", args.workers, "parallel replication workers")
        ->check(CLI::PositiveNumber);
}

parq::RunConfig load_config(const CommonArgs& args) {
    parq::RunConfig config = parq::load_run_config(args.config_path);
    if (args.seed) config.system.seed = *args.seed;
    if (args.out_dir) config.outputs = *args.out_dir;
    return config;
}

parq::PolicyParams named_policy(const std::string& name, const parq::RunConfig& config) {
    if (name == "sgs" || name == "softmax") {
        if (const auto* sm = std::get_if<parq::SoftmaxPolicy>(&config.policy)) return *sm;
        return parq::SoftmaxPolicy{};
    }
    if (name == "greedy") return parq::GreedyPolicy{};
    if (name == "jsq") return parq::JsqPolicy{};
    if (name == "bernoulli_mu") return parq::bernoulli_mu(config.system);
    throw parq::ConfigError("unknown policy name '" + name +
                            "' (expected sgs, greedy, jsq or bernoulli_mu)");
}

bool policy_needs_weights(const std::string& name) {
    return name == "sgs" || name == "softmax" || name == "greedy";
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

int cmd_train(const CommonArgs& args, const std::string& log_path,
              const std::string& log_format) {
    const parq::RunConfig config = load_config(args);
    std::ofstream log_stream;
    parq::TrajectorySink sink;
    const parq::TrajectorySink* sink_ptr = nullptr;
    if (!log_path.empty()) {
        const std::filesystem::path parent = std::filesystem::path(log_path).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        log_stream.open(log_path, std::ios::binary | std::ios::trunc);
        if (!log_stream) throw parq::ConfigError("cannot open trajectory log " + log_path);
        sink = log_format == "binary"
                   ? parq::make_binary_sink(log_stream, config.system.n_servers)
                   : parq::make_jsonl_sink(log_stream);
        sink_ptr = &sink;
    }
    const parq::TrainArtifacts artifacts =
        parq::run_training(config, config.outputs, args.force, sink_ptr);
    if (!artifacts.regularity.pass)
        std::cerr << "warning: basis fails the drift-side regularity check "
                     "(scope h-only, window "
                  << artifacts.regularity.x_max << ")\n";
    std::cout << "trained " << config.horizon << " epochs; artifacts in "
              << config.outputs << "\n"
              << "  avg cost " << artifacts.result.summary.avg_cost() << ", avg |x| "
              << artifacts.result.summary.avg_qlen() << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& policy_name,
                 const std::string& weights_path, std::int64_t horizon,
                 int replications, const std::string& log_path,
                 const std::string& log_format) {
    const parq::RunConfig config = load_config(args);
    std::vector<double> weights;
    if (policy_needs_weights(policy_name)) {
        if (weights_path.empty())
            throw parq::ConfigError("evaluate: policy '" + policy_name +
                                    "' needs --weights");
        weights = parq::load_weights(weights_path);
    }
    const std::int64_t h = horizon > 0 ? horizon : config.horizon;
    const int reps = replications > 0 ? replications : config.replications;
    std::ofstream log_stream;
    parq::TrajectorySink sink;
    const parq::TrajectorySink* sink_ptr = nullptr;
    if (!log_path.empty()) {
        const std::filesystem::path parent = std::filesystem::path(log_path).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        log_stream.open(log_path, std::ios::binary | std::ios::trunc);
        if (!log_stream) throw parq::ConfigError("cannot open trajectory log " + log_path);
        sink = log_format == "binary"
                   ? parq::make_binary_sink(log_stream, config.system.n_servers)
                   : parq::make_jsonl_sink(log_stream);
        sink_ptr = &sink;  // first replication only
    }
    const parq::EvalSummary summary = parq::evaluate_policy(
        config.system, config.basis, config.cost, named_policy(policy_name, config),
        policy_name, weights, h, reps, config.system.seed, args.workers,
        config.learner.sim_options(), sink_ptr);
    std::cout << summary.policy_name << ": avg cost " << summary.avg_cost << " (se "
              << summary.se_cost << "), avg |x| " << summary.avg_qlen << " over "
              << reps << " x " << h << " epochs\n";
    if (args.out_dir || !config.outputs.empty()) {
        const std::string dir = args.out_dir ? *args.out_dir : config.outputs;
        parq::CsvBuilder csv({"policy", "avg_cost", "se_cost", "avg_qlen", "se_qlen",
                              "replications", "horizon"});
        csv.begin_row();
        csv.add(summary.policy_name);
        csv.add(summary.avg_cost);
        csv.add(summary.se_cost);
        csv.add(summary.avg_qlen);
        csv.add(summary.se_qlen);
        csv.add(summary.replications);
        csv.add(summary.horizon);
        csv.end_row();
        parq::write_file_atomic(dir + "/evaluate_" + policy_name + ".csv", csv.str());
    }
    return 0;
}

int cmd_compare(const CommonArgs& args, const std::string& policies_arg,
                const std::string& weights_path, const std::string& base,
                std::int64_t horizon, int replications) {
    const parq::RunConfig config = load_config(args);
    const std::vector<std::string> names = split_csv_list(policies_arg);
    if (names.empty()) throw parq::ConfigError("compare: empty policy set");
    std::vector<double> weights;
    for (const auto& name : names)
        if (policy_needs_weights(name)) {
            if (weights_path.empty())
                throw parq::ConfigError("compare: policy '" + name + "' needs --weights");
            weights = parq::load_weights(weights_path);
        }
    const std::int64_t h = horizon > 0 ? horizon : config.horizon;
    const int reps = replications > 0 ? replications : config.replications;

    std::vector<parq::EvalSummary> evals;
    for (const auto& name : names)
        evals.push_back(parq::evaluate_policy(
            config.system, config.basis, config.cost, named_policy(name, config), name,
            weights, h, reps, config.system.seed, args.workers,
            config.learner.sim_options()));

    const parq::ComparisonTable table = parq::make_comparison(evals, base);
    std::cout << table.to_text();
    double sgs_cost = 0.0, jsq_cost = 0.0;
    for (const auto& row : table.rows) {
        if (row.name == "sgs") sgs_cost = row.avg_cost;
        if (row.name == "jsq") jsq_cost = row.avg_cost;
    }
    if (sgs_cost > 0.0 && jsq_cost > 0.0)
        std::cout << "cost ratio jsq/sgs: " << jsq_cost / sgs_cost << "\n";
    const std::string dir = args.out_dir ? *args.out_dir : config.outputs;
    parq::write_file_atomic(dir + "/comparison.csv", table.to_csv());
    return 0;
}

int cmd_oracle(const CommonArgs& args, int x_max, double gamma_opt, double tol,
               const std::string& weights_path) {
    const parq::RunConfig config = load_config(args);
    const double gamma = gamma_opt > 0.0 ? gamma_opt : config.learner.gamma;
    const double iota = std::holds_alternative<parq::SoftmaxPolicy>(config.policy)
                            ? std::get<parq::SoftmaxPolicy>(config.policy).iota
                            : 0.01;

    const parq::TruncatedMdp mdp = parq::build_truncated(config.system, config.cost, x_max);
    const parq::QTable qstar = parq::value_iteration(mdp, gamma, tol);
    const std::vector<int> pistar = parq::greedy_policy(qstar);
    const parq::PolicyTable pistar_table = parq::one_hot_policy(pistar, mdp.n_actions());
    const std::vector<double> dstar = parq::stationary_distribution(mdp, pistar_table);
    const parq::WeightedLsqResult wstar =
        parq::optimal_weights(mdp, qstar, pistar_table, dstar, config.basis);

    parq::RngStreams streams(config.system.seed);
    parq::LearnerState init = parq::make_learner(
        config.basis, gamma, config.learner.w_l, config.learner.eps_l,
        config.learner.schedule(), streams.init, config.learner.w_init.low,
        config.learner.w_init.high);
    const parq::FixedPointResult fixed =
        parq::sarsa_fixed_point(mdp, config.basis, gamma, iota, init.w);

    const std::string dir = args.out_dir ? *args.out_dir : config.outputs;

    {
        std::vector<std::string> header = {"state_index"};
        for (int n = 0; n < config.system.n_servers; ++n)
            header.push_back("x" + std::to_string(n));
        for (int a = 0; a < mdp.n_actions(); ++a)
            header.push_back("q" + std::to_string(a));
        parq::CsvBuilder csv(header);
        for (int s = 0; s < mdp.n_states; ++s) {
            csv.begin_row();
            csv.add(s);
            for (int v : mdp.state_of(s)) csv.add(v);
            for (int a = 0; a < mdp.n_actions(); ++a) csv.add(qstar.at(s, a));
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/qstar.csv", csv.str());
    }
    {
        parq::CsvBuilder csv({"state_index", "action"});
        for (int s = 0; s < mdp.n_states; ++s) {
            csv.begin_row();
            csv.add(s);
            csv.add(pistar[s]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/pistar.csv", csv.str());
    }
    {
        parq::CsvBuilder csv({"state_index", "d"});
        for (int s = 0; s < mdp.n_states; ++s) {
            csv.begin_row();
            csv.add(s);
            csv.add(dstar[s]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/dstar.csv", csv.str());
    }
    {
        parq::CsvBuilder csv({"index", "w_star", "w_fixed"});
        for (int i = 0; i < config.basis.dim(); ++i) {
            csv.begin_row();
            csv.add(i);
            csv.add(wstar.w[i]);
            csv.add(fixed.w[i]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/weights_oracle.csv", csv.str());
    }

    json meta;
    meta["version"] = parq::kVersionString;
    meta["x_max"] = x_max;
    meta["gamma"] = gamma;
    meta["iota"] = iota;
    meta["n_states"] = mdp.n_states;
    meta["projection_residual"] = wstar.residual;
    meta["projection_condition"] = wstar.condition;
    meta["fixed_point_residual"] = fixed.residual;
    meta["fixed_point_iterations"] = fixed.iterations;
    meta["boundary_mass_dstar"] = mdp.boundary_mass(dstar);
    meta["boundary_mass_dw"] = fixed.boundary_mass;
    parq::write_file_atomic(dir + "/oracle_metadata.json", meta.dump(2) + "\n");

    std::cout << "oracle: " << mdp.n_states << " states, boundary mass d* "
              << mdp.boundary_mass(dstar) << ", d_w " << fixed.boundary_mass << "\n"
              << "  projection residual " << wstar.residual << " (condition "
              << wstar.condition << "), fixed-point residual " << fixed.residual << "\n";

    if (!weights_path.empty()) {
        const std::vector<double> w = parq::load_weights(weights_path);
        if (static_cast<int>(w.size()) != config.basis.dim())
            throw parq::ConfigError("oracle: weights dimension mismatch");
        double d_star2 = 0.0, d_fixed2 = 0.0;
        for (int i = 0; i < config.basis.dim(); ++i) {
            d_star2 += (w[i] - wstar.w[i]) * (w[i] - wstar.w[i]);
            d_fixed2 += (w[i] - fixed.w[i]) * (w[i] - fixed.w[i]);
        }
        std::cout << "  |w - w_star|_2 = " << std::sqrt(d_star2)
                  << ", |w - w_fixed|_2 = " << std::sqrt(d_fixed2) << "\n";
    }
    return 0;
}

int cmd_check(const CommonArgs& args, const std::string& weights_path,
              const std::string& scope_name, int x_max, int l1_min, int l1_max) {
    const parq::RunConfig config = load_config(args);
    const parq::RegularityScope scope = scope_name == "all-j"
                                             ? parq::RegularityScope::AllBases
                                             : parq::RegularityScope::HighestOnly;
    const bool stabilizable = parq::is_stabilizable(config.system);
    const parq::BasisRegularityReport report =
        parq::check_basis_regularity(config.basis, config.system, x_max, scope);

    json out;
    out["stabilizable"] = stabilizable;
    out["basis_regularity"] = {{"pass", report.pass},
                          {"scope", scope_name},
                          {"b_de", report.b_de},
                          {"b_l", report.b_l},
                          {"eps_w", report.eps_w},
                          {"x_max", report.x_max}};
    if (report.witness)
        out["basis_regularity"]["witness"] = {{"server", report.witness->server},
                                         {"basis", report.witness->basis_index},
                                         {"x", report.witness->x}};

    bool drift_pass = true;
    if (!weights_path.empty()) {
        const std::vector<double> w = parq::load_weights(weights_path);
        const double iota = std::holds_alternative<parq::SoftmaxPolicy>(config.policy)
                                ? std::get<parq::SoftmaxPolicy>(config.policy).iota
                                : 0.01;
        const parq::DriftReport drift_report =
            parq::find_nu(config.system, config.basis, w, iota, l1_min, l1_max);
        drift_pass = drift_report.pass;
        out["drift"] = {{"pass", drift_report.pass},
                        {"nu", drift_report.nu},
                        {"l1_min", drift_report.l1_min},
                        {"l1_max", drift_report.l1_max},
                        {"max_drift", drift_report.max_drift_outside},
                        {"worst_state", drift_report.worst_state},
                        {"b_w_est", drift_report.b_w_est},
                        {"b_e_est", drift_report.b_e_est},
                        {"flagged_states", drift_report.flagged_states},
                        {"checked_states", drift_report.checked_states}};
    }

    std::cout << out.dump(2) << "\n";
    return (stabilizable && report.pass && drift_pass) ? 0 : 1;
}

int cmd_diagnose(const CommonArgs& args, const std::string& trajectory_path,
                 const std::string& format_name, const std::string& weights_path,
                 double nu, std::int64_t window) {
    const parq::RunConfig config = load_config(args);
    const parq::TrajectoryFormat format = format_name == "binary"
                                              ? parq::TrajectoryFormat::Binary
                                              : parq::TrajectoryFormat::Jsonl;
    std::ifstream in(trajectory_path, std::ios::binary);
    if (!in) throw parq::ConfigError("diagnose: cannot open '" + trajectory_path + "'");

    parq::StabilityMetrics stability(window);
    parq::TvWindowDistance tv(std::max<std::int64_t>(window, 1000));
    std::optional<parq::MgfTimeAverage> mgf;
    if (!weights_path.empty()) {
        std::vector<double> w = parq::load_weights(weights_path);
        mgf.emplace(config.basis, std::move(w), nu,
                    std::max<std::int64_t>(window / 10, 1));
    }

    parq::for_each_trajectory_record(in, format, [&](const parq::TrajectoryRecord& rec) {
        stability.add(rec.x, rec.dt);
        tv.add(rec.x);
        if (mgf) mgf->add(rec.x);
    });

    const std::string dir = args.out_dir ? *args.out_dir : config.outputs;
    {
        parq::CsvBuilder csv({"window_index", "mean_qlen"});
        for (std::size_t i = 0; i < stability.windows().size(); ++i) {
            csv.begin_row();
            csv.add(static_cast<std::int64_t>(i));
            csv.add(stability.windows()[i]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/stability.csv", csv.str());
    }
    {
        parq::CsvBuilder csv({"window_index", "tv_distance"});
        for (std::size_t i = 0; i < tv.distances().size(); ++i) {
            csv.begin_row();
            csv.add(static_cast<std::int64_t>(i));
            csv.add(tv.distances()[i]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/tv.csv", csv.str());
    }
    if (mgf) {
        parq::CsvBuilder csv({"index", "running_mean"});
        for (std::size_t i = 0; i < mgf->series().size(); ++i) {
            csv.begin_row();
            csv.add(static_cast<std::int64_t>(i));
            csv.add(mgf->series()[i]);
            csv.end_row();
        }
        parq::write_file_atomic(dir + "/mgf.csv", csv.str());
    }

    std::cout << "diagnose: cumulative avg |x| " << stability.cumulative_average();
    if (!tv.distances().empty())
        std::cout << ", final inter-window TV " << tv.distances().back();
    if (mgf) {
        std::cout << ", mgf mean " << mgf->mean();
        if (mgf->truncated()) std::cout << " (truncated by overflow)";
    }
    std::cout << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic routing over parallel exponential servers: "
                 "restrained semi-gradient SARSA, exact truncated-MDP oracle, "
                 "drift diagnostics"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, compare_args, oracle_args, check_args, diag_args;

    auto* train_cmd = app.add_subcommand("train", "run on-policy training");
    add_common(train_cmd, train_args);
    std::string train_log, train_log_format = "jsonl";
    train_cmd->add_option("--log-trajectory", train_log, "write the trajectory log here");
    train_cmd->add_option("--log-format", train_log_format, "jsonl or binary")
        ->check(CLI::IsMember({"jsonl", "binary"}));

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate one frozen policy");
    add_common(eval_cmd, eval_args);
    std::string eval_policy = "jsq", eval_weights, eval_log, eval_log_format = "jsonl";
    std::int64_t eval_horizon = 0;
    int eval_reps = 0;
    eval_cmd->add_option("--policy", eval_policy, "sgs, greedy, jsq or bernoulli_mu");
    eval_cmd->add_option("--weights", eval_weights, "weights file for sgs/greedy");
    eval_cmd->add_option("--horizon", eval_horizon, "override evaluation epochs");
    eval_cmd->add_option("--replications", eval_reps, "override replication count");
    eval_cmd->add_option("--log-trajectory", eval_log,
                         "log the first replication's trajectory here");
    eval_cmd->add_option("--log-format", eval_log_format, "jsonl or binary")
        ->check(CLI::IsMember({"jsonl", "binary"}));

    auto* compare_cmd = app.add_subcommand("compare", "evaluate a policy set");
    add_common(compare_cmd, compare_args);
    std::string cmp_policies = "sgs,jsq", cmp_weights, cmp_base = "sgs";
    std::int64_t cmp_horizon = 0;
    int cmp_reps = 0;
    compare_cmd->add_option("--policies", cmp_policies, "comma-separated policy names");
    compare_cmd->add_option("--weights", cmp_weights, "weights file for sgs/greedy");
    compare_cmd->add_option("--base", cmp_base, "normalization base row");
    compare_cmd->add_option("--horizon", cmp_horizon, "override evaluation epochs");
    compare_cmd->add_option("--replications", cmp_reps, "override replication count");

    auto* oracle_cmd = app.add_subcommand("oracle", "exact truncated-space solutions");
    add_common(oracle_cmd, oracle_args);
    int oracle_xmax = 8;
    double oracle_gamma = 0.0, oracle_tol = 1e-10;
    std::string oracle_weights;
    oracle_cmd->add_option("--x-max", oracle_xmax, "per-server truncation cap");
    oracle_cmd->add_option("--gamma", oracle_gamma, "override the discount");
    oracle_cmd->add_option("--tol", oracle_tol, "value-iteration tolerance");
    oracle_cmd->add_option("--weights", oracle_weights,
                           "report distances from these weights");

    auto* check_cmd = app.add_subcommand("check", "stabilizability and basis regularity checks");
    add_common(check_cmd, check_args);
    std::string check_weights, check_scope = "h-only";
    int check_xmax = 10000, check_l1min = 20, check_l1max = 200;
    check_cmd->add_option("--weights", check_weights, "weights for the drift certificate");
    check_cmd->add_option("--scope", check_scope, "h-only or all-j")
        ->check(CLI::IsMember({"h-only", "all-j"}));
    check_cmd->add_option("--x-max", check_xmax, "regularity check window");
    check_cmd->add_option("--l1-min", check_l1min, "drift annulus lower bound");
    check_cmd->add_option("--l1-max", check_l1max, "drift annulus upper bound");

    auto* diag_cmd = app.add_subcommand("diagnose", "metrics over a saved trajectory");
    add_common(diag_cmd, diag_args);
    std::string diag_traj, diag_format = "jsonl", diag_weights;
    double diag_nu = 0.01;
    std::int64_t diag_window = 10000;
    diag_cmd->add_option("--trajectory", diag_traj, "trajectory log path")->required();
    diag_cmd->add_option("--format", diag_format, "jsonl or binary")
        ->check(CLI::IsMember({"jsonl", "binary"}));
    diag_cmd->add_option("--weights", diag_weights, "weights for the MGF series");
    diag_cmd->add_option("--nu", diag_nu, "MGF exponent scale");
    diag_cmd->add_option("--window", diag_window, "window size in epochs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_args, train_log, train_log_format);
        if (eval_cmd->parsed())
            return cmd_evaluate(eval_args, eval_policy, eval_weights, eval_horizon,
                                eval_reps, eval_log, eval_log_format);
        if (compare_cmd->parsed())
            return cmd_compare(compare_args, cmp_policies, cmp_weights, cmp_base,
                               cmp_horizon, cmp_reps);
        if (oracle_cmd->parsed())
            return cmd_oracle(oracle_args, oracle_xmax, oracle_gamma, oracle_tol,
                              oracle_weights);
        if (check_cmd->parsed())
            return cmd_check(check_args, check_weights, check_scope, check_xmax,
                             check_l1min, check_l1max);
        if (diag_cmd->parsed())
            return cmd_diagnose(diag_args, diag_traj, diag_format, diag_weights, diag_nu,
                                diag_window);
    } catch (const parq::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const parq::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
