#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "parq/basis.hpp"
#include "parq/cost.hpp"
#include "parq/learner.hpp"
#include "parq/policy.hpp"
#include "parq/system.hpp"

namespace parq {

/// Any config problem that should surface as exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct WInitRule {
    double low = 0.0;
    double high = 1.0;
};

struct LearnerConfig {
    double gamma = 0.99;
    double w_l = 0.05;
    double eps_l = 1e-3;
    double alpha0 = 0.05;
    double tau = 1e5;
    WInitRule w_init;
    HoldingTimeMode holding = HoldingTimeMode::Sampled;
    double fixed_dt = 0.1;
    double divergence_ceiling = 1e9;

    StepSchedule schedule() const { return StepSchedule{alpha0, tau}; }
    SimOptions sim_options() const { return SimOptions{holding, fixed_dt}; }
};

/// Everything a run needs; two equal configs with equal seeds produce
/// byte-identical artifacts.
struct RunConfig {
    SystemConfig system;
    BasisSpec basis;
    CostModel cost = AggregateLogCost{};
    PolicyParams policy = SoftmaxPolicy{};
    LearnerConfig learner;
    std::int64_t horizon = 0;
    int replications = 1;
    std::string outputs = "out";
    std::int64_t snapshot_every = 10000;

    void validate() const {
        system.validate();
        basis.validate();
        if (basis.n_servers() != system.n_servers)
            throw ConfigError("config: basis server count differs from the system");
        validate_cost(cost, system.n_servers);
        validate_policy(policy, system.n_servers);
        if (horizon < 0) throw ConfigError("config: horizon must be >= 0");
        if (replications < 1) throw ConfigError("config: replications must be >= 1");
        if (snapshot_every < 1) throw ConfigError("config: snapshot_every must be >= 1");
    }
};

namespace detail {

using Json = nlohmann::json;

inline void reject_unknown_keys(const Json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, value] : obj.items())
        if (allowed.find(key) == allowed.end())
            throw ConfigError("config: unknown key '" + key + "' in '" + where + "'");
}

inline Json require(const Json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key))
        throw ConfigError("config: missing key '" + key + "' in '" + where + "'");
    return obj.at(key);
}

inline Basis parse_basis_entry(const Json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: basis entry in '" + where +
                                          "' must be an object");
    const std::string kind = require(j, "kind", where).get<std::string>();
    if (kind == "power") {
        reject_unknown_keys(j, {"kind", "exponent"}, where);
        return PowerBasis{require(j, "exponent", where).get<double>()};
    }
    if (kind == "affine_power") {
        reject_unknown_keys(j, {"kind", "constant", "exponent"}, where);
        return AffinePowerBasis{require(j, "constant", where).get<double>(),
                                require(j, "exponent", where).get<double>()};
    }
    if (kind == "log") {
        reject_unknown_keys(j, {"kind", "offset"}, where);
        return LogBasis{require(j, "offset", where).get<double>()};
    }
    throw ConfigError("config: unknown basis kind '" + kind + "' in '" + where + "'");
}

inline Json basis_entry_to_json(const Basis& b) {
    if (const auto* pw = std::get_if<PowerBasis>(&b))
        return Json{{"kind", "power"}, {"exponent", pw->exponent}};
    if (const auto* ap = std::get_if<AffinePowerBasis>(&b))
        return Json{{"kind", "affine_power"},
                    {"constant", ap->constant},
                    {"exponent", ap->exponent}};
    return Json{{"kind", "log"}, {"offset", std::get<LogBasis>(b).offset}};
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::parse_basis_entry;
    using detail::reject_unknown_keys;
    using detail::require;
    using Json = nlohmann::json;

    try {
        reject_unknown_keys(j,
                            {"system", "basis", "cost", "policy", "learner", "horizon",
                             "replications", "outputs", "snapshot_every"},
                            "<root>");
        RunConfig config;

        const Json sys = require(j, "system", "<root>");
        reject_unknown_keys(sys, {"n_servers", "lambda", "mu", "seed"}, "system");
        config.system.n_servers = require(sys, "n_servers", "system").get<int>();
        config.system.lambda = require(sys, "lambda", "system").get<double>();
        config.system.mu = require(sys, "mu", "system").get<std::vector<double>>();
        config.system.seed = require(sys, "seed", "system").get<std::uint64_t>();

        const Json basis = require(j, "basis", "<root>");
        reject_unknown_keys(basis, {"shared", "per_server", "h_index"}, "basis");
        config.basis.h_index = require(basis, "h_index", "basis").get<int>();
        if (basis.contains("shared") == basis.contains("per_server"))
            throw ConfigError("config: basis needs exactly one of 'shared' or 'per_server'");
        if (basis.contains("shared")) {
            std::vector<Basis> block;
            for (const Json& e : basis.at("shared"))
                block.push_back(parse_basis_entry(e, "basis.shared"));
            config.basis.per_server.assign(
                static_cast<std::size_t>(config.system.n_servers), block);
        } else {
            for (const Json& server_block : basis.at("per_server")) {
                std::vector<Basis> block;
                for (const Json& e : server_block)
                    block.push_back(parse_basis_entry(e, "basis.per_server"));
                config.basis.per_server.push_back(std::move(block));
            }
        }

        const Json cost = require(j, "cost", "<root>");
        const std::string cost_kind = require(cost, "kind", "cost").get<std::string>();
        if (cost_kind == "aggregate_log") {
            reject_unknown_keys(cost, {"kind"}, "cost");
            config.cost = AggregateLogCost{};
        } else if (cost_kind == "separable") {
            reject_unknown_keys(cost, {"kind", "per_server"}, "cost");
            SeparableCost sep;
            for (const Json& e : require(cost, "per_server", "cost"))
                sep.per_server.push_back(parse_basis_entry(e, "cost.per_server"));
            config.cost = std::move(sep);
        } else {
            throw ConfigError("config: unknown cost kind '" + cost_kind + "'");
        }

        const Json policy = require(j, "policy", "<root>");
        const std::string policy_kind = require(policy, "kind", "policy").get<std::string>();
        if (policy_kind == "softmax") {
            reject_unknown_keys(policy, {"kind", "iota"}, "policy");
            config.policy = SoftmaxPolicy{require(policy, "iota", "policy").get<double>()};
        } else if (policy_kind == "greedy") {
            reject_unknown_keys(policy, {"kind"}, "policy");
            config.policy = GreedyPolicy{};
        } else if (policy_kind == "jsq") {
            reject_unknown_keys(policy, {"kind"}, "policy");
            config.policy = JsqPolicy{};
        } else if (policy_kind == "bernoulli") {
            reject_unknown_keys(policy, {"kind", "p"}, "policy");
            config.policy =
                BernoulliPolicy{require(policy, "p", "policy").get<std::vector<double>>()};
        } else {
            throw ConfigError("config: unknown policy kind '" + policy_kind + "'");
        }

        if (j.contains("learner")) {
            const Json lrn = j.at("learner");
            reject_unknown_keys(lrn,
                                {"gamma", "w_l", "eps_l", "alpha0", "tau", "w_init",
                                 "holding", "fixed_dt", "divergence_ceiling"},
                                "learner");
            LearnerConfig& lc = config.learner;
            if (lrn.contains("gamma")) lc.gamma = lrn.at("gamma").get<double>();
            if (lrn.contains("w_l")) lc.w_l = lrn.at("w_l").get<double>();
            if (lrn.contains("eps_l")) lc.eps_l = lrn.at("eps_l").get<double>();
            if (lrn.contains("alpha0")) lc.alpha0 = lrn.at("alpha0").get<double>();
            if (lrn.contains("tau")) lc.tau = lrn.at("tau").get<double>();
            if (lrn.contains("w_init")) {
                const Json wi = lrn.at("w_init");
                reject_unknown_keys(wi, {"low", "high"}, "learner.w_init");
                if (wi.contains("low")) lc.w_init.low = wi.at("low").get<double>();
                if (wi.contains("high")) lc.w_init.high = wi.at("high").get<double>();
            }
            if (lrn.contains("holding")) {
                const std::string h = lrn.at("holding").get<std::string>();
                if (h == "sampled") lc.holding = HoldingTimeMode::Sampled;
                else if (h == "expected") lc.holding = HoldingTimeMode::Expected;
                else if (h == "fixed") lc.holding = HoldingTimeMode::Fixed;
                else throw ConfigError("config: unknown holding mode '" + h + "'");
            }
            if (lrn.contains("fixed_dt")) lc.fixed_dt = lrn.at("fixed_dt").get<double>();
            if (lrn.contains("divergence_ceiling"))
                lc.divergence_ceiling = lrn.at("divergence_ceiling").get<double>();
        }

        if (j.contains("horizon")) config.horizon = j.at("horizon").get<std::int64_t>();
        if (j.contains("replications"))
            config.replications = j.at("replications").get<int>();
        if (j.contains("outputs")) config.outputs = j.at("outputs").get<std::string>();
        if (j.contains("snapshot_every"))
            config.snapshot_every = j.at("snapshot_every").get<std::int64_t>();

        config.validate();
        return config;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline nlohmann::json run_config_to_json(const RunConfig& config) {
    using detail::basis_entry_to_json;
    using Json = nlohmann::json;
    Json j;
    j["system"] = {{"n_servers", config.system.n_servers},
                   {"lambda", config.system.lambda},
                   {"mu", config.system.mu},
                   {"seed", config.system.seed}};
    Json per_server = Json::array();
    for (const auto& block : config.basis.per_server) {
        Json entries = Json::array();
        for (const Basis& b : block) entries.push_back(basis_entry_to_json(b));
        per_server.push_back(entries);
    }
    j["basis"] = {{"per_server", per_server}, {"h_index", config.basis.h_index}};
    if (const auto* sep = std::get_if<SeparableCost>(&config.cost)) {
        Json entries = Json::array();
        for (const Basis& b : sep->per_server) entries.push_back(basis_entry_to_json(b));
        j["cost"] = {{"kind", "separable"}, {"per_server", entries}};
    } else {
        j["cost"] = {{"kind", "aggregate_log"}};
    }
    if (const auto* sm = std::get_if<SoftmaxPolicy>(&config.policy))
        j["policy"] = {{"kind", "softmax"}, {"iota", sm->iota}};
    else if (std::holds_alternative<GreedyPolicy>(config.policy))
        j["policy"] = {{"kind", "greedy"}};
    else if (std::holds_alternative<JsqPolicy>(config.policy))
        j["policy"] = {{"kind", "jsq"}};
    else
        j["policy"] = {{"kind", "bernoulli"},
                       {"p", std::get<BernoulliPolicy>(config.policy).p}};
    const LearnerConfig& lc = config.learner;
    j["learner"] = {
        {"gamma", lc.gamma},
        {"w_l", lc.w_l},
        {"eps_l", lc.eps_l},
        {"alpha0", lc.alpha0},
        {"tau", lc.tau},
        {"w_init", {{"low", lc.w_init.low}, {"high", lc.w_init.high}}},
        {"holding", lc.holding == HoldingTimeMode::Sampled
                        ? "sampled"
                        : (lc.holding == HoldingTimeMode::Expected ? "expected" : "fixed")},
        {"fixed_dt", lc.fixed_dt},
        {"divergence_ceiling", lc.divergence_ceiling}};
    j["horizon"] = config.horizon;
    j["replications"] = config.replications;
    j["outputs"] = config.outputs;
    j["snapshot_every"] = config.snapshot_every;
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

inline std::uint64_t fnv1a_hash(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Stable hash of the canonical serialized config, recorded in run metadata.
inline std::string config_hash(const RunConfig& config) {
    std::ostringstream hex;
    hex << std::hex << fnv1a_hash(run_config_to_json(config).dump());
    return hex.str();
}

}  // namespace parq
