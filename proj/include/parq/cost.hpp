#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <variant>
#include <vector>

#include "parq/basis.hpp"
#include "parq/system.hpp"

namespace parq {

/// Per-server cost functions C_n drawn from the basis families; the one-step
/// cost is sum_n C_n(x'_n) * dt.
struct SeparableCost {
    std::vector<Basis> per_server;
};

/// log(max(|x'|_1, 1)) * dt. The clamp makes the empty-system cost 0 instead
/// of -inf and keeps the cost non-negative.
struct AggregateLogCost {};

using CostModel = std::variant<SeparableCost, AggregateLogCost>;

inline void validate_cost(const CostModel& cost, int n_servers) {
    if (const auto* sep = std::get_if<SeparableCost>(&cost)) {
        if (static_cast<int>(sep->per_server.size()) != n_servers)
            throw std::invalid_argument("cost: separable model needs one function per server");
        for (const Basis& b : sep->per_server) validate_basis(b);
    }
}

/// Cost rate of a state, before time weighting.
inline double state_cost(const CostModel& cost, const State& x) {
    if (const auto* sep = std::get_if<SeparableCost>(&cost)) {
        double s = 0.0;
        for (std::size_t n = 0; n < sep->per_server.size(); ++n)
            s += basis_value(sep->per_server[n], static_cast<double>(x[n]));
        return s;
    }
    const double total = static_cast<double>(l1_norm(x));
    return std::log(std::max(total, 1.0));
}

inline double one_step_cost(const CostModel& cost, const State& next_state, double dt) {
    if (dt < 0.0) throw std::invalid_argument("one_step_cost: dt must be >= 0");
    return state_cost(cost, next_state) * dt;
}

}  // namespace parq
