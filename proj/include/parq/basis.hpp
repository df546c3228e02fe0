#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "parq/system.hpp"

namespace parq {

// The three supported scalar basis families on non-negative integers.
// 0^p for p in (0,1) is taken as 0 (continuous extension), which is what
// std::pow already returns.
struct PowerBasis {
    double exponent = 1.0;  // x^p, p > 0
};
struct AffinePowerBasis {
    double constant = 0.0;  // c + x^p, c >= 0, p > 0
    double exponent = 1.0;
};
struct LogBasis {
    double offset = 1.0;  // log(x + o), o >= 1
};

using Basis = std::variant<PowerBasis, AffinePowerBasis, LogBasis>;

inline void validate_basis(const Basis& b) {
    if (const auto* pw = std::get_if<PowerBasis>(&b)) {
        if (!(pw->exponent > 0.0))
            throw std::invalid_argument("basis: power exponent must be > 0");
    } else if (const auto* ap = std::get_if<AffinePowerBasis>(&b)) {
        if (!(ap->exponent > 0.0))
            throw std::invalid_argument("basis: affine_power exponent must be > 0");
        if (!(ap->constant >= 0.0))
            throw std::invalid_argument("basis: affine_power constant must be >= 0");
    } else {
        const auto& lg = std::get<LogBasis>(b);
        if (!(lg.offset >= 1.0))
            throw std::invalid_argument("basis: log offset must be >= 1");
    }
}

inline double basis_value(const Basis& b, double x) {
    if (const auto* pw = std::get_if<PowerBasis>(&b)) return std::pow(x, pw->exponent);
    if (const auto* ap = std::get_if<AffinePowerBasis>(&b))
        return ap->constant + std::pow(x, ap->exponent);
    return std::log(x + std::get<LogBasis>(b).offset);
}

namespace detail {
// d^order/dx^order of x^p; returns 0 when the falling-factorial coefficient
// vanishes so integer exponents never hit 0 * inf at x = 0.
inline double power_deriv(double p, int order, double x) {
    double coef = 1.0;
    for (int i = 0; i < order; ++i) coef *= (p - static_cast<double>(i));
    if (coef == 0.0) return 0.0;
    return coef * std::pow(x, p - static_cast<double>(order));
}
}  // namespace detail

// Closed-form derivatives per family. Finite differences are only used as a
// cross-check in tests.
inline double basis_deriv(const Basis& b, int order, double x) {
    if (const auto* pw = std::get_if<PowerBasis>(&b))
        return detail::power_deriv(pw->exponent, order, x);
    if (const auto* ap = std::get_if<AffinePowerBasis>(&b))
        return detail::power_deriv(ap->exponent, order, x);
    const double s = x + std::get<LogBasis>(b).offset;
    switch (order) {
        case 1: return 1.0 / s;
        case 2: return -1.0 / (s * s);
        default: return 2.0 / (s * s * s);
    }
}

// Orders asymptotic growth across families: any positive power eventually
// dominates a logarithm, and powers order by exponent.
inline double growth_key(const Basis& b) {
    if (const auto* pw = std::get_if<PowerBasis>(&b)) return pw->exponent;
    if (const auto* ap = std::get_if<AffinePowerBasis>(&b)) return ap->exponent;
    return 0.0;
}

inline std::string basis_to_string(const Basis& b) {
    if (const auto* pw = std::get_if<PowerBasis>(&b))
        return "power(" + std::to_string(pw->exponent) + ")";
    if (const auto* ap = std::get_if<AffinePowerBasis>(&b))
        return "affine_power(" + std::to_string(ap->constant) + "," +
               std::to_string(ap->exponent) + ")";
    return "log(" + std::to_string(std::get<LogBasis>(b).offset) + ")";
}

/// Feature values phi(x, a) in the (server, basis) layout with the basis
/// index fastest; length N*P.
using FeatureVector = std::vector<double>;

/// N blocks of P basis functions plus the index of the designated
/// fastest-growing entry per block (the floor-protected coordinate).
struct BasisSpec {
    std::vector<std::vector<Basis>> per_server;
    int h_index = 0;

    int n_servers() const { return static_cast<int>(per_server.size()); }
    int per_server_count() const {
        return per_server.empty() ? 0 : static_cast<int>(per_server.front().size());
    }
    int dim() const { return n_servers() * per_server_count(); }

    const Basis& at(int server, int j) const { return per_server[server][j]; }

    void validate() const;
};

namespace detail {
// Gram full-rank check of one server block on the integer grid {0..2P}.
// Rejects duplicated or linearly dependent entries.
inline bool gram_full_rank(const std::vector<Basis>& block) {
    const int p = static_cast<int>(block.size());
    const int m = 2 * p + 1;
    std::vector<double> v(static_cast<std::size_t>(m) * p);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j)
            v[static_cast<std::size_t>(i) * p + j] =
                basis_value(block[j], static_cast<double>(i));
    std::vector<double> g(static_cast<std::size_t>(p) * p, 0.0);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) {
            double s = 0.0;
            for (int r = 0; r < m; ++r)
                s += v[static_cast<std::size_t>(r) * p + i] *
                     v[static_cast<std::size_t>(r) * p + j];
            g[static_cast<std::size_t>(i) * p + j] = s;
        }
    double max_diag = 0.0;
    for (int i = 0; i < p; ++i)
        max_diag = std::max(max_diag, g[static_cast<std::size_t>(i) * p + i]);
    const double tol = 1e-12 * max_diag;
    // Gaussian elimination with partial pivoting; a tiny pivot means rank loss.
    for (int col = 0; col < p; ++col) {
        int piv = col;
        for (int r = col + 1; r < p; ++r)
            if (std::abs(g[static_cast<std::size_t>(r) * p + col]) >
                std::abs(g[static_cast<std::size_t>(piv) * p + col]))
                piv = r;
        if (std::abs(g[static_cast<std::size_t>(piv) * p + col]) <= tol) return false;
        if (piv != col)
            for (int c = 0; c < p; ++c)
                std::swap(g[static_cast<std::size_t>(piv) * p + c],
                          g[static_cast<std::size_t>(col) * p + c]);
        for (int r = col + 1; r < p; ++r) {
            const double f = g[static_cast<std::size_t>(r) * p + col] /
                             g[static_cast<std::size_t>(col) * p + col];
            for (int c = col; c < p; ++c)
                g[static_cast<std::size_t>(r) * p + c] -=
                    f * g[static_cast<std::size_t>(col) * p + c];
        }
    }
    return true;
}
}  // namespace detail

inline void BasisSpec::validate() const {
    if (per_server.empty()) throw std::invalid_argument("basis: no server blocks");
    const int p = per_server_count();
    if (p < 1) throw std::invalid_argument("basis: empty server block");
    for (std::size_t n = 0; n < per_server.size(); ++n) {
        if (static_cast<int>(per_server[n].size()) != p)
            throw std::invalid_argument("basis: server " + std::to_string(n) +
                                        " has a different entry count");
        for (const Basis& b : per_server[n]) validate_basis(b);
        if (h_index < 0 || h_index >= p)
            throw std::invalid_argument("basis: h_index out of range");
        const double hk = growth_key(per_server[n][h_index]);
        for (int j = 0; j < p; ++j)
            if (growth_key(per_server[n][j]) > hk + 1e-12)
                throw std::invalid_argument(
                    "basis: entry " + std::to_string(j) + " of server " +
                    std::to_string(n) + " outgrows the designated h_index entry");
        if (!detail::gram_full_rank(per_server[n]))
            throw std::invalid_argument("basis: server " + std::to_string(n) +
                                        " block is numerically rank-deficient");
    }
}

/// phi(x, a): entry (n, j) is the j-th basis of server n evaluated at
/// x_n + 1{n == a}. Throws on non-finite values, naming the offender.
inline FeatureVector phi(const BasisSpec& basis, const State& x, int action) {
    const int n_servers = basis.n_servers();
    const int p = basis.per_server_count();
    if (static_cast<int>(x.size()) != n_servers)
        throw std::invalid_argument("phi: state size mismatch");
    if (action < 0 || action >= n_servers)
        throw std::invalid_argument("phi: action out of range");
    FeatureVector out(static_cast<std::size_t>(n_servers) * p);
    for (int n = 0; n < n_servers; ++n) {
        const double arg = static_cast<double>(x[n]) + (n == action ? 1.0 : 0.0);
        for (int j = 0; j < p; ++j) {
            const double v = basis_value(basis.at(n, j), arg);
            if (!std::isfinite(v))
                throw std::domain_error("phi: non-finite value at server " +
                                        std::to_string(n) + ", basis " +
                                        std::to_string(j) + ", x=" +
                                        std::to_string(arg));
            out[static_cast<std::size_t>(n) * p + j] = v;
        }
    }
    return out;
}

/// Q-hat(x, a; w) = w . phi(x, a).
inline double q_hat(const BasisSpec& basis, std::span<const double> w, const State& x,
                    int action) {
    if (static_cast<int>(w.size()) != basis.dim())
        throw std::invalid_argument("q_hat: weight dimension mismatch, expected " +
                                    std::to_string(basis.dim()));
    const FeatureVector f = phi(basis, x, action);
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += w[i] * f[i];
    return s;
}

/// One-step forward differences phi_j(x_n + 1) - phi_j(x_n) of server n.
/// Non-negative for the supported (monotone) families.
inline std::vector<double> phi_forward_diff(const BasisSpec& basis, int server, int x_n) {
    if (server < 0 || server >= basis.n_servers())
        throw std::invalid_argument("phi_forward_diff: server out of range");
    if (x_n < 0) throw std::invalid_argument("phi_forward_diff: x must be >= 0");
    const int p = basis.per_server_count();
    std::vector<double> out(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j)
        out[j] = basis_value(basis.at(server, j), static_cast<double>(x_n) + 1.0) -
                 basis_value(basis.at(server, j), static_cast<double>(x_n));
    return out;
}

/// One-step backward differences phi_j(x_n - 1) - phi_j(x_n); requires x_n >= 1.
inline std::vector<double> phi_backward_diff(const BasisSpec& basis, int server, int x_n) {
    if (server < 0 || server >= basis.n_servers())
        throw std::invalid_argument("phi_backward_diff: server out of range");
    if (x_n < 1)
        throw std::invalid_argument("phi_backward_diff: x must be >= 1");
    const int p = basis.per_server_count();
    std::vector<double> out(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j)
        out[j] = basis_value(basis.at(server, j), static_cast<double>(x_n) - 1.0) -
                 basis_value(basis.at(server, j), static_cast<double>(x_n));
    return out;
}

enum class RegularityScope { HighestOnly, AllBases };

struct RegularityWitness {
    int server = 0;
    int basis_index = 0;
    int x = 0;
};

/// Result of the executable regularity check: derivative bound estimate,
/// the threshold b_l past which the drift-side condition holds on the checked
/// window, and the largest feasible margin eps_w.
struct BasisRegularityReport {
    double b_de = 0.0;
    int b_l = -1;
    double eps_w = 0.0;
    RegularityScope scope = RegularityScope::HighestOnly;
    int x_max = 0;
    bool pass = false;
    std::optional<RegularityWitness> witness;
};

/// Certify (lambda/sum_mu - 1) * phi'_{n,j}(x) + 4*b_de <= -eps_w for all
/// x >= b_l on the finite window [0, x_max]. b_de is the max of the second
/// and third derivatives of the h_index entries over x in [1, x_max]; the
/// x = 0 grid point is excluded there because fractional powers have
/// unbounded derivatives as x -> 0+ while the state space is integral.
inline BasisRegularityReport check_basis_regularity(const BasisSpec& basis,
                                           const SystemConfig& config, int x_max,
                                           RegularityScope scope) {
    basis.validate();
    config.validate();
    if (x_max < 1) throw std::invalid_argument("check_basis_regularity: x_max must be >= 1");

    BasisRegularityReport report;
    report.scope = scope;
    report.x_max = x_max;

    const int n_servers = basis.n_servers();
    const int p = basis.per_server_count();

    double b_de = 0.0;
    for (int n = 0; n < n_servers; ++n)
        for (int x = 1; x <= x_max; ++x) {
            b_de = std::max(b_de, basis_deriv(basis.at(n, basis.h_index), 2,
                                              static_cast<double>(x)));
            b_de = std::max(b_de, basis_deriv(basis.at(n, basis.h_index), 3,
                                              static_cast<double>(x)));
        }
    report.b_de = b_de;

    const double coef = config.lambda / config.total_mu() - 1.0;
    if (coef >= 0.0) {
        // Non-negative leading coefficient: the left side is >= 4*b_de >= 0
        // for every x, so no positive margin exists.
        report.pass = false;
        report.witness = RegularityWitness{0, basis.h_index, x_max};
        return report;
    }

    // m(x) = worst left-hand side over the checked (n, j) set at x.
    std::vector<double> m(static_cast<std::size_t>(x_max) + 1,
                          -std::numeric_limits<double>::infinity());
    std::vector<RegularityWitness> argmax(static_cast<std::size_t>(x_max) + 1);
    for (int x = 0; x <= x_max; ++x) {
        for (int n = 0; n < n_servers; ++n)
            for (int j = 0; j < p; ++j) {
                if (scope == RegularityScope::HighestOnly && j != basis.h_index)
                    continue;
                const double d1 = basis_deriv(basis.at(n, j), 1, static_cast<double>(x));
                const double lhs = coef * d1 + 4.0 * b_de;
                if (lhs > m[x]) {
                    m[x] = lhs;
                    argmax[x] = RegularityWitness{n, j, x};
                }
            }
    }

    // Smallest b_l whose suffix maximum is strictly negative.
    double suffix = -std::numeric_limits<double>::infinity();
    int best_bl = -1;
    double best_eps = 0.0;
    std::vector<double> suffix_max(static_cast<std::size_t>(x_max) + 1);
    for (int x = x_max; x >= 0; --x) {
        suffix = std::max(suffix, m[x]);
        suffix_max[x] = suffix;
    }
    for (int x = 0; x <= x_max; ++x) {
        if (suffix_max[x] < 0.0) {
            best_bl = x;
            best_eps = -suffix_max[x];
            break;
        }
    }

    if (best_bl >= 0) {
        report.pass = true;
        report.b_l = best_bl;
        report.eps_w = best_eps;
    } else {
        report.pass = false;
        int x_fail = x_max;
        while (x_fail > 0 && m[x_fail] < 0.0) --x_fail;
        report.witness = argmax[x_fail];
    }
    return report;
}

}  // namespace parq
