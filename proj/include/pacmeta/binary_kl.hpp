#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace pacmeta {

/// KL divergence between Bernoulli(q) and Bernoulli(q_prime), with 0 log 0 = 0.
inline double binary_kl(double q, double q_prime) {
    if (!(q >= 0.0 && q <= 1.0)) {
        throw std::invalid_argument("binary_kl: q must lie in [0,1], got " + std::to_string(q));
    }
    if (!(q_prime >= 0.0 && q_prime <= 1.0)) {
        throw std::invalid_argument("binary_kl: q_prime must lie in [0,1], got " +
                                    std::to_string(q_prime));
    }
    if (q_prime == 0.0 || q_prime == 1.0) {
        if (q == q_prime) return 0.0;
        throw std::invalid_argument("binary_kl: q_prime on the boundary requires q == q_prime");
    }
    double out = 0.0;
    if (q > 0.0) out += q * std::log(q / q_prime);
    if (q < 1.0) out += (1.0 - q) * std::log((1.0 - q) / (1.0 - q_prime));
    // Rounding can push the sum a hair below zero when q is close to q_prime.
    return out > 0.0 ? out : 0.0;
}

/// Largest p in [q_hat, 1] with binary_kl(q_hat, p) <= budget.
///
/// Bisection runs until the bracket stops shrinking in double precision, so
/// binary_kl(q_hat, result) sits just below the budget. Returns exactly 1 when
/// the root lies past the last double below 1.
inline double kl_inv_upper(double q_hat, double budget) {
    if (!(q_hat >= 0.0 && q_hat <= 1.0)) {
        throw std::invalid_argument("kl_inv_upper: q_hat must lie in [0,1], got " +
                                    std::to_string(q_hat));
    }
    if (!(budget >= 0.0)) {
        throw std::invalid_argument("kl_inv_upper: budget must be nonnegative, got " +
                                    std::to_string(budget));
    }
    if (q_hat >= 1.0) return 1.0;
    if (budget == 0.0) return q_hat;
    if (std::isinf(budget)) return 1.0;
    // No representable root below 1: saturate.
    if (binary_kl(q_hat, std::nextafter(1.0, 0.0)) <= budget) return 1.0;

    double lo = q_hat;
    double hi = 1.0;
    for (int iter = 0; iter < 2000; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (binary_kl(q_hat, mid) <= budget) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return lo;
}

} // namespace pacmeta
