#pragma once

// Single-task and meta-level PAC-Bayes bounds.
//
// The meta bounds are written once as templates over the scalar type: `double`
// for certification and reports, `Var` for the differentiable training
// objectives. Both instantiations evaluate the same expression tree.

#include "pacmeta/autodiff.hpp"
#include "pacmeta/binary_kl.hpp"

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pacmeta {

enum class MetaBound { classic, seeger, lambda, quad, varia };
enum class SingleBound { mcallester, seeger, lambda, quad, varia };
enum class EpsVariant { half, full };

inline constexpr std::array<std::string_view, 5> kMetaBoundNames{"classic", "seeger", "lambda", "quad", "varia"};

inline std::string_view to_string(MetaBound b) { return kMetaBoundNames[static_cast<std::size_t>(b)]; }

inline MetaBound parse_meta_bound(std::string_view name) {
    for (std::size_t i = 0; i < kMetaBoundNames.size(); ++i)
        if (kMetaBoundNames[i] == name) return static_cast<MetaBound>(i);
    throw std::invalid_argument("unknown objective '" + std::string(name) +
                                "' (valid: classic, seeger, lambda, quad, varia)");
}

/// Single-task bound of the same family as a meta objective.
inline SingleBound single_family(MetaBound b) {
    switch (b) {
    case MetaBound::classic: return SingleBound::mcallester;
    case MetaBound::seeger: return SingleBound::seeger;
    case MetaBound::lambda: return SingleBound::lambda;
    case MetaBound::quad: return SingleBound::quad;
    case MetaBound::varia: return SingleBound::varia;
    }
    return SingleBound::mcallester;
}

struct BoundInputs {
    double emp_error = 0.0;
    double kl_task = 0.0;
    double kl_hyper = 0.0;
    std::size_t m = 2;
    std::size_t n = 2;
    double delta = 0.1;
    double lambda = 1.0;
};

struct BoundReport {
    double bound = 0.0;
    double empirical_term = 0.0;
    double task_complexity = 0.0;
    double meta_complexity = 0.0;
    std::vector<double> per_task; // per-task bound contribution: empirical + complexity

    double recomposed() const { return empirical_term + task_complexity + meta_complexity; }
};

class BoundError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---- shared pieces -------------------------------------------------------------

/// log(4 n sqrt(m) / delta): per-task confidence delta / (2n) inside log(2 sqrt(m) / delta_i).
inline double log_task_confidence(std::size_t n, std::size_t m, double delta) {
    return std::log(4.0 * static_cast<double>(n) * std::sqrt(static_cast<double>(m)) / delta);
}

inline double task_eps(double kl_task, double kl_hyper, std::size_t m, std::size_t n, double delta,
                       EpsVariant variant) {
    const double numer = kl_hyper + kl_task + log_task_confidence(n, m, delta);
    const double scale = variant == EpsVariant::half ? 2.0 * static_cast<double>(m) : static_cast<double>(m);
    return numer / scale;
}

inline void check_env(std::size_t n, double delta) {
    if (n < 2) throw BoundError("environment term needs n >= 2 tasks, got " + std::to_string(n));
    if (!(delta > 0.0 && delta <= 1.0)) throw BoundError("delta must lie in (0,1], got " + std::to_string(delta));
}

/// sqrt((kl_hyper + log(2n/delta)) / (2(n-1))).
template <class S>
S env_term_generic(const S& kl_hyper, std::size_t n, double delta) {
    using std::sqrt;
    const double nd = static_cast<double>(n);
    return sqrt((kl_hyper + std::log(2.0 * nd / delta)) / (2.0 * (nd - 1.0)));
}

inline double env_term(double kl_hyper, std::size_t n, double delta) {
    check_env(n, delta);
    return env_term_generic(kl_hyper, n, delta);
}

namespace detail {
inline double smin(double a, double b) { return a <= b ? a : b; }
inline Var smin(const Var& a, const Var& b) { return minimum(a, b); }
} // namespace detail

// ---- generic meta bound --------------------------------------------------------

template <class S>
struct TaskTerm {
    S emp;
    S kl_task;
    std::size_t m = 2;
};

template <class S>
struct MetaTerms {
    S bound;
    S empirical;
    S task;
    S meta;
    std::vector<S> per_task;
};

struct MetaSettings {
    std::size_t n = 2;          // number of training tasks in the environment
    double delta = 0.1;
    double lambda = 1.0;
    bool lambda_proof_form = false; // first-power (1 - lambda/2) denominators
};

/// Meta bound assembled from per-task terms. `tasks` may be a meta-batch
/// subset of the n tasks; per-task terms are averaged over what is given.
template <class S>
MetaTerms<S> meta_bound_terms(MetaBound which, std::span<const TaskTerm<S>> tasks, const S& kl_hyper,
                              const MetaSettings& cfg) {
    using std::sqrt;
    using std::log;
    if (tasks.empty()) throw BoundError("meta bound: no tasks");
    const double nd = static_cast<double>(cfg.n);
    const double half = 1.0 - cfg.lambda / 2.0;
    const double lambda_pow = cfg.lambda_proof_form ? half : half * half;

    std::vector<S> emp_part;
    std::vector<S> task_part;
    std::vector<S> per_task;
    for (const auto& t : tasks) {
        const double md = static_cast<double>(t.m);
        S emp_i = t.emp;
        S cx = emp_i; // overwritten by every case
        switch (which) {
        case MetaBound::classic: {
            const S c = kl_hyper + t.kl_task + std::log(2.0 * nd * md / cfg.delta);
            cx = sqrt(c / (2.0 * (md - 1.0)));
            break;
        }
        case MetaBound::seeger: {
            const S budget = (kl_hyper + t.kl_task + log_task_confidence(cfg.n, t.m, cfg.delta)) / md;
            cx = kl_inv_upper(t.emp, budget) - t.emp;
            break;
        }
        case MetaBound::lambda: {
            emp_i = t.emp / lambda_pow;
            const S c = kl_hyper + t.kl_task + log_task_confidence(cfg.n, t.m, cfg.delta);
            cx = c / (md * cfg.lambda * lambda_pow);
            break;
        }
        case MetaBound::quad: {
            const S eps = (kl_hyper + t.kl_task + log_task_confidence(cfg.n, t.m, cfg.delta)) / (2.0 * md);
            const S root = sqrt(t.emp + eps) + sqrt(eps);
            cx = root * root - t.emp;
            break;
        }
        case MetaBound::varia: {
            const S eps = (kl_hyper + t.kl_task + log_task_confidence(cfg.n, t.m, cfg.delta)) / md;
            cx = detail::smin(eps + sqrt(eps * (eps + 2.0 * t.emp)), sqrt(eps / 2.0));
            break;
        }
        }
        per_task.push_back(emp_i + cx);
        emp_part.push_back(std::move(emp_i));
        task_part.push_back(std::move(cx));
    }

    auto average = [](const std::vector<S>& v) {
        S acc = v[0];
        for (std::size_t i = 1; i < v.size(); ++i) acc = acc + v[i];
        return acc / static_cast<double>(v.size());
    };

    MetaTerms<S> out;
    out.empirical = average(emp_part);
    out.task = average(task_part);
    out.meta = env_term_generic(kl_hyper, cfg.n, cfg.delta);
    out.bound = out.empirical + out.task + out.meta;
    out.per_task = std::move(per_task);
    return out;
}

// ---- certified (double) API ------------------------------------------------------

namespace detail {

inline void validate_inputs(std::span<const BoundInputs> inputs, bool lambda_used) {
    if (inputs.empty()) throw BoundError("meta bound: empty task list");
    const auto& first = inputs.front();
    check_env(first.n, first.delta);
    if (inputs.size() != first.n) {
        throw BoundError("meta bound: task list has " + std::to_string(inputs.size()) + " entries but n = " +
                         std::to_string(first.n));
    }
    if (!(first.kl_hyper >= 0.0)) throw BoundError("meta bound: kl_hyper must be nonnegative");
    if (lambda_used && !(first.lambda > 0.0 && first.lambda < 2.0)) {
        throw BoundError("lambda must lie in (0,2), got " + std::to_string(first.lambda));
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& in = inputs[i];
        const std::string tag = "task " + std::to_string(i) + ": ";
        if (!(in.emp_error >= 0.0 && in.emp_error <= 1.0)) throw BoundError(tag + "emp_error must lie in [0,1]");
        if (!(in.kl_task >= 0.0)) throw BoundError(tag + "kl_task must be nonnegative");
        if (in.m < 2) throw BoundError(tag + "m must be at least 2");
        if (in.n != first.n || in.delta != first.delta || in.kl_hyper != first.kl_hyper ||
            (lambda_used && in.lambda != first.lambda)) {
            throw BoundError(tag + "n, delta, kl_hyper and lambda must be shared across tasks");
        }
    }
}

inline BoundReport to_report(const MetaTerms<double>& t) {
    return BoundReport{t.bound, t.empirical, t.task, t.meta, t.per_task};
}

} // namespace detail

inline BoundReport meta_bound(MetaBound which, std::span<const BoundInputs> inputs, bool lambda_proof_form = false) {
    detail::validate_inputs(inputs, which == MetaBound::lambda);
    std::vector<TaskTerm<double>> tasks;
    for (const auto& in : inputs) tasks.push_back({in.emp_error, in.kl_task, in.m});
    const auto& first = inputs.front();
    const MetaSettings cfg{first.n, first.delta, first.lambda, lambda_proof_form};
    return detail::to_report(meta_bound_terms<double>(which, tasks, first.kl_hyper, cfg));
}

inline BoundReport meta_bound_classic(std::span<const BoundInputs> inputs) {
    return meta_bound(MetaBound::classic, inputs);
}
inline BoundReport meta_bound_seeger(std::span<const BoundInputs> inputs) {
    return meta_bound(MetaBound::seeger, inputs);
}
inline BoundReport meta_bound_quad(std::span<const BoundInputs> inputs) { return meta_bound(MetaBound::quad, inputs); }
inline BoundReport meta_bound_varia(std::span<const BoundInputs> inputs) {
    return meta_bound(MetaBound::varia, inputs);
}

inline BoundReport meta_bound_lambda(std::span<const BoundInputs> inputs, double lambda, bool proof_form = false) {
    std::vector<BoundInputs> copy(inputs.begin(), inputs.end());
    for (auto& in : copy) in.lambda = lambda;
    return meta_bound(MetaBound::lambda, copy, proof_form);
}

/// Data-dependent-prior bound: the classic form, where every m_i counts only the
/// samples outside the prior split and kl_hyper is taken against the ERM-centered
/// hyper-posterior. The caller supplies inputs computed that way.
inline BoundReport meta_bound_ddprior(std::span<const BoundInputs> inputs) {
    return meta_bound(MetaBound::classic, inputs);
}

/// Lambda bound minimized over the grid {0.25, 0.5, ..., 1.75}. Report-time only.
inline std::pair<double, BoundReport> meta_bound_lambda_grid(std::span<const BoundInputs> inputs,
                                                             bool proof_form = false) {
    std::pair<double, BoundReport> best{0.0, {}};
    bool have = false;
    for (int k = 1; k <= 7; ++k) {
        const double lam = 0.25 * k;
        BoundReport r = meta_bound_lambda(inputs, lam, proof_form);
        if (!have || r.bound < best.second.bound) {
            best = {lam, std::move(r)};
            have = true;
        }
    }
    return best;
}

// ---- single-task bounds -----------------------------------------------------------

template <class S>
S single_task_bound_generic(SingleBound which, const S& emp, const S& kl, std::size_t m, double delta,
                            double lambda = 1.0) {
    using std::sqrt;
    const double md = static_cast<double>(m);
    const double conf = std::log(2.0 * std::sqrt(md) / delta);
    switch (which) {
    case SingleBound::mcallester:
        return emp + sqrt((kl + std::log(md / delta)) / (2.0 * (md - 1.0)));
    case SingleBound::seeger:
        return kl_inv_upper(emp, (kl + conf) / md);
    case SingleBound::lambda: {
        const double half = 1.0 - lambda / 2.0;
        return emp / half + (kl + conf) / (md * lambda * half);
    }
    case SingleBound::quad: {
        const S eps = (kl + conf) / (2.0 * md);
        const S root = sqrt(emp + eps) + sqrt(eps);
        return root * root;
    }
    case SingleBound::varia: {
        const S eps = (kl + conf) / md;
        return emp + detail::smin(eps + sqrt(eps * (eps + 2.0 * emp)), sqrt(eps / 2.0));
    }
    }
    throw BoundError("single-task bound: invalid selector");
}

inline double single_task_bound(SingleBound which, double emp, double kl, std::size_t m, double delta,
                                double lambda = 1.0) {
    if (!(emp >= 0.0 && emp <= 1.0)) throw BoundError("single-task bound: emp must lie in [0,1]");
    if (!(kl >= 0.0)) throw BoundError("single-task bound: kl must be nonnegative");
    if (!(delta > 0.0 && delta <= 1.0)) throw BoundError("single-task bound: delta must lie in (0,1]");
    if (which == SingleBound::mcallester && m < 2) throw BoundError("single-task bound: m must be at least 2");
    if (m < 1) throw BoundError("single-task bound: m must be positive");
    if (which == SingleBound::lambda && !(lambda > 0.0 && lambda < 2.0)) {
        throw BoundError("single-task bound: lambda must lie in (0,2)");
    }
    return single_task_bound_generic<double>(which, emp, kl, m, delta, lambda);
}

} // namespace pacmeta
