#pragma once

// Meta-training with a random hyper-prior, and with an ERM-learned
// data-dependent prior, under the PAC-Bayes meta objectives.

#include "pacmeta/autodiff.hpp"
#include "pacmeta/bounds.hpp"
#include "pacmeta/envs.hpp"
#include "pacmeta/rng.hpp"
#include "pacmeta/stochnet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacmeta {

struct TrainConfig {
    MetaBound objective = MetaBound::classic;
    double lambda = 1.0;
    bool lambda_proof_form = false;
    double delta = 0.1;
    double kappa_p = 2000.0;
    double kappa_q = 0.001;
    KlHyperMode kl_hyper_mode = KlHyperMode::scalar;
    double lr = 1e-3;
    std::size_t meta_batch_tasks = 16;
    std::size_t data_batch = 128;
    std::size_t epochs = 20;
    double prior_fraction = 0.0;
    std::size_t prior_epochs = 5;
    std::size_t mc_train_samples = 1;
    std::size_t mc_eval_samples = 30;
    std::size_t trace_mc_samples = 1;
    double p_min = 1e-4;
    std::uint64_t seed = 0;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t eval_epochs = 10; // test-phase adaptation epochs

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
        if (!(lambda > 0.0 && lambda < 2.0)) fail("lambda must lie in (0,2)");
        if (!(delta > 0.0 && delta <= 1.0)) fail("delta must lie in (0,1]");
        if (!(kappa_p > 0.0)) fail("kappa_p must be positive");
        if (!(kappa_q > 0.0)) fail("kappa_q must be positive");
        if (!(lr >= 0.0)) fail("lr must be nonnegative");
        if (meta_batch_tasks < 1) fail("meta_batch_tasks must be >= 1");
        if (data_batch < 1) fail("data_batch must be >= 1");
        if (!(prior_fraction >= 0.0 && prior_fraction < 1.0)) fail("prior_fraction must lie in [0,1)");
        if (mc_train_samples < 1) fail("mc_train_samples must be >= 1");
        if (mc_eval_samples < 1) fail("mc_eval_samples must be >= 1");
        if (trace_mc_samples < 1) fail("trace_mc_samples must be >= 1");
        if (!(p_min > 0.0 && p_min < 1.0)) fail("p_min must lie in (0,1)");
        for (std::size_t h : hidden)
            if (h == 0) fail("hidden widths must be positive");
    }

    MetaSettings meta_settings(std::size_t n_tasks) const { return {n_tasks, delta, lambda, lambda_proof_form}; }

    HyperConfig hyper(std::size_t n_params) const { return {kappa_p, kappa_q, n_params}; }

    Architecture architecture(std::size_t n_inputs, std::size_t n_classes) const {
        Architecture arch;
        arch.widths.push_back(n_inputs);
        arch.widths.insert(arch.widths.end(), hidden.begin(), hidden.end());
        arch.widths.push_back(n_classes);
        return arch;
    }
};

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& term)
        : std::runtime_error("training diverged: non-finite " + term), term_(term) {}
    const std::string& term() const { return term_; }

private:
    std::string term_;
};

// ---- losses ------------------------------------------------------------------------

/// Cross-entropy clipped at log(1/p_min) and divided by it, averaged over rows.
inline Var bounded_ce_loss(const Var& log_probs, const std::vector<std::size_t>& labels, double p_min) {
    const double cap = std::log(1.0 / p_min);
    return scale(mean(clamp(neg(pick(log_probs, labels)), 0.0, cap)), 1.0 / cap);
}

inline double bounded_ce_loss(const Tensor& log_probs, std::span<const std::size_t> labels, double p_min) {
    const double cap = std::log(1.0 / p_min);
    const std::size_t k = log_probs.dim(1);
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) s += std::clamp(-log_probs[i * k + labels[i]], 0.0, cap);
    return s / (cap * static_cast<double>(labels.size()));
}

/// Fraction of rows whose argmax differs from the label; ties go to the lowest index.
inline double zero_one_error(const Tensor& log_probs, std::span<const std::size_t> labels) {
    const std::size_t k = log_probs.dim(1);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* row = log_probs.data().data() + i * k;
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (row[c] > row[best]) best = c;
        wrong += best != labels[i];
    }
    return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

// ---- Adam --------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
            throw ShapeError("adam_step: parameter " + std::to_string(i) + " has shape " +
                             to_string(params[i]->shape()) + " but gradient " + to_string(grads[i].shape()));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        const Tensor& g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
        }
    }
}

inline std::vector<Tensor*> param_tensors(StochasticNet& net) {
    std::vector<Tensor*> out;
    for (auto& layer : net.layers()) {
        out.push_back(&layer.mu);
        out.push_back(&layer.log_var);
    }
    return out;
}

inline std::vector<Tensor> param_grads(const Gradients& grads, const NetVars& vars) {
    std::vector<Tensor> out;
    for (const auto& layer : vars) {
        for (const Var* v : {&layer.mu, &layer.log_var}) {
            out.push_back(grads.has(*v) ? grads[*v] : Tensor(v->shape()));
        }
    }
    return out;
}

inline void apply_adam(StochasticNet& net, const Gradients& grads, const NetVars& vars, AdamState& state, double lr) {
    const auto g = param_grads(grads, vars);
    const auto p = param_tensors(net);
    adam_step(p, g, state, lr);
}

// ---- one meta-iteration ------------------------------------------------------------

struct TaskBatch {
    Tensor x;
    std::vector<std::size_t> y;
    std::size_t m = 2; // samples the bound is taken over for this task
};

/// All randomness of one meta-iteration, drawn up front so the objective is a
/// deterministic function of (parameters, batches, noise).
struct StepNoise {
    Weights center;                            // eps_P ~ N(0, kappa_q^2 I)
    std::vector<std::vector<Weights>> weights; // [task][mc sample] standard normal
};

inline StepNoise draw_step_noise(const StochasticNet& theta, std::size_t n_batch_tasks, std::size_t mc_samples,
                                 double kappa_q, Rng& rng) {
    StepNoise noise;
    noise.center = draw_center_noise(theta, kappa_q, rng);
    noise.weights.resize(n_batch_tasks);
    for (auto& per_task : noise.weights)
        for (std::size_t s = 0; s < mc_samples; ++s) per_task.push_back(draw_standard_noise(theta, rng));
    return noise;
}

struct MetaObjective {
    NetVars theta;
    std::vector<NetVars> posteriors;
    Var kl_hyper;
    std::vector<Var> emp;
    std::vector<Var> kl_task;
    MetaTerms<Var> terms;
};

/// Builds the meta objective on `tape` for the given meta-batch.
inline MetaObjective build_meta_objective(Tape& tape, const StochasticNet& theta,
                                          std::span<const StochasticNet* const> posteriors,
                                          std::span<const TaskBatch> batches, const StepNoise& noise,
                                          const TrainConfig& cfg, std::size_t n_tasks) {
    if (posteriors.size() != batches.size() || noise.weights.size() != batches.size()) {
        throw std::invalid_argument("meta objective: posterior/batch/noise counts differ");
    }
    MetaObjective obj;
    obj.theta = track(tape, theta);
    const NetVars prior = perturb_center(obj.theta, noise.center);
    obj.kl_hyper = kl_hyper(obj.theta, cfg.hyper(theta.n_params()), cfg.kl_hyper_mode);

    std::vector<TaskTerm<Var>> task_terms;
    for (std::size_t i = 0; i < batches.size(); ++i) {
        NetVars phi = track(tape, *posteriors[i]);
        const Var xb = tape.constant(batches[i].x);
        Var emp;
        for (const Weights& eps : noise.weights[i]) {
            const Var loss = bounded_ce_loss(predict(theta.arch(), sample_weights(phi, eps), xb), batches[i].y,
                                             cfg.p_min);
            emp = emp.valid() ? emp + loss : loss;
        }
        emp = scale(emp, 1.0 / static_cast<double>(noise.weights[i].size()));
        const Var kl = kl_factorized_gaussian(phi, prior);
        obj.emp.push_back(emp);
        obj.kl_task.push_back(kl);
        task_terms.push_back({emp, kl, batches[i].m});
        obj.posteriors.push_back(std::move(phi));
    }
    obj.terms = meta_bound_terms<Var>(cfg.objective, task_terms, obj.kl_hyper, cfg.meta_settings(n_tasks));
    return obj;
}

inline void check_finite(const MetaObjective& obj) {
    if (!std::isfinite(obj.kl_hyper.item())) throw DivergenceError("kl_hyper");
    for (std::size_t i = 0; i < obj.emp.size(); ++i) {
        if (!std::isfinite(obj.emp[i].item())) throw DivergenceError("empirical loss of task " + std::to_string(i));
        if (!std::isfinite(obj.kl_task[i].item())) throw DivergenceError("kl_task of task " + std::to_string(i));
    }
    if (!std::isfinite(obj.terms.task.item())) throw DivergenceError("task complexity");
    if (!std::isfinite(obj.terms.meta.item())) throw DivergenceError("meta complexity");
    if (!std::isfinite(obj.terms.bound.item())) throw DivergenceError("objective");
}

// ---- evaluation of the certified training bound ---------------------------------------

struct TraceRow {
    std::size_t epoch = 0;
    double objective = 0.0;
    double bound = 0.0;
    double empirical_term = 0.0;
    double task_complexity = 0.0;
    double meta_complexity = 0.0;
    double train_error = 0.0;
    std::string phase; // "prior" (ERM phase) or "meta"
};

struct MetaEvaluation {
    BoundReport report;
    std::vector<BoundInputs> inputs;
    double train_loss = 0.0;  // mean bounded loss over tasks
    double train_error = 0.0; // mean zero-one error over tasks
};

struct StochasticScores {
    double loss = 0.0;
    double error = 0.0;
};

/// Monte-Carlo bounded loss and zero-one error of a stochastic net on rows `idx`.
inline StochasticScores stochastic_scores(const StochasticNet& net, const TaskDataset& task,
                                          std::span<const std::size_t> idx, std::size_t samples, double p_min,
                                          Rng& rng) {
    const Tensor x = task.rows(idx);
    const auto y = task.labels(idx);
    StochasticScores out;
    for (std::size_t s = 0; s < samples; ++s) {
        const Tensor lp = predict(net.arch(), sample_weights(net, rng), x);
        out.loss += bounded_ce_loss(lp, y, p_min);
        out.error += zero_one_error(lp, y);
    }
    out.loss /= static_cast<double>(samples);
    out.error /= static_cast<double>(samples);
    return out;
}

/// Certified meta bound of (theta, posteriors) on each task's bound split.
/// Task KLs use the closed-form expectation over priors drawn from the hyper-posterior.
inline MetaEvaluation evaluate_meta(const StochasticNet& theta, std::span<const StochasticNet> posteriors,
                                    std::span<const TaskDataset> tasks, const TrainConfig& cfg,
                                    std::size_t mc_samples, Rng& rng) {
    MetaEvaluation ev;
    const double klh = kl_hyper(theta, cfg.hyper(theta.n_params()), cfg.kl_hyper_mode);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto scores = stochastic_scores(posteriors[i], tasks[i], tasks[i].bound_idx, mc_samples, cfg.p_min, rng);
        BoundInputs in;
        in.emp_error = scores.loss;
        in.kl_task = expected_kl_factorized_gaussian(posteriors[i], theta, cfg.kappa_q);
        in.kl_hyper = klh;
        in.m = tasks[i].bound_idx.size();
        in.n = tasks.size();
        in.delta = cfg.delta;
        in.lambda = cfg.lambda;
        ev.inputs.push_back(in);
        ev.train_loss += scores.loss;
        ev.train_error += scores.error;
    }
    ev.train_loss /= static_cast<double>(tasks.size());
    ev.train_error /= static_cast<double>(tasks.size());
    ev.report = meta_bound(cfg.objective, ev.inputs, cfg.lambda_proof_form);
    return ev;
}

inline TraceRow trace_row(std::size_t epoch, double objective, const MetaEvaluation& ev, std::string phase) {
    return TraceRow{epoch,
                    objective,
                    ev.report.bound,
                    ev.report.empirical_term,
                    ev.report.task_complexity,
                    ev.report.meta_complexity,
                    ev.train_error,
                    std::move(phase)};
}

// ---- training loops ------------------------------------------------------------------

struct MetaTrainResult {
    StochasticNet theta;
    std::vector<StochasticNet> posteriors;
    std::vector<TraceRow> trace;
    MetaEvaluation final_eval;
};

namespace detail {
inline constexpr std::uint64_t kInitSalt = 0x7e1a0001;
inline constexpr std::uint64_t kTrainSalt = 0x7e1a0002;
inline constexpr std::uint64_t kEvalSalt = 0x7e1a0003;
inline constexpr std::uint64_t kErmSalt = 0x7e1a0004;

// Cycles through a shuffled index pool, reshuffling whenever it wraps.
class BatchCursor {
public:
    BatchCursor(std::vector<std::size_t> pool, Rng& rng) : pool_(std::move(pool)) { rng.shuffle(pool_); }

    std::vector<std::size_t> next(std::size_t size, Rng& rng) {
        std::vector<std::size_t> out;
        const std::size_t take = std::min(size, pool_.size());
        while (out.size() < take) {
            if (pos_ == pool_.size()) {
                rng.shuffle(pool_);
                pos_ = 0;
            }
            out.push_back(pool_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> pool_;
    std::size_t pos_ = 0;
};

inline void require_tasks(std::span<const TaskDataset> tasks) {
    if (tasks.size() < 2) throw std::invalid_argument("meta_train: needs at least 2 training tasks");
    for (const auto& t : tasks) {
        if (t.bound_idx.size() < 2) throw std::invalid_argument("meta_train: every task needs >= 2 bound samples");
        if (t.n_features() != tasks.front().n_features() || t.n_classes != tasks.front().n_classes) {
            throw std::invalid_argument("meta_train: tasks disagree on feature or class count");
        }
    }
}
} // namespace detail

/// Fresh hyper-posterior center for the tasks' input/output sizes.
inline StochasticNet initial_theta(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
    Rng rng{cfg.seed, detail::kInitSalt};
    return init_stochastic_net(cfg.architecture(tasks.front().n_features(), tasks.front().n_classes), rng);
}

/// Meta-training from a given center. `first_epoch` offsets trace epoch numbers.
inline MetaTrainResult meta_train_from(std::span<const TaskDataset> tasks, const TrainConfig& cfg, StochasticNet theta,
                                       std::size_t first_epoch = 1) {
    cfg.validate();
    detail::require_tasks(tasks);
    const std::size_t n = tasks.size();
    Rng rng{cfg.seed, detail::kTrainSalt};

    MetaTrainResult res;
    res.posteriors.assign(n, theta); // warm start at the prior
    AdamState theta_state;
    std::vector<AdamState> phi_state(n);
    std::vector<detail::BatchCursor> cursors;
    for (const auto& t : tasks) cursors.emplace_back(t.bound_idx, rng);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);
        double objective_sum = 0.0;
        std::size_t iterations = 0;
        for (std::size_t start = 0; start < n; start += cfg.meta_batch_tasks) {
            std::vector<std::size_t> group(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + cfg.meta_batch_tasks)));
            std::sort(group.begin(), group.end());
            std::size_t pool = 0;
            for (std::size_t i : group) pool = std::max(pool, tasks[i].bound_idx.size());
            const std::size_t steps = (pool + cfg.data_batch - 1) / cfg.data_batch;
            for (std::size_t step = 0; step < steps; ++step) {
                std::vector<TaskBatch> batches;
                std::vector<const StochasticNet*> phis;
                for (std::size_t i : group) {
                    const auto idx = cursors[i].next(cfg.data_batch, rng);
                    batches.push_back({tasks[i].rows(idx), tasks[i].labels(idx), tasks[i].bound_idx.size()});
                    phis.push_back(&res.posteriors[i]);
                }
                const StepNoise noise = draw_step_noise(theta, group.size(), cfg.mc_train_samples, cfg.kappa_q, rng);
                Tape tape;
                const MetaObjective obj = build_meta_objective(tape, theta, phis, batches, noise, cfg, n);
                check_finite(obj);
                const Gradients grads = tape.backward(obj.terms.bound);
                apply_adam(theta, grads, obj.theta, theta_state, cfg.lr);
                for (std::size_t g = 0; g < group.size(); ++g) {
                    apply_adam(res.posteriors[group[g]], grads, obj.posteriors[g], phi_state[group[g]], cfg.lr);
                }
                objective_sum += obj.terms.bound.item();
                ++iterations;
            }
        }
        Rng eval_rng{cfg.seed, detail::kEvalSalt, first_epoch + epoch};
        const MetaEvaluation ev = evaluate_meta(theta, res.posteriors, tasks, cfg, cfg.trace_mc_samples, eval_rng);
        res.trace.push_back(trace_row(first_epoch + epoch, objective_sum / static_cast<double>(std::max<std::size_t>(iterations, 1)), ev, "meta"));
    }

    Rng final_rng{cfg.seed, detail::kEvalSalt, 0};
    res.final_eval = evaluate_meta(theta, res.posteriors, tasks, cfg, cfg.mc_eval_samples, final_rng);
    res.theta = std::move(theta);
    return res;
}

/// Meta-training with a randomly initialized hyper-posterior center.
inline MetaTrainResult meta_train(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
    detail::require_tasks(tasks);
    return meta_train_from(tasks, cfg, initial_theta(tasks, cfg));
}

/// Minimizes the Monte-Carlo bounded loss of P_theta on the pooled prior splits.
/// Both means and log-variances are trained. When `trace` is given, each epoch
/// appends the meta bound obtained by taking every posterior equal to theta.
inline StochasticNet erm_prior(std::span<const TaskDataset> tasks, const TrainConfig& cfg, StochasticNet theta,
                               std::vector<TraceRow>* trace = nullptr) {
    cfg.validate();
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t].prior_idx.empty()) {
            throw std::invalid_argument("erm_prior: task " + std::to_string(t) + " has an empty prior split");
        }
        for (std::size_t i : tasks[t].prior_idx) pool.emplace_back(t, i);
    }
    Rng rng{cfg.seed, detail::kErmSalt};
    AdamState state;
    const std::size_t d = tasks.front().n_features();
    for (std::size_t epoch = 0; epoch < cfg.prior_epochs; ++epoch) {
        rng.shuffle(pool);
        double loss_sum = 0.0;
        std::size_t iterations = 0;
        for (std::size_t start = 0; start < pool.size(); start += cfg.data_batch) {
            const std::size_t end = std::min(pool.size(), start + cfg.data_batch);
            Tensor x(Shape{end - start, d});
            std::vector<std::size_t> y;
            for (std::size_t r = start; r < end; ++r) {
                const auto& [t, i] = pool[r];
                const double* src = tasks[t].x.data().data() + i * d;
                std::copy(src, src + d, x.data().data() + (r - start) * d);
                y.push_back(tasks[t].y[i]);
            }
            Tape tape;
            const NetVars vars = track(tape, theta);
            const Var xb = tape.constant(std::move(x));
            Var loss;
            for (std::size_t s = 0; s < cfg.mc_train_samples; ++s) {
                const Var l = bounded_ce_loss(predict(theta.arch(), sample_weights(vars, draw_standard_noise(theta, rng)), xb), y, cfg.p_min);
                loss = loss.valid() ? loss + l : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(cfg.mc_train_samples));
            if (!std::isfinite(loss.item())) throw DivergenceError("ERM prior loss");
            const Gradients grads = tape.backward(loss);
            apply_adam(theta, grads, vars, state, cfg.lr);
            loss_sum += loss.item();
            ++iterations;
        }
        if (trace) {
            Rng eval_rng{cfg.seed, detail::kEvalSalt, epoch + 1};
            const std::vector<StochasticNet> same(tasks.size(), theta);
            const MetaEvaluation ev = evaluate_meta(theta, same, tasks, cfg, cfg.trace_mc_samples, eval_rng);
            trace->push_back(trace_row(epoch + 1, loss_sum / static_cast<double>(std::max<std::size_t>(iterations, 1)), ev, "prior"));
        }
    }
    return theta;
}

/// ERM prior on the R_i splits, then meta-training on S_i minus R_i starting
/// from the learned center.
inline MetaTrainResult meta_train_ddprior(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
    if (!(cfg.prior_fraction > 0.0)) {
        throw std::invalid_argument("meta_train_ddprior: prior_fraction must be positive (use meta_train)");
    }
    detail::require_tasks(tasks);
    std::vector<TraceRow> trace;
    StochasticNet theta = erm_prior(tasks, cfg, initial_theta(tasks, cfg), &trace);
    MetaTrainResult res = meta_train_from(tasks, cfg, std::move(theta), cfg.prior_epochs + 1);
    trace.insert(trace.end(), res.trace.begin(), res.trace.end());
    res.trace = std::move(trace);
    return res;
}

/// Dispatches on prior_fraction.
inline MetaTrainResult run_meta_training(std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
    return cfg.prior_fraction > 0.0 ? meta_train_ddprior(tasks, cfg) : meta_train(tasks, cfg);
}

} // namespace pacmeta
