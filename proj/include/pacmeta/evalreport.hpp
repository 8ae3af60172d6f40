#pragma once

// Test-phase adaptation on new tasks, certified single-task bounds, and the
// CSV tables and trend files.

#include "pacmeta/metatrain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacmeta {

// ---- statistics ----------------------------------------------------------------------

struct Interval {
    double mean = 0.0;
    double halfwidth = 0.0;
};

/// mean +- 1.96 s / sqrt(n), s with the n-1 denominator. Values are sorted
/// before summation, so the result does not depend on input order.
inline Interval confidence_interval(std::span<const double> values) {
    if (values.size() < 2) throw std::invalid_argument("confidence_interval: needs at least 2 values");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

inline double mean_of(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("mean_of: empty list");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

/// Mean log-variance of each layer.
inline std::vector<double> layer_variance_profile(const StochasticNet& net) {
    std::vector<double> out;
    for (const auto& layer : net.layers()) {
        const auto& lv = layer.log_var.data();
        out.push_back(std::accumulate(lv.begin(), lv.end(), 0.0) / static_cast<double>(lv.size()));
    }
    return out;
}

// ---- test phase ----------------------------------------------------------------------

struct TaskOutcome {
    StochasticNet prior;
    StochasticNet posterior;
    double emp_error = 0.0; // zero-one error on the samples the bound is taken over
    double kl = 0.0;
    std::size_t m = 0;
    double test_bound = 0.0;
    double test_loss = 0.0;
    double test_error = 0.0;
};

namespace detail {
inline constexpr std::uint64_t kAdaptSalt = 0x7e1a0101;
inline constexpr std::uint64_t kScoreSalt = 0x7e1a0102;
} // namespace detail

/// Learns a posterior for a new task starting from theta, minimizing the
/// single-task bound of the family that matches cfg.objective, and certifies it.
/// With a positive prior_fraction and a nonempty prior split, the prior is first
/// refined on that split by ERM and the bound is taken over the remaining samples.
inline TaskOutcome adapt_new_task(const StochasticNet& theta, const TaskDataset& task, const TrainConfig& cfg) {
    cfg.validate();
    if (task.test_idx.empty()) throw std::invalid_argument("adapt_new_task: empty test split");
    if (task.train_idx.size() < 2) throw std::invalid_argument("adapt_new_task: needs at least 2 training samples");
    const bool dd = cfg.prior_fraction > 0.0 && !task.prior_idx.empty();

    TaskOutcome out;
    if (dd) {
        TrainConfig erm_cfg = cfg;
        erm_cfg.seed = cfg.seed ^ (task.task_index * 0x9e3779b97f4a7c15ULL);
        out.prior = erm_prior(std::span<const TaskDataset>(&task, 1), erm_cfg, theta);
    } else {
        out.prior = theta;
    }
    const std::vector<std::size_t>& pool = dd ? task.bound_idx : task.train_idx;
    out.m = pool.size();
    const SingleBound family = single_family(cfg.objective);

    Rng rng{cfg.seed, detail::kAdaptSalt, task.task_index};
    StochasticNet phi = out.prior;
    AdamState state;
    detail::BatchCursor cursor(pool, rng);
    const std::size_t steps = (pool.size() + cfg.data_batch - 1) / cfg.data_batch;
    for (std::size_t epoch = 0; epoch < cfg.eval_epochs; ++epoch) {
        for (std::size_t s = 0; s < steps; ++s) {
            const auto idx = cursor.next(cfg.data_batch, rng);
            Tape tape;
            const NetVars q = track(tape, phi);
            const NetVars p = track(tape, out.prior, false);
            const Var xb = tape.constant(task.rows(idx));
            const auto yb = task.labels(idx);
            Var emp;
            for (std::size_t k = 0; k < cfg.mc_train_samples; ++k) {
                const Var l = bounded_ce_loss(predict(phi.arch(), sample_weights(q, draw_standard_noise(phi, rng)), xb), yb, cfg.p_min);
                emp = emp.valid() ? emp + l : l;
            }
            emp = scale(emp, 1.0 / static_cast<double>(cfg.mc_train_samples));
            const Var kl = kl_factorized_gaussian(q, p);
            const Var obj = single_task_bound_generic<Var>(family, emp, kl, out.m, cfg.delta, cfg.lambda);
            if (!std::isfinite(obj.item())) throw DivergenceError("test-phase objective");
            const Gradients grads = tape.backward(obj);
            apply_adam(phi, grads, q, state, cfg.lr);
        }
    }

    Rng score_rng{cfg.seed, detail::kScoreSalt, task.task_index};
    out.emp_error = stochastic_scores(phi, task, pool, cfg.mc_eval_samples, cfg.p_min, score_rng).error;
    out.kl = kl_factorized_gaussian(phi, out.prior);
    out.test_bound = single_task_bound(family, out.emp_error, out.kl, out.m, cfg.delta, cfg.lambda);
    const auto test = stochastic_scores(phi, task, task.test_idx, cfg.mc_eval_samples, cfg.p_min, score_rng);
    out.test_loss = test.loss;
    out.test_error = test.error;
    out.posterior = std::move(phi);
    return out;
}

struct TestResult {
    std::vector<double> test_bound;
    std::vector<double> test_loss;
    std::vector<double> test_error;
    Interval bound_ci;
    Interval loss_ci;
    Interval error_ci;

    std::size_t size() const { return test_bound.size(); }

    /// Fraction of tasks whose test error exceeds the certified bound.
    double violation_rate() const {
        std::size_t bad = 0;
        for (std::size_t i = 0; i < size(); ++i) bad += test_error[i] > test_bound[i];
        return static_cast<double>(bad) / static_cast<double>(size());
    }
};

inline TestResult summarize(std::span<const TaskOutcome> outcomes) {
    TestResult r;
    for (const auto& o : outcomes) {
        r.test_bound.push_back(o.test_bound);
        r.test_loss.push_back(o.test_loss);
        r.test_error.push_back(o.test_error);
    }
    r.bound_ci = confidence_interval(r.test_bound);
    r.loss_ci = confidence_interval(r.test_loss);
    r.error_ci = confidence_interval(r.test_error);
    return r;
}

inline TestResult run_test_phase(const StochasticNet& theta, std::span<const TaskDataset> tasks, const TrainConfig& cfg) {
    if (tasks.size() < 2) throw std::invalid_argument("test phase: needs at least 2 test tasks for a confidence interval");
    std::vector<TaskOutcome> outcomes;
    for (const auto& t : tasks) outcomes.push_back(adapt_new_task(theta, t, cfg));
    return summarize(outcomes);
}

// ---- reports -------------------------------------------------------------------------

struct TrainTableRow {
    std::string objective;
    std::string environment;
    std::string prior_mode; // "random" or "data-dependent"
    BoundReport report;
    double train_error = 0.0;
};

struct TestTableRow {
    std::string objective;
    std::string environment;
    std::string prior_mode;
    TestResult result;
};

struct TaskCountRow {
    std::string objective;
    std::size_t n_tasks = 0;
    std::size_t seeds = 0;
    double mean_bound = 0.0;
    double mean_train_error = 0.0;
};

struct ConvergenceSeries {
    std::string label;
    std::vector<TraceRow> trace;
};

struct LayerProfileRow {
    std::string objective;
    std::string prior_mode;
    std::vector<double> profile;
};

struct ReportBundle {
    std::vector<TrainTableRow> train;
    std::vector<TestTableRow> test;
    std::vector<TaskCountRow> task_count;
    std::vector<ConvergenceSeries> convergence;
    std::vector<LayerProfileRow> layers;
};

class ReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Six significant digits, for console summaries.
inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

/// Shortest text that parses back to exactly `v`; used for CSV cells.
inline std::string fmt_exact(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {

class CsvFile {
public:
    CsvFile(const std::filesystem::path& path, const std::string& header) : path_(path), os_(path) {
        if (!os_) throw ReportError("cannot write " + path.string());
        os_ << header << '\n';
    }
    template <class... Cells>
    void row(const Cells&... cells) {
        bool first = true;
        ((os_ << (first ? "" : ",") << cell(cells), first = false), ...);
        os_ << '\n';
    }
    ~CsvFile() = default;
    void close() {
        os_.close();
        if (!os_) throw ReportError("failed writing " + path_.string());
    }

private:
    static std::string cell(double v) { return fmt_exact(v); }
    static std::string cell(std::size_t v) { return std::to_string(v); }
    static std::string cell(const std::string& s) { return s; }

    std::filesystem::path path_;
    std::ofstream os_;
};

inline void prepare_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw ReportError("cannot create directory " + dir.string());
}

} // namespace detail

inline void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace) {
    detail::CsvFile f(path, "epoch,objective,bound,empirical_term,task_complexity,meta_complexity,train_error,phase");
    for (const auto& r : trace) {
        f.row(r.epoch, r.objective, r.bound, r.empirical_term, r.task_complexity, r.meta_complexity, r.train_error, r.phase);
    }
    f.close();
}

inline void write_train_table(const std::filesystem::path& path, std::span<const TrainTableRow> rows) {
    detail::CsvFile f(path, "objective,environment,prior_mode,bound,task_complexity,meta_complexity,empirical_loss,error");
    for (const auto& r : rows) {
        f.row(r.objective, r.environment, r.prior_mode, r.report.bound, r.report.task_complexity,
              r.report.meta_complexity, r.report.empirical_term, r.train_error);
    }
    f.close();
}

inline void write_test_table(const std::filesystem::path& path, std::span<const TestTableRow> rows) {
    detail::CsvFile f(path, "objective,environment,prior_mode,n_tasks,test_bound,test_bound_hw,test_loss,test_loss_hw,"
                            "test_error,test_error_hw");
    for (const auto& r : rows) {
        const auto& t = r.result;
        f.row(r.objective, r.environment, r.prior_mode, t.size(), t.bound_ci.mean, t.bound_ci.halfwidth,
              t.loss_ci.mean, t.loss_ci.halfwidth, t.error_ci.mean, t.error_ci.halfwidth);
    }
    f.close();
}

inline void write_test_tasks(const std::filesystem::path& path, const TestResult& r) {
    detail::CsvFile f(path, "task,test_bound,test_loss,test_error");
    for (std::size_t i = 0; i < r.size(); ++i) f.row(i, r.test_bound[i], r.test_loss[i], r.test_error[i]);
    f.close();
}

/// Writes train_table.csv, test_table.csv, task_count_trend.csv, convergence.csv
/// and layer_profile.csv into out_dir.
inline void emit_reports(const ReportBundle& bundle, const std::filesystem::path& out_dir) {
    detail::prepare_dir(out_dir);
    write_train_table(out_dir / "train_table.csv", bundle.train);
    write_test_table(out_dir / "test_table.csv", bundle.test);
    {
        detail::CsvFile f(out_dir / "task_count_trend.csv", "objective,n_tasks,seeds,mean_bound,mean_train_error");
        for (const auto& r : bundle.task_count) f.row(r.objective, r.n_tasks, r.seeds, r.mean_bound, r.mean_train_error);
        f.close();
    }
    {
        detail::CsvFile f(out_dir / "convergence.csv", "series,epoch,phase,bound,train_error");
        for (const auto& s : bundle.convergence)
            for (const auto& r : s.trace) f.row(s.label, r.epoch, r.phase, r.bound, r.train_error);
        f.close();
    }
    {
        detail::CsvFile f(out_dir / "layer_profile.csv", "objective,prior_mode,layer,mean_log_var");
        for (const auto& r : bundle.layers)
            for (std::size_t j = 0; j < r.profile.size(); ++j) f.row(r.objective, r.prior_mode, j, r.profile[j]);
        f.close();
    }
}

} // namespace pacmeta
