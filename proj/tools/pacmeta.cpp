// pacmeta: train, evaluate and report PAC-Bayes meta-learners; print bounds.

#include "pacmeta/pacmeta.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace pacmeta;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kDiverged = 3;

struct ConfigFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> objective;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::size_t threads = 1;

    void attach(CLI::App* cmd) {
        cmd->add_option("-c,--config", config_path, "key = value config file");
        cmd->add_option("--set", overrides, "override one key, e.g. --set train.lr=1e-3");
        cmd->add_option("--objective", objective, "shortcut for train.objective");
        cmd->add_option("--seed", seed, "shortcut setting env.seed and train.seed");
        cmd->add_option("--out", out_dir, "shortcut for out_dir");
        cmd->add_option("--threads", threads, "upper bound on worker threads (runs are single-threaded)");
    }

    // file < PACMETA_SEED < --set < shortcuts
    RunConfig resolve() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (const char* env = std::getenv("PACMETA_SEED")) {
            set_config_value(cfg, "env.seed", env);
            set_config_value(cfg, "train.seed", env);
        }
        for (const auto& o : overrides) apply_override(cfg, o);
        if (objective) set_config_value(cfg, "train.objective", *objective);
        if (seed) {
            set_config_value(cfg, "env.seed", std::to_string(*seed));
            set_config_value(cfg, "train.seed", std::to_string(*seed));
        }
        if (out_dir) set_config_value(cfg, "out_dir", *out_dir);
        cfg.validate();
        return cfg;
    }
};

ImageDataset load_base(const RunConfig& cfg) {
    if (cfg.env.kind == EnvKind::gaussian_blobs) return {};
    return load_idx_dataset(cfg.images, cfg.labels);
}

fs::path run_dir(const RunConfig& cfg) {
    const fs::path dir = fs::path(cfg.out_dir) / cfg.run_name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ReportError("cannot create directory " + dir.string());
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    os << text;
    if (!os) throw ReportError("cannot write " + path.string());
}

std::string prior_mode(const TrainConfig& cfg) { return cfg.prior_fraction > 0.0 ? "data-dependent" : "random"; }

// Runs the guarded body and maps failures onto exit codes.
template <class F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kDiverged;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kConfigError;
    } catch (const IdxError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_train(const ConfigFlags& flags) {
    return guarded([&] {
        const RunConfig cfg = flags.resolve();
        const fs::path dir = run_dir(cfg);
        write_text(dir / "resolved_config.txt", dump_config(cfg));

        const ImageDataset base = load_base(cfg);
        const auto tasks = make_train_tasks(cfg.env, base);
        const MetaTrainResult res = run_meta_training(tasks, cfg.train);

        save_checkpoint((dir / "checkpoint.txt").string(), res.theta);
        write_trace_csv(dir / "trace.csv", res.trace);
        const TrainTableRow row{std::string(to_string(cfg.train.objective)), std::string(to_string(cfg.env.kind)),
                                prior_mode(cfg.train), res.final_eval.report, res.final_eval.train_error};
        write_train_table(dir / "train_summary.csv", std::span(&row, 1));
        std::cout << "bound=" << fmt6(row.report.bound) << " train_error=" << fmt6(row.train_error)
                  << " out=" << dir.string() << "\n";
        return kOk;
    });
}

int cmd_eval(const ConfigFlags& flags, const std::string& checkpoint) {
    return guarded([&] {
        const RunConfig cfg = flags.resolve();
        if (cfg.env.n_test_tasks < 2) {
            throw ConfigError("env.n_test_tasks", "needs at least 2 test tasks for a confidence interval");
        }
        const StochasticNet theta = load_checkpoint(checkpoint);
        const ImageDataset base = load_base(cfg);
        const Architecture want = cfg.train.architecture(cfg.env.n_features(base), cfg.env.n_classes(base));
        if (theta.arch() != want) {
            throw ConfigError("net.hidden", "checkpoint architecture " + to_string(theta.arch()) +
                                                " does not match the configured " + to_string(want));
        }
        std::vector<TaskDataset> tasks;
        for (std::size_t j = 0; j < cfg.env.n_test_tasks; ++j) tasks.push_back(make_test_task(cfg.env, base, j));
        const TestResult result = run_test_phase(theta, tasks, cfg.train);

        const fs::path dir = run_dir(cfg);
        const TestTableRow row{std::string(to_string(cfg.train.objective)), std::string(to_string(cfg.env.kind)),
                               prior_mode(cfg.train), result};
        write_test_table(dir / "test_table.csv", std::span(&row, 1));
        write_test_tasks(dir / "test_tasks.csv", result);
        std::cout << "test_bound=" << fmt6(result.bound_ci.mean) << " test_error=" << fmt6(result.error_ci.mean)
                  << " out=" << dir.string() << "\n";
        return kOk;
    });
}

struct BoundFlags {
    std::string which;
    std::vector<double> emp;
    std::vector<double> kl_task;
    std::vector<std::size_t> m;
    double kl_hyper = 0.0;
    std::size_t n = 0;
    double delta = 0.1;
    double lambda = 1.0;
};

void print_kv(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::cout << key << "=" << buf << "\n";
}

int cmd_bound(const BoundFlags& f) {
    return guarded([&] {
        static const std::vector<std::string> single{"mcallester", "seeger", "lambda", "quad", "varia"};
        if (f.which.rfind("single-", 0) == 0) {
            const std::string fam = f.which.substr(7);
            const auto it = std::find(single.begin(), single.end(), fam);
            if (it == single.end()) throw BoundError("unknown bound '" + f.which + "'");
            if (f.emp.size() != 1 || f.kl_task.size() != 1 || f.m.size() != 1) {
                throw BoundError("single-task bounds take exactly one --emp, --kl-task and --m");
            }
            const auto fam_id = static_cast<SingleBound>(it - single.begin());
            const double b = single_task_bound(fam_id, f.emp[0], f.kl_task[0], f.m[0], f.delta, f.lambda);
            std::cout << "which=" << f.which << "\n";
            print_kv("bound", b);
            return kOk;
        }
        const std::size_t n = f.n == 0 ? f.emp.size() : f.n;
        auto broadcast = [&](auto values, const char* name) {
            if (values.size() == 1) values.assign(n, values[0]);
            if (values.size() != n) {
                throw BoundError(std::string("--") + name + " needs 1 or n=" + std::to_string(n) + " values");
            }
            return values;
        };
        const auto emp = broadcast(f.emp, "emp");
        const auto kl = broadcast(f.kl_task, "kl-task");
        const auto m = broadcast(f.m, "m");
        std::vector<BoundInputs> inputs;
        for (std::size_t i = 0; i < n; ++i) inputs.push_back({emp[i], kl[i], f.kl_hyper, m[i], n, f.delta, f.lambda});

        BoundReport r;
        if (f.which == "lambda-proof") r = meta_bound_lambda(inputs, f.lambda, true);
        else if (f.which == "ddprior") r = meta_bound_ddprior(inputs);
        else if (f.which == "lambda") r = meta_bound_lambda(inputs, f.lambda);
        else {
            MetaBound b;
            try {
                b = parse_meta_bound(f.which);
            } catch (const std::invalid_argument&) {
                throw BoundError("unknown bound '" + f.which +
                                 "'; valid: classic, seeger, lambda, lambda-proof, quad, varia, ddprior, "
                                 "single-mcallester, single-seeger, single-lambda, single-quad, single-varia");
            }
            r = meta_bound(b, inputs);
        }
        std::cout << "which=" << f.which << "\n";
        print_kv("bound", r.bound);
        print_kv("empirical_term", r.empirical_term);
        print_kv("task_complexity", r.task_complexity);
        print_kv("meta_complexity", r.meta_complexity);
        for (std::size_t i = 0; i < r.per_task.size(); ++i) print_kv("per_task_" + std::to_string(i), r.per_task[i]);
        return kOk;
    });
}

struct ReportFlags {
    std::vector<std::string> objectives{"classic", "varia"};
    std::vector<std::size_t> task_counts{2, 4, 8};
    std::size_t sweep_seeds = 5;
    double dd_fraction = 0.3;
    bool skip_test = false;
};

int cmd_report(const ConfigFlags& flags, const ReportFlags& rf) {
    return guarded([&] {
        const RunConfig cfg = flags.resolve();
        const ImageDataset base = load_base(cfg);
        const fs::path dir = run_dir(cfg);
        write_text(dir / "resolved_config.txt", dump_config(cfg));
        const std::string env_name(to_string(cfg.env.kind));

        ReportBundle bundle;
        for (const auto& obj : rf.objectives) {
            for (double fraction : {0.0, rf.dd_fraction}) {
                RunConfig run = cfg;
                set_config_value(run, "train.objective", obj);
                run.env.prior_fraction = fraction;
                run.sync();
                run.validate();
                const auto tasks = make_train_tasks(run.env, base);
                const MetaTrainResult res = run_meta_training(tasks, run.train);
                const std::string mode = prior_mode(run.train);
                std::cerr << "trained " << obj << " / " << mode << ": bound " << fmt6(res.final_eval.report.bound) << "\n";
                bundle.train.push_back({obj, env_name, mode, res.final_eval.report, res.final_eval.train_error});
                bundle.convergence.push_back({obj + "/" + mode, res.trace});
                bundle.layers.push_back({obj, mode, layer_variance_profile(res.theta)});
                if (!rf.skip_test) {
                    std::vector<TaskDataset> test;
                    for (std::size_t j = 0; j < run.env.n_test_tasks; ++j) test.push_back(make_test_task(run.env, base, j));
                    bundle.test.push_back({obj, env_name, mode, run_test_phase(res.theta, test, run.train)});
                }
            }
        }
        for (const auto& obj : rf.objectives) {
            for (std::size_t n : rf.task_counts) {
                TaskCountRow row{obj, n, rf.sweep_seeds, 0.0, 0.0};
                for (std::size_t s = 0; s < rf.sweep_seeds; ++s) {
                    RunConfig run = cfg;
                    set_config_value(run, "train.objective", obj);
                    run.env.n_train_tasks = n;
                    run.env.seed = cfg.env.seed + s;
                    run.train.seed = cfg.train.seed + s;
                    run.env.prior_fraction = 0.0;
                    run.sync();
                    run.validate();
                    const MetaTrainResult res = run_meta_training(make_train_tasks(run.env, base), run.train);
                    row.mean_bound += res.final_eval.report.bound / static_cast<double>(rf.sweep_seeds);
                    row.mean_train_error += res.final_eval.train_error / static_cast<double>(rf.sweep_seeds);
                }
                bundle.task_count.push_back(row);
            }
        }
        emit_reports(bundle, dir);
        std::cout << "reports written to " << dir.string() << "\n";
        return kOk;
    });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PAC-Bayes meta-learning: training, evaluation, bounds and reports"};
    app.require_subcommand(1);

    ConfigFlags train_flags;
    auto* train = app.add_subcommand("train", "meta-train and write checkpoint.txt and trace.csv");
    train_flags.attach(train);

    ConfigFlags eval_flags;
    std::string checkpoint;
    auto* eval = app.add_subcommand("eval", "adapt to new tasks and write test_table.csv");
    eval_flags.attach(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

    BoundFlags bf;
    auto* bound = app.add_subcommand("bound", "evaluate one bound and print its decomposition");
    bound->add_option("--which", bf.which, "classic|seeger|lambda|lambda-proof|quad|varia|ddprior|single-<family>")
        ->required();
    bound->add_option("--emp", bf.emp, "empirical error per task (comma separated)")->delimiter(',')->required();
    bound->add_option("--kl-task", bf.kl_task, "task KL per task")->delimiter(',')->required();
    bound->add_option("--m", bf.m, "sample count per task")->delimiter(',')->required();
    bound->add_option("--kl-hyper", bf.kl_hyper, "hyper-posterior KL");
    bound->add_option("--n", bf.n, "number of tasks (defaults to the --emp count)");
    bound->add_option("--delta", bf.delta, "confidence parameter");
    bound->add_option("--lambda", bf.lambda, "lambda for the lambda bounds");

    ConfigFlags report_flags;
    ReportFlags rf;
    auto* report = app.add_subcommand("report", "run the objective comparison and task-count sweep, write tables");
    report_flags.attach(report);
    report->add_option("--objectives", rf.objectives, "objectives to compare")->delimiter(',');
    report->add_option("--task-counts", rf.task_counts, "training task counts for the sweep")->delimiter(',');
    report->add_option("--sweep-seeds", rf.sweep_seeds, "seeds per sweep point");
    report->add_option("--dd-fraction", rf.dd_fraction, "prior split for the data-dependent runs");
    report->add_flag("--skip-test", rf.skip_test, "skip the test phase");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    if (*train) return cmd_train(train_flags);
    if (*eval) return cmd_eval(eval_flags, checkpoint);
    if (*bound) return cmd_bound(bf);
    return cmd_report(report_flags, rf);
}
