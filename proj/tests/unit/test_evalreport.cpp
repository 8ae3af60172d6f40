#include "pacmeta/pacmeta.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pacmeta;
namespace fs = std::filesystem;

namespace {

EnvironmentSpec blob_spec(std::uint64_t seed) {
    EnvironmentSpec s;
    s.kind = EnvKind::gaussian_blobs;
    s.samples_per_task = 100;
    s.test_samples_per_task = 200;
    s.seed = seed;
    return s;
}

TrainConfig small_config(std::uint64_t seed) {
    TrainConfig c;
    c.hidden = {16};
    c.data_batch = 32;
    c.mc_eval_samples = 5;
    c.eval_epochs = 0;
    c.seed = seed;
    return c;
}

StochasticNet theta_for(const TaskDataset& t, const TrainConfig& cfg) {
    return initial_theta(std::span<const TaskDataset>(&t, 1), cfg);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cells.push_back(c);
        rows.push_back(cells);
    }
    return rows;
}

ReportBundle sample_bundle() {
    ReportBundle b;
    Rng rng{4};
    for (const char* obj : {"classic", "quad"}) {
        std::vector<BoundInputs> in(3);
        for (auto& x : in) {
            x.emp_error = rng.uniform(0, 0.3);
            x.kl_task = rng.uniform(0, 40);
            x.kl_hyper = 14.1;
            x.m = 700;
            x.n = 3;
        }
        b.train.push_back({obj, "gaussian_blobs", "random", meta_bound(parse_meta_bound(obj), in), 0.12});
        TaskOutcome o1, o2;
        o1.test_bound = 0.4;
        o1.test_loss = 0.1;
        o1.test_error = 0.05;
        o2.test_bound = 0.5;
        o2.test_loss = 0.2;
        o2.test_error = 0.07;
        const std::vector<TaskOutcome> outs{o1, o2};
        b.test.push_back({obj, "gaussian_blobs", "random", summarize(outs)});
        b.task_count.push_back({obj, 2, 5, 1.9, 0.3});
        b.convergence.push_back({obj, {TraceRow{1, 2.0, 1.9, 0.3, 0.8, 0.8, 0.4, "meta"}}});
        b.layers.push_back({obj, "random", {-10.0, -9.5}});
    }
    return b;
}

class ReportDir : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("pacmeta_report_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

} // namespace

TEST(ConfidenceInterval, Examples) {
    const std::vector<double> constant{0.3, 0.3, 0.3};
    EXPECT_EQ(confidence_interval(constant).halfwidth, 0.0);
    EXPECT_NEAR(confidence_interval(constant).mean, 0.3, 1e-15);
    const std::vector<double> pair{0.0, 1.0};
    EXPECT_EQ(confidence_interval(pair).mean, 0.5);
    EXPECT_NEAR(confidence_interval(pair).halfwidth, 1.96 * std::sqrt(0.5) / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(confidence_interval(pair).halfwidth, 0.98, 1e-12);
    EXPECT_THROW(confidence_interval(std::vector<double>{1.0}), std::invalid_argument);
}

TEST(ConfidenceInterval, PermutationInvariant) {
    Rng rng{2};
    std::vector<double> v(37);
    for (double& x : v) x = rng.uniform(-3, 3);
    const Interval a = confidence_interval(v);
    for (int k = 0; k < 20; ++k) {
        rng.shuffle(v);
        const Interval b = confidence_interval(v);
        EXPECT_EQ(a.mean, b.mean);
        EXPECT_EQ(a.halfwidth, b.halfwidth);
    }
}

TEST(LayerProfile, Examples) {
    Rng rng{3};
    const Architecture arch{{784, 64, 64, 10}};
    StochasticNet net = init_stochastic_net(arch, rng);
    auto prof = layer_variance_profile(net);
    ASSERT_EQ(prof.size(), 3u);
    for (double p : prof) EXPECT_NEAR(p, -10.0, 0.05);
    net.layer(1).log_var = Tensor(arch.layer_shape(1), 0.0);
    prof = layer_variance_profile(net);
    EXPECT_EQ(prof[1], 0.0);
}

TEST(AdaptNewTask, ZeroEpochsKeepsPrior) {
    const auto task = make_test_task(blob_spec(1), ImageDataset{}, 0);
    for (MetaBound which : {MetaBound::classic, MetaBound::quad}) {
        TrainConfig cfg = small_config(1);
        cfg.objective = which;
        const StochasticNet theta = theta_for(task, cfg);
        const TaskOutcome o = adapt_new_task(theta, task, cfg);
        EXPECT_EQ(o.posterior, theta);
        EXPECT_EQ(o.kl, 0.0);
        EXPECT_EQ(o.m, task.train_idx.size());
        Rng rng{cfg.seed, detail::kScoreSalt, task.task_index};
        const double emp = stochastic_scores(theta, task, task.train_idx, cfg.mc_eval_samples, cfg.p_min, rng).error;
        EXPECT_EQ(o.emp_error, emp);
        EXPECT_EQ(o.test_bound, single_task_bound(single_family(which), emp, 0.0, o.m, cfg.delta));
    }
}

TEST(AdaptNewTask, AdaptationLowersTestError) {
    double before = 0.0, after = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto task = make_test_task(blob_spec(seed), ImageDataset{}, seed);
        TrainConfig cfg = small_config(seed);
        // A prior at the initial log-variance of -10 pins the posterior within
        // about 0.007 of its means; a wider prior leaves room to adapt.
        StochasticNet theta = theta_for(task, cfg);
        for (auto& layer : theta.layers()) layer.log_var = Tensor(layer.log_var.shape(), -3.0);
        before += adapt_new_task(theta, task, cfg).test_error;
        cfg.eval_epochs = 30;
        cfg.lr = 1e-2;
        after += adapt_new_task(theta, task, cfg).test_error;
    }
    EXPECT_LT(after, before);
}

TEST(AdaptNewTask, DataDependentPriorUsesHeldOutSplit) {
    auto spec = blob_spec(2);
    spec.prior_fraction = 0.3;
    const auto task = make_test_task(spec, ImageDataset{}, 1);
    TrainConfig cfg = small_config(2);
    cfg.prior_fraction = 0.3;
    cfg.prior_epochs = 3;
    const StochasticNet theta = theta_for(task, cfg);
    const TaskOutcome o = adapt_new_task(theta, task, cfg);
    EXPECT_EQ(o.m, 70u);
    EXPECT_NE(o.prior, theta);
    EXPECT_EQ(o.posterior, o.prior);
}

TEST(TestPhase, BoundHoldsOnMostTasks) {
    auto spec = blob_spec(6);
    std::vector<TaskDataset> tasks;
    for (std::size_t j = 0; j < 20; ++j) tasks.push_back(make_test_task(spec, ImageDataset{}, j));
    TrainConfig cfg = small_config(6);
    cfg.eval_epochs = 10;
    cfg.lr = 1e-2;
    const StochasticNet theta = initial_theta(tasks, cfg);
    const TestResult r = run_test_phase(theta, tasks, cfg);
    ASSERT_EQ(r.size(), 20u);
    EXPECT_LE(r.violation_rate(), 0.25);
    EXPECT_GE(r.bound_ci.halfwidth, 0.0);
    EXPECT_THROW(run_test_phase(theta, std::span<const TaskDataset>(tasks.data(), 1), cfg), std::invalid_argument);
}

TEST_F(ReportDir, EmitsDeclaredFiles) {
    emit_reports(sample_bundle(), dir_);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir_)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    EXPECT_EQ(names, (std::vector<std::string>{"convergence.csv", "layer_profile.csv", "task_count_trend.csv",
                                               "test_table.csv", "train_table.csv"}));
    EXPECT_EQ(read_csv(dir_ / "train_table.csv").size(), 3u);
    EXPECT_EQ(read_csv(dir_ / "layer_profile.csv").size(), 5u);
}

TEST_F(ReportDir, RerunIsByteIdentical) {
    emit_reports(sample_bundle(), dir_ / "a");
    emit_reports(sample_bundle(), dir_ / "b");
    for (const char* f : {"train_table.csv", "test_table.csv", "task_count_trend.csv", "convergence.csv", "layer_profile.csv"}) {
        EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
    }
}

TEST_F(ReportDir, HalfwidthsAreNonnegative) {
    emit_reports(sample_bundle(), dir_);
    const auto rows = read_csv(dir_ / "test_table.csv");
    ASSERT_GT(rows.size(), 1u);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[0].size(); ++c) {
            if (rows[0][c].ends_with("_hw")) {
                EXPECT_GE(std::stod(rows[r][c]), 0.0);
            }
        }
    }
}

TEST_F(ReportDir, EmittedBoundsRecompose) {
    emit_reports(sample_bundle(), dir_);
    const auto rows = read_csv(dir_ / "train_table.csv");
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const double bound = std::stod(rows[r][3]);
        const double sum = std::stod(rows[r][4]) + std::stod(rows[r][5]) + std::stod(rows[r][6]);
        EXPECT_NEAR(bound, sum, 1e-9);
    }
}

TEST_F(ReportDir, UnwritableDirectoryIsReported) {
    fs::create_directories(dir_);
    std::ofstream(dir_ / "file") << "x";
    try {
        emit_reports(sample_bundle(), dir_ / "file" / "sub");
        FAIL() << "expected ReportError";
    } catch (const ReportError& e) {
        EXPECT_NE(std::string(e.what()).find("sub"), std::string::npos);
    }
}
