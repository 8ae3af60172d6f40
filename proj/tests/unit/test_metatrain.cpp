#include "gradcheck.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace pacmeta;

namespace {

Tensor log_probs_of(std::vector<std::vector<double>> rows) {
    const std::size_t k = rows.front().size();
    Tensor t(Shape{rows.size(), k});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < k; ++c) t(i, c) = std::log(rows[i][c]);
    return t;
}

EnvironmentSpec blob_spec(std::size_t n_tasks, std::size_t samples, double prior_fraction = 0.0) {
    EnvironmentSpec s;
    s.kind = EnvKind::gaussian_blobs;
    s.n_train_tasks = n_tasks;
    s.samples_per_task = samples;
    s.test_samples_per_task = 50;
    s.seed = 3;
    s.prior_fraction = prior_fraction;
    return s;
}

std::vector<TaskDataset> blob_tasks(const EnvironmentSpec& s) { return make_train_tasks(s, ImageDataset{}); }

TrainConfig small_config() {
    TrainConfig c;
    c.hidden = {16};
    c.epochs = 2;
    c.data_batch = 32;
    c.mc_eval_samples = 3;
    c.prior_epochs = 2;
    c.seed = 5;
    return c;
}

StochasticNet shifted(const StochasticNet& net, const Weights& noise) {
    StochasticNet out = net;
    for (std::size_t j = 0; j < noise.size(); ++j)
        for (std::size_t i = 0; i < noise[j].size(); ++i) out.layer(j).mu[i] += noise[j][i];
    return out;
}

} // namespace

TEST(BoundedLoss, Examples) {
    const double pmin = 1e-4;
    const std::vector<std::size_t> y{0};
    EXPECT_EQ(bounded_ce_loss(log_probs_of({{1.0, 1e-300}}), y, pmin), 0.0);
    EXPECT_NEAR(bounded_ce_loss(log_probs_of({{pmin, 1.0 - pmin}}), y, pmin), 1.0, 1e-15);
    EXPECT_EQ(bounded_ce_loss(log_probs_of({{1e-9, 1.0 - 1e-9}}), y, pmin), 1.0);
    EXPECT_NEAR(bounded_ce_loss(log_probs_of({{std::sqrt(pmin), 1.0 - std::sqrt(pmin)}}), y, pmin), 0.5, 1e-15);

    Tape tape;
    const Tensor lp = log_probs_of({{0.3, 0.7}, {0.01, 0.99}, {1e-6, 1.0 - 1e-6}});
    const std::vector<std::size_t> labels{1, 0, 0};
    EXPECT_NEAR(bounded_ce_loss(tape.leaf(lp), labels, pmin).item(), bounded_ce_loss(lp, labels, pmin), 1e-15);
}

TEST(ZeroOne, Examples) {
    const Tensor lp = log_probs_of({{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}});
    EXPECT_EQ(zero_one_error(lp, std::vector<std::size_t>{0, 1}), 0.0);
    EXPECT_EQ(zero_one_error(lp, std::vector<std::size_t>{2, 2}), 1.0);
    const Tensor uniform(Shape{3, 4}, 0.0);
    EXPECT_EQ(zero_one_error(uniform, std::vector<std::size_t>{1, 2, 3}), 1.0);
    EXPECT_EQ(zero_one_error(uniform, std::vector<std::size_t>{0, 0, 0}), 0.0);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    Tensor p(Shape{3}, std::vector<double>{1, 2, 3});
    const Tensor before = p;
    AdamState s;
    std::vector<Tensor*> params{&p};
    const std::vector<Tensor> g{Tensor(Shape{3})};
    for (int i = 0; i < 5; ++i) adam_step(params, g, s, 0.1);
    EXPECT_EQ(p, before);
    EXPECT_EQ(s.step, 5u);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
    Tensor p(Shape{2}, std::vector<double>{0, 0});
    AdamState s;
    std::vector<Tensor*> params{&p};
    const std::vector<Tensor> g{Tensor(Shape{2}, std::vector<double>{0.3, -2.0})};
    const double lr = 1e-3;
    Tensor prev = p;
    for (int i = 0; i < 1000; ++i) {
        prev = p;
        adam_step(params, g, s, lr);
    }
    EXPECT_NEAR(std::abs(p[0] - prev[0]), lr, 0.01 * lr);
    EXPECT_NEAR(std::abs(p[1] - prev[1]), lr, 0.01 * lr);
    EXPECT_LT(p[0], 0.0);
    EXPECT_GT(p[1], 0.0);
}

TEST(Adam, RejectsShapeMismatch) {
    Tensor p(Shape{2});
    AdamState s;
    std::vector<Tensor*> params{&p};
    EXPECT_THROW(adam_step(params, std::vector<Tensor>{Tensor(Shape{3})}, s, 0.1), ShapeError);
    EXPECT_THROW(adam_step(params, std::vector<Tensor>{}, s, 0.1), ShapeError);
}

TEST(Adam, Deterministic) {
    auto run = [] {
        Rng rng{9};
        Tensor p = pacmeta::testing::random_tensor({4}, rng, -1, 1);
        AdamState s;
        std::vector<Tensor*> params{&p};
        for (int i = 0; i < 50; ++i) {
            const std::vector<Tensor> g{pacmeta::testing::random_tensor({4}, rng, -1, 1)};
            adam_step(params, g, s, 0.01);
        }
        return p;
    };
    EXPECT_EQ(run(), run());
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.lambda = 2.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.kappa_q = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.hidden = {8, 0};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(TrainConfig{}.architecture(784, 10).widths, (std::vector<std::size_t>{784, 64, 64, 10}));
}

TEST(MetaObjective, MatchesBoundOnHandAssembledInputs) {
    const auto tasks = blob_tasks(blob_spec(3, 40));
    for (MetaBound which : {MetaBound::classic, MetaBound::seeger, MetaBound::lambda, MetaBound::quad, MetaBound::varia}) {
        TrainConfig cfg = small_config();
        cfg.objective = which;
        cfg.lambda = 0.7;
        cfg.mc_train_samples = 2;
        Rng rng{17};
        const StochasticNet theta = initial_theta(tasks, cfg);
        std::vector<StochasticNet> phis;
        for (int i = 0; i < 3; ++i) phis.push_back(pacmeta::testing::random_net(theta.arch(), rng, -8.0, -4.0));
        std::vector<const StochasticNet*> ptrs{&phis[0], &phis[1], &phis[2]};
        std::vector<TaskBatch> batches;
        for (const auto& t : tasks) {
            const std::vector<std::size_t> idx(t.bound_idx.begin(), t.bound_idx.begin() + 16);
            batches.push_back({t.rows(idx), t.labels(idx), t.bound_idx.size()});
        }
        const StepNoise noise = draw_step_noise(theta, 3, cfg.mc_train_samples, cfg.kappa_q, rng);

        Tape tape;
        const MetaObjective obj = build_meta_objective(tape, theta, ptrs, batches, noise, cfg, 3);

        const StochasticNet prior = shifted(theta, noise.center);
        const double klh = kl_hyper(theta, cfg.hyper(theta.n_params()), cfg.kl_hyper_mode);
        std::vector<BoundInputs> inputs;
        for (std::size_t i = 0; i < 3; ++i) {
            double emp = 0.0;
            for (const Weights& eps : noise.weights[i]) {
                emp += bounded_ce_loss(predict(theta.arch(), sample_weights(phis[i], eps), batches[i].x), batches[i].y, cfg.p_min);
            }
            BoundInputs in;
            in.emp_error = emp / static_cast<double>(noise.weights[i].size());
            in.kl_task = kl_factorized_gaussian(phis[i], prior);
            in.kl_hyper = klh;
            in.m = batches[i].m;
            in.n = 3;
            in.delta = cfg.delta;
            in.lambda = cfg.lambda;
            inputs.push_back(in);
        }
        const BoundReport ref = meta_bound(which, inputs);
        EXPECT_NEAR(obj.terms.bound.item(), ref.bound, 1e-10) << to_string(which);
        EXPECT_NEAR(obj.terms.task.item(), ref.task_complexity, 1e-10) << to_string(which);
        EXPECT_NEAR(obj.terms.meta.item(), ref.meta_complexity, 1e-10) << to_string(which);
    }
}

TEST(MetaTrain, ZeroLearningRateLeavesParameters) {
    const auto tasks = blob_tasks(blob_spec(3, 40));
    TrainConfig cfg = small_config();
    cfg.lr = 0.0;
    cfg.epochs = 1;
    const auto res = meta_train(tasks, cfg);
    const StochasticNet init = initial_theta(tasks, cfg);
    EXPECT_EQ(res.theta, init);
    for (const auto& phi : res.posteriors) EXPECT_EQ(phi, init);
}

TEST(MetaTrain, SeededRunsAreIdentical) {
    const auto tasks = blob_tasks(blob_spec(3, 40));
    const TrainConfig cfg = small_config();
    const auto a = meta_train(tasks, cfg);
    const auto b = meta_train(tasks, cfg);
    EXPECT_EQ(a.theta, b.theta);
    EXPECT_EQ(a.posteriors, b.posteriors);
    EXPECT_EQ(a.final_eval.report.bound, b.final_eval.report.bound);
    TrainConfig other = cfg;
    other.seed = cfg.seed + 1;
    EXPECT_NE(meta_train(tasks, other).theta, a.theta);
}

TEST(MetaTrain, RejectsTooFewTasks) {
    auto tasks = blob_tasks(blob_spec(2, 40));
    tasks.pop_back();
    EXPECT_THROW(meta_train(tasks, small_config()), std::invalid_argument);
}

TEST(MetaTrain, LearnsSeparatedBlobs) {
    const auto tasks = blob_tasks(blob_spec(5, 200));
    TrainConfig cfg = small_config();
    cfg.hidden = {32};
    cfg.epochs = 200;
    cfg.mc_eval_samples = 5;
    const auto res = meta_train(tasks, cfg);
    EXPECT_LT(res.final_eval.train_error, 0.05);
    EXPECT_EQ(res.trace.size(), 200u);
    EXPECT_LT(res.trace.back().bound, res.trace.front().bound);
}

TEST(ErmPrior, ZeroEpochsReturnsInit) {
    const auto tasks = blob_tasks(blob_spec(3, 40, 0.3));
    TrainConfig cfg = small_config();
    cfg.prior_epochs = 0;
    const StochasticNet init = initial_theta(tasks, cfg);
    EXPECT_EQ(erm_prior(tasks, cfg, init), init);
}

TEST(ErmPrior, ImprovesOnRandomInit) {
    const auto tasks = blob_tasks(blob_spec(5, 200, 0.3));
    TrainConfig cfg = small_config();
    cfg.prior_epochs = 100;
    const StochasticNet init = initial_theta(tasks, cfg);
    const StochasticNet learned = erm_prior(tasks, cfg, init);
    auto error_of = [&](const StochasticNet& net) {
        Rng rng{1};
        double e = 0.0;
        for (const auto& t : tasks) e += stochastic_scores(net, t, t.prior_idx, 5, cfg.p_min, rng).error;
        return e / static_cast<double>(tasks.size());
    };
    EXPECT_LT(error_of(learned), error_of(init));
    EXPECT_NE(learned.layer(0).mu, init.layer(0).mu);
    EXPECT_NE(learned.layer(0).log_var, init.layer(0).log_var);
}

TEST(Ddprior, RejectsZeroFraction) {
    const auto tasks = blob_tasks(blob_spec(3, 40));
    EXPECT_THROW(meta_train_ddprior(tasks, small_config()), std::invalid_argument);
    EXPECT_THROW(erm_prior(tasks, small_config(), initial_theta(tasks, small_config())), std::invalid_argument);
}

TEST(Ddprior, BoundUsesHeldOutSplitSize) {
    const auto spec = blob_spec(3, 100, 0.3);
    const auto tasks = blob_tasks(spec);
    TrainConfig cfg = small_config();
    cfg.prior_fraction = spec.prior_fraction;
    const auto res = run_meta_training(tasks, cfg);

    Rng rng{cfg.seed, detail::kEvalSalt, 0};
    const double klh = kl_hyper(res.theta, cfg.hyper(res.theta.n_params()), cfg.kl_hyper_mode);
    std::vector<BoundInputs> inputs;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        ASSERT_EQ(tasks[i].bound_idx.size(), 70u);
        BoundInputs in;
        in.emp_error = stochastic_scores(res.posteriors[i], tasks[i], tasks[i].bound_idx, cfg.mc_eval_samples, cfg.p_min, rng).loss;
        in.kl_task = expected_kl_factorized_gaussian(res.posteriors[i], res.theta, cfg.kappa_q);
        in.kl_hyper = klh;
        in.m = 70;
        in.n = tasks.size();
        in.delta = cfg.delta;
        inputs.push_back(in);
    }
    EXPECT_NEAR(res.final_eval.report.bound, meta_bound_ddprior(inputs).bound, 1e-12);
    for (const auto& in : res.final_eval.inputs) EXPECT_EQ(in.m, 70u);
}

TEST(Ddprior, TraceListsPriorThenMetaEpochs) {
    const auto tasks = blob_tasks(blob_spec(3, 60, 0.3));
    TrainConfig cfg = small_config();
    cfg.prior_fraction = 0.3;
    cfg.prior_epochs = 3;
    cfg.epochs = 2;
    const auto res = run_meta_training(tasks, cfg);
    ASSERT_EQ(res.trace.size(), 5u);
    for (std::size_t e = 0; e < 5; ++e) {
        EXPECT_EQ(res.trace[e].epoch, e + 1);
        EXPECT_EQ(res.trace[e].phase, e < 3 ? "prior" : "meta");
    }
}
