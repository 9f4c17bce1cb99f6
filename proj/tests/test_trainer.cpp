#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "muvo/errors.hpp"
#include "muvo/gradcheck.hpp"
#include "muvo/trainer.hpp"

using namespace muvo;

namespace {

DatasetSpec small_spec() {
    DatasetSpec s;
    s.num_classes = 4;
    s.input_dim = 6;
    s.source_per_class = 30;
    s.target_train_per_class = 30;
    s.target_val_per_class = 5;
    s.target_test_per_class = 20;
    s.overlap_pairs = 1;
    return s;
}

TrainConfig small_config() {
    TrainConfig c;
    c.model.hidden_dim = 12;
    c.model.feature_dim = 6;
    c.model.sgd.base_lr = 0.02;
    c.negative.m = 2;
    c.affinity.capacity = 8;
    c.debias.threshold = 0.5;
    c.trainer.iters = 120;
    c.trainer.warmup = 40;
    c.trainer.batch_size = 8;
    c.trainer.eval_interval = 40;
    c.trainer.ramp_nu = 1.0;
    return c;
}

TrainingData small_data() {
    const auto spec = small_spec();
    return TrainingData::from(generate(spec), spec);
}

Vector params(const Network& n) { return {n.parameters().begin(), n.parameters().end()}; }

}  // namespace

TEST(Ramp, Values) {
    EXPECT_NEAR(ramp_weight(0, 800, 30.0), 30.0 * std::exp(-5.0), 1e-12);
    EXPECT_NEAR(ramp_weight(0, 800, 30.0), 0.2021, 5e-5);
    EXPECT_EQ(ramp_weight(800, 800, 30.0), 30.0);
    EXPECT_EQ(ramp_weight(5000, 800, 30.0), 30.0);
    EXPECT_EQ(ramp_weight(3, 0, 30.0), 30.0);
    double prev = 0.0;
    for (std::size_t t = 0; t <= 800; t += 20) {
        const double w = ramp_weight(t, 800, 30.0);
        EXPECT_GT(w, prev);
        prev = w;
    }
}

TEST(SupervisedLoss, Examples) {
    Network net({2, 2, 2, 2, Activation::Tanh});
    Sample s{{0.3, -0.7}, 0, Domain::Source, Split::Train};
    EXPECT_NEAR(supervised_loss(net, {s}, {}), std::log(2.0), 1e-15);
    // Logits +/-10 on two separable points: each costs log(1 + e^-20).
    Network sharp({1, 1, 1, 2, Activation::Identity});
    const auto& L = sharp.layout();
    sharp.parameters()[L.w1] = 1.0;
    sharp.parameters()[L.w2] = 1.0;
    sharp.parameters()[L.w3] = 10.0;
    sharp.parameters()[L.w3 + 1] = -10.0;
    Sample a{{1.0}, 0, Domain::Source, Split::Train};
    Sample b{{-1.0}, 1, Domain::Target, Split::Train};
    EXPECT_NEAR(supervised_loss(sharp, {a}, {b}), 2.0 * std::log1p(std::exp(-20.0)), 1e-15);
    Sample u{{1.0}, std::nullopt, Domain::Target, Split::Train};
    EXPECT_THROW(supervised_loss(sharp, {a}, {u}), UsageError);
}

TEST(Objective, TogglingATermRemovesExactlyItsWeightedValue) {
    GradcheckInstance g;
    build_gradcheck_instance(g, {});
    g.inputs.terms = TermSet::all();
    const auto full = evaluate_objective(g.net, g.inputs, true);
    const double weights[kTermCount] = {1, 1, 1, g.inputs.lambda_con, g.inputs.lambda_cda, g.inputs.lambda_cda};
    for (std::size_t i = 0; i < kTermCount; ++i) {
        auto in = g.inputs;
        in.terms.set(static_cast<Term>(i), false);
        const auto part = evaluate_objective(g.net, in, true);
        const double removed = full.losses.total - part.losses.total;
        EXPECT_NEAR(removed, weights[i] * full.losses.value[i], 1e-12) << kTermNames[i];
        EXPECT_GT(full.losses.value[i], 0.0) << kTermNames[i];
        EXPECT_EQ(part.losses.value[i], 0.0);
        // Gradients are additive across terms too.
        auto only = g.inputs;
        only.terms = TermSet::only(static_cast<Term>(i));
        const auto alone = evaluate_objective(g.net, only, true);
        for (std::size_t k = 0; k < full.grad.size(); ++k)
            ASSERT_NEAR(full.grad[k], part.grad[k] + alone.grad[k], 1e-12);
    }
}

TEST(Objective, NoActiveTermLeavesParametersUnchanged) {
    GradcheckInstance g;
    build_gradcheck_instance(g, {});
    g.inputs.terms = TermSet{};
    const auto r = evaluate_objective(g.net, g.inputs, true);
    EXPECT_EQ(r.losses.total, 0.0);
    const auto before = params(g.net);
    SgdOptimizer opt({}, g.net.parameter_count());
    opt.step(g.net, r.grad);
    EXPECT_EQ(params(g.net), before);
}

TEST(Gradcheck, AllTermsPassAndFaultIsNamed) {
    const auto report = run_gradcheck();
    ASSERT_EQ(report.rows.size(), 7u);
    for (const auto& row : report.rows) EXPECT_TRUE(row.passed) << row.name << " " << row.max_rel_error;
    GradcheckOptions relu;
    relu.arch.activation = Activation::Relu;
    EXPECT_TRUE(run_gradcheck(relu).all_passed());
    GradcheckOptions faulty;
    faulty.inject_fault = Term::Ncl;
    const auto bad = run_gradcheck(faulty);
    for (const auto& row : bad.rows) EXPECT_EQ(row.passed, row.name != "ncl" && row.name != "total") << row.name;
}

TEST(Trainer, GoldenFirstStep) {
    Trainer tr(small_config(), small_data());
    const auto m = tr.step();
    EXPECT_NEAR(m.losses.total, 3.2189873758056669, 1e-12);
    EXPECT_NEAR(m.losses[Term::Sup], 2.6851240886385384, 1e-12);
    EXPECT_NEAR(m.losses[Term::Ncl], 0.53386122714412032, 1e-12);
    EXPECT_NEAR(m.losses[Term::Con], 0.00030573452249236903, 1e-12);
    EXPECT_EQ(m.losses[Term::Dcl], 0.0);
    double sum = 0.0;
    for (double p : tr.network().parameters()) sum += p;
    EXPECT_NEAR(sum, 4.3643358187103356, 1e-12);
}

TEST(Trainer, WarmupGate) {
    auto cfg = small_config();
    Trainer gated(cfg, small_data());
    for (std::size_t t = 0; t < cfg.trainer.warmup; ++t) {
        const auto m = gated.step();
        ASSERT_FALSE(m.affinity_active);
        ASSERT_EQ(m.losses[Term::Ctr], 0.0);
        ASSERT_EQ(m.losses[Term::Clu], 0.0);
        ASSERT_EQ(m.admitted, 0u);
        ASSERT_FALSE(gated.prototypes().any_initialized());
        for (std::size_t c = 0; c < 4; ++c) ASSERT_EQ(gated.source_bank().occupancy(c), 0u);
    }
    EXPECT_FALSE(gated.schedule_refreshed());
    // Without the affinity family the pre-warmup parameters are identical.
    auto no_cda = cfg;
    no_cda.trainer.losses.cda = false;
    Trainer other(no_cda, small_data());
    for (std::size_t t = 0; t < cfg.trainer.warmup; ++t) other.step();
    EXPECT_EQ(params(other.network()), params(gated.network()));

    const auto m = gated.step();
    EXPECT_TRUE(m.affinity_active);
    EXPECT_TRUE(gated.schedule_refreshed());
    EXPECT_EQ(gated.optimizer().step_count(), 1u);
}

TEST(Trainer, AffinityStageFillsBanksWithinCapacity) {
    auto cfg = small_config();
    Trainer tr(cfg, small_data());
    const auto res = tr.run();
    EXPECT_TRUE(tr.prototypes().any_initialized());
    std::size_t total = 0;
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_LE(tr.source_bank().occupancy(c), cfg.affinity.capacity);
        total += tr.source_bank().occupancy(c);
    }
    EXPECT_GT(total, 0u);
    EXPECT_EQ(res.evaluations.size(), 3u);
    EXPECT_EQ(res.final().iteration, 120u);
}

TEST(Trainer, ReducesToBaselineWhenMuVoLossesAreOff) {
    auto off = small_config();
    off.trainer.losses = {false, false, false, false};
    auto base = small_config();
    base.trainer.baseline = true;
    Trainer a(off, small_data()), b(base, small_data());
    const auto ra = a.run(), rb = b.run();
    EXPECT_EQ(params(a.network()), params(b.network()));
    ASSERT_EQ(ra.evaluations.size(), rb.evaluations.size());
    for (std::size_t i = 0; i < ra.evaluations.size(); ++i) {
        EXPECT_EQ(ra.evaluations[i].test.accuracy, rb.evaluations[i].test.accuracy);
        EXPECT_EQ(ra.evaluations[i].last_step.losses[Term::Sup], rb.evaluations[i].last_step.losses[Term::Sup]);
    }
    EXPECT_EQ(params(ra.best_network), params(rb.best_network));
}

TEST(Trainer, DisablingOneFamilyZeroesItsTerm) {
    for (int which = 0; which < 4; ++which) {
        auto cfg = small_config();
        bool* flags[] = {&cfg.trainer.losses.dcl, &cfg.trainer.losses.ncl, &cfg.trainer.losses.con, &cfg.trainer.losses.cda};
        *flags[which] = false;
        Trainer tr(cfg, small_data());
        for (int i = 0; i < 60; ++i) {
            const auto m = tr.step();
            if (which == 0) {
                ASSERT_EQ(m.losses[Term::Dcl], 0.0);
            }
            if (which == 1) {
                ASSERT_EQ(m.losses[Term::Ncl], 0.0);
            }
            if (which == 2) {
                ASSERT_EQ(m.losses[Term::Con], 0.0);
            }
            if (which == 3) {
                ASSERT_EQ(m.losses[Term::Ctr] + m.losses[Term::Clu], 0.0);
            }
        }
    }
}

TEST(Trainer, NegativeGatingAfterWarmup) {
    auto cfg = small_config();
    cfg.negative.gating = NegativeGating::AfterWarmup;
    Trainer tr(cfg, small_data());
    for (std::size_t t = 0; t < cfg.trainer.warmup; ++t) ASSERT_EQ(tr.step().losses[Term::Ncl], 0.0);
    EXPECT_GT(tr.step().losses[Term::Ncl], 0.0);
}

TEST(Trainer, DeterministicGivenConfigAndSeed) {
    auto cfg = small_config();
    Trainer a(cfg, small_data()), b(cfg, small_data());
    const auto ra = a.run(), rb = b.run();
    EXPECT_EQ(params(a.network()), params(b.network()));
    for (std::size_t i = 0; i < ra.evaluations.size(); ++i) {
        EXPECT_EQ(ra.evaluations[i].theta, rb.evaluations[i].theta);
        EXPECT_EQ(ra.evaluations[i].last_step.losses.total, rb.evaluations[i].last_step.losses.total);
    }
    cfg.trainer.seed = 1;
    Trainer c(cfg, small_data());
    c.run();
    EXPECT_NE(params(c.network()), params(a.network()));
}

TEST(Trainer, RejectsLeakedLabelsAndBudgetOverrun) {
    auto data = small_data();
    data.target_unlabeled.front().label = 0;
    EXPECT_THROW(Trainer(small_config(), data), InvalidInput);
    auto cfg = small_config();
    cfg.trainer.iters = 2;
    cfg.trainer.warmup = 1;
    Trainer tr(cfg, small_data());
    tr.step();
    tr.step();
    EXPECT_THROW(tr.step(), UsageError);
}

TEST(Trainer, DivergenceReportsComponents) {
    auto cfg = small_config();
    cfg.model.sgd.base_lr = 1e200;
    Trainer tr(cfg, small_data());
    try {
        for (int i = 0; i < 10; ++i) tr.step();
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("at iteration"), std::string::npos) << what;
    }
}

TEST(Evaluate, PerfectPredictor) {
    std::vector<std::size_t> y;
    for (std::size_t i = 0; i < 40; ++i) y.push_back(i % 4);
    const auto r = evaluate_predictions(y, y, 4);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_EQ(r.recall_std, 0.0);
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(r.confusion[a][b], a == b ? 10u : 0u);
}

TEST(Evaluate, UniformRandomPredictorBinomial) {
    std::mt19937_64 rng(71);
    std::uniform_int_distribution<std::size_t> cls(0, 7);
    const std::size_t n = 8000;
    std::vector<std::size_t> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = i % 8;
        p[i] = cls(rng);
    }
    const auto r = evaluate_predictions(p, y, 8);
    EXPECT_NEAR(r.accuracy, 0.125, 3.0 * std::sqrt(0.125 * 0.875 / double(n)));
}

TEST(Evaluate, RecallStatistics) {
    // Class 0 always right, class 1 half right.
    const std::vector<std::size_t> y{0, 0, 1, 1}, p{0, 0, 1, 0};
    const auto r = evaluate_predictions(p, y, 2);
    EXPECT_EQ(r.recall, (std::vector<double>{1.0, 0.5}));
    EXPECT_DOUBLE_EQ(r.macro_recall, 0.75);
    EXPECT_DOUBLE_EQ(r.recall_std, 0.25);
    EXPECT_THROW(evaluate_predictions({}, {}, 2), UsageError);
}
