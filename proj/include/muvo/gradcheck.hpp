#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "muvo/affinity.hpp"
#include "muvo/model.hpp"
#include "muvo/pseudolabel.hpp"
#include "muvo/trainer.hpp"

namespace muvo {

struct GradcheckOptions {
    std::uint64_t seed = 42;
    Architecture arch{4, 8, 5, 3, Activation::Tanh};
    std::size_t batch = 6;
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor of the relative error, so components whose true
    // value is ~0 are judged by absolute error instead.
    double scale_floor = 1e-6;
    std::optional<Term> inject_fault;
};

/// A seeded tiny problem: network, frozen step inputs, and the banks they
/// point into. Copying is disabled because `inputs` refers to the banks.
struct GradcheckInstance {
    Network net;
    PrototypeBank prototypes;
    SourceBank source_bank;
    StepInputs inputs;

    GradcheckInstance() = default;
    GradcheckInstance(const GradcheckInstance&) = delete;
    GradcheckInstance& operator=(const GradcheckInstance&) = delete;
};

// Pushes every hidden pre-activation at least `margin` away from the ReLU
// kink for the given batches by shifting first-layer biases.
inline void nudge_off_kinks(Network& net, const std::vector<const Matrix*>& batches, double margin = 1e-3) {
    if (net.architecture().activation != Activation::Relu) return;
    const auto& L = net.layout();
    for (int round = 0; round < 50; ++round) {
        bool moved = false;
        for (const Matrix* m : batches) {
            if (!m || m->empty()) continue;
            const auto cache = net.forward(*m);
            for (std::size_t s = 0; s < cache.hidden_pre.rows; ++s)
                for (std::size_t i = 0; i < cache.hidden_pre.cols; ++i)
                    if (std::abs(cache.hidden_pre(s, i)) < margin) {
                        net.parameters()[L.b1 + i] += 3.0 * margin;
                        moved = true;
                    }
        }
        if (!moved) return;
    }
}

inline void build_gradcheck_instance(GradcheckInstance& g, const GradcheckOptions& opt) {
    const auto& a = opt.arch;
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> cls(0, a.num_classes - 1);
    auto random_matrix = [&](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (double& v : m.data) v = gauss(rng);
        return m;
    };

    g.net = Network::initialized(a, mix_seed(opt.seed, 1));
    // Larger-than-default weights so predictions are not all near uniform.
    for (double& p : g.net.parameters()) p *= 2.5;

    auto& in = g.inputs;
    in.source_x = random_matrix(opt.batch, a.input_dim);
    in.labeled_x = random_matrix(opt.batch, a.input_dim);
    in.strong1_x = random_matrix(opt.batch, a.input_dim);
    in.strong2_x = random_matrix(opt.batch, a.input_dim);
    const Matrix weak = random_matrix(opt.batch, a.input_dim);
    for (std::size_t i = 0; i < opt.batch; ++i) {
        in.source_y.push_back(cls(rng));
        in.labeled_y.push_back(cls(rng));
    }
    nudge_off_kinks(g.net, {&in.source_x, &in.labeled_x, &in.strong1_x, &in.strong2_x});

    ConfidenceBank bank(a.num_classes, 0.999, 0.2);
    std::uniform_real_distribution<double> theta_dist(0.3, 1.0);
    Vector theta(a.num_classes);
    for (double& t : theta) t = theta_dist(rng);
    bank.set_theta(theta);

    // Threshold at the median debiased confidence so roughly half the
    // unlabeled samples pass the mask.
    const auto weak_cache = g.net.forward(weak);
    std::vector<double> conf;
    for (std::size_t r = 0; r < opt.batch; ++r) {
        const auto p = debiased_prediction(weak_cache.logits.row(r), bank);
        conf.push_back(*std::max_element(p.begin(), p.end()));
    }
    auto sorted = conf;
    std::sort(sorted.begin(), sorted.end());
    const double threshold = sorted[sorted.size() / 2];
    const std::size_t m = std::max<std::size_t>(1, (a.num_classes - 1) / 2);
    for (std::size_t r = 0; r < opt.batch; ++r)
        in.pseudo.push_back(make_pseudo_labels(weak_cache.logits.row(r), bank, threshold, m, rng));
    in.bias_shift = bank.log_adjustment();

    g.prototypes = PrototypeBank(a.num_classes, a.feature_dim, 0.999);
    for (std::size_t c = 0; c < a.num_classes; ++c) {
        Vector p(a.feature_dim);
        for (double& v : p) v = gauss(rng);
        g.prototypes.set(c, p);
    }
    g.source_bank = SourceBank(a.num_classes, 4);
    // Leave the last class queue empty to exercise the empty-queue path.
    for (std::size_t c = 0; c + 1 < a.num_classes; ++c)
        for (std::size_t k = 0; k < 1 + c; ++k) {
            Vector f(a.feature_dim);
            for (double& v : f) v = gauss(rng);
            g.source_bank.push(c, f);
        }

    in.prototypes = &g.prototypes;
    in.source_bank = &g.source_bank;
    in.affinity = AffinityConfig{};
    in.affinity.tau = 0.5;
    in.lambda_con = 2.5;
    in.lambda_cda = 1.0;
}

struct GradcheckRow {
    std::string name;
    double max_rel_error = 0.0;
    double loss = 0.0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckRow> rows;
    bool all_passed() const {
        return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.passed; });
    }
};

/// Compares the analytic gradient of each loss term (and the weighted total)
/// against central finite differences of the loss value.
inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    GradcheckInstance g;
    build_gradcheck_instance(g, opt);
    ObjectiveHooks hooks;
    hooks.flip_gradient = opt.inject_fault;

    std::vector<std::pair<std::string, TermSet>> checks;
    for (std::size_t i = 0; i < kTermCount; ++i) checks.emplace_back(kTermNames[i], TermSet::only(static_cast<Term>(i)));
    checks.emplace_back("total", TermSet::all());

    GradcheckReport report;
    for (const auto& [name, terms] : checks) {
        g.inputs.terms = terms;
        const auto analytic = evaluate_objective(g.net, g.inputs, true, hooks);
        Network probe = g.net;
        double worst = 0.0;
        for (std::size_t i = 0; i < probe.parameter_count(); ++i) {
            const double orig = probe.parameters()[i];
            probe.parameters()[i] = orig + opt.epsilon;
            const double plus = evaluate_objective(probe, g.inputs, false).losses.total;
            probe.parameters()[i] = orig - opt.epsilon;
            const double minus = evaluate_objective(probe, g.inputs, false).losses.total;
            probe.parameters()[i] = orig;
            const double numeric = (plus - minus) / (2.0 * opt.epsilon);
            const double a = analytic.grad[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), opt.scale_floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
        report.rows.push_back({name, worst, analytic.losses.total, worst < opt.tolerance});
    }
    return report;
}

}  // namespace muvo
