#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "muvo/affinity.hpp"
#include "muvo/augment.hpp"
#include "muvo/data.hpp"
#include "muvo/errors.hpp"
#include "muvo/model.hpp"
#include "muvo/numerics.hpp"
#include "muvo/pseudolabel.hpp"

namespace muvo {

// ---------------------------------------------------------------------------
// Configuration

enum class NegativeGating { Always, AfterWarmup };

inline NegativeGating parse_negative_gating(const std::string& s) {
    if (s == "always") return NegativeGating::Always;
    if (s == "after_warmup") return NegativeGating::AfterWarmup;
    throw InvalidConfig("unknown negative.gating '" + s + "' (expected always or after_warmup)");
}

inline std::string to_string(NegativeGating g) { return g == NegativeGating::Always ? "always" : "after_warmup"; }

struct ModelConfig {
    std::size_t hidden_dim = 64;
    std::size_t feature_dim = 32;
    Activation activation = Activation::Tanh;
    SgdConfig sgd;
};

struct DebiasConfig {
    double factor = 0.2;
    double threshold = 0.95;
};

struct NegativeConfig {
    std::size_t m = 3;
    NegativeGating gating = NegativeGating::Always;
};

struct BankConfig {
    double momentum = 0.999;
    bool use_raw_probs = false;
    ConfidenceStatistic statistic = ConfidenceStatistic::ArgmaxConfidence;
};

// The unsupervised loss families that can be switched off for ablations.
struct LossSwitches {
    bool dcl = true;
    bool ncl = true;
    bool con = true;
    bool cda = true;

    bool operator==(const LossSwitches&) const = default;
};

struct TrainerConfig {
    std::size_t iters = 4000;
    std::size_t warmup = 800;
    std::size_t batch_size = 32;
    double ramp_nu = 30.0;
    std::size_t eval_interval = 500;
    std::uint64_t seed = 0;
    LossSwitches losses;
    // Source + labeled-target training only; the unlabeled set is never touched.
    bool baseline = false;
};

struct TrainConfig {
    ModelConfig model;
    AugmentConfig augment;
    DebiasConfig debias;
    NegativeConfig negative;
    BankConfig bank;
    AffinityConfig affinity;
    TrainerConfig trainer;

    void validate(std::size_t num_classes) const {
        augment.validate();
        affinity.validate();
        check_momentum(bank.momentum);
        if (!(debias.factor >= 0.0)) throw InvalidConfig("debias.factor must be >= 0");
        if (!(debias.threshold >= 0.0 && debias.threshold <= 1.0)) throw InvalidConfig("debias.threshold must lie in [0, 1]");
        if (negative.m < 1 || negative.m + 1 > num_classes)
            throw InvalidConfig("negative.m must satisfy 1 <= m <= C-1");
        if (trainer.warmup > trainer.iters) throw InvalidConfig("trainer.warmup must not exceed trainer.iters");
        if (trainer.batch_size == 0) throw InvalidConfig("trainer.batch_size must be >= 1");
        if (trainer.eval_interval == 0) throw InvalidConfig("trainer.eval_interval must be >= 1");
        if (!(trainer.ramp_nu >= 0.0)) throw InvalidConfig("trainer.ramp_nu must be >= 0");
        if (model.hidden_dim == 0 || model.feature_dim == 0) throw InvalidConfig("model dimensions must be > 0");
        SgdOptimizer(model.sgd, 1);
    }
};

/// Consistency weight nu * exp(-5 (1 - t/T)^2), held at nu once t >= T.
inline double ramp_weight(std::size_t t, std::size_t warmup, double nu) {
    if (warmup == 0 || t >= warmup) return nu;
    const double r = 1.0 - static_cast<double>(t) / static_cast<double>(warmup);
    return nu * std::exp(-5.0 * r * r);
}

// ---------------------------------------------------------------------------
// Objective

enum class Term : std::size_t { Sup = 0, Dcl, Ncl, Con, Ctr, Clu };
inline constexpr std::size_t kTermCount = 6;
inline constexpr std::array<const char*, kTermCount> kTermNames = {"sup", "dcl", "ncl", "con", "ctr", "clu"};

struct TermSet {
    std::array<bool, kTermCount> on{};

    static TermSet all() {
        TermSet s;
        s.on.fill(true);
        return s;
    }
    static TermSet only(Term t) {
        TermSet s;
        s.on[static_cast<std::size_t>(t)] = true;
        return s;
    }
    bool operator[](Term t) const { return on[static_cast<std::size_t>(t)]; }
    void set(Term t, bool v) { on[static_cast<std::size_t>(t)] = v; }
};

/// Everything the per-iteration objective needs, with all stop-gradient
/// quantities (pseudo-labels, masks, bank contents) already frozen. The
/// objective is then a pure function of the network parameters.
struct StepInputs {
    Matrix source_x;
    std::vector<std::size_t> source_y;
    Matrix labeled_x;
    std::vector<std::size_t> labeled_y;
    Matrix strong1_x;
    Matrix strong2_x;
    std::vector<PseudoLabelOutput> pseudo;
    // +phi * log(Theta), added to the first strong view's logits.
    Vector bias_shift;
    double lambda_con = 1.0;
    double lambda_cda = 1.0;
    const PrototypeBank* prototypes = nullptr;
    const SourceBank* source_bank = nullptr;
    AffinityConfig affinity;
    TermSet terms = TermSet::only(Term::Sup);
};

struct LossBreakdown {
    std::array<double, kTermCount> value{};
    double total = 0.0;
    double mask_rate = 0.0;

    double operator[](Term t) const { return value[static_cast<std::size_t>(t)]; }
    double& operator[](Term t) { return value[static_cast<std::size_t>(t)]; }

    std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        for (std::size_t i = 0; i < kTermCount; ++i) os << kTermNames[i] << '=' << value[i] << ' ';
        os << "total=" << total;
        return os.str();
    }
};

struct ObjectiveResult {
    LossBreakdown losses;
    Vector grad;
};

struct ObjectiveHooks {
    // Test hook: negates the analytic gradient of one term.
    std::optional<Term> flip_gradient;
};

namespace detail {
inline double cross_entropy_rows(const Matrix& logits, const std::vector<std::size_t>& labels, Matrix* dlogits,
                                 double scale) {
    double total = 0.0;
    for (std::size_t s = 0; s < logits.rows; ++s) {
        const auto p = softmax(logits.row(s));
        total -= std::log(clamp_prob(p[labels[s]]));
        if (dlogits) {
            for (std::size_t c = 0; c < p.size(); ++c)
                (*dlogits)(s, c) += scale * (p[c] - (c == labels[s] ? 1.0 : 0.0));
        }
    }
    return total;
}
}  // namespace detail

/// L_total = L_sup + L_dcl + L_ncl + lambda_con L_con + lambda_cda (L_ctr + L_clu)
/// restricted to the active terms, with its analytic parameter gradient.
inline ObjectiveResult evaluate_objective(const Network& net, const StepInputs& in, bool want_grad,
                                          const ObjectiveHooks& hooks = {}) {
    ObjectiveResult out;
    if (want_grad) out.grad.assign(net.parameter_count(), 0.0);
    const TermSet& on = in.terms;
    const std::size_t C = net.architecture().num_classes;
    auto sign = [&](Term t) { return hooks.flip_gradient == t ? -1.0 : 1.0; };

    const bool need_source = !in.source_x.empty() && (on[Term::Sup] || on[Term::Ctr] || on[Term::Clu]);
    if (need_source) {
        const auto cache = net.forward(in.source_x);
        const std::size_t n = in.source_x.rows;
        Matrix dz(n, C);
        Matrix df;
        if (on[Term::Sup]) {
            out.losses[Term::Sup] += detail::cross_entropy_rows(cache.logits, in.source_y, want_grad ? &dz : nullptr,
                                                                sign(Term::Sup) / static_cast<double>(n)) /
                                     static_cast<double>(n);
        }
        if ((on[Term::Ctr] || on[Term::Clu]) && in.prototypes && in.source_bank) {
            const std::size_t d = net.architecture().feature_dim;
            if (want_grad) df = Matrix(n, d);
            std::vector<FeatureLoss> ctr(n);
            std::size_t ctr_active = 0;
            if (on[Term::Ctr]) {
                for (std::size_t s = 0; s < n; ++s) {
                    ctr[s] = contrastive_term(cache.features.row(s), in.source_y[s], *in.prototypes, in.affinity, want_grad);
                    if (ctr[s].active) ++ctr_active;
                }
                if (ctr_active > 0) {
                    const double inv = 1.0 / static_cast<double>(ctr_active);
                    for (std::size_t s = 0; s < n; ++s) {
                        if (!ctr[s].active) continue;
                        out.losses[Term::Ctr] += ctr[s].loss * inv;
                        if (want_grad) {
                            const double w = sign(Term::Ctr) * in.lambda_cda * inv;
                            for (std::size_t j = 0; j < d; ++j) df(s, j) += w * ctr[s].grad[j];
                        }
                    }
                }
            }
            if (on[Term::Clu]) {
                const double inv = 1.0 / static_cast<double>(n);
                for (std::size_t s = 0; s < n; ++s) {
                    const auto clu = cluster_term(cache.features.row(s), in.source_y[s], *in.source_bank, want_grad);
                    if (!clu.active) continue;
                    out.losses[Term::Clu] += clu.loss * inv;
                    if (want_grad) {
                        const double w = sign(Term::Clu) * in.lambda_cda * inv;
                        for (std::size_t j = 0; j < d; ++j) df(s, j) += w * clu.grad[j];
                    }
                }
            }
        }
        if (want_grad) net.backward(cache, dz, df, out.grad);
    }

    if (on[Term::Sup] && !in.labeled_x.empty()) {
        const auto cache = net.forward(in.labeled_x);
        const std::size_t n = in.labeled_x.rows;
        Matrix dz(n, C);
        out.losses[Term::Sup] += detail::cross_entropy_rows(cache.logits, in.labeled_y, want_grad ? &dz : nullptr,
                                                            sign(Term::Sup) / static_cast<double>(n)) /
                                 static_cast<double>(n);
        if (want_grad) net.backward(cache, dz, {}, out.grad);
    }

    const bool unlabeled = !in.strong1_x.empty() && (on[Term::Dcl] || on[Term::Ncl] || on[Term::Con]);
    if (unlabeled) {
        const std::size_t n = in.strong1_x.rows;
        if (in.pseudo.size() != n || in.strong2_x.rows != n)
            throw UsageError("objective: unlabeled views and pseudo-labels disagree in size");
        const double inv = 1.0 / static_cast<double>(n);
        const auto cache1 = net.forward(in.strong1_x);
        std::optional<ForwardCache> cache2;
        if (on[Term::Ncl] || on[Term::Con]) cache2 = net.forward(in.strong2_x);
        Matrix dz1(n, C), dz2(n, C);
        std::size_t masked_in = 0;
        for (std::size_t s = 0; s < n; ++s) {
            const auto& pl = in.pseudo[s];
            const auto z1 = cache1.logits.row(s);
            if (on[Term::Dcl]) {
                Vector shifted(z1.begin(), z1.end());
                for (std::size_t c = 0; c < C; ++c) shifted[c] += in.bias_shift[c];
                const auto biased = softmax(shifted);
                if (pl.passes_threshold) {
                    ++masked_in;
                    out.losses[Term::Dcl] += -std::log(clamp_prob(biased[pl.debiased_label])) * inv;
                    if (want_grad) {
                        const auto g = dcl_logit_gradient(biased, pl.debiased_label);
                        for (std::size_t c = 0; c < C; ++c) dz1(s, c) += sign(Term::Dcl) * inv * g[c];
                    }
                }
            }
            if (cache2) {
                const auto p2 = softmax(cache2->logits.row(s));
                if (on[Term::Ncl] && !pl.negative_labels.empty()) {
                    out.losses[Term::Ncl] += ncl_loss(pl.negative_labels, p2) * inv;
                    if (want_grad) {
                        const auto g = ncl_logit_gradient(pl.negative_labels, p2);
                        for (std::size_t c = 0; c < C; ++c) dz2(s, c) += sign(Term::Ncl) * inv * g[c];
                    }
                }
                if (on[Term::Con]) {
                    const auto p1 = softmax(z1);
                    out.losses[Term::Con] += consistency_loss(p1, p2) * inv;
                    if (want_grad) {
                        const auto g = consistency_logit_gradient(p1, p2);
                        const double w = sign(Term::Con) * in.lambda_con * inv;
                        for (std::size_t c = 0; c < C; ++c) {
                            dz1(s, c) += w * g.first[c];
                            dz2(s, c) += w * g.second[c];
                        }
                    }
                }
            }
        }
        out.losses.mask_rate = static_cast<double>(masked_in) * inv;
        if (want_grad) {
            net.backward(cache1, dz1, {}, out.grad);
            if (cache2) net.backward(*cache2, dz2, {}, out.grad);
        }
    }

    const auto& L = out.losses;
    out.losses.total = L[Term::Sup] + L[Term::Dcl] + L[Term::Ncl] + in.lambda_con * L[Term::Con] +
                       in.lambda_cda * (L[Term::Ctr] + L[Term::Clu]);
    return out;
}

/// Mean cross-entropy over the source batch plus mean cross-entropy over the
/// target-labeled batch (an empty target batch contributes nothing).
inline double supervised_loss(const Network& net, const std::vector<Sample>& source, const std::vector<Sample>& labeled) {
    auto part = [&](const std::vector<Sample>& batch) {
        if (batch.empty()) return 0.0;
        std::vector<std::size_t> idx(batch.size()), y(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (!batch[i].label) throw UsageError("supervised_loss: unlabeled sample in a labeled batch");
            idx[i] = i;
            y[i] = *batch[i].label;
        }
        const auto cache = net.forward(to_matrix(batch, idx));
        return detail::cross_entropy_rows(cache.logits, y, nullptr, 0.0) / static_cast<double>(batch.size());
    };
    return part(source) + part(labeled);
}

// ---------------------------------------------------------------------------
// Evaluation

struct ClassificationReport {
    std::size_t count = 0;
    double accuracy = 0.0;
    std::vector<double> recall;
    double macro_recall = 0.0;
    // Population standard deviation of the per-class recalls.
    double recall_std = 0.0;
    // confusion[truth][predicted]
    std::vector<std::vector<std::size_t>> confusion;
};

inline ClassificationReport evaluate_predictions(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                                                 std::size_t num_classes) {
    if (predicted.empty()) throw UsageError("evaluate: empty test set");
    if (predicted.size() != truth.size()) throw UsageError("evaluate: prediction/label count mismatch");
    ClassificationReport r;
    r.count = predicted.size();
    r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (truth[i] >= num_classes || predicted[i] >= num_classes) throw InvalidInput("evaluate: class index out of range");
        ++r.confusion[truth[i]][predicted[i]];
        if (truth[i] == predicted[i]) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
    r.recall.assign(num_classes, 0.0);
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t row = 0;
        for (std::size_t v : r.confusion[c]) row += v;
        if (row == 0) continue;
        r.recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(row);
        ++present;
    }
    if (present > 0) {
        double sum = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c) sum += r.recall[c];
        r.macro_recall = sum / static_cast<double>(present);
        double var = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c) {
            std::size_t row = 0;
            for (std::size_t v : r.confusion[c]) row += v;
            if (row == 0) continue;
            var += (r.recall[c] - r.macro_recall) * (r.recall[c] - r.macro_recall);
        }
        r.recall_std = std::sqrt(var / static_cast<double>(present));
    }
    return r;
}

inline std::vector<std::size_t> predict(const Network& net, const std::vector<Sample>& samples) {
    std::vector<std::size_t> out;
    if (samples.empty()) return out;
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto cache = net.forward(to_matrix(samples, idx));
    out.reserve(samples.size());
    for (std::size_t s = 0; s < samples.size(); ++s) out.push_back(argmax(cache.logits.row(s)));
    return out;
}

inline ClassificationReport evaluate(const Network& net, const std::vector<Sample>& test_set) {
    if (test_set.empty()) throw UsageError("evaluate: empty test set");
    std::vector<std::size_t> truth;
    truth.reserve(test_set.size());
    for (const auto& s : test_set) {
        if (!s.label) throw UsageError("evaluate: test sample without label");
        truth.push_back(*s.label);
    }
    return evaluate_predictions(predict(net, test_set), truth, net.architecture().num_classes);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainingData {
    std::size_t num_classes = 0;
    std::vector<Sample> source;
    std::vector<Sample> target_labeled;
    std::vector<Sample> target_unlabeled;
    std::vector<Sample> target_val;
    std::vector<Sample> target_test;
    // Hidden truth for the unlabeled set; only used for reporting.
    std::vector<std::size_t> unlabeled_truth;

    static TrainingData from(const Dataset& ds, const DatasetSpec& spec) {
        TrainingData td;
        td.num_classes = spec.num_classes;
        td.source = ds.source_train;
        auto split = kshot_split(ds.target_train, spec.num_classes, spec.shots, spec.seed);
        td.target_labeled = std::move(split.labeled);
        td.target_unlabeled = std::move(split.unlabeled);
        td.unlabeled_truth = std::move(split.unlabeled_truth);
        td.target_val = ds.target_val;
        td.target_test = ds.target_test;
        return td;
    }
};

struct StepMetrics {
    std::size_t iteration = 0;
    LossBreakdown losses;
    double lr = 0.0;
    double lambda_con = 0.0;
    std::size_t admitted = 0;
    bool affinity_active = false;
};

struct EvalRecord {
    std::size_t iteration = 0;
    ClassificationReport val;
    ClassificationReport test;
    std::vector<std::size_t> pseudo_label_histogram;
    std::optional<double> pseudo_label_accuracy;
    std::vector<double> theta;
    std::vector<std::size_t> queue_occupancy;
    std::size_t prototypes_initialized = 0;
    StepMetrics last_step;
};

struct RunResult {
    std::vector<EvalRecord> evaluations;
    std::size_t best_index = 0;
    Network best_network;
    Network final_network;

    const EvalRecord& best() const { return evaluations.at(best_index); }
    const EvalRecord& final() const { return evaluations.back(); }
};

/// Runs the three-stage iteration: supervised learning on weak views of
/// labeled data; debiased, negative and consistency learning on the
/// unlabeled set; and, from the warmup iteration on, cross-domain affinity
/// learning. All randomness comes from per-purpose streams derived from
/// trainer.seed, so disabling a stage never shifts another stage's draws.
class Trainer {
public:
    Trainer(TrainConfig cfg, TrainingData data)
        : cfg_(std::move(cfg)),
          data_(std::move(data)),
          net_(Network::initialized(architecture(), mix_seed(cfg_.trainer.seed, 100))),
          optimizer_(cfg_.model.sgd, net_.parameter_count()),
          bank_(data_.num_classes, cfg_.bank.momentum, cfg_.debias.factor, cfg_.bank.statistic),
          prototypes_(data_.num_classes, cfg_.model.feature_dim, cfg_.bank.momentum),
          source_bank_(data_.num_classes, cfg_.affinity.capacity),
          sampler_(data_.source.size(), data_.target_labeled.size(),
                   cfg_.trainer.baseline ? 1 : data_.target_unlabeled.size(), cfg_.trainer.batch_size,
                   mix_seed(cfg_.trainer.seed, 101)),
          aug_source_(mix_seed(cfg_.trainer.seed ^ cfg_.augment.rng_seed, 102)),
          aug_labeled_(mix_seed(cfg_.trainer.seed ^ cfg_.augment.rng_seed, 103)),
          aug_unlabeled_(mix_seed(cfg_.trainer.seed ^ cfg_.augment.rng_seed, 104)),
          negative_rng_(mix_seed(cfg_.trainer.seed, 105)) {
        if (data_.num_classes < 2) throw InvalidConfig("training needs at least two classes");
        cfg_.validate(data_.num_classes);
        if (data_.source.empty() || data_.target_labeled.empty())
            throw InvalidConfig("training needs non-empty source and target-labeled sets");
        if (!cfg_.trainer.baseline && data_.target_unlabeled.empty())
            throw InvalidConfig("training needs a non-empty target-unlabeled set");
        for (const auto* set : {&data_.source, &data_.target_labeled})
            for (const auto& s : *set)
                if (!s.label || *s.label >= data_.num_classes) throw InvalidInput("labeled set contains an invalid label");
        for (const auto& s : data_.target_unlabeled)
            if (s.label) throw InvalidInput("target-unlabeled sample exposes a label");
    }

    const TrainConfig& config() const { return cfg_; }
    const TrainingData& data() const { return data_; }
    const Network& network() const { return net_; }
    const SgdOptimizer& optimizer() const { return optimizer_; }
    const ConfidenceBank& confidence_bank() const { return bank_; }
    const PrototypeBank& prototypes() const { return prototypes_; }
    const SourceBank& source_bank() const { return source_bank_; }
    std::size_t iteration() const { return iteration_; }
    bool schedule_refreshed() const { return refreshed_; }

    Architecture architecture() const {
        if (data_.source.empty()) throw InvalidConfig("training needs a non-empty source set");
        return {data_.source.front().features.size(), cfg_.model.hidden_dim, cfg_.model.feature_dim, data_.num_classes,
                cfg_.model.activation};
    }

    /// Builds the frozen inputs for iteration t (Stages I-III bookkeeping,
    /// including bank updates) without touching the network parameters.
    StepInputs prepare_step(StepMetrics& metrics) {
        const std::size_t t = iteration_;
        const auto& tc = cfg_.trainer;
        const bool affinity_stage = !tc.baseline && t >= tc.warmup;
        metrics.iteration = t;
        metrics.affinity_active = affinity_stage;

        const auto batch = tc.baseline ? sampler_.next_labeled_only() : sampler_.next();
        StepInputs in;
        in.affinity = cfg_.affinity;
        in.lambda_con = ramp_weight(t, tc.warmup, tc.ramp_nu);
        in.lambda_cda = cfg_.affinity.weight;
        in.source_x = weak_views(data_.source, batch.source, aug_source_);
        in.labeled_x = weak_views(data_.target_labeled, batch.target_labeled, aug_labeled_);
        for (auto i : batch.source) in.source_y.push_back(*data_.source[i].label);
        for (auto i : batch.target_labeled) in.labeled_y.push_back(*data_.target_labeled[i].label);
        in.terms = TermSet::only(Term::Sup);
        if (tc.baseline) return in;

        // Stage II: three views of each unlabeled sample, drawn w, s1, s2.
        const std::size_t b = batch.target_unlabeled.size();
        const std::size_t din = data_.target_unlabeled.front().features.size();
        Matrix weak(b, din);
        in.strong1_x = Matrix(b, din);
        in.strong2_x = Matrix(b, din);
        for (std::size_t r = 0; r < b; ++r) {
            const auto& x = data_.target_unlabeled[batch.target_unlabeled[r]].features;
            const auto w = weak_augment(x, cfg_.augment, aug_unlabeled_);
            const auto s1 = strong_augment(x, cfg_.augment, aug_unlabeled_);
            const auto s2 = strong_augment(x, cfg_.augment, aug_unlabeled_);
            std::copy(w.begin(), w.end(), weak.row(r).begin());
            std::copy(s1.begin(), s1.end(), in.strong1_x.row(r).begin());
            std::copy(s2.begin(), s2.end(), in.strong2_x.row(r).begin());
        }
        const auto weak_cache = net_.forward(weak);

        std::vector<Vector> stats(b);
        for (std::size_t r = 0; r < b; ++r)
            stats[r] = cfg_.bank.use_raw_probs ? softmax(weak_cache.logits.row(r))
                                               : debiased_prediction(weak_cache.logits.row(r), bank_);
        bank_.update(stats);

        const bool negatives_on = tc.losses.ncl && (cfg_.negative.gating == NegativeGating::Always || t >= tc.warmup);
        in.pseudo.reserve(b);
        for (std::size_t r = 0; r < b; ++r)
            in.pseudo.push_back(make_pseudo_labels(weak_cache.logits.row(r), bank_, cfg_.debias.threshold,
                                                   negatives_on ? cfg_.negative.m : 0, negative_rng_));
        in.bias_shift = bank_.log_adjustment();

        in.terms.set(Term::Dcl, tc.losses.dcl);
        in.terms.set(Term::Ncl, negatives_on);
        in.terms.set(Term::Con, tc.losses.con);

        // Stage III: prototypes from confident weak-view features, then
        // source-bank admissions under triple agreement.
        if (affinity_stage) {
            std::vector<std::pair<Vector, std::size_t>> assigned;
            for (std::size_t r = 0; r < b; ++r) {
                if (!in.pseudo[r].passes_threshold) continue;
                const auto f = weak_cache.features.row(r);
                assigned.emplace_back(Vector(f.begin(), f.end()), in.pseudo[r].debiased_label);
            }
            prototypes_.update(assigned);
            if (prototypes_.any_initialized()) {
                const auto src_cache = net_.forward(in.source_x);
                for (std::size_t r = 0; r < in.source_x.rows; ++r) {
                    const auto adm = try_admit(source_bank_, prototypes_, src_cache.features.row(r),
                                               argmax(src_cache.logits.row(r)), in.source_y[r]);
                    if (adm.admitted) ++metrics.admitted;
                }
            }
            in.prototypes = &prototypes_;
            in.source_bank = &source_bank_;
            in.terms.set(Term::Ctr, tc.losses.cda);
            in.terms.set(Term::Clu, tc.losses.cda);
        }
        return in;
    }

    StepMetrics step() {
        if (iteration_ >= cfg_.trainer.iters) throw UsageError("train_step: iteration budget exhausted");
        if (iteration_ == cfg_.trainer.warmup && !refreshed_) {
            optimizer_.refresh_schedule();
            refreshed_ = true;
        }
        StepMetrics metrics;
        StepInputs in;
        ObjectiveResult result;
        try {
            in = prepare_step(metrics);
            result = evaluate_objective(net_, in, true);
        } catch (const TrainingDiverged& e) {
            throw TrainingDiverged(std::string(e.what()) + " at iteration " + std::to_string(iteration_));
        }
        metrics.losses = result.losses;
        metrics.lambda_con = in.lambda_con;
        metrics.lr = optimizer_.learning_rate();
        if (!std::isfinite(result.losses.total))
            throw TrainingDiverged("non-finite total loss at iteration " + std::to_string(iteration_) + ": " +
                                   result.losses.describe());
        try {
            optimizer_.step(net_, result.grad);
        } catch (const TrainingDiverged& e) {
            throw TrainingDiverged(std::string(e.what()) + " at iteration " + std::to_string(iteration_) + ": " +
                                   result.losses.describe());
        }
        ++iteration_;
        last_ = metrics;
        return metrics;
    }

    EvalRecord evaluate_now() const {
        EvalRecord rec;
        rec.iteration = iteration_;
        rec.val = data_.target_val.empty() ? ClassificationReport{} : evaluate(net_, data_.target_val);
        rec.test = evaluate(net_, data_.target_test);
        rec.pseudo_label_histogram.assign(data_.num_classes, 0);
        if (!data_.target_unlabeled.empty()) {
            std::vector<std::size_t> idx(data_.target_unlabeled.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            const auto cache = net_.forward(to_matrix(data_.target_unlabeled, idx));
            std::size_t correct = 0;
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const std::size_t label = argmax(debiased_prediction(cache.logits.row(r), bank_));
                ++rec.pseudo_label_histogram[label];
                if (r < data_.unlabeled_truth.size() && data_.unlabeled_truth[r] == label) ++correct;
            }
            if (data_.unlabeled_truth.size() == idx.size())
                rec.pseudo_label_accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
        }
        rec.theta.assign(bank_.theta().begin(), bank_.theta().end());
        for (std::size_t c = 0; c < data_.num_classes; ++c) {
            rec.queue_occupancy.push_back(source_bank_.occupancy(c));
            if (prototypes_.initialized(c)) ++rec.prototypes_initialized;
        }
        rec.last_step = last_;
        return rec;
    }

    /// Runs all remaining iterations, evaluating every eval_interval
    /// iterations and at the end. The best network is chosen by validation
    /// accuracy (earliest wins ties); without a validation split, the last.
    RunResult run(const std::function<void(const EvalRecord&)>& on_eval = {}) {
        RunResult result;
        double best_val = -1.0;
        while (iteration_ < cfg_.trainer.iters) {
            step();
            if (iteration_ % cfg_.trainer.eval_interval == 0 || iteration_ == cfg_.trainer.iters) {
                auto rec = evaluate_now();
                const double score = data_.target_val.empty() ? static_cast<double>(iteration_) : rec.val.accuracy;
                if (score > best_val) {
                    best_val = score;
                    result.best_index = result.evaluations.size();
                    result.best_network = net_;
                }
                if (on_eval) on_eval(rec);
                result.evaluations.push_back(std::move(rec));
            }
        }
        result.final_network = net_;
        return result;
    }

    // Checkpoint restore hooks.
    void restore(Network net, std::uint64_t optimizer_steps, std::span<const double> velocity, std::size_t iteration,
                 bool refreshed, ConfidenceBank bank, PrototypeBank protos, SourceBank source_bank) {
        if (!(net.architecture() == net_.architecture())) throw CorruptFile("checkpoint architecture mismatch");
        net_ = std::move(net);
        optimizer_.restore(optimizer_steps, velocity);
        iteration_ = iteration;
        refreshed_ = refreshed;
        bank_ = std::move(bank);
        prototypes_ = std::move(protos);
        source_bank_ = std::move(source_bank);
    }

private:
    Matrix weak_views(const std::vector<Sample>& set, const std::vector<std::size_t>& idx, Rng& rng) const {
        if (idx.empty()) return {};
        Matrix m(idx.size(), set.front().features.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto v = weak_augment(set[idx[r]].features, cfg_.augment, rng);
            std::copy(v.begin(), v.end(), m.row(r).begin());
        }
        return m;
    }

    TrainConfig cfg_;
    TrainingData data_;
    Network net_;
    SgdOptimizer optimizer_;
    ConfidenceBank bank_;
    PrototypeBank prototypes_;
    SourceBank source_bank_;
    EqualSampler sampler_;
    Rng aug_source_;
    Rng aug_labeled_;
    Rng aug_unlabeled_;
    Rng negative_rng_;
    std::size_t iteration_ = 0;
    bool refreshed_ = false;
    StepMetrics last_;
};

}  // namespace muvo
