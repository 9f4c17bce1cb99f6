#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "muvo/errors.hpp"
#include "muvo/numerics.hpp"

namespace muvo {

// How the per-step class confidence is measured from a batch of weak-view
// predictions.
enum class ConfidenceStatistic {
    // Mean of max-probabilities over samples whose argmax is c; classes that
    // no sample predicts keep their previous value.
    ArgmaxConfidence,
    // Mean of p_c over every sample in the batch; all classes update.
    ClassMean,
};

inline ConfidenceStatistic parse_confidence_statistic(const std::string& s) {
    if (s == "argmax_confidence") return ConfidenceStatistic::ArgmaxConfidence;
    if (s == "class_mean") return ConfidenceStatistic::ClassMean;
    throw InvalidConfig("unknown bank.statistic '" + s + "' (expected argmax_confidence or class_mean)");
}

inline std::string to_string(ConfidenceStatistic s) {
    return s == ConfidenceStatistic::ClassMean ? "class_mean" : "argmax_confidence";
}

/// Global class-wise confidence bank Theta, maintained by EMA over
/// target-unlabeled weak-view predictions. Starts at all ones so that
/// log(Theta) = 0 and the first predictions are unadjusted.
class ConfidenceBank {
public:
    ConfidenceBank() = default;

    ConfidenceBank(std::size_t num_classes, double momentum, double debias_factor,
                   ConfidenceStatistic statistic = ConfidenceStatistic::ArgmaxConfidence)
        : theta_(num_classes, 1.0), momentum_(momentum), debias_factor_(debias_factor), statistic_(statistic) {
        check_momentum(momentum);
        if (num_classes == 0) throw InvalidConfig("confidence bank needs at least one class");
        if (!(debias_factor >= 0.0)) throw InvalidConfig("debias.factor must be >= 0");
    }

    std::span<const double> theta() const { return theta_; }
    double momentum() const { return momentum_; }
    double debias_factor() const { return debias_factor_; }
    ConfidenceStatistic statistic() const { return statistic_; }
    std::size_t num_classes() const { return theta_.size(); }

    void set_theta(std::span<const double> values) {
        if (values.size() != theta_.size()) throw InvalidInput("theta has wrong length");
        for (double v : values)
            if (!(v > 0.0 && v <= 1.0)) throw DegenerateInput("confidence bank entries must lie in (0, 1]");
        theta_.assign(values.begin(), values.end());
    }

    // Empty batch is a no-op.
    void update(const std::vector<Vector>& weak_probs) {
        if (weak_probs.empty()) return;
        const std::size_t C = theta_.size();
        Vector sum(C, 0.0);
        std::vector<std::size_t> count(C, 0);
        for (const auto& p : weak_probs) {
            if (p.size() != C) throw InvalidInput("confidence bank update: probability length mismatch");
            if (statistic_ == ConfidenceStatistic::ArgmaxConfidence) {
                const std::size_t c = argmax(p);
                sum[c] += p[c];
                ++count[c];
            } else {
                for (std::size_t c = 0; c < C; ++c) {
                    sum[c] += p[c];
                    ++count[c];
                }
            }
        }
        for (std::size_t c = 0; c < C; ++c) {
            if (count[c] == 0) continue;
            const double batch_conf = std::clamp(sum[c] / static_cast<double>(count[c]), kProbEpsilon, 1.0);
            theta_[c] = std::clamp(ema_update(theta_[c], batch_conf, momentum_), kProbEpsilon, 1.0);
        }
    }

    // phi * log(Theta_c) per class.
    Vector log_adjustment() const {
        Vector adj(theta_.size());
        for (std::size_t c = 0; c < theta_.size(); ++c) {
            if (!(theta_[c] > 0.0)) throw DegenerateInput("confidence bank entry is 0; log undefined");
            adj[c] = debias_factor_ * std::log(theta_[c]);
        }
        return adj;
    }

private:
    std::vector<double> theta_;
    double momentum_ = 0.999;
    double debias_factor_ = 0.2;
    ConfidenceStatistic statistic_ = ConfidenceStatistic::ArgmaxConfidence;
};

namespace detail {
inline Vector shifted_softmax(std::span<const double> logits, std::span<const double> shift, double sign) {
    if (logits.size() != shift.size()) throw InvalidInput("logit/bank length mismatch");
    Vector z(logits.begin(), logits.end());
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += sign * shift[c];
    return softmax(z);
}
}  // namespace detail

/// Debiased weak-view prediction: softmax(z - phi * log Theta).
inline Vector debiased_prediction(std::span<const double> weak_logits, const ConfidenceBank& bank) {
    return detail::shifted_softmax(weak_logits, bank.log_adjustment(), -1.0);
}

/// Biased strong-view prediction: softmax(z + phi * log Theta).
inline Vector biased_prediction(std::span<const double> strong_logits, const ConfidenceBank& bank) {
    return detail::shifted_softmax(strong_logits, bank.log_adjustment(), +1.0);
}

struct MaskedLoss {
    double loss = 0.0;
    bool mask = false;
};

/// Thresholded cross-entropy of the biased strong prediction against the
/// one-hot debiased pseudo-label.
inline MaskedLoss dcl_loss(std::span<const double> debiased_weak, std::span<const double> biased_strong,
                           double threshold) {
    if (debiased_weak.size() != biased_strong.size()) throw InvalidInput("dcl_loss: length mismatch");
    const std::size_t label = argmax(debiased_weak);
    if (debiased_weak[label] < threshold) return {0.0, false};
    return {-std::log(clamp_prob(biased_strong[label])), true};
}

// d(-log p_k)/dz for p = softmax(z + shift): p - e_k.
inline Vector dcl_logit_gradient(std::span<const double> biased_strong, std::size_t label) {
    Vector g(biased_strong.begin(), biased_strong.end());
    g[label] -= 1.0;
    return g;
}

/// Uniformly random m-subset of the non-argmax classes, as a multi-hot vector.
template <class Urbg>
Vector sample_negative_labels(std::span<const double> weak_probs, std::size_t m, Urbg& rng) {
    const std::size_t C = weak_probs.size();
    if (C < 2 || m < 1 || m > C - 1)
        throw InvalidConfig("negative.m must satisfy 1 <= m <= C-1 (m=" + std::to_string(m) +
                            ", C=" + std::to_string(C) + ")");
    const std::size_t top = argmax(weak_probs);
    std::vector<std::size_t> candidates;
    candidates.reserve(C - 1);
    for (std::size_t c = 0; c < C; ++c)
        if (c != top) candidates.push_back(c);
    // Partial Fisher-Yates: the first m slots form a uniform m-subset.
    for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
        std::swap(candidates[i], candidates[pick(rng)]);
    }
    Vector out(C, 0.0);
    for (std::size_t i = 0; i < m; ++i) out[candidates[i]] = 1.0;
    return out;
}

/// -sum_c y_c log(1 - p_c) with p clamped below 1.
inline double ncl_loss(std::span<const double> negative_labels, std::span<const double> strong_probs) {
    if (negative_labels.size() != strong_probs.size()) throw InvalidInput("ncl_loss: length mismatch");
    double loss = 0.0;
    for (std::size_t c = 0; c < strong_probs.size(); ++c)
        if (negative_labels[c] != 0.0) loss -= negative_labels[c] * std::log(1.0 - std::min(strong_probs[c], 1.0 - kProbEpsilon));
    return loss;
}

inline Vector ncl_logit_gradient(std::span<const double> negative_labels, std::span<const double> strong_probs) {
    Vector dp(strong_probs.size(), 0.0);
    for (std::size_t c = 0; c < strong_probs.size(); ++c)
        if (negative_labels[c] != 0.0)
            dp[c] = negative_labels[c] / std::max(1.0 - strong_probs[c], kProbEpsilon);
    return softmax_backward(strong_probs, dp);
}

/// Squared distance between the raw predictions of the two strong views.
inline double consistency_loss(std::span<const double> p1, std::span<const double> p2) {
    if (p1.size() != p2.size()) throw InvalidInput("consistency_loss: length mismatch");
    double loss = 0.0;
    for (std::size_t c = 0; c < p1.size(); ++c) {
        const double diff = p1[c] - p2[c];
        loss += diff * diff;
    }
    return loss;
}

struct ConsistencyGradient {
    Vector first;
    Vector second;
};

inline ConsistencyGradient consistency_logit_gradient(std::span<const double> p1, std::span<const double> p2) {
    Vector d1(p1.size()), d2(p1.size());
    for (std::size_t c = 0; c < p1.size(); ++c) {
        d1[c] = 2.0 * (p1[c] - p2[c]);
        d2[c] = -d1[c];
    }
    return {softmax_backward(p1, d1), softmax_backward(p2, d2)};
}

/// Everything the unsupervised losses need from one weak-view prediction.
/// Pseudo-labels are gradient constants.
struct PseudoLabelOutput {
    Vector debiased_probs;
    std::size_t debiased_label = 0;
    bool passes_threshold = false;
    // Multi-hot over classes; empty when negative learning is inactive.
    Vector negative_labels;
};

template <class Urbg>
PseudoLabelOutput make_pseudo_labels(std::span<const double> weak_logits, const ConfidenceBank& bank,
                                     double threshold, std::size_t negatives, Urbg& rng) {
    PseudoLabelOutput out;
    out.debiased_probs = debiased_prediction(weak_logits, bank);
    out.debiased_label = argmax(out.debiased_probs);
    out.passes_threshold = out.debiased_probs[out.debiased_label] >= threshold;
    if (negatives > 0) out.negative_labels = sample_negative_labels(softmax(weak_logits), negatives, rng);
    return out;
}

}  // namespace muvo
