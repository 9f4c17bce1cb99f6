#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "muvo/errors.hpp"
#include "muvo/numerics.hpp"

namespace muvo {

struct AffinityConfig {
    double tau = 0.1;
    std::size_t capacity = 64;
    double weight = 1.0;
    // L2-normalize features and prototypes inside the contrastive term.
    bool normalize = true;

    void validate() const {
        if (!(tau > 0.0)) throw InvalidConfig("affinity.tau must be > 0");
        if (capacity == 0) throw InvalidConfig("affinity.capacity must be > 0");
        if (!(weight >= 0.0)) throw InvalidConfig("affinity.weight must be >= 0");
    }
};

/// EMA target prototypes. A class prototype is unusable until the first
/// batch that assigns samples to it; that batch's mean becomes the prototype.
class PrototypeBank {
public:
    PrototypeBank() = default;
    PrototypeBank(std::size_t num_classes, std::size_t feature_dim, double momentum)
        : prototypes_(num_classes, Vector(feature_dim, 0.0)), initialized_(num_classes, false), momentum_(momentum) {
        check_momentum(momentum);
    }

    std::size_t num_classes() const { return prototypes_.size(); }
    std::size_t feature_dim() const { return prototypes_.empty() ? 0 : prototypes_.front().size(); }
    double momentum() const { return momentum_; }
    bool initialized(std::size_t c) const { return initialized_.at(c); }
    const Vector& prototype(std::size_t c) const { return prototypes_.at(c); }

    bool any_initialized() const {
        for (bool b : initialized_)
            if (b) return true;
        return false;
    }

    void set(std::size_t c, std::span<const double> value) {
        if (value.size() != feature_dim()) throw InvalidInput("prototype has wrong dimension");
        prototypes_.at(c).assign(value.begin(), value.end());
        initialized_.at(c) = true;
    }

    void update(const std::vector<std::pair<Vector, std::size_t>>& assigned) {
        const std::size_t C = prototypes_.size();
        const std::size_t d = feature_dim();
        std::vector<Vector> sums(C, Vector(d, 0.0));
        std::vector<std::size_t> counts(C, 0);
        for (const auto& [feature, c] : assigned) {
            if (c >= C) throw InvalidInput("prototype update: class index out of range");
            if (feature.size() != d) throw InvalidInput("prototype update: feature dimension mismatch");
            for (std::size_t j = 0; j < d; ++j) sums[c][j] += feature[j];
            ++counts[c];
        }
        for (std::size_t c = 0; c < C; ++c) {
            if (counts[c] == 0) continue;
            for (double& v : sums[c]) v /= static_cast<double>(counts[c]);
            if (!initialized_[c]) {
                prototypes_[c] = sums[c];
                initialized_[c] = true;
            } else {
                ema_update(prototypes_[c], sums[c], momentum_);
            }
        }
    }

private:
    std::vector<Vector> prototypes_;
    std::vector<bool> initialized_;
    double momentum_ = 0.999;
};

/// Class-wise FIFO queues of admitted source features, each bounded by the
/// per-class capacity; pushing onto a full queue drops its oldest entry.
class SourceBank {
public:
    SourceBank() = default;
    SourceBank(std::size_t num_classes, std::size_t capacity) : queues_(num_classes), capacity_(capacity) {
        if (capacity == 0) throw InvalidConfig("affinity.capacity must be > 0");
    }

    std::size_t num_classes() const { return queues_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<Vector>& queue(std::size_t c) const { return queues_.at(c); }
    std::size_t occupancy(std::size_t c) const { return queues_.at(c).size(); }

    void push(std::size_t c, Vector feature) {
        auto& q = queues_.at(c);
        q.push_back(std::move(feature));
        while (q.size() > capacity_) q.pop_front();
    }

private:
    std::vector<std::deque<Vector>> queues_;
    std::size_t capacity_ = 64;
};

// Index of the initialized prototype most cosine-similar to `feature`.
// Zero-norm prototypes are ignored; throws DegenerateInput for a zero feature.
inline std::size_t most_similar_prototype(std::span<const double> feature, const PrototypeBank& protos) {
    if (l2_norm(feature) == 0.0) throw DegenerateInput("source feature has zero norm");
    std::size_t best = protos.num_classes();
    double best_sim = -2.0;
    for (std::size_t c = 0; c < protos.num_classes(); ++c) {
        if (!protos.initialized(c) || l2_norm(protos.prototype(c)) == 0.0) continue;
        const double sim = cosine_similarity(feature, protos.prototype(c));
        if (sim > best_sim) {
            best_sim = sim;
            best = c;
        }
    }
    if (best == protos.num_classes()) throw UsageError("no usable target prototype is initialized");
    return best;
}

struct Admission {
    bool admitted = false;
    bool degenerate = false;
};

/// Admit `feature` into the ground-truth queue iff the most similar target
/// prototype, the model's prediction and the ground truth all agree.
inline Admission try_admit(SourceBank& bank, const PrototypeBank& protos, std::span<const double> feature,
                           std::size_t predicted, std::size_t ground_truth) {
    if (!protos.any_initialized()) throw UsageError("try_admit: no prototype initialized");
    if (ground_truth >= bank.num_classes()) throw InvalidInput("try_admit: class index out of range");
    if (l2_norm(feature) == 0.0) return {false, true};
    if (predicted != ground_truth) return {false, false};
    if (most_similar_prototype(feature, protos) != ground_truth) return {false, false};
    bank.push(ground_truth, Vector(feature.begin(), feature.end()));
    return {true, false};
}

struct FeatureLoss {
    double loss = 0.0;
    // False when the sample contributes nothing (e.g. positive uninitialized).
    bool active = false;
    // d loss / d feature; empty unless requested and active.
    Vector grad;
};

/// InfoNCE with the ground-truth prototype as positive and the other
/// initialized prototypes as negatives.
inline FeatureLoss contrastive_term(std::span<const double> feature, std::size_t label, const PrototypeBank& protos,
                                    const AffinityConfig& cfg, bool want_grad) {
    FeatureLoss out;
    if (label >= protos.num_classes()) throw InvalidInput("ctr_loss: class index out of range");
    if (!protos.initialized(label)) return out;
    const std::size_t d = feature.size();
    if (d != protos.feature_dim()) throw InvalidInput("ctr_loss: feature dimension mismatch");

    const double fnorm = l2_norm(feature);
    Vector u(feature.begin(), feature.end());
    if (cfg.normalize) {
        if (fnorm == 0.0) return out;
        for (double& v : u) v /= fnorm;
    }

    std::vector<std::size_t> classes;
    std::vector<Vector> keys;
    for (std::size_t c = 0; c < protos.num_classes(); ++c) {
        if (!protos.initialized(c)) continue;
        Vector q = protos.prototype(c);
        if (cfg.normalize) {
            const double n = l2_norm(q);
            if (n == 0.0) {
                if (c == label) return out;
                continue;
            }
            for (double& v : q) v /= n;
        }
        classes.push_back(c);
        keys.push_back(std::move(q));
    }

    Vector logits(keys.size());
    std::size_t positive = 0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        logits[i] = dot(u, keys[i]) / cfg.tau;
        if (classes[i] == label) positive = i;
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double s : logits) denom += std::exp(s - peak);
    out.loss = -(logits[positive] - peak) + std::log(denom);
    out.active = true;

    if (want_grad) {
        Vector du(d, 0.0);
        for (std::size_t i = 0; i < keys.size(); ++i) {
            const double w = (std::exp(logits[i] - peak) / denom - (i == positive ? 1.0 : 0.0)) / cfg.tau;
            for (std::size_t j = 0; j < d; ++j) du[j] += w * keys[i][j];
        }
        if (cfg.normalize) {
            const double radial = dot(u, du);
            for (std::size_t j = 0; j < d; ++j) du[j] = (du[j] - radial * u[j]) / fnorm;
        }
        out.grad = std::move(du);
    }
    return out;
}

inline double ctr_loss(std::span<const double> feature, std::size_t label, const PrototypeBank& protos,
                       const AffinityConfig& cfg = {}) {
    return contrastive_term(feature, label, protos, cfg, false).loss;
}

struct ClusterLoss : FeatureLoss {
    std::size_t skipped_entries = 0;
};

/// Mean cosine distance from `feature` to every stored feature of its class.
/// Zero-norm stored entries are skipped and counted.
inline ClusterLoss cluster_term(std::span<const double> feature, std::size_t label, const SourceBank& bank,
                                bool want_grad) {
    ClusterLoss out;
    const auto& q = bank.queue(label);
    if (q.empty()) return out;
    const double fnorm = l2_norm(feature);
    if (fnorm == 0.0) return out;
    const std::size_t d = feature.size();
    Vector u(feature.begin(), feature.end());
    for (double& v : u) v /= fnorm;

    Vector mean_dir(d, 0.0);
    std::size_t used = 0;
    double total = 0.0;
    for (const auto& stored : q) {
        if (stored.size() != d) throw InvalidInput("clu_loss: stored feature dimension mismatch");
        const double sn = l2_norm(stored);
        if (sn == 0.0) {
            ++out.skipped_entries;
            continue;
        }
        double cos = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = stored[j] / sn;
            mean_dir[j] += v;
            cos += u[j] * v;
        }
        total += 1.0 - cos;
        ++used;
    }
    if (used == 0) return out;
    const double inv = 1.0 / static_cast<double>(used);
    out.loss = total * inv;
    out.active = true;
    if (want_grad) {
        // d/df of -(u . v) averaged over v, projected onto the tangent of u.
        Vector du(d);
        for (std::size_t j = 0; j < d; ++j) du[j] = -mean_dir[j] * inv;
        const double radial = dot(u, du);
        for (std::size_t j = 0; j < d; ++j) du[j] = (du[j] - radial * u[j]) / fnorm;
        out.grad = std::move(du);
    }
    return out;
}

inline double clu_loss(std::span<const double> feature, std::size_t label, const SourceBank& bank) {
    return cluster_term(feature, label, bank, false).loss;
}

inline double cda_loss(std::span<const double> feature, std::size_t label, const PrototypeBank& protos,
                       const SourceBank& bank, const AffinityConfig& cfg = {}) {
    return ctr_loss(feature, label, protos, cfg) + clu_loss(feature, label, bank);
}

}  // namespace muvo
