#pragma once

#include <random>
#include <span>

#include "muvo/errors.hpp"
#include "muvo/numerics.hpp"

namespace muvo {

// Vector-space stand-ins for image augmentations: the weak view is a light
// jitter; the strong view can drop and rescale coordinates and always
// jitters them harder than the weak view.
struct AugmentConfig {
    double weak_noise_sigma = 0.05;
    double strong_noise_sigma = 0.5;
    double strong_dropout_prob = 0.0;
    double strong_scale_lo = 1.0;
    double strong_scale_hi = 1.0;
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (!(weak_noise_sigma >= 0.0)) throw InvalidConfig("augment.weak_noise_sigma must be >= 0");
        if (!(strong_noise_sigma >= weak_noise_sigma))
            throw InvalidConfig("augment.strong_noise_sigma must be >= augment.weak_noise_sigma");
        if (!(strong_dropout_prob >= 0.0 && strong_dropout_prob < 1.0))
            throw InvalidConfig("augment.strong_dropout_prob must lie in [0, 1)");
        if (!(strong_scale_lo > 0.0 && strong_scale_lo <= strong_scale_hi))
            throw InvalidConfig("augment.strong_scale_range must satisfy 0 < lo <= hi");
    }
};

using Rng = std::mt19937_64;

inline Vector weak_augment(std::span<const double> x, const AugmentConfig& cfg, Rng& rng) {
    Vector out(x.begin(), x.end());
    if (cfg.weak_noise_sigma == 0.0) return out;
    std::normal_distribution<double> noise(0.0, cfg.weak_noise_sigma);
    for (double& v : out) v += noise(rng);
    return out;
}

// Order: coordinate dropout, one shared uniform scale, additive noise.
// The dropout probability may be set to 1 directly here to get pure noise.
inline Vector strong_augment(std::span<const double> x, const AugmentConfig& cfg, Rng& rng) {
    Vector out(x.begin(), x.end());
    if (cfg.strong_dropout_prob > 0.0) {
        std::bernoulli_distribution drop(cfg.strong_dropout_prob);
        for (double& v : out)
            if (drop(rng)) v = 0.0;
    }
    if (cfg.strong_scale_lo != cfg.strong_scale_hi) {
        std::uniform_real_distribution<double> scale_dist(cfg.strong_scale_lo, cfg.strong_scale_hi);
        const double scale = scale_dist(rng);
        for (double& v : out) v *= scale;
    } else {
        for (double& v : out) v *= cfg.strong_scale_lo;
    }
    if (cfg.strong_noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, cfg.strong_noise_sigma);
        for (double& v : out) v += noise(rng);
    }
    return out;
}

}  // namespace muvo
