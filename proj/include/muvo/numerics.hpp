#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "muvo/errors.hpp"

namespace muvo {

using Vector = std::vector<double>;

// Probabilities are clamped to [kProbEpsilon, 1 - kProbEpsilon] before any log.
inline constexpr double kProbEpsilon = 1e-12;

// Dense row-major matrix; rows are samples, columns are coordinates.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const { return rows == 0; }
};

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Numerically stable softmax (max-subtracted). Throws InvalidInput on an
/// empty or non-finite logit vector.
inline Vector softmax(std::span<const double> logits) {
    if (logits.empty()) throw InvalidInput("softmax: empty logit vector");
    if (!all_finite(logits)) throw InvalidInput("softmax: non-finite logit");
    const double peak = *std::max_element(logits.begin(), logits.end());
    Vector out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw InvalidInput("argmax: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline void validate_probs(std::span<const double> p) {
    if (p.empty()) throw InvalidInput("probability vector is empty");
    double total = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
            throw InvalidInput("probability entry outside [0, 1]");
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("probabilities do not sum to 1");
}

inline Vector one_hot_argmax(std::span<const double> p) {
    validate_probs(p);
    Vector out(p.size(), 0.0);
    out[argmax(p)] = 1.0;
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidInput("dot: length mismatch");
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vector l2_normalized(std::span<const double> a) {
    const double n = l2_norm(a);
    if (n == 0.0) throw DegenerateInput("cannot normalize a zero-norm vector");
    Vector out(a.begin(), a.end());
    for (double& v : out) v /= n;
    return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw InvalidInput("cosine_similarity: length mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw DegenerateInput("cosine_similarity: zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline void check_momentum(double momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw InvalidConfig("EMA momentum must lie in [0, 1), got " + std::to_string(momentum));
}

inline double ema_update(double old_value, double new_value, double momentum) {
    check_momentum(momentum);
    return momentum * old_value + (1.0 - momentum) * new_value;
}

inline void ema_update(std::span<double> old_values, std::span<const double> new_values, double momentum) {
    check_momentum(momentum);
    if (old_values.size() != new_values.size()) throw InvalidInput("ema_update: length mismatch");
    for (std::size_t i = 0; i < old_values.size(); ++i)
        old_values[i] = momentum * old_values[i] + (1.0 - momentum) * new_values[i];
}

// Pulls an upstream gradient w.r.t. softmax probabilities back to the logits:
// dz_j = p_j (dp_j - sum_c p_c dp_c).
inline Vector softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
    const double inner = dot(probs, dprobs);
    Vector dz(probs.size());
    for (std::size_t j = 0; j < probs.size(); ++j) dz[j] = probs[j] * (dprobs[j] - inner);
    return dz;
}

inline double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

// SplitMix64 finalizer; used to derive independent RNG stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace muvo
