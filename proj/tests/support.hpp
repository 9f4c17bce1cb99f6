#pragma once

// Independent oracles shared by the unit suites and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "muvo/affinity.hpp"
#include "muvo/numerics.hpp"
#include "muvo/pseudolabel.hpp"
#include "muvo/trainer.hpp"

namespace muvo::oracle {

/// Worst relative violation of p~_a/p~_b = (p_a/p_b)(Theta_b/Theta_a)^phi
/// over random instances, with the plain softmax computed by hand.
inline double debias_ratio_worst_error(std::size_t instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> logit(0.0, 2.0);
    std::uniform_real_distribution<double> theta(0.05, 1.0);
    std::uniform_real_distribution<double> phi(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> classes(2, 12);
    double worst = 0.0;
    for (std::size_t n = 0; n < instances; ++n) {
        const std::size_t C = classes(rng);
        Vector z(C), t(C);
        for (double& v : z) v = logit(rng);
        for (double& v : t) v = theta(rng);
        ConfidenceBank bank(C, 0.999, phi(rng));
        bank.set_theta(t);
        const auto pd = debiased_prediction(z, bank);
        const auto pb = biased_prediction(z, bank);
        for (std::size_t a = 0; a < C; ++a)
            for (std::size_t b = 0; b < C; ++b) {
                // exp(z_a - z_b) is the plain softmax ratio.
                const double plain = std::exp(z[a] - z[b]);
                const double adj = std::pow(t[b] / t[a], bank.debias_factor());
                worst = std::max(worst, std::abs((pd[a] / pd[b]) / (plain * adj) - 1.0));
                worst = std::max(worst, std::abs((pb[a] / pb[b]) / (plain / adj) - 1.0));
            }
    }
    return worst;
}

/// Count of instances where a uniform bank moves the argmax of either the
/// debiased or the biased prediction.
inline std::size_t uniform_bank_argmax_violations(std::size_t instances, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> logit(0.0, 2.0);
    std::uniform_real_distribution<double> level(0.01, 1.0);
    std::size_t bad = 0;
    for (std::size_t n = 0; n < instances; ++n) {
        const std::size_t C = 2 + n % 10;
        Vector z(C);
        for (double& v : z) v = logit(rng);
        ConfidenceBank bank(C, 0.999, 0.2);
        bank.set_theta(Vector(C, level(rng)));
        if (argmax(debiased_prediction(z, bank)) != argmax(z)) ++bad;
        if (argmax(biased_prediction(z, bank)) != argmax(z)) ++bad;
    }
    return bad;
}

struct NegativeSamplingStats {
    std::size_t draws = 0;
    std::size_t argmax_hits = 0;
    std::size_t wrong_cardinality = 0;
    std::size_t subsets_seen = 0;
    std::size_t subsets_expected = 0;
    double chi_square = 0.0;
    double critical = 0.0;
    double p_value = 0.0;
    std::map<std::vector<std::size_t>, std::size_t> counts;

    bool uniform() const { return chi_square <= critical; }
};

inline double binomial(std::size_t n, std::size_t k) {
    double r = 1.0;
    for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
    return r;
}

/// Draws negative sets for one fixed prediction and runs a chi-square test
/// of uniformity over all m-subsets of the non-argmax classes.
inline NegativeSamplingStats negative_sampling_experiment(std::size_t C, std::size_t m, std::size_t draws,
                                                          std::uint64_t seed, double significance) {
    NegativeSamplingStats s;
    s.draws = draws;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> logit;
    Vector z(C);
    for (double& v : z) v = logit(rng);
    const auto p = softmax(z);
    const std::size_t top = argmax(p);
    for (std::size_t i = 0; i < draws; ++i) {
        const auto neg = sample_negative_labels(p, m, rng);
        std::vector<std::size_t> subset;
        for (std::size_t c = 0; c < C; ++c)
            if (neg[c] != 0.0) subset.push_back(c);
        if (neg[top] != 0.0) ++s.argmax_hits;
        if (subset.size() != m) ++s.wrong_cardinality;
        ++s.counts[subset];
    }
    s.subsets_expected = static_cast<std::size_t>(std::llround(binomial(C - 1, m)));
    s.subsets_seen = s.counts.size();
    const double expected = static_cast<double>(draws) / static_cast<double>(s.subsets_expected);
    std::size_t seen = 0;
    for (const auto& [subset, n] : s.counts) {
        s.chi_square += (static_cast<double>(n) - expected) * (static_cast<double>(n) - expected) / expected;
        ++seen;
    }
    // Unseen subsets contribute their full expected count.
    s.chi_square += static_cast<double>(s.subsets_expected - std::min(seen, s.subsets_expected)) * expected;
    const boost::math::chi_squared dist(static_cast<double>(s.subsets_expected - 1));
    s.critical = boost::math::quantile(boost::math::complement(dist, significance));
    s.p_value = boost::math::cdf(boost::math::complement(dist, s.chi_square));
    return s;
}

/// Largest deviation between iterated EMA and lambda^t |old - v| decay.
inline double ema_closed_form_worst_error(std::size_t trials, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t n = 0; n < trials; ++n) {
        const double lambda = n == 0 ? 0.999 : u(rng) * 0.999;
        const double old = u(rng);
        const double target = u(rng);
        const std::size_t t = 1 + (n * 97) % 10000;
        double x = old;
        for (std::size_t i = 0; i < t; ++i) x = ema_update(x, target, lambda);
        worst = std::max(worst, std::abs(std::abs(x - target) - std::pow(lambda, static_cast<double>(t)) * std::abs(old - target)));
    }
    return worst;
}

/// Applies random push sequences to a SourceBank and to a plain list that
/// appends and trims from the front; returns the number of disagreements.
inline std::size_t fifo_oracle_mismatches(std::size_t sequences, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> cap_dist(1, 8);
    std::uniform_int_distribution<std::size_t> len_dist(0, 40);
    std::uniform_int_distribution<std::size_t> cls(0, 2);
    std::size_t mismatches = 0;
    double next_value = 0.0;
    for (std::size_t n = 0; n < sequences; ++n) {
        const std::size_t M = cap_dist(rng);
        SourceBank bank(3, M);
        std::vector<std::vector<double>> naive(3);
        const std::size_t len = len_dist(rng);
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t c = cls(rng);
            next_value += 1.0;
            bank.push(c, Vector{next_value, -next_value});
            naive[c].push_back(next_value);
            if (naive[c].size() > M) naive[c].erase(naive[c].begin());
            for (std::size_t k = 0; k < 3; ++k) {
                const auto& q = bank.queue(k);
                bool same = q.size() == naive[k].size() && q.size() <= M;
                for (std::size_t j = 0; same && j < q.size(); ++j) same = q[j][0] == naive[k][j];
                if (!same) ++mismatches;
            }
        }
    }
    return mismatches;
}

/// Random (similarity-argmax, prediction, truth) triples; returns how often
/// admission disagrees with "all three equal".
inline std::size_t admission_oracle_mismatches(std::size_t triples, std::uint64_t seed) {
    constexpr std::size_t C = 4;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> cls(0, C - 1);
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    PrototypeBank protos(C, C, 0.999);
    for (std::size_t c = 0; c < C; ++c) {
        Vector e(C, 0.0);
        e[c] = 1.0;
        protos.set(c, e);
    }
    std::size_t mismatches = 0;
    for (std::size_t n = 0; n < triples; ++n) {
        // Bias draws towards agreement so both outcomes are well covered.
        const std::size_t s = cls(rng);
        const std::size_t pred = (rng() % 2) ? s : cls(rng);
        const std::size_t truth = (rng() % 2) ? s : cls(rng);
        Vector f(C);
        for (double& v : f) v = jitter(rng);
        f[s] = 1.0;
        SourceBank bank(C, 8);
        const auto adm = try_admit(bank, protos, f, pred, truth);
        const bool expected = s == pred && pred == truth;
        const bool stored = truth < C && bank.occupancy(truth) == (expected ? 1u : 0u);
        if (adm.admitted != expected || !stored || adm.degenerate) ++mismatches;
    }
    return mismatches;
}


struct ClosedFormCase {
    std::string name;
    double got = 0.0;
    // Exact value from an independent expression.
    double exact = 0.0;
    // The rounded value as usually quoted.
    double quoted = 0.0;
    double quoted_digits = 1e-4;
};

/// Every hand-derivable value in the loss library, evaluated through the
/// library and through a direct expression.
inline std::vector<ClosedFormCase> closed_form_cases() {
    std::vector<ClosedFormCase> out;
    const double e = std::exp(1.0);

    out.push_back({"softmax [1,0]", softmax(Vector{1, 0})[0], e / (e + 1.0), 0.73106, 1e-5});
    out.push_back({"ema 0.5->0.9", ema_update(0.5, 0.9, 0.999), 0.999 * 0.5 + 0.001 * 0.9, 0.5004});
    {
        ConfidenceBank bank(2, 0.999, 0.2);
        bank.update({Vector{0.9, 0.1}});
        out.push_back({"bank step theta0", bank.theta()[0], 0.999 + 0.001 * 0.9, 0.9999});
        out.push_back({"bank step theta1", bank.theta()[1], 1.0, 1.0});
    }
    {
        ConfidenceBank bank(2, 0.999, 0.2);
        bank.set_theta(Vector{0.9, 0.3});
        const double gap_down = 1.0 - 0.2 * std::log(0.9 / 0.3);
        const double gap_up = 1.0 + 0.2 * std::log(0.9 / 0.3);
        out.push_back({"debiased [2,1]", debiased_prediction(Vector{2, 1}, bank)[0], 1.0 / (1.0 + std::exp(-gap_down)), 0.6857});
        out.push_back({"biased [2,1]", biased_prediction(Vector{2, 1}, bank)[0], 1.0 / (1.0 + std::exp(-gap_up)), 0.7720});
    }
    out.push_back({"dcl masked-in", dcl_loss(Vector{0.96, 0.04}, Vector{0.5, 0.5}, 0.95).loss, std::log(2.0), 0.6931});
    out.push_back({"dcl masked-out", dcl_loss(Vector{0.90, 0.10}, Vector{0.5, 0.5}, 0.95).loss, 0.0, 0.0});
    out.push_back({"ncl uniform", ncl_loss(Vector{0, 1, 1, 0}, Vector(4, 0.25)), -2.0 * std::log(0.75), 0.5754});
    out.push_back({"con maximal", consistency_loss(Vector{1, 0}, Vector{0, 1}), 2.0, 2.0});
    out.push_back({"con small", consistency_loss(Vector{0.6, 0.4}, Vector{0.5, 0.5}), 0.02, 0.02});

    PrototypeBank protos(3, 3, 0.999);
    protos.set(0, Vector{1, 0, 0});
    protos.set(1, Vector{0, 1, 0});
    protos.set(2, Vector{0, 0, 1});
    AffinityConfig unit_tau;
    unit_tau.tau = 1.0;
    out.push_back({"ctr orthogonal", ctr_loss(Vector{2, 0, 0}, 0, protos, unit_tau), -std::log(e / (e + 2.0)), 0.5514});
    SourceBank bank(3, 4);
    bank.push(0, Vector{1, 0, 0});
    bank.push(0, Vector{0, 1, 0});
    out.push_back({"clu two entries", clu_loss(Vector{1, 0, 0}, 0, bank), 0.5, 0.5});
    out.push_back({"cda sum", cda_loss(Vector{1, 0, 0}, 0, protos, bank, unit_tau), -std::log(e / (e + 2.0)) + 0.5, 1.0514});

    out.push_back({"ramp t=0", ramp_weight(0, 800, 30.0), 30.0 * std::exp(-5.0), 0.2021});
    out.push_back({"ramp t=T", ramp_weight(800, 800, 30.0), 30.0, 30.0});
    {
        // Zero logits give p = [0.5, 0.5].
        Network net({2, 2, 2, 2, Activation::Tanh});
        Sample s;
        s.features = {0.3, -0.7};
        s.label = 0;
        out.push_back({"supervised p=[.5,.5]", supervised_loss(net, {s}, {}), std::log(2.0), 0.6931});
    }
    {
        PrototypeBank p(1, 2, 0.999);
        p.update({{Vector{1, 0}, 0}, {Vector{0, 1}, 0}});
        out.push_back({"prototype init mean", p.prototype(0)[0], 0.5, 0.5});
        p.set(0, Vector{1, 0});
        p.update({{Vector{0, 0}, 0}});
        out.push_back({"prototype ema step", p.prototype(0)[0], 0.999, 0.999});
    }
    return out;
}

}  // namespace muvo::oracle
