#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "muvo/errors.hpp"
#include "muvo/numerics.hpp"

namespace muvo {

enum class Activation { Tanh, Relu, Identity };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
        case Activation::Identity: return "identity";
    }
    return "tanh";
}

inline Activation parse_activation(const std::string& name) {
    if (name == "tanh") return Activation::Tanh;
    if (name == "relu") return Activation::Relu;
    if (name == "identity") return Activation::Identity;
    throw InvalidConfig("unknown activation '" + name + "' (expected tanh, relu or identity)");
}

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::Tanh: return std::tanh(x);
        case Activation::Relu: return x > 0.0 ? x : 0.0;
        case Activation::Identity: return x;
    }
    return x;
}

// Derivative expressed through the pre-activation value.
inline double activate_derivative(Activation a, double pre) {
    switch (a) {
        case Activation::Tanh: {
            const double t = std::tanh(pre);
            return 1.0 - t * t;
        }
        case Activation::Relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::Identity: return 1.0;
    }
    return 1.0;
}

struct Architecture {
    std::size_t input_dim = 16;
    std::size_t hidden_dim = 64;
    std::size_t feature_dim = 32;
    std::size_t num_classes = 8;
    Activation activation = Activation::Tanh;

    bool operator==(const Architecture&) const = default;
};

// Offsets of each tensor inside the flat parameter vector.
struct ParameterLayout {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0, total = 0;

    explicit ParameterLayout(const Architecture& a) {
        w1 = 0;
        b1 = w1 + a.hidden_dim * a.input_dim;
        w2 = b1 + a.hidden_dim;
        b2 = w2 + a.feature_dim * a.hidden_dim;
        w3 = b2 + a.feature_dim;
        b3 = w3 + a.num_classes * a.feature_dim;
        total = b3 + a.num_classes;
    }
};

// Activations retained by a batched forward pass; backward() consumes them.
struct ForwardCache {
    Matrix inputs;
    Matrix hidden_pre;
    Matrix hidden;
    Matrix features;
    Matrix logits;
};

/// Feature extractor G (dense -> activation -> dense) followed by a linear
/// classifier F. All parameters live in one flat vector so optimizers,
/// finite-difference checks, and checkpoints can treat them uniformly.
class Network {
public:
    Network() : Network(Architecture{}) {}

    explicit Network(Architecture arch) : arch_(arch), layout_(arch), params_(layout_.total, 0.0) {
        if (arch.input_dim == 0 || arch.hidden_dim == 0 || arch.feature_dim == 0 || arch.num_classes == 0)
            throw InvalidConfig("network dimensions must all be positive");
    }

    // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
    static Network initialized(Architecture arch, std::uint64_t seed) {
        Network net(arch);
        std::mt19937_64 rng(seed);
        auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (std::size_t i = 0; i < count; ++i) net.params_[offset + i] = dist(rng);
        };
        const auto& l = net.layout_;
        fill(l.w1, arch.hidden_dim * arch.input_dim, arch.input_dim);
        fill(l.b1, arch.hidden_dim, arch.input_dim);
        fill(l.w2, arch.feature_dim * arch.hidden_dim, arch.hidden_dim);
        fill(l.b2, arch.feature_dim, arch.hidden_dim);
        fill(l.w3, arch.num_classes * arch.feature_dim, arch.feature_dim);
        fill(l.b3, arch.num_classes, arch.feature_dim);
        return net;
    }

    const Architecture& architecture() const { return arch_; }
    const ParameterLayout& layout() const { return layout_; }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.size(); }

    void set_parameters(std::span<const double> values) {
        if (values.size() != params_.size()) throw InvalidInput("parameter vector has wrong length");
        params_.assign(values.begin(), values.end());
    }

    ForwardCache forward(const Matrix& inputs) const {
        if (inputs.cols != arch_.input_dim)
            throw InvalidInput("forward: expected input dim " + std::to_string(arch_.input_dim) + ", got " +
                               std::to_string(inputs.cols));
        const std::size_t n = inputs.rows;
        ForwardCache c;
        c.inputs = inputs;
        c.hidden_pre = affine(inputs, layout_.w1, layout_.b1, arch_.hidden_dim);
        c.hidden = c.hidden_pre;
        for (double& v : c.hidden.data) v = activate(arch_.activation, v);
        c.features = affine(c.hidden, layout_.w2, layout_.b2, arch_.feature_dim);
        c.logits = affine(c.features, layout_.w3, layout_.b3, arch_.num_classes);
        for (std::size_t i = 0; i < n; ++i)
            if (!all_finite(c.logits.row(i))) throw TrainingDiverged("forward produced non-finite logits");
        return c;
    }

    // Single-sample convenience wrapper: returns (feature, logits).
    std::pair<Vector, Vector> forward(std::span<const double> x) const {
        Matrix m(1, x.size());
        std::copy(x.begin(), x.end(), m.data.begin());
        auto c = forward(m);
        return {c.features.data, c.logits.data};
    }

    /// Gradient of a loss w.r.t. every parameter, given upstream gradients
    /// w.r.t. logits and (optionally, empty matrix = none) features.
    /// Accumulates into `grad`, which must be parameter-shaped.
    void backward(const ForwardCache& cache, const Matrix& dlogits, const Matrix& dfeatures,
                  std::span<double> grad) const {
        const std::size_t n = cache.inputs.rows;
        if (n == 0 || cache.logits.rows != n || cache.features.rows != n || cache.hidden.rows != n)
            throw UsageError("backward: missing or inconsistent forward activation record");
        if (dlogits.rows != n || dlogits.cols != arch_.num_classes)
            throw UsageError("backward: logit gradient shape does not match forward record");
        if (!dfeatures.empty() && (dfeatures.rows != n || dfeatures.cols != arch_.feature_dim))
            throw UsageError("backward: feature gradient shape does not match forward record");
        if (grad.size() != params_.size()) throw UsageError("backward: gradient buffer has wrong length");

        const std::size_t h = arch_.hidden_dim, d = arch_.feature_dim, C = arch_.num_classes, din = arch_.input_dim;
        const double* w2 = params_.data() + layout_.w2;
        const double* w3 = params_.data() + layout_.w3;

        Vector dfeat(d);
        Vector dhid(h);
        for (std::size_t s = 0; s < n; ++s) {
            auto dz = dlogits.row(s);
            auto f = cache.features.row(s);
            for (std::size_t k = 0; k < C; ++k) {
                const double g = dz[k];
                if (g == 0.0) continue;
                double* gw = grad.data() + layout_.w3 + k * d;
                for (std::size_t j = 0; j < d; ++j) gw[j] += g * f[j];
                grad[layout_.b3 + k] += g;
            }
            for (std::size_t j = 0; j < d; ++j) {
                double acc = dfeatures.empty() ? 0.0 : dfeatures(s, j);
                for (std::size_t k = 0; k < C; ++k) acc += dz[k] * w3[k * d + j];
                dfeat[j] = acc;
            }
            auto a = cache.hidden.row(s);
            std::fill(dhid.begin(), dhid.end(), 0.0);
            for (std::size_t j = 0; j < d; ++j) {
                const double g = dfeat[j];
                if (g == 0.0) continue;
                double* gw = grad.data() + layout_.w2 + j * h;
                const double* wrow = w2 + j * h;
                for (std::size_t i = 0; i < h; ++i) {
                    gw[i] += g * a[i];
                    dhid[i] += g * wrow[i];
                }
                grad[layout_.b2 + j] += g;
            }
            auto pre = cache.hidden_pre.row(s);
            auto x = cache.inputs.row(s);
            for (std::size_t i = 0; i < h; ++i) {
                const double g = dhid[i] * activate_derivative(arch_.activation, pre[i]);
                if (g == 0.0) continue;
                double* gw = grad.data() + layout_.w1 + i * din;
                for (std::size_t k = 0; k < din; ++k) gw[k] += g * x[k];
                grad[layout_.b1 + i] += g;
            }
        }
    }

    Vector backward(const ForwardCache& cache, const Matrix& dlogits, const Matrix& dfeatures = {}) const {
        Vector grad(params_.size(), 0.0);
        backward(cache, dlogits, dfeatures, grad);
        return grad;
    }

private:
    Matrix affine(const Matrix& in, std::size_t w_off, std::size_t b_off, std::size_t out_dim) const {
        Matrix out(in.rows, out_dim);
        const double* w = params_.data() + w_off;
        const double* b = params_.data() + b_off;
        for (std::size_t s = 0; s < in.rows; ++s) {
            auto x = in.row(s);
            for (std::size_t o = 0; o < out_dim; ++o) {
                double acc = b[o];
                const double* wrow = w + o * in.cols;
                for (std::size_t k = 0; k < in.cols; ++k) acc += wrow[k] * x[k];
                out(s, o) = acc;
            }
        }
        return out;
    }

    Architecture arch_;
    ParameterLayout layout_;
    std::vector<double> params_;
};

struct SgdConfig {
    double base_lr = 0.001;
    double momentum = 0.9;
    // lr(t) = base_lr * (1 + gamma * t)^(-power)
    double lr_gamma = 1e-4;
    double lr_power = 0.75;
};

/// SGD with heavy-ball momentum and an inverse-decay schedule:
///   v <- momentum * v + g;  p <- p - lr(step) * v.
class SgdOptimizer {
public:
    SgdOptimizer() = default;

    SgdOptimizer(SgdConfig cfg, std::size_t parameter_count) : cfg_(cfg), velocity_(parameter_count, 0.0) {
        if (!(cfg.base_lr > 0.0)) throw InvalidConfig("model.lr must be > 0");
        if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw InvalidConfig("model.momentum must lie in [0, 1)");
        if (!(cfg.lr_gamma >= 0.0)) throw InvalidConfig("model.lr_gamma must be >= 0");
        if (!(cfg.lr_power >= 0.0)) throw InvalidConfig("model.lr_power must be >= 0");
    }

    const SgdConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return step_count_; }
    std::span<const double> velocity() const { return velocity_; }

    double learning_rate() const {
        return cfg_.base_lr * std::pow(1.0 + cfg_.lr_gamma * static_cast<double>(step_count_), -cfg_.lr_power);
    }

    void step(Network& net, std::span<const double> grad) {
        auto params = net.parameters();
        if (grad.size() != params.size() || velocity_.size() != params.size())
            throw UsageError("sgd_step: gradient shape does not match parameters");
        for (std::size_t i = 0; i < grad.size(); ++i) {
            if (!std::isfinite(grad[i])) {
                std::ostringstream msg;
                msg << "non-finite gradient at parameter " << i << " (value " << grad[i] << ") at optimizer step "
                    << step_count_;
                throw TrainingDiverged(msg.str());
            }
        }
        const double lr = learning_rate();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            velocity_[i] = cfg_.momentum * velocity_[i] + grad[i];
            params[i] -= lr * velocity_[i];
        }
        ++step_count_;
    }

    // Restarts the decay schedule at base_lr; momentum buffers are kept.
    void refresh_schedule() { step_count_ = 0; }

    // Used when restoring from a checkpoint.
    void restore(std::uint64_t step_count, std::span<const double> velocity) {
        if (velocity.size() != velocity_.size()) throw CorruptFile("velocity buffer has wrong length");
        step_count_ = step_count;
        velocity_.assign(velocity.begin(), velocity.end());
    }

private:
    SgdConfig cfg_;
    std::uint64_t step_count_ = 0;
    std::vector<double> velocity_;
};

}  // namespace muvo
