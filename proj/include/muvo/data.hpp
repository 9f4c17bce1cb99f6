#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "muvo/errors.hpp"
#include "muvo/numerics.hpp"

namespace muvo {

enum class Domain { Source, Target };
enum class Split { Train, Val, Test };

inline std::string_view to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

struct Sample {
    Vector features;
    std::optional<std::size_t> label;
    Domain domain = Domain::Source;
    Split split = Split::Train;

    bool operator==(const Sample&) const = default;
};

/// Gaussian class blobs in the source domain; the target domain applies a
/// rotation (by the same angle in every coordinate plane (0,1), (2,3), ...),
/// a translation and a covariance scale. The first `overlap_pairs` class
/// pairs (0,1), (2,3), ... have their mean separation multiplied by
/// `class_overlap` to make them intrinsically similar.
struct DatasetSpec {
    std::size_t num_classes = 8;
    std::size_t input_dim = 16;
    std::size_t source_per_class = 100;
    std::size_t target_train_per_class = 100;
    std::size_t target_val_per_class = 10;
    std::size_t target_test_per_class = 100;
    std::size_t shots = 3;
    double class_radius = 4.0;
    double class_std = 1.0;
    std::size_t overlap_pairs = 2;
    double class_overlap = 0.5;
    double rotation_deg = 30.0;
    // Empty means zero translation, one value is applied to every
    // coordinate; otherwise length input_dim.
    Vector translation{0.75};
    double covariance_scale = 1.3;
    std::uint64_t seed = 7;

    void validate() const {
        if (num_classes < 2) throw InvalidConfig("data.num_classes must be >= 2");
        if (input_dim == 0) throw InvalidConfig("data.input_dim must be > 0");
        if (shots < 1) throw InvalidConfig("data.shots must be >= 1");
        if (source_per_class == 0) throw InvalidConfig("data.source_per_class must be > 0");
        if (target_train_per_class <= shots)
            throw InvalidConfig("data.target_train_per_class must exceed data.shots");
        if (target_test_per_class == 0) throw InvalidConfig("data.target_test_per_class must be > 0");
        if (translation.size() > 1 && translation.size() != input_dim)
            throw InvalidConfig("data.translation must be empty, a single value, or have length data.input_dim");
        if (2 * overlap_pairs > num_classes) throw InvalidConfig("data.overlap_pairs needs 2 classes per pair");
        if (!(class_std > 0.0) || !(class_radius > 0.0)) throw InvalidConfig("data.class_std and data.class_radius must be > 0");
        if (!(class_overlap > 0.0)) throw InvalidConfig("data.class_overlap must be > 0");
        if (!(covariance_scale > 0.0)) throw InvalidConfig("data.covariance_scale must be > 0");
        if (!std::isfinite(rotation_deg)) throw InvalidConfig("data.rotation_deg must be finite");
        for (double t : translation)
            if (!std::isfinite(t)) throw InvalidConfig("data.translation must be finite");
    }
};

struct Dataset {
    std::vector<Sample> source_train;
    std::vector<Sample> target_train;
    std::vector<Sample> target_val;
    std::vector<Sample> target_test;
    std::vector<Vector> source_means;
    std::vector<Vector> target_means;
};

inline Vector apply_domain_shift(std::span<const double> x, const DatasetSpec& spec) {
    constexpr double kPi = 3.14159265358979323846;
    const double theta = spec.rotation_deg * kPi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    Vector out(x.begin(), x.end());
    for (std::size_t i = 0; i + 1 < out.size(); i += 2) {
        const double a = x[i], b = x[i + 1];
        out[i] = c * a - s * b;
        out[i + 1] = s * a + c * b;
    }
    if (!spec.translation.empty())
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] += spec.translation.size() == 1 ? spec.translation[0] : spec.translation[i];
    return out;
}

inline std::vector<Vector> class_means(const DatasetSpec& spec) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Vector> means(spec.num_classes, Vector(spec.input_dim));
    for (auto& m : means) {
        double n = 0.0;
        do {
            for (double& v : m) v = gauss(rng);
            n = l2_norm(m);
        } while (n == 0.0);
        for (double& v : m) v *= spec.class_radius / n;
    }
    for (std::size_t p = 0; p < spec.overlap_pairs; ++p) {
        const auto& anchor = means[2 * p];
        auto& partner = means[2 * p + 1];
        for (std::size_t j = 0; j < spec.input_dim; ++j)
            partner[j] = anchor[j] + spec.class_overlap * (partner[j] - anchor[j]);
    }
    return means;
}

inline Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.source_means = class_means(spec);
    for (const auto& m : ds.source_means) ds.target_means.push_back(apply_domain_shift(m, spec));

    std::mt19937_64 rng(mix_seed(spec.seed, 1));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double target_std = spec.class_std * std::sqrt(spec.covariance_scale);

    auto draw = [&](std::vector<Sample>& out, Domain domain, Split split, std::size_t per_class) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t c = 0; c < spec.num_classes; ++c) {
                Vector x(spec.input_dim);
                const double sd = domain == Domain::Source ? spec.class_std : target_std;
                for (std::size_t j = 0; j < spec.input_dim; ++j) x[j] = ds.source_means[c][j] + sd * gauss(rng);
                if (domain == Domain::Target) x = apply_domain_shift(x, spec);
                out.push_back({std::move(x), c, domain, split});
            }
        }
    };
    draw(ds.source_train, Domain::Source, Split::Train, spec.source_per_class);
    draw(ds.target_train, Domain::Target, Split::Train, spec.target_train_per_class);
    draw(ds.target_val, Domain::Target, Split::Val, spec.target_val_per_class);
    draw(ds.target_test, Domain::Target, Split::Test, spec.target_test_per_class);
    return ds;
}

struct KShotSplit {
    std::vector<Sample> labeled;
    // Labels stripped; the true labels are held separately for evaluation only.
    std::vector<Sample> unlabeled;
    std::vector<std::size_t> unlabeled_truth;
};

inline KShotSplit kshot_split(const std::vector<Sample>& target_train, std::size_t num_classes, std::size_t k,
                              std::uint64_t seed) {
    if (k < 1) throw InvalidConfig("k-shot split needs k >= 1");
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < target_train.size(); ++i) {
        const auto& s = target_train[i];
        if (!s.label || *s.label >= num_classes) throw InvalidInput("k-shot split needs labeled target samples");
        by_class[*s.label].push_back(i);
    }
    std::mt19937_64 rng(mix_seed(seed, 2));
    std::vector<bool> chosen(target_train.size(), false);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& idx = by_class[c];
        if (idx.size() < k)
            throw InvalidConfig("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                " target samples, fewer than k=" + std::to_string(k));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < k; ++i) chosen[idx[i]] = true;
    }
    KShotSplit out;
    for (std::size_t i = 0; i < target_train.size(); ++i) {
        if (chosen[i]) {
            out.labeled.push_back(target_train[i]);
        } else {
            Sample s = target_train[i];
            out.unlabeled_truth.push_back(*s.label);
            s.label.reset();
            out.unlabeled.push_back(std::move(s));
        }
    }
    return out;
}

/// Endless shuffled pass over [0, n); reshuffles at every epoch boundary.
class CyclicSampler {
public:
    CyclicSampler() = default;
    CyclicSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        if (n == 0) throw InvalidConfig("cannot sample from an empty set");
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::size_t next() {
        if (pos_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

    std::vector<std::size_t> next_batch(std::size_t b) {
        std::vector<std::size_t> out(b);
        for (auto& i : out) i = next();
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
};

struct BatchIndices {
    std::vector<std::size_t> source;
    std::vector<std::size_t> target_labeled;
    std::vector<std::size_t> target_unlabeled;
};

/// Draws b samples from each of the source, target-labeled and
/// target-unlabeled sets per step; each set has its own RNG stream.
class EqualSampler {
public:
    EqualSampler(std::size_t n_source, std::size_t n_labeled, std::size_t n_unlabeled, std::size_t batch_size,
                 std::uint64_t seed)
        : batch_size_(batch_size),
          source_(n_source, mix_seed(seed, 10)),
          labeled_(n_labeled, mix_seed(seed, 11)),
          unlabeled_(n_unlabeled, mix_seed(seed, 12)) {
        if (batch_size == 0) throw InvalidConfig("trainer.batch_size must be >= 1");
    }

    BatchIndices next() { return {source_.next_batch(batch_size_), labeled_.next_batch(batch_size_), unlabeled_.next_batch(batch_size_)}; }

    // Supervised-only draw; leaves the unlabeled stream untouched.
    BatchIndices next_labeled_only() { return {source_.next_batch(batch_size_), labeled_.next_batch(batch_size_), {}}; }

private:
    std::size_t batch_size_;
    CyclicSampler source_;
    CyclicSampler labeled_;
    CyclicSampler unlabeled_;
};

// ---------------------------------------------------------------------------
// CSV: header `domain,split,label,f0,...,f{d-1}`; empty label for unlabeled.

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw CorruptFile(context + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

inline void write_csv(std::ostream& os, const std::vector<Sample>& samples, std::size_t input_dim) {
    os << "domain,split,label";
    for (std::size_t j = 0; j < input_dim; ++j) os << ",f" << j;
    os << '\n';
    for (const auto& s : samples) {
        if (s.features.size() != input_dim) throw InvalidInput("write_csv: feature dimension mismatch");
        os << to_string(s.domain) << ',' << to_string(s.split) << ',';
        if (s.label) os << *s.label;
        for (double v : s.features) os << ',' << format_double(v);
        os << '\n';
    }
}

inline void write_csv(const std::string& path, const std::vector<Sample>& samples, std::size_t input_dim) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_csv(os, samples, input_dim);
    if (!os) throw IoError("failed writing '" + path + "'");
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::vector<Sample> read_csv(std::istream& is, const std::string& name) {
    std::string line;
    if (!std::getline(is, line)) throw CorruptFile(name + ": missing header");
    const auto header = split_commas(line);
    if (header.size() < 4 || header[0] != "domain" || header[1] != "split" || header[2] != "label")
        throw CorruptFile(name + ": header must start with domain,split,label,f0");
    const std::size_t dim = header.size() - 3;
    for (std::size_t j = 0; j < dim; ++j)
        if (header[3 + j] != "f" + std::to_string(j)) throw CorruptFile(name + ": unexpected column '" + std::string(header[3 + j]) + "'");
    std::vector<Sample> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        const std::string ctx = name + ":" + std::to_string(lineno);
        if (cells.size() != header.size()) throw CorruptFile(ctx + ": wrong number of columns");
        Sample s;
        if (cells[0] == "source") s.domain = Domain::Source;
        else if (cells[0] == "target") s.domain = Domain::Target;
        else throw CorruptFile(ctx + ": unknown domain '" + std::string(cells[0]) + "'");
        if (cells[1] == "train") s.split = Split::Train;
        else if (cells[1] == "val") s.split = Split::Val;
        else if (cells[1] == "test") s.split = Split::Test;
        else throw CorruptFile(ctx + ": unknown split '" + std::string(cells[1]) + "'");
        if (!cells[2].empty()) {
            std::size_t label = 0;
            auto res = std::from_chars(cells[2].data(), cells[2].data() + cells[2].size(), label);
            if (res.ec != std::errc{} || res.ptr != cells[2].data() + cells[2].size())
                throw CorruptFile(ctx + ": bad label '" + std::string(cells[2]) + "'");
            s.label = label;
        }
        s.features.resize(dim);
        for (std::size_t j = 0; j < dim; ++j) s.features[j] = parse_double(cells[3 + j], ctx);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<Sample> read_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    return read_csv(is, path);
}

inline Matrix to_matrix(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
    if (indices.empty()) return {};
    const std::size_t d = samples.at(indices[0]).features.size();
    Matrix m(indices.size(), d);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto& f = samples.at(indices[r]).features;
        std::copy(f.begin(), f.end(), m.row(r).begin());
    }
    return m;
}

}  // namespace muvo
