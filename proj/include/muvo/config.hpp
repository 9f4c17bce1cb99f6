#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "muvo/data.hpp"
#include "muvo/errors.hpp"
#include "muvo/trainer.hpp"

namespace muvo {

struct OutputConfig {
    std::string metrics = "metrics.jsonl";
    std::string summary = "summary.csv";
    std::string best_checkpoint = "best.ckpt";
    std::string final_checkpoint = "final.ckpt";
};

struct ExperimentConfig {
    DatasetSpec data;
    TrainConfig train;
    OutputConfig output;
};

inline std::vector<std::string> ablation_list(const LossSwitches& s) {
    std::vector<std::string> out;
    if (!s.dcl) out.emplace_back("dcl");
    if (!s.ncl) out.emplace_back("ncl");
    if (!s.con) out.emplace_back("con");
    if (!s.cda) out.emplace_back("cda");
    return out;
}

inline void apply_ablation(LossSwitches& s, const std::string& name) {
    if (name == "dcl") s.dcl = false;
    else if (name == "ncl") s.ncl = false;
    else if (name == "con") s.con = false;
    else if (name == "cda") s.cda = false;
    else throw InvalidConfig("unknown loss '" + name + "' in trainer.ablate (expected dcl, ncl, con, cda)");
}

inline nlohmann::json to_json(const DatasetSpec& d) {
    return {{"num_classes", d.num_classes},
            {"input_dim", d.input_dim},
            {"source_per_class", d.source_per_class},
            {"target_train_per_class", d.target_train_per_class},
            {"target_val_per_class", d.target_val_per_class},
            {"target_test_per_class", d.target_test_per_class},
            {"shots", d.shots},
            {"class_radius", d.class_radius},
            {"class_std", d.class_std},
            {"overlap_pairs", d.overlap_pairs},
            {"class_overlap", d.class_overlap},
            {"rotation_deg", d.rotation_deg},
            {"translation", d.translation},
            {"covariance_scale", d.covariance_scale},
            {"seed", d.seed}};
}

/// Fully resolved configuration as JSON; also serves as the schema of
/// accepted sections and keys.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& d = c.data;
    const auto& t = c.train;
    json j;
    j["data"] = to_json(d);
    j["model"] = {{"hidden_dim", t.model.hidden_dim},
                  {"feature_dim", t.model.feature_dim},
                  {"activation", to_string(t.model.activation)},
                  {"lr", t.model.sgd.base_lr},
                  {"momentum", t.model.sgd.momentum},
                  {"lr_gamma", t.model.sgd.lr_gamma},
                  {"lr_power", t.model.sgd.lr_power}};
    j["augment"] = {{"weak_noise_sigma", t.augment.weak_noise_sigma},
                    {"strong_noise_sigma", t.augment.strong_noise_sigma},
                    {"strong_dropout_prob", t.augment.strong_dropout_prob},
                    {"strong_scale_range", json::array({t.augment.strong_scale_lo, t.augment.strong_scale_hi})},
                    {"rng_seed", t.augment.rng_seed}};
    j["debias"] = {{"factor", t.debias.factor}, {"threshold", t.debias.threshold}};
    j["negative"] = {{"m", t.negative.m}, {"gating", to_string(t.negative.gating)}};
    j["bank"] = {{"momentum", t.bank.momentum},
                 {"use_raw_probs", t.bank.use_raw_probs},
                 {"statistic", to_string(t.bank.statistic)}};
    j["affinity"] = {{"tau", t.affinity.tau},
                     {"capacity", t.affinity.capacity},
                     {"weight", t.affinity.weight},
                     {"normalize", t.affinity.normalize}};
    j["trainer"] = {{"iters", t.trainer.iters},
                    {"warmup", t.trainer.warmup},
                    {"batch_size", t.trainer.batch_size},
                    {"ramp_nu", t.trainer.ramp_nu},
                    {"eval_interval", t.trainer.eval_interval},
                    {"seed", t.trainer.seed},
                    {"ablate", ablation_list(t.trainer.losses)},
                    {"baseline", t.trainer.baseline}};
    j["output"] = {{"metrics", c.output.metrics},
                   {"summary", c.output.summary},
                   {"best_checkpoint", c.output.best_checkpoint},
                   {"final_checkpoint", c.output.final_checkpoint}};
    return j;
}

namespace detail {
template <class T>
T config_value(const nlohmann::json& j, const std::string& section, const std::string& key) {
    const auto& v = j.at(section).at(key);
    try {
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_integer() || v.get<long long>() < 0) throw InvalidConfig("");
        }
        if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw InvalidConfig("");
        }
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw InvalidConfig("");
        }
        return v.get<T>();
    } catch (const std::exception&) {
        throw InvalidConfig("config key '" + section + "." + key + "' has the wrong type (got " + v.dump() + ")");
    }
}
}  // namespace detail

namespace detail {
inline DatasetSpec decode_data(const nlohmann::json& merged) {
    DatasetSpec d;
    d.num_classes = config_value<std::size_t>(merged, "data", "num_classes");
    d.input_dim = config_value<std::size_t>(merged, "data", "input_dim");
    d.source_per_class = config_value<std::size_t>(merged, "data", "source_per_class");
    d.target_train_per_class = config_value<std::size_t>(merged, "data", "target_train_per_class");
    d.target_val_per_class = config_value<std::size_t>(merged, "data", "target_val_per_class");
    d.target_test_per_class = config_value<std::size_t>(merged, "data", "target_test_per_class");
    d.shots = config_value<std::size_t>(merged, "data", "shots");
    d.class_radius = config_value<double>(merged, "data", "class_radius");
    d.class_std = config_value<double>(merged, "data", "class_std");
    d.overlap_pairs = config_value<std::size_t>(merged, "data", "overlap_pairs");
    d.class_overlap = config_value<double>(merged, "data", "class_overlap");
    d.rotation_deg = config_value<double>(merged, "data", "rotation_deg");
    d.translation = config_value<std::vector<double>>(merged, "data", "translation");
    d.covariance_scale = config_value<double>(merged, "data", "covariance_scale");
    d.seed = config_value<std::uint64_t>(merged, "data", "seed");
    d.validate();
    return d;
}
}  // namespace detail

/// Decodes a data section alone (as stored in a dataset manifest), with the
/// same defaults and key checks as parse_config.
inline DatasetSpec parse_dataset_spec(const nlohmann::json& section) {
    nlohmann::json merged = {{"data", to_json(DatasetSpec{})}};
    if (!section.is_object()) throw InvalidConfig("config section 'data' must be an object");
    for (const auto& [key, value] : section.items()) {
        if (!merged["data"].contains(key)) throw InvalidConfig("unknown config key 'data." + key + "'");
        merged["data"][key] = value;
    }
    return detail::decode_data(merged);
}

/// Overlays `user` on the documented defaults, rejecting unknown sections
/// and keys, then decodes and validates the result.
inline ExperimentConfig parse_config(const nlohmann::json& user) {
    using nlohmann::json;
    json merged = to_json(ExperimentConfig{});
    if (!user.is_null()) {
        if (!user.is_object()) throw InvalidConfig("config root must be a JSON object");
        for (const auto& [section, body] : user.items()) {
            if (!merged.contains(section)) throw InvalidConfig("unknown config section '" + section + "'");
            if (!body.is_object()) throw InvalidConfig("config section '" + section + "' must be an object");
            for (const auto& [key, value] : body.items()) {
                if (!merged[section].contains(key)) throw InvalidConfig("unknown config key '" + section + "." + key + "'");
                merged[section][key] = value;
            }
        }
    }

    using detail::config_value;
    ExperimentConfig c;
    c.data = detail::decode_data(merged);

    auto& t = c.train;
    t.model.hidden_dim = config_value<std::size_t>(merged, "model", "hidden_dim");
    t.model.feature_dim = config_value<std::size_t>(merged, "model", "feature_dim");
    t.model.activation = parse_activation(config_value<std::string>(merged, "model", "activation"));
    t.model.sgd.base_lr = config_value<double>(merged, "model", "lr");
    t.model.sgd.momentum = config_value<double>(merged, "model", "momentum");
    t.model.sgd.lr_gamma = config_value<double>(merged, "model", "lr_gamma");
    t.model.sgd.lr_power = config_value<double>(merged, "model", "lr_power");

    t.augment.weak_noise_sigma = config_value<double>(merged, "augment", "weak_noise_sigma");
    t.augment.strong_noise_sigma = config_value<double>(merged, "augment", "strong_noise_sigma");
    t.augment.strong_dropout_prob = config_value<double>(merged, "augment", "strong_dropout_prob");
    const auto range = config_value<std::vector<double>>(merged, "augment", "strong_scale_range");
    if (range.size() != 2) throw InvalidConfig("config key 'augment.strong_scale_range' must be [lo, hi]");
    t.augment.strong_scale_lo = range[0];
    t.augment.strong_scale_hi = range[1];
    t.augment.rng_seed = config_value<std::uint64_t>(merged, "augment", "rng_seed");

    t.debias.factor = config_value<double>(merged, "debias", "factor");
    t.debias.threshold = config_value<double>(merged, "debias", "threshold");
    t.negative.m = config_value<std::size_t>(merged, "negative", "m");
    t.negative.gating = parse_negative_gating(config_value<std::string>(merged, "negative", "gating"));
    t.bank.momentum = config_value<double>(merged, "bank", "momentum");
    t.bank.use_raw_probs = config_value<bool>(merged, "bank", "use_raw_probs");
    t.bank.statistic = parse_confidence_statistic(config_value<std::string>(merged, "bank", "statistic"));
    t.affinity.tau = config_value<double>(merged, "affinity", "tau");
    t.affinity.capacity = config_value<std::size_t>(merged, "affinity", "capacity");
    t.affinity.weight = config_value<double>(merged, "affinity", "weight");
    t.affinity.normalize = config_value<bool>(merged, "affinity", "normalize");

    t.trainer.iters = config_value<std::size_t>(merged, "trainer", "iters");
    t.trainer.warmup = config_value<std::size_t>(merged, "trainer", "warmup");
    t.trainer.batch_size = config_value<std::size_t>(merged, "trainer", "batch_size");
    t.trainer.ramp_nu = config_value<double>(merged, "trainer", "ramp_nu");
    t.trainer.eval_interval = config_value<std::size_t>(merged, "trainer", "eval_interval");
    t.trainer.seed = config_value<std::uint64_t>(merged, "trainer", "seed");
    for (const auto& name : config_value<std::vector<std::string>>(merged, "trainer", "ablate"))
        apply_ablation(t.trainer.losses, name);
    t.trainer.baseline = config_value<bool>(merged, "trainer", "baseline");

    c.output.metrics = config_value<std::string>(merged, "output", "metrics");
    c.output.summary = config_value<std::string>(merged, "output", "summary");
    c.output.best_checkpoint = config_value<std::string>(merged, "output", "best_checkpoint");
    c.output.final_checkpoint = config_value<std::string>(merged, "output", "final_checkpoint");

    c.train.validate(c.data.num_classes);
    return c;
}

/// Applies `MUVO_<SECTION>_<KEY>=value` overrides. Values are parsed as JSON
/// when possible and taken as plain strings otherwise.
inline nlohmann::json apply_env_overrides(nlohmann::json user, const std::vector<std::pair<std::string, std::string>>& env) {
    using nlohmann::json;
    const json schema = to_json(ExperimentConfig{});
    if (user.is_null()) user = json::object();
    for (const auto& [name, raw] : env) {
        if (name.rfind("MUVO_", 0) != 0) continue;
        std::string rest = name.substr(5);
        std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char ch) { return std::tolower(ch); });
        bool matched = false;
        for (const auto& [section, body] : schema.items()) {
            if (rest.rfind(section + "_", 0) != 0) continue;
            const std::string key = rest.substr(section.size() + 1);
            if (!body.contains(key)) continue;
            json value;
            try {
                value = json::parse(raw);
            } catch (const json::parse_error&) {
                value = raw;
            }
            user[section][key] = value;
            matched = true;
            break;
        }
        if (!matched) throw InvalidConfig("environment override '" + name + "' names no known config key");
    }
    return user;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config '" + path + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidConfig("config '" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace muvo
