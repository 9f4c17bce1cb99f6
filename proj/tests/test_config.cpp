#include <string>

#include <gtest/gtest.h>

#include "muvo/config.hpp"

using namespace muvo;
using nlohmann::json;

namespace {

std::string failure(const json& j) {
    try {
        parse_config(j);
    } catch (const InvalidConfig& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, DefaultsMatchTheDocumentedValues) {
    const auto c = parse_config(json::object());
    const auto& t = c.train;
    EXPECT_EQ(c.data.num_classes, 8u);
    EXPECT_EQ(c.data.shots, 3u);
    EXPECT_EQ(t.debias.factor, 0.2);
    EXPECT_EQ(t.debias.threshold, 0.95);
    EXPECT_EQ(t.negative.m, 3u);
    EXPECT_EQ(t.bank.momentum, 0.999);
    EXPECT_EQ(t.affinity.tau, 0.1);
    EXPECT_EQ(t.affinity.capacity, 64u);
    EXPECT_EQ(t.trainer.warmup, 800u);
    EXPECT_EQ(t.trainer.iters, 4000u);
    EXPECT_EQ(t.trainer.ramp_nu, 30.0);
    EXPECT_EQ(t.model.sgd.momentum, 0.9);
    EXPECT_TRUE(t.trainer.losses.dcl && t.trainer.losses.ncl && t.trainer.losses.con && t.trainer.losses.cda);
    EXPECT_FALSE(t.trainer.baseline);
    EXPECT_EQ(c.output.metrics, "metrics.jsonl");
    // A null document means "all defaults".
    EXPECT_EQ(to_json(parse_config(json())), to_json(c));
}

TEST(Config, ResolvedJsonRoundTrips) {
    json user = {{"model", {{"hidden_dim", 17}, {"activation", "relu"}}},
                 {"trainer", {{"ablate", {"con", "dcl"}}, {"seed", 9}}},
                 {"data", {{"translation", {0.5, -0.5}}, {"input_dim", 2}}}};
    const auto c = parse_config(user);
    EXPECT_EQ(c.train.model.hidden_dim, 17u);
    EXPECT_EQ(c.train.model.activation, Activation::Relu);
    EXPECT_FALSE(c.train.trainer.losses.con);
    EXPECT_FALSE(c.train.trainer.losses.dcl);
    EXPECT_TRUE(c.train.trainer.losses.ncl);
    const auto resolved = to_json(c);
    EXPECT_EQ(to_json(parse_config(resolved)), resolved);
    EXPECT_EQ(resolved["trainer"]["ablate"], json({"dcl", "con"}));
}

TEST(Config, UnknownKeysAreNamed) {
    EXPECT_NE(failure({{"model", {{"hiden_dim", 3}}}}).find("model.hiden_dim"), std::string::npos);
    EXPECT_NE(failure({{"optimiser", json::object()}}).find("'optimiser'"), std::string::npos);
    EXPECT_NE(failure({{"model", 3}}).find("'model'"), std::string::npos);
    EXPECT_FALSE(failure(json::array()).empty());
}

TEST(Config, WrongTypesAreNamed) {
    EXPECT_NE(failure({{"model", {{"hidden_dim", "wide"}}}}).find("model.hidden_dim"), std::string::npos);
    EXPECT_NE(failure({{"model", {{"hidden_dim", -4}}}}).find("model.hidden_dim"), std::string::npos);
    EXPECT_NE(failure({{"model", {{"hidden_dim", 2.5}}}}).find("model.hidden_dim"), std::string::npos);
    EXPECT_NE(failure({{"affinity", {{"normalize", 1}}}}).find("affinity.normalize"), std::string::npos);
    EXPECT_NE(failure({{"debias", {{"factor", "high"}}}}).find("debias.factor"), std::string::npos);
    EXPECT_NE(failure({{"augment", {{"strong_scale_range", {1.0}}}}}).find("strong_scale_range"), std::string::npos);
}

TEST(Config, ValuesAreValidated) {
    EXPECT_FALSE(failure({{"debias", {{"threshold", 1.5}}}}).empty());
    EXPECT_FALSE(failure({{"negative", {{"m", 10}}}}).empty());
    EXPECT_FALSE(failure({{"negative", {{"gating", "sometimes"}}}}).empty());
    EXPECT_FALSE(failure({{"model", {{"activation", "gelu"}}}}).empty());
    EXPECT_FALSE(failure({{"trainer", {{"ablate", {"sup"}}}}}).empty());
    EXPECT_FALSE(failure({{"trainer", {{"batch_size", 0}}}}).empty());
    EXPECT_FALSE(failure({{"bank", {{"statistic", "median"}}}}).empty());
}

TEST(Config, EnvironmentOverrides) {
    json user = {{"model", {{"hidden_dim", 16}}}};
    const auto merged = apply_env_overrides(user, {{"MUVO_MODEL_HIDDEN_DIM", "24"},
                                                   {"MUVO_NEGATIVE_GATING", "after_warmup"},
                                                   {"MUVO_TRAINER_ABLATE", "[\"cda\"]"},
                                                   {"MUVO_DATA_TRANSLATION", "[1.0]"},
                                                   {"PATH", "/bin"}});
    const auto c = parse_config(merged);
    EXPECT_EQ(c.train.model.hidden_dim, 24u);
    EXPECT_EQ(c.train.negative.gating, NegativeGating::AfterWarmup);
    EXPECT_FALSE(c.train.trainer.losses.cda);
    EXPECT_EQ(c.data.translation, std::vector<double>{1.0});
    EXPECT_THROW(apply_env_overrides(json::object(), {{"MUVO_MODEL_WIDTH", "3"}}), InvalidConfig);
    EXPECT_EQ(apply_env_overrides(json(), {}), json::object());
}

TEST(Config, Ablation) {
    LossSwitches s;
    EXPECT_TRUE(ablation_list(s).empty());
    apply_ablation(s, "ncl");
    apply_ablation(s, "cda");
    EXPECT_EQ(ablation_list(s), (std::vector<std::string>{"ncl", "cda"}));
    EXPECT_THROW(apply_ablation(s, "everything"), InvalidConfig);
}
