#include <gtest/gtest.h>

#include "json.hpp"

#include "fsdet/config.hpp"
#include "fsdet/errors.hpp"
#include "support.hpp"

using namespace fsdet;
using nlohmann::json;

namespace {

json minimal() {
  return json{{"way", 3},          {"shot", 5},        {"n_query", 6},   {"alpha", 10.0},
              {"meta_lr", 0.01},   {"inner_steps", 30}, {"outer_lr", 0.001}, {"lambda", 1.0},
              {"decay_step", 2000}, {"epochs", 30},     {"iters", 100},   {"seed", 0},
              {"metric_kind", "pearson"}, {"mr_enabled", true}};
}

std::string error_of(const json& j) {
  try {
    TrainConfig::from_json(j.dump());
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, MinimalParses) {
  const auto c = TrainConfig::from_json(minimal().dump());
  EXPECT_EQ(c.way, 3u);
  EXPECT_EQ(c.metric_kind, MetricKind::pearson);
  EXPECT_TRUE(c.mr_enabled);
  EXPECT_DOUBLE_EQ(c.outer_lr, 0.001);
}

TEST(Config, EveryRequiredKeyIsNamedWhenMissing) {
  const json full = minimal();
  for (const auto& [key, value] : full.items()) {
    json j = minimal();
    j.erase(key);
    EXPECT_EQ(error_of(j), "config is missing required field '" + key + "'");
  }
}

TEST(Config, WrongTypesNameTheField) {
  json j = minimal();
  j["alpha"] = "ten";
  EXPECT_NE(error_of(j).find("'alpha'"), std::string::npos);
  j = minimal();
  j["way"] = 2.5;
  EXPECT_NE(error_of(j).find("'way'"), std::string::npos);
  j = minimal();
  j["shot"] = -1;
  EXPECT_NE(error_of(j).find("'shot'"), std::string::npos);
  j = minimal();
  j["mr_enabled"] = "yes";
  EXPECT_NE(error_of(j).find("'mr_enabled'"), std::string::npos);
}

TEST(Config, OutOfRangeValuesAreRejected) {
  const std::vector<std::pair<std::string, json>> bad = {
      {"way", 1}, {"shot", 0}, {"alpha", 0.0}, {"meta_lr", -0.1}, {"outer_lr", -1.0},
      {"lambda", -1.0}, {"epochs", 0}, {"iters", 0}, {"decay_step", 0}, {"inner_steps", 0}};
  for (const auto& [key, value] : bad) {
    json j = minimal();
    j[key] = value;
    EXPECT_NE(error_of(j).find("'" + key + "'"), std::string::npos) << key;
  }
}

TEST(Config, UnknownMetricIsRejected) {
  json j = minimal();
  j["metric_kind"] = "euclid";
  EXPECT_THROW(TrainConfig::from_json(j.dump()), ConfigError);
}

TEST(Config, NoMrAllowsZeroInnerSteps) {
  json j = minimal();
  j["mr_enabled"] = false;
  j["inner_steps"] = 0;
  EXPECT_NO_THROW(TrainConfig::from_json(j.dump()));
}

TEST(Config, InvalidJsonIsConfigError) {
  EXPECT_THROW(TrainConfig::from_json("{\"way\": "), ConfigError);
  EXPECT_THROW(TrainConfig::from_json("[1, 2]"), ConfigError);
}

TEST(Config, RoundTrip) {
  json j = minimal();
  j["metric_kind"] = "cosine";
  j["seed"] = 99;
  j["decay_mode"] = "periodic";
  j["fg_gate"] = 0.5;
  const auto a = TrainConfig::from_json(j.dump());
  const auto b = TrainConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(b.metric_kind, MetricKind::cosine);
  EXPECT_EQ(b.decay_mode, DecayMode::periodic);
  EXPECT_EQ(b.seed, 99u);
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"default.json", "smoke.json"}) {
    const auto c = TrainConfig::load(std::filesystem::path(FSDET_SOURCE_DIR) / "configs" / name);
    EXPECT_EQ(c.way, 3u) << name;
  }
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(TrainConfig::load("/nonexistent/fsdet.json"), ConfigError);
}
