#include <gtest/gtest.h>

#include "cast/config.hpp"
#include "cast/experiment.hpp"

using namespace cast;

TEST(Defaults, TrainingRecipe) {
  const TrainConfig t;
  EXPECT_EQ(t.peak_lr, 5e-5);
  EXPECT_EQ(t.warmup_ratio, 0.10);
  EXPECT_EQ(t.effective_batch, 16u);
  EXPECT_EQ(t.epochs, 12u);
  EXPECT_EQ(t.max_src_len, 128u);
  EXPECT_EQ(t.max_tgt_len, 10u);
  EXPECT_EQ(t.accum_steps, 1u);
  const ExperimentConfig e = experiment_from_json(nlohmann::json::object());
  EXPECT_EQ(e.train, t);
  EXPECT_EQ(e.scenario, Scenario::postq);
  EXPECT_EQ(e.model_size, "tiny");
}

TEST(Json, RoundTrips) {
  TrainConfig t;
  t.epochs = 3;
  t.accum_steps = 4;
  t.adam.eps = 1e-6;
  EXPECT_EQ(train_from_json(to_json(t)), t);
  ModelConfig m = mini_config(123);
  m.dropout = 0.2;
  EXPECT_EQ(model_from_json(to_json(m)), m);
  ExperimentConfig e;
  e.scenario = Scenario::variant2;
  e.metric = Metric::weighted_f1;
  e.dtype = "f64";
  const auto back = experiment_from_json(to_json(e));
  EXPECT_EQ(to_json(back), to_json(e));
}

TEST(Json, UnknownKeysAreRejected) {
  EXPECT_THROW(train_from_json(nlohmann::json{{"learning_rate", 1e-3}}), ConfigError);
  EXPECT_THROW(model_from_json(nlohmann::json{{"vocab_size", 10}, {"layers", 2}}), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"train", {{"adam", {{"beta3", 1}}}}}}), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"vocab", {{"min", 1}}}}), ConfigError);
  try {
    experiment_from_json(nlohmann::json{{"epochz", 3}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
}

TEST(Json, BadValuesAreRejected) {
  EXPECT_THROW(train_from_json(nlohmann::json{{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(train_from_json(nlohmann::json{{"accum_steps", 3}}), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"dtype", "f16"}}), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"model_size", "xl"}}), ConfigError);
  EXPECT_THROW(experiment_from_json(nlohmann::json{{"scenario", "prefix"}}), ConfigError);
  EXPECT_THROW(model_from_json(nlohmann::json{{"vocab_size", 10}, {"positional", "learned"}}), ConfigError);
}
