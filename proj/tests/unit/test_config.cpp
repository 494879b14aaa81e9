#include <gtest/gtest.h>

#include "mpt/config.hpp"

using namespace mpt;
using namespace mpt::config;

TEST(Config, DefaultsFollowPublishedHyperparameters) {
  const auto c = merge(json::object(), json::object());
  EXPECT_EQ(c["alpha"], 0.05);
  EXPECT_EQ(c["num_states"], 30);
  EXPECT_EQ(c["num_layers"], 4);
  EXPECT_EQ(c["heads"], 2);
  EXPECT_EQ(c["hidden"], 256);
  EXPECT_EQ(c["seq_len"], 1024);
  EXPECT_EQ(c["temperature"], 0.07);
  EXPECT_EQ(c["ft_lr"], 1e-3);
  EXPECT_EQ(c["max_len"], 50);
  EXPECT_EQ(c["dropout"], 0.2);
  EXPECT_EQ(c["lora_rank"], 16);
  EXPECT_EQ(c["lora_alpha"], 16.0);
  EXPECT_EQ(c["lora_dropout"], 0.1);
  EXPECT_NO_THROW(validate(c));
  const auto m = model_config(c);
  EXPECT_EQ(m.ffn(), 680u);
}

TEST(Config, FlagsOverrideFileOverridesPreset) {
  const auto file = file_values(json{{"alpha", 0.05}, {"preset", "desk"}, {"seq_len", 128}});
  const auto flags = json{{"alpha", parse_flag(*find_key("alpha"), "0.5")}};
  const auto c = merge(file, flags);
  EXPECT_EQ(c["alpha"], 0.5);
  EXPECT_EQ(c["seq_len"], 128);
  EXPECT_EQ(c["num_states"], 10);  // from the preset
  EXPECT_EQ(c["preset"], "desk");
}

TEST(Config, ReportFilesCanSeedAConfig) {
  const auto doc = json{{"command", "pretrain"}, {"config", {{"seed", 9}, {"hidden", 64}}}, {"records", json::array()}};
  const auto v = file_values(doc);
  EXPECT_EQ(v["seed"], 9);
  EXPECT_FALSE(v.contains("command"));
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    file_values(json{{"learning_rate", 0.1}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_THROW(parse_flag(*find_key("num_states"), "-3"), ConfigError);
  EXPECT_THROW(parse_flag(*find_key("alpha"), "abc"), ConfigError);
  EXPECT_THROW(file_values(json{{"hidden", "wide"}}), ConfigError);
  EXPECT_EQ(parse_flag(*find_key("cutoffs"), "1,5,10"), json({1, 5, 10}));
  EXPECT_EQ(parse_flag(*find_key("modes"), "chronological,partial"), json({"chronological", "partial"}));
  auto c = merge(json::object(), json{{"modes", json{"shuffled"}}});
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW(merge(json::object(), json{{"preset", "cluster"}}), ConfigError);
}

TEST(Config, InfeasibleFrameIsRejected) {
  const auto c = merge(json::object(), json{{"num_states", 300}, {"hidden", 256}});
  try {
    validate(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("num_states"), std::string::npos);
  }
}

TEST(Config, EveryKeyHasAFlagSpelling) {
  for (const auto& k : schema()) {
    EXPECT_EQ(flag_name(k.name).find('_'), std::string::npos);
    EXPECT_NO_THROW(coerce(k, k.fallback)) << k.name;
  }
}
