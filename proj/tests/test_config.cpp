#include <gtest/gtest.h>

#include <random>

#include "clmae/config.hpp"
#include "clmae/errors.hpp"

using namespace clmae;

TEST(Config, DefaultsMatchToyRecipe) {
  TrainConfig c;
  EXPECT_EQ(c.steps, 3000u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.lr_mae, 1.5e-4);
  EXPECT_EQ(c.adam.weight_decay, 0.05);
  EXPECT_EQ(c.warmup(), 150u);
  EXPECT_EQ(c.lambda_final, -0.1);
  EXPECT_EQ(c.geometry.cmm_depth, 5u);
  EXPECT_EQ(c.dump_steps(), (std::vector<std::size_t>{0, 750, 1500, 2250, 3000}));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTrip) {
  TrainConfig c;
  c.steps = 17;
  c.lr_cmm = 0.1 + 0.2;  // not exactly representable in short decimal form
  c.dataset = "data/set.clmds";
  c.mask_dump_steps = {0, 5, 17};
  c.precision = Precision::f64;
  TrainConfig back;
  apply_config_text(back, format_config(c));
  EXPECT_EQ(format_config(back), format_config(c));
  EXPECT_EQ(back.lr_cmm, c.lr_cmm);
  EXPECT_EQ(config_digest(back), config_digest(c));
}

TEST(Config, CommentsBlankLinesAndErrorsWithLineNumbers) {
  TrainConfig c;
  apply_config_text(c, "# comment\n\nsteps = 12   # trailing\n  seed=9\n");
  EXPECT_EQ(c.steps, 12u);
  EXPECT_EQ(c.seed, 9u);
  try {
    apply_config_text(c, "steps = 3\nbogus = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos) << e.what();
  }
  EXPECT_THROW(apply_config_text(c, "steps = many\n"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "steps\n"), ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  TrainConfig c;
  c.lambda_final = -1.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.geometry.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.losses.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, DigestIgnoresOutputSettings) {
  TrainConfig a, b;
  b.out = "elsewhere";
  b.checkpoint_every = 7;
  b.mask_dump_count = 2;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.seed = 1;
  EXPECT_NE(config_digest(a), config_digest(b));
}

// defaults < file < overrides, over random subsets of keys.
TEST(Config, PrecedenceIsTotal) {
  const std::vector<std::string> keys{"steps", "batch_size", "lr_mae", "lr_cmm", "seed", "lambda_kl", "mask_ratio",
                                      "lambda_final", "out", "mask_dump_count"};
  const std::vector<std::pair<std::string, std::string>> file_values{
      {"steps", "11"}, {"batch_size", "3"}, {"lr_mae", "0.25"}, {"lr_cmm", "0.5"}, {"seed", "4"},
      {"lambda_kl", "0.125"}, {"mask_ratio", "0.5"}, {"lambda_final", "-0.5"}, {"out", "file_out"},
      {"mask_dump_count", "2"}};
  const std::vector<std::pair<std::string, std::string>> flag_values{
      {"steps", "22"}, {"batch_size", "6"}, {"lr_mae", "0.75"}, {"lr_cmm", "0.0625"}, {"seed", "8"},
      {"lambda_kl", "2"}, {"mask_ratio", "0.625"}, {"lambda_final", "0.25"}, {"out", "flag_out"},
      {"mask_dump_count", "5"}};
  const TrainConfig defaults;
  std::mt19937 rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    std::map<std::string, std::string> overrides;
    std::vector<int> in_file(keys.size()), in_flags(keys.size());
    for (std::size_t k = 0; k < keys.size(); ++k) {
      in_file[k] = rng() % 2;
      in_flags[k] = rng() % 2;
      if (in_file[k]) text += file_values[k].first + " = " + file_values[k].second + "\n";
      if (in_flags[k]) overrides[flag_values[k].first] = flag_values[k].second;
    }
    const TrainConfig c = resolve_config(text, overrides);
    for (std::size_t k = 0; k < keys.size(); ++k) {
      TrainConfig expect_cfg = defaults;
      if (in_file[k]) set_config_value(expect_cfg, keys[k], file_values[k].second);
      if (in_flags[k]) set_config_value(expect_cfg, keys[k], flag_values[k].second);
      EXPECT_EQ(get_config_value(c, keys[k]), get_config_value(expect_cfg, keys[k])) << keys[k];
    }
  }
}

TEST(Config, EveryKeyReadableAndWritable) {
  TrainConfig c;
  for (const auto& k : config_keys()) {
    const std::string v = get_config_value(c, k);
    EXPECT_NO_THROW(set_config_value(c, k, v)) << k;
    EXPECT_EQ(get_config_value(c, k), v) << k;
  }
  EXPECT_THROW(set_config_value(c, "nope", "1"), ConfigError);
}
