// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "elab/config.hpp"

using namespace elab;

namespace {

RunConfig parse(const std::string& text, const std::vector<std::string>& sets = {}) {
  std::istringstream is(text);
  return parse_config(is, sets);
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const RunConfig c = parse("");
  const RunConfig d;
  EXPECT_EQ(dump_config(c), dump_config(d));
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.variant, PenaltyVariant::none);
  EXPECT_EQ(parse("# only a comment\n\n   \n").seed, 42u);
}

TEST(Config, EppoWithoutEtaNamesTheKey) {
  const std::string msg = error_of("seed = 1\npenalty.variant = eppo\n");
  EXPECT_NE(msg.find("penalty.eta"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NO_THROW(parse("penalty.variant = eppo\npenalty.eta = 5\n"));
  EXPECT_NE(error_of("penalty.variant = kl\n").find("penalty.beta"), std::string::npos);
  EXPECT_NE(error_of("penalty.variant = lp\n").find("penalty.lp_max_len"), std::string::npos);
}

TEST(Config, UnknownKeyAndTypeMismatchCarryLineNumbers) {
  const std::string unknown = error_of("seed = 3\n\nmodel.widht = 4\n");
  EXPECT_NE(unknown.find("line 3"), std::string::npos) << unknown;
  EXPECT_NE(unknown.find("model.widht"), std::string::npos) << unknown;
  const std::string bad = error_of("ppo.total_steps = many\n");
  EXPECT_NE(bad.find("line 1"), std::string::npos);
  EXPECT_NE(bad.find("unsigned integer"), std::string::npos) << bad;
  EXPECT_NE(error_of("ppo.total_steps = -3\n").find("line 1"), std::string::npos);
  EXPECT_NE(error_of("penalty.variant = dpo\n").find("none|kl|lp|eppo"), std::string::npos);
  EXPECT_NE(error_of("no equals sign\n").find("key=value"), std::string::npos);
  EXPECT_NE(error_of("seed = 1\nseed = 2\n").find("duplicate"), std::string::npos);
}

TEST(Config, ValidationWrapsSubConfigs) {
  EXPECT_THROW(parse("model.n_heads = 3\n"), ConfigError);  // 32 is not divisible by 3
  EXPECT_THROW(parse("task.max_keywords = 7\n"), ConfigError);
  EXPECT_THROW(parse("ppo.clip = 1.5\n"), ConfigError);
  EXPECT_THROW(parse("sampling.top_p = 0\n"), ConfigError);
  EXPECT_THROW(parse("micro.vocab_size = 12\n"), ConfigError);
}

TEST(Config, OverridesApplyAfterFile) {
  const RunConfig c = parse("seed = 5\nppo.total_steps = 10\n", {"seed=9", "penalty.variant=eppo", "penalty.eta=2"});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.ppo.total_steps, 10u);
  ASSERT_TRUE(c.eta.has_value());
  EXPECT_EQ(*c.eta, 2.0);
  EXPECT_THROW(parse("", {"seed"}), ConfigError);
  EXPECT_THROW(parse("", {"nope=1"}), ConfigError);
}

TEST(Config, DumpRoundTripIsCanonical) {
  const std::string messy =
      "# comment\n  ppo.total_steps=12 # trailing\nseed =  7\nsweep.values = 1, 2.5 ,3\n"
      "penalty.variant = kl\npenalty.beta = 0.05\nsampling.temperature = 0.7\n";
  const RunConfig a = parse(messy);
  const std::string canon = dump_config(a);
  // canonical text parses back to itself
  EXPECT_EQ(dump_config(parse(canon)), canon);
  EXPECT_NE(canon.find("ppo.total_steps=12\n"), std::string::npos);
  EXPECT_NE(canon.find("sweep.values=1,2.5,3\n"), std::string::npos);
  EXPECT_NE(canon.find("sampling.temperature=0.7\n"), std::string::npos);
  // unset optionals are omitted
  EXPECT_EQ(canon.find("\npenalty.eta="), std::string::npos);
  // sorted, one line per key
  std::istringstream is(canon);
  std::string line, prev;
  while (std::getline(is, line)) {
    EXPECT_LT(prev, line);
    prev = line;
  }
}

TEST(Config, HashChangesIffAFieldChanges) {
  const RunConfig base;
  const auto h0 = config_hash(base);
  EXPECT_EQ(config_hash(RunConfig{}), h0);
  // perturb every field in turn: each perturbation must move the hash
  std::set<std::uint64_t> seen{h0};
  for (const auto& f : config_fields()) {
    RunConfig c = base;
    std::string v;
    if (f.type == "bool") v = "false";
    else if (f.type == "string") v = "x/elsewhere";
    else if (f.type.rfind("one of", 0) == 0) v = "none";
    else if (f.type == "comma-separated numbers") v = "3,4";
    else v = "7";
    if (f.key == "penalty.variant") v = "kl";
    ASSERT_TRUE(f.set(c, v)) << f.key;
    const auto h = config_hash(c);
    EXPECT_NE(h, h0) << f.key;
    seen.insert(h);
    // restoring the original value restores the hash
    RunConfig back = c;
    if (const auto orig = f.get(base)) {
      ASSERT_TRUE(f.set(back, *orig));
      EXPECT_EQ(config_hash(back), h0) << f.key;
    }
  }
  EXPECT_EQ(seen.size(), config_fields().size() + 1);
}

TEST(Config, FieldsAreSortedAndDocumented) {
  const auto& fs = config_fields();
  for (std::size_t i = 1; i < fs.size(); ++i) EXPECT_LT(fs[i - 1].key, fs[i].key);
  const std::string help = config_help();
  for (const auto& f : fs) {
    EXPECT_FALSE(f.doc.empty()) << f.key;
    EXPECT_NE(help.find("  " + f.key + " ("), std::string::npos) << f.key;
  }
}

TEST(Config, SamplingSeedIsDerivedFromGlobalSeed) {
  const RunConfig a = parse("seed = 1\n"), b = parse("seed = 2\n");
  EXPECT_NE(a.sampling().seed, b.sampling().seed);
  EXPECT_EQ(a.sampling().seed, parse("seed = 1\n").sampling().seed);
}
