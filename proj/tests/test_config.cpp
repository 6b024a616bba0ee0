#include "mmv/config.hpp"

#include <gtest/gtest.h>

using namespace mmv;
using nlohmann::json;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Toml, ScalarsTablesAndArrays) {
  const auto j = toml::parse(R"(
# leading comment
title = "multi\tmodal \"mae\""   # trailing comment
raw = 'C:\path'
count = 1_200
neg = -3
rate = 1e-4
ratio = 0.75
on = true
off = false

[model.encoder]
dims = [64, 64,
        64]   # spans lines
taps = [3, 6, 9, 12,]
nested = [[1, 2], ["a"]]
"quoted key" = 1

[data]
phantom.train = 4
)");
  EXPECT_EQ(j["title"], "multi\tmodal \"mae\"");
  EXPECT_EQ(j["raw"], "C:\\path");
  EXPECT_EQ(j["count"], 1200);
  EXPECT_TRUE(j["count"].is_number_integer());
  EXPECT_EQ(j["neg"], -3);
  EXPECT_DOUBLE_EQ(j["rate"].get<double>(), 1e-4);
  EXPECT_TRUE(j["ratio"].is_number_float());
  EXPECT_EQ(j["on"], true);
  EXPECT_EQ(j["off"], false);
  EXPECT_EQ(j["model"]["encoder"]["dims"], json({64, 64, 64}));
  EXPECT_EQ(j["model"]["encoder"]["taps"], json({3, 6, 9, 12}));
  EXPECT_EQ(j["model"]["encoder"]["nested"], json::parse(R"([[1,2],["a"]])"));
  EXPECT_EQ(j["model"]["encoder"]["quoted key"], 1);
  EXPECT_EQ(j["data"]["phantom"]["train"], 4);
}

TEST(Toml, ErrorsCarryLineNumbers) {
  EXPECT_NE(error_of([] { toml::parse("a = 1\na = 2\n"); }).find("line 2"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("a = 1\nb = \"open\n"); }).find("unterminated string"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("x = {a = 1}\n"); }).find("inline tables"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("[[runs]]\n"); }).find("arrays of tables"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("a = 12abc\n"); }).find("12abc"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("a = 1 2\n"); }).find("after value"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("[t]\n[t]\n"); }).find("twice"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("a = 1\n[a]\n"); }).find("already a value"), std::string::npos);
  EXPECT_NE(error_of([] { toml::parse("= 3\n"); }).find("expected a key"), std::string::npos);
}

TEST(Config, TomlAndJsonFlattenIdentically) {
  const auto t = Config::from_text("[pretrain]\nepochs = 5\nlr = 0.001\n[model.encoder]\ntaps = [1, 2]\n", false);
  const auto j = Config::from_text(R"({"pretrain": {"epochs": 5, "lr": 0.001}, "model": {"encoder": {"taps": [1, 2]}}})", true);
  EXPECT_EQ(t.effective(), j.effective());
  EXPECT_EQ(t.require<int>("pretrain.epochs"), 5);
  EXPECT_EQ(j.get<std::vector<int>>("model.encoder.taps", {}), (std::vector<int>{1, 2}));
  EXPECT_THROW(Config::from_text("{not json", true), ConfigError);
  EXPECT_THROW(Config::from_text("[1, 2]", true), ConfigError);
}

TEST(Config, TypedAccessNamesTheKey) {
  const auto c = Config::from_text("a = \"x\"\nb = 2\nc = 2.5\nd = -1\ne = [1, \"two\"]\n", false);
  EXPECT_EQ(c.get<double>("b", 0), 2.0);  // integers widen to floats
  EXPECT_NE(error_of([&] { c.get<int>("a", 0); }).find("'a': expected integer, got string"), std::string::npos);
  EXPECT_NE(error_of([&] { c.get<int>("c", 0); }).find("'c': expected integer, got float"), std::string::npos);
  EXPECT_NE(error_of([&] { c.get<std::uint64_t>("d", 0); }).find("non-negative"), std::string::npos);
  EXPECT_NE(error_of([&] { c.get<std::vector<int>>("e", {}); }).find("'e'"), std::string::npos);
  EXPECT_NE(error_of([&] { c.require<int>("missing"); }).find("missing config key 'missing'"), std::string::npos);
  EXPECT_EQ(c.get<int>("missing", 7), 7);
}

TEST(Config, UnknownKeysAreRejectedByName) {
  const auto c = Config::from_text("[pretrain]\nepochs = 3\nepochz = 4\n[finetune]\nlr = 1.0\n", false);
  c.get<int>("pretrain.epochs", 0);
  c.ignore_section("finetune");
  EXPECT_EQ(error_of([&] { c.reject_unknown(); }), "unknown config key 'pretrain.epochz'");
  c.get<int>("pretrain.epochz", 0);
  EXPECT_NO_THROW(c.reject_unknown());
}

TEST(Config, OverridesShowInEffectiveValuesButNotText) {
  auto c = Config::from_text("[run]\nseed = 1\n", false);
  c.set("run.seed", 9);
  EXPECT_EQ(c.effective()["run"]["seed"], 9);
  EXPECT_EQ(c.text(), "[run]\nseed = 1\n");
  EXPECT_TRUE(c.has("run.seed"));
  EXPECT_TRUE(c.has_prefix("run"));
  EXPECT_FALSE(c.has_prefix("ru"));
}
