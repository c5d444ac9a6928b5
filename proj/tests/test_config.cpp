#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cifuse/config.hpp"

using namespace cifuse;

TEST_CASE("parse: minimal config fills defaults") {
  const auto cfg = parse_run_config(R"({"output_dir": "out"})");
  CHECK(cfg.rounds == std::vector<int>{2, 2, 2, 2, 2});
  CHECK(cfg.seeds.size() == 5);
  CHECK(cfg.memory_budget == 200);
  CHECK(cfg.train.lambda1 == 1.0);
  CHECK(cfg.train.lambda2 == 0.1);
  CHECK(cfg.train.temperature == 2.0);
  CHECK(cfg.train.batch_size == 128);
  CHECK(cfg.row.id == "full");
  CHECK(cfg.row.flags.fusion);
  CHECK(cfg.row.flags.mask);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("parse: unknown keys fail closed") {
  CHECK_THROWS_AS(parse_run_config(R"({"output_dir": "o", "typo_key": 1})"),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"output_dir": "o", "dataset": {"clasess": 10}})"),
      ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"output_dir": "o", "train": {"lamda1": 0.5}})"),
      ConfigError);
  CHECK_THROWS_AS(
      parse_run_config(R"({"output_dir": "o", "ablation": {"fusionn": true}})"),
      ConfigError);
}

TEST_CASE("parse: ablation rows and probes") {
  const auto cfg = parse_run_config(R"({"output_dir": "o", "ablation": "fusion_fc"})");
  CHECK(cfg.row.flags.fusion);
  CHECK(cfg.row.flags.transforms);
  CHECK_FALSE(cfg.row.flags.mask);

  const auto drop = parse_run_config(R"({"output_dir": "o", "ablation": "drop:2"})");
  CHECK(drop.row.drop_extractor == 2);
  CHECK(drop.row.flags.mask);  // probes ride on the full method

  const auto multi =
      parse_run_config(R"({"output_dir": "o", "ablation": "multi_teacher"})");
  CHECK(multi.row.flags.multi_teacher);
  CHECK_FALSE(multi.row.flags.fusion);

  CHECK_THROWS_AS(parse_run_config(R"({"output_dir": "o", "ablation": "bogus"})"),
                  ConfigError);
}

TEST_CASE("parse: conflicting explicit flags are invalid-config") {
  CHECK_THROWS_AS(
      parse_run_config(
          R"({"output_dir": "o", "ablation": {"fusion": false, "mask": true}})"),
      ConfigError);
  const auto cfg = parse_run_config(
      R"({"output_dir": "o", "ablation": {"row": "full", "freeze_old": false}})");
  CHECK_FALSE(cfg.row.flags.freeze_old);
}

TEST_CASE("parse: dataset kinds and fusion modes") {
  const auto packed = parse_run_config(
      R"({"output_dir": "o", "dataset": {"kind": "packed", "train_path": "a.bin", "test_path": "b.bin"}})");
  CHECK(packed.dataset.kind == DatasetConfig::Kind::kPacked);
  CHECK(packed.dataset.train_path == "a.bin");

  CHECK_THROWS_AS(
      parse_run_config(R"({"output_dir": "o", "dataset": {"kind": "webscale"}})"),
      ConfigError);

  const auto avg = parse_run_config(
      R"({"output_dir": "o", "train": {"fusion_mode": "average"}})");
  CHECK(avg.train.fusion_mode == FusionMode::kAverage);
  CHECK_THROWS_AS(
      parse_run_config(R"({"output_dir": "o", "train": {"fusion_mode": "sum"}})"),
      ConfigError);
}

TEST_CASE("validate: semantic errors") {
  auto cfg = parse_run_config(R"({"output_dir": "o"})");
  cfg.rounds = {6, 6};  // 12 > 10 classes
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = parse_run_config(R"({"output_dir": "o"})");
  cfg.memory_budget = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = parse_run_config(R"({"output_dir": "o"})");
  cfg.train.temperature = 0.3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  CHECK_THROWS_AS(parse_run_config(R"({"output_dir": ""})").validate(), ConfigError);
}

TEST_CASE("canonical hash: key order does not matter, values do") {
  const auto a = parse_run_config(
      R"({"output_dir": "o", "memory_budget": 100, "train": {"lambda1": 0.5, "temperature": 3.0}})");
  const auto b = parse_run_config(
      R"({"train": {"temperature": 3.0, "lambda1": 0.5}, "memory_budget": 100, "output_dir": "o"})");
  CHECK(canonical_config(a) == canonical_config(b));
  CHECK(config_hash(a) == config_hash(b));

  auto c = b;
  c.train.lambda1 = 0.6;
  CHECK(config_hash(a) != config_hash(c));

  // the output directory is not part of the identity of a run
  auto d = b;
  d.output_dir = "elsewhere";
  CHECK(config_hash(a) == config_hash(d));
}

TEST_CASE("row presets cover the ablation table") {
  CHECK(make_ablation_row("none").flags.fusion == false);
  CHECK(make_ablation_row("fusion").flags.transforms == false);
  CHECK(make_ablation_row("fusion").flags.fusion == true);
  CHECK(make_ablation_row("fusion_fc").flags.transforms == true);
  CHECK(make_ablation_row("full").flags.mask == true);
  CHECK(make_ablation_row("unfrozen").flags.freeze_old == false);
  CHECK(make_ablation_row("multi_teacher").flags.multi_teacher == true);
  CHECK(make_ablation_row("keep_only:3").keep_only_extractor == 3);
  CHECK_THROWS_AS(make_ablation_row("drop:0"), ConfigError);
}
