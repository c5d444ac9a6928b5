#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cifuse/evalkit.hpp"

using namespace cifuse;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.dataset.synthetic.classes = 4;
  cfg.dataset.synthetic.train_per_class = 20;
  cfg.dataset.synthetic.test_per_class = 6;
  cfg.dataset.synthetic.height = 10;
  cfg.dataset.synthetic.width = 10;
  cfg.dataset.synthetic.seed = 77;
  cfg.rounds = {2, 2};
  cfg.seeds = {1, 2};
  cfg.memory_budget = 24;
  cfg.train.widths = {3, 5};
  cfg.train.common_dim = 8;
  cfg.train.batch_size = 16;
  cfg.train.max_epochs = 3;
  cfg.train.finetune_epochs = 2;
  cfg.train.patience = 5;
  cfg.output_dir = "unused";
  cfg.workers = 2;
  return cfg;
}

}  // namespace

TEST_CASE("overall accuracy on label vectors") {
  CHECK(overall_accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(overall_accuracy({1, 2, 3}, {3, 1, 2}) == 0.0);
  CHECK(overall_accuracy({1, 2, 3, 4}, {1, 2, 3, 9}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(overall_accuracy({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(overall_accuracy({1}, {1, 2}), std::invalid_argument);
}

TEST_CASE("mean accuracy excludes the initial round") {
  CHECK(mean_accuracy({0.80, 0.70, 0.60}) == doctest::Approx(0.65));
  CHECK(mean_accuracy({0.5, 0.5, 0.5, 0.5}) == doctest::Approx(0.5));
  CHECK(mean_accuracy({0.9, 0.4}) == doctest::Approx(0.4));
  CHECK_THROWS_AS(mean_accuracy({0.9}), std::invalid_argument);
}

TEST_CASE("subset accuracy curves are lower-triangular") {
  RoundReport r1;
  r1.round = 1;
  r1.subset_acc = {0.9};
  RoundReport r2;
  r2.round = 2;
  r2.subset_acc = {0.8, 0.95};
  const auto curves = subset_accuracy_curves({r1, r2});
  REQUIRE(curves.size() == 2);
  CHECK(curves[0].size() == 1);
  CHECK(curves[1].size() == 2);
  CHECK(curves[1][1] == doctest::Approx(0.95));  // A[t][t] = introduction accuracy
  CHECK_THROWS_AS(subset_accuracy_curves({}), std::invalid_argument);

  const auto single = subset_accuracy_curves({r1});
  CHECK(single.size() == 1);
  CHECK(single[0].size() == 1);
}

TEST_CASE("size ratio series") {
  RoundReport a, b, c;
  a.param_count = 100;
  b.param_count = 200;
  c.param_count = 300;
  const auto ratios = size_ratio_series({a, b, c}, 100);
  CHECK(ratios == std::vector<double>{1.0, 2.0, 3.0});
  CHECK_THROWS_AS(size_ratio_series({a}, 0), std::invalid_argument);
}

TEST_CASE("suite: rows, checksum agreement, ordering of outputs") {
  const auto cfg = small_config();
  std::vector<AblationRow> rows = {make_ablation_row("none"),
                                   make_ablation_row("full"),
                                   make_ablation_row("drop:1")};
  const auto results = run_ablation_suite(cfg, rows);
  REQUIRE(results.size() == 3);
  CHECK(results[0].row.id == "none");
  CHECK(results[1].row.id == "full");
  CHECK(results[2].row.id == "drop:1");
  for (const auto& r : results) {
    REQUIRE(r.runs.size() == 2);
    CHECK(r.runs[0].seed == 1);
    CHECK(r.runs[1].seed == 2);
    REQUIRE(r.runs[0].reports.size() == 2);
    CHECK(r.summary.final_acc.size() == 2);
    CHECK(r.summary.final_sd.has_value());
  }
  // rows consumed identical streams per seed
  for (int s = 0; s < 2; ++s)
    CHECK(results[0].runs[s].stream_checksum == results[1].runs[s].stream_checksum);
  // the probe row carries probe reports for rounds after round 1
  const auto* probe = results[2].runs[0].find_probe(1, false);
  REQUIRE(probe != nullptr);
  CHECK(probe->size() == 1);
  // probe rows share training with the full row, so base reports agree
  CHECK(report_to_json(results[2].runs[0].reports[1]) ==
        report_to_json(results[1].runs[0].reports[1]));
}

TEST_CASE("suite: overall accuracy equals the subset-weighted mean") {
  auto cfg = small_config();
  cfg.seeds = {5};
  const auto results = run_ablation_suite(cfg, {make_ablation_row("full")});
  const auto& reports = results[0].runs[0].reports;
  // equal test counts per class: weights are class counts per round
  const auto& r2 = reports[1];
  const double weighted = (2.0 * r2.subset_acc[0] + 2.0 * r2.subset_acc[1]) / 4.0;
  CHECK(std::abs(r2.acc_nme - weighted) < 1e-9);
}

TEST_CASE("report json round-trips losslessly") {
  auto cfg = small_config();
  cfg.seeds = {1};
  const auto results = run_ablation_suite(cfg, {make_ablation_row("full")});
  for (const auto& rep : results[0].runs[0].reports) {
    const std::string text = report_to_json(rep);
    const RoundReport back = report_from_json(text);
    CHECK(report_to_json(back) == text);
  }
}

TEST_CASE("metrics csv: header, determinism, parseability") {
  auto cfg = small_config();
  cfg.seeds = {1};
  const auto results = run_ablation_suite(cfg, {make_ablation_row("full")});

  const std::string p1 = "/tmp/cifuse_metrics_a.csv";
  const std::string p2 = "/tmp/cifuse_metrics_b.csv";
  write_metrics_csv(p1, results);
  write_metrics_csv(p2, results);

  std::ifstream f1(p1), f2(p2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  std::string line;
  std::stringstream all(s1.str());
  std::getline(all, line);
  CHECK(line == "run_id,seed,round,metric,subset,value");
  int rows = 0;
  while (std::getline(all, line))
    if (!line.empty()) {
      CHECK(std::count(line.begin(), line.end(), ',') == 5);
      ++rows;
    }
  CHECK(rows > 0);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("summary json is keyed by ablation row") {
  auto cfg = small_config();
  cfg.seeds = {1};
  const auto results = run_ablation_suite(
      cfg, {make_ablation_row("none"), make_ablation_row("fusion")});
  const std::string text = summary_to_json(results);
  CHECK(text.find("\"none\"") != std::string::npos);
  CHECK(text.find("\"fusion\"") != std::string::npos);
  CHECK(text.find("final_acc") != std::string::npos);
}

TEST_CASE("invalid flag combinations are rejected") {
  AblationFlags bad;
  bad.fusion = false;
  bad.mask = true;
  bad.transforms = false;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  AblationFlags bad2;
  bad2.fusion = true;
  bad2.multi_teacher = true;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);

  AblationFlags bad3;
  bad3.mask = true;
  bad3.transforms = false;
  CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);
}
