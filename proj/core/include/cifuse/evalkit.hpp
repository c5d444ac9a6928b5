#pragma once

#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "cifuse/config.hpp"
#include "cifuse/engine.hpp"

namespace cifuse {

// One complete continual run (all rounds) for one seed.
struct RunResult {
  std::string row_id;
  int64_t seed = 0;
  std::vector<RoundReport> reports;
  // extractor-removal probes keyed by (round k, keep_only); one report per
  // round the probe was applied to (rounds k..T)
  std::vector<std::tuple<int, bool, std::vector<ProbeReport>>> probes;
  uint64_t stream_checksum = 0;

  const std::vector<ProbeReport>* find_probe(int k, bool keep_only) const;
};

struct RunSummary {
  std::string row_id;
  std::vector<int64_t> seeds;
  std::vector<double> final_acc;  // per seed, final round
  std::vector<double> mean_acc;   // per seed, rounds 2..T
  double final_mean = 0.0;
  std::optional<double> final_sd;
  double mean_mean = 0.0;
  std::optional<double> mean_sd;
};

struct SuiteRowResult {
  AblationRow row;
  std::vector<RunResult> runs;  // one per seed, seed order of the config
  RunSummary summary;
};

// Mean accuracy over all but the initial round (rounds 2..T).
double mean_accuracy(const std::vector<double>& per_round_acc);

// A[t][k]: accuracy at round t on the classes introduced at round k (k <= t).
std::vector<std::vector<double>> subset_accuracy_curves(
    const std::vector<RoundReport>& reports);

std::vector<double> size_ratio_series(const std::vector<RoundReport>& reports,
                                      size_t base_param_count);

struct RunOptions {
  std::string checkpoint_dir;  // empty: no checkpoints written
  std::vector<std::pair<int, bool>> probe_specs;
};

// Full continual run: builds the stream for the seed's class order, drives
// the engine round by round, applies probes and optionally writes per-round
// checkpoints.
RunResult run_experiment(const RunConfig& config, const AblationFlags& flags,
                         const std::string& row_id, int64_t seed,
                         const Dataset& train, const Dataset& test,
                         const RunOptions& options = {});

// Runs every row over every seed of the config. Rows sharing an identical
// training signature (probe rows ride on the full method) share training.
// Rows see byte-identical data streams per seed; violations are an error.
// With a single row and a non-empty checkpoint root, per-round checkpoints
// land under <root>/seed_<seed>/round_XX.
std::vector<SuiteRowResult> run_ablation_suite(const RunConfig& config,
                                               const std::vector<AblationRow>& rows,
                                               const std::string& checkpoint_root = "");

RunSummary summarize(const AblationRow& row, const std::vector<RunResult>& runs);

// `run_id,seed,round,metric,subset,value` with one row per metric value.
void write_metrics_csv(const std::string& path,
                       const std::vector<SuiteRowResult>& results);
std::string summary_to_json(const std::vector<SuiteRowResult>& results);

std::string report_to_json(const RoundReport& report);
RoundReport report_from_json(const std::string& text);

Dataset load_dataset_config(const DatasetConfig& config, bool test_split);

}  // namespace cifuse
