#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cifuse/engine.hpp"
#include "cifuse/stream.hpp"

namespace cifuse {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  enum class Kind { kSynthetic, kPacked };
  Kind kind = Kind::kSynthetic;
  SyntheticSpec synthetic;
  std::string train_path;  // packed files
  std::string test_path;
};

// One named ablation row: the flag preset plus optional inference-time
// extractor probes.
struct AblationRow {
  std::string id = "full";
  AblationFlags flags;
  int drop_extractor = 0;       // >0: drop that round's extractor at inference
  int keep_only_extractor = 0;  // >0: keep only that extractor (plus current)
};

AblationRow make_ablation_row(const std::string& id);

struct RunConfig {
  DatasetConfig dataset;
  std::vector<int> rounds = {2, 2, 2, 2, 2};
  std::vector<int64_t> seeds = {1, 2, 3, 4, 5};
  int memory_budget = 200;
  TrainConfig train;
  AblationRow row;                 // used by `run`
  std::vector<std::string> matrix; // used by `ablate`
  std::string output_dir;
  int workers = 0;  // 0 = hardware concurrency

  void validate() const;
};

// Strict parser: unknown keys are errors so a misspelled ablation flag can
// never silently fall back to a default.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);

// Canonical serialized form (sorted keys, defaults materialized); two
// semantically identical configs serialize identically.
std::string canonical_config(const RunConfig& config);
uint64_t config_hash(const RunConfig& config);

std::string fusion_mode_name(FusionMode mode);

}  // namespace cifuse
