#include "cifuse/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

#include <json.hpp>

#include "cifuse/checkpoint.hpp"
#include "cifuse/rng.hpp"

namespace cifuse {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<ProbeReport>* RunResult::find_probe(int k, bool keep_only) const {
  for (const auto& [pk, po, reports] : probes)
    if (pk == k && po == keep_only) return &reports;
  return nullptr;
}

double mean_accuracy(const std::vector<double>& per_round_acc) {
  if (per_round_acc.size() < 2)
    throw std::invalid_argument("mean_accuracy: needs at least two rounds");
  double sum = 0.0;
  for (size_t t = 1; t < per_round_acc.size(); ++t) sum += per_round_acc[t];
  return sum / (per_round_acc.size() - 1);
}

std::vector<std::vector<double>> subset_accuracy_curves(
    const std::vector<RoundReport>& reports) {
  if (reports.empty())
    throw std::invalid_argument("subset_accuracy_curves: no reports");
  std::vector<std::vector<double>> curves;
  for (const auto& r : reports) curves.push_back(r.subset_acc);
  return curves;
}

std::vector<double> size_ratio_series(const std::vector<RoundReport>& reports,
                                      size_t base_param_count) {
  if (base_param_count == 0)
    throw std::invalid_argument("size_ratio_series: base must be positive");
  std::vector<double> out;
  for (const auto& r : reports)
    out.push_back(static_cast<double>(r.param_count) / base_param_count);
  return out;
}

Dataset load_dataset_config(const DatasetConfig& config, bool test_split) {
  if (config.kind == DatasetConfig::Kind::kPacked)
    return read_packed_dataset(test_split ? config.test_path : config.train_path);
  Dataset train, test;
  generate_synthetic(config.synthetic, train, test);
  return test_split ? test : train;
}

namespace {

std::string round_dir_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "round_%02d", t);
  return buf;
}

void write_round_checkpoint(const std::string& dir, Engine& engine,
                            const RoundReport& report) {
  fs::create_directories(dir);
  save_tensors(dir + "/params.bin", snapshot_params(engine.state().model.all_params()));
  if (!engine.last_masks().keep.empty()) {
    std::vector<std::string> names;
    for (size_t l = 0; l < engine.last_masks().keep.size(); ++l)
      names.push_back("conv" + std::to_string(l));
    save_masks(dir + "/masks.bin", engine.last_masks(), names);
  }
  std::ofstream out(dir + "/report.json");
  out << report_to_json(report) << "\n";
}

}  // namespace

RunResult run_experiment(const RunConfig& config, const AblationFlags& flags,
                         const std::string& row_id, int64_t seed,
                         const Dataset& train, const Dataset& test,
                         const RunOptions& options) {
  const int num_classes = train.num_classes();
  const ClassOrder order = make_class_order(num_classes, seed);
  const TaskStream stream = split_rounds(train, test, order, config.rounds);

  ExtractorSpec backbone;
  backbone.in_h = train.height;
  backbone.in_w = train.width;
  backbone.in_ch = train.channels;
  backbone.widths = config.train.widths;

  TrainConfig tc = config.train;
  tc.seed = derive_seed(static_cast<uint64_t>(seed), "train");

  Engine engine(backbone, tc, flags, config.memory_budget);

  RunResult result;
  result.row_id = row_id;
  result.seed = seed;
  result.stream_checksum = stream.train_checksum();
  for (const auto& [k, keep_only] : options.probe_specs)
    result.probes.emplace_back(k, keep_only, std::vector<ProbeReport>{});

  for (int t = 1; t <= stream.num_rounds(); ++t) {
    RoundData data;
    data.new_classes = stream.round_classes(t);
    data.train = stream.round_train(t);
    data.test_seen = stream.seen_test(t);
    RoundReport report = engine.run_round(data);

    // probes evaluate how well round-k knowledge survives later rounds, so
    // they apply strictly after round k
    for (auto& [k, keep_only, reports] : result.probes)
      if (t > k) reports.push_back(engine.probe_extractor(k, keep_only, data.test_seen));

    if (!options.checkpoint_dir.empty())
      write_round_checkpoint(options.checkpoint_dir + "/" + round_dir_name(t), engine,
                             report);
    result.reports.push_back(std::move(report));
  }
  return result;
}

namespace {

std::string flags_signature(const AblationFlags& f) {
  std::string s;
  s += f.fusion ? 'F' : '-';
  s += f.transforms ? 'T' : '-';
  s += f.mask ? 'M' : '-';
  s += f.freeze_old ? 'Z' : '-';
  s += f.multi_teacher ? 'P' : '-';
  return s;
}

std::optional<double> sample_sd(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return std::nullopt;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (xs.size() - 1));
}

// per-round accuracy series with probe overrides where the probe applies
std::vector<double> row_accuracy_series(const AblationRow& row, const RunResult& run) {
  std::vector<double> acc;
  for (const auto& r : run.reports) acc.push_back(r.acc_nme);
  const int k = row.drop_extractor > 0 ? row.drop_extractor : row.keep_only_extractor;
  if (k > 0) {
    const auto* probe = run.find_probe(k, row.keep_only_extractor > 0);
    if (probe)
      for (size_t i = 0; i < probe->size(); ++i)
        acc[k + i] = (*probe)[i].acc_nme;  // probes start at round k+1
  }
  return acc;
}

}  // namespace

RunSummary summarize(const AblationRow& row, const std::vector<RunResult>& runs) {
  RunSummary s;
  s.row_id = row.id;
  for (const auto& run : runs) {
    s.seeds.push_back(run.seed);
    const auto acc = row_accuracy_series(row, run);
    s.final_acc.push_back(acc.back());
    if (acc.size() >= 2) s.mean_acc.push_back(mean_accuracy(acc));
  }
  auto mean_of = [](const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    return xs.empty() ? 0.0 : m / xs.size();
  };
  s.final_mean = mean_of(s.final_acc);
  s.final_sd = sample_sd(s.final_acc, s.final_mean);
  s.mean_mean = mean_of(s.mean_acc);
  s.mean_sd = sample_sd(s.mean_acc, s.mean_mean);
  return s;
}

std::vector<SuiteRowResult> run_ablation_suite(const RunConfig& config,
                                               const std::vector<AblationRow>& rows,
                                               const std::string& checkpoint_root) {
  config.validate();
  for (const auto& row : rows) row.flags.validate();

  const Dataset train = load_dataset_config(config.dataset, false);
  const Dataset test = load_dataset_config(config.dataset, true);

  // group rows by training signature; probe rows share the training of their
  // flag-identical base row
  struct Group {
    AblationFlags flags;
    std::vector<std::pair<int, bool>> probe_specs;
  };
  std::map<std::string, Group> groups;
  for (const auto& row : rows) {
    auto& g = groups[flags_signature(row.flags)];
    g.flags = row.flags;
    if (row.drop_extractor > 0)
      g.probe_specs.emplace_back(row.drop_extractor, false);
    if (row.keep_only_extractor > 0)
      g.probe_specs.emplace_back(row.keep_only_extractor, true);
  }

  struct Task {
    std::string signature;
    int64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& [sig, g] : groups)
    for (int64_t seed : config.seeds) tasks.push_back({sig, seed});

  std::vector<RunResult> outputs(tasks.size());
  std::atomic<size_t> next{0};
  const unsigned hw = std::thread::hardware_concurrency();
  const size_t workers = std::min<size_t>(
      tasks.size(),
      config.workers > 0 ? static_cast<size_t>(config.workers) : (hw ? hw : 1));

  auto work = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const auto& task = tasks[i];
      const auto& group = groups.at(task.signature);
      RunOptions opts;
      opts.probe_specs = group.probe_specs;
      if (!checkpoint_root.empty() && groups.size() == 1)
        opts.checkpoint_dir =
            checkpoint_root + "/seed_" + std::to_string(task.seed);
      outputs[i] = run_experiment(config, group.flags, task.signature, task.seed,
                                  train, test, opts);
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }

  std::map<std::string, std::map<int64_t, const RunResult*>> by_group;
  for (size_t i = 0; i < tasks.size(); ++i)
    by_group[tasks[i].signature][tasks[i].seed] = &outputs[i];

  // every group must have consumed the identical stream per seed
  for (int64_t seed : config.seeds) {
    uint64_t expect = 0;
    bool first = true;
    for (const auto& [sig, per_seed] : by_group) {
      const uint64_t got = per_seed.at(seed)->stream_checksum;
      if (first) {
        expect = got;
        first = false;
      } else if (got != expect) {
        throw std::logic_error("run_ablation_suite: data streams diverged across rows");
      }
    }
  }

  std::vector<SuiteRowResult> results;
  for (const auto& row : rows) {
    SuiteRowResult r;
    r.row = row;
    for (int64_t seed : config.seeds) {
      RunResult run = *by_group.at(flags_signature(row.flags)).at(seed);
      run.row_id = row.id;
      r.runs.push_back(std::move(run));
    }
    r.summary = summarize(row, r.runs);
    results.push_back(std::move(r));
  }
  return results;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::string& path,
                       const std::vector<SuiteRowResult>& results) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metrics file " + path);
  out << "run_id,seed,round,metric,subset,value\n";
  for (const auto& row : results) {
    const int probe_k = row.row.drop_extractor > 0 ? row.row.drop_extractor
                                                   : row.row.keep_only_extractor;
    const bool keep_only = row.row.keep_only_extractor > 0;
    for (const auto& run : row.runs) {
      for (size_t ti = 0; ti < run.reports.size(); ++ti) {
        const auto& rep = run.reports[ti];
        const int t = rep.round;
        const ProbeReport* probe = nullptr;
        if (probe_k > 0 && t > probe_k) {
          const auto* series = run.find_probe(probe_k, keep_only);
          if (series) probe = &(*series)[t - probe_k - 1];
        }
        auto emit = [&](const std::string& metric, const std::string& subset,
                        double value) {
          out << row.row.id << ',' << run.seed << ',' << t << ',' << metric << ','
              << subset << ',' << fmt_double(value) << "\n";
        };
        emit("acc_nme", "", probe ? probe->acc_nme : rep.acc_nme);
        emit("acc_head", "", probe ? probe->acc_head_refit : rep.acc_head);
        const auto& subset = probe ? probe->subset_acc : rep.subset_acc;
        for (size_t k = 0; k < subset.size(); ++k)
          emit("subset_acc", std::to_string(k + 1), subset[k]);
        emit("param_count", "", static_cast<double>(rep.param_count));
        emit("size_ratio", "", rep.size_ratio);
        emit("kept_kernel_fraction", "", rep.prune.kept_kernel_fraction());
        emit("param_fraction", "", rep.prune.param_fraction());
      }
    }
  }
}

namespace {

json summary_json_entry(const RunSummary& s, const AblationRow& row) {
  json j;
  j["final_acc"] = {{"mean", s.final_mean},
                    {"sd", s.final_sd ? json(*s.final_sd) : json(nullptr)},
                    {"per_seed", s.final_acc}};
  j["mean_acc"] = {{"mean", s.mean_mean},
                   {"sd", s.mean_sd ? json(*s.mean_sd) : json(nullptr)},
                   {"per_seed", s.mean_acc}};
  j["seeds"] = s.seeds;
  if (row.drop_extractor > 0 || row.keep_only_extractor > 0) {
    j["probe"] = {{"kind", row.keep_only_extractor > 0 ? "keep_only" : "drop"},
                  {"extractor_round", row.drop_extractor > 0
                                          ? row.drop_extractor
                                          : row.keep_only_extractor},
                  {"note", "inference-time modification of the trained model; "
                           "fused head re-fit on exemplars only"}};
  }
  return j;
}

}  // namespace

std::string summary_to_json(const std::vector<SuiteRowResult>& results) {
  json rows;
  for (const auto& r : results) rows[r.row.id] = summary_json_entry(r.summary, r.row);
  json j;
  j["rows"] = rows;
  return j.dump(2);
}

std::string report_to_json(const RoundReport& r) {
  json j;
  j["round"] = r.round;
  j["new_classes"] = r.new_classes;
  j["seen_class_count"] = r.seen_class_count;
  j["acc_nme"] = r.acc_nme;
  j["acc_head"] = r.acc_head;
  j["subset_acc"] = r.subset_acc;
  j["param_count"] = r.param_count;
  j["size_ratio"] = r.size_ratio;
  j["new_extractor_params"] = r.new_extractor_params;
  j["new_transform_params"] = r.new_transform_params;
  j["head_params"] = r.head_params;
  json layers = json::array();
  for (const auto& l : r.prune.layers)
    layers.push_back({{"name", l.name}, {"kept", l.kept}, {"total", l.total}});
  j["prune"] = {{"layers", layers},
                {"weights_before", r.prune.weights_before},
                {"weights_after", r.prune.weights_after}};
  auto losses = [](const std::vector<LossBreakdown>& ls) {
    json arr = json::array();
    for (const auto& l : ls)
      arr.push_back({{"distillation", l.distillation},
                     {"ce_aux", l.ce_aux},
                     {"aux_combined", l.aux_combined},
                     {"fused_ce", l.fused_ce},
                     {"total", l.total}});
    return arr;
  };
  j["joint_epoch_loss"] = losses(r.joint_epoch_loss);
  j["finetune_epoch_loss"] = losses(r.finetune_epoch_loss);
  return j.dump(2);
}

RoundReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  RoundReport r;
  r.round = j.at("round").get<int>();
  r.new_classes = j.at("new_classes").get<std::vector<int>>();
  r.seen_class_count = j.at("seen_class_count").get<int>();
  r.acc_nme = j.at("acc_nme").get<double>();
  r.acc_head = j.at("acc_head").get<double>();
  r.subset_acc = j.at("subset_acc").get<std::vector<double>>();
  r.param_count = j.at("param_count").get<size_t>();
  r.size_ratio = j.at("size_ratio").get<double>();
  r.new_extractor_params = j.at("new_extractor_params").get<size_t>();
  r.new_transform_params = j.at("new_transform_params").get<size_t>();
  r.head_params = j.at("head_params").get<size_t>();
  for (const auto& l : j.at("prune").at("layers"))
    r.prune.layers.push_back({l.at("name").get<std::string>(),
                              l.at("kept").get<int>(), l.at("total").get<int>()});
  r.prune.weights_before = j.at("prune").at("weights_before").get<size_t>();
  r.prune.weights_after = j.at("prune").at("weights_after").get<size_t>();
  auto losses = [](const json& arr) {
    std::vector<LossBreakdown> out;
    for (const auto& l : arr)
      out.push_back({l.at("distillation").get<double>(), l.at("ce_aux").get<double>(),
                     l.at("aux_combined").get<double>(),
                     l.at("fused_ce").get<double>(), l.at("total").get<double>()});
    return out;
  };
  r.joint_epoch_loss = losses(j.at("joint_epoch_loss"));
  r.finetune_epoch_loss = losses(j.at("finetune_epoch_loss"));
  return r;
}

}  // namespace cifuse
