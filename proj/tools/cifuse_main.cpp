#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cifuse/config.hpp"
#include "cifuse/evalkit.hpp"
#include "cifuse/svgplot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hash_hex(uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string resolve_out_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_absolute()) return p.string();
  if (const char* root = std::getenv("CIFUSE_OUT_ROOT"))
    return (fs::path(root) / p).string();
  return p.string();
}

void ensure_fresh_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw std::runtime_error("output directory " + dir +
                               " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::string timestamp() {
  char buf[32];
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const cifuse::RunConfig& cfg,
                    const std::vector<cifuse::SuiteRowResult>& results,
                    bool with_checkpoints) {
  json m;
  m["command"] = command;
  m["config_hash"] = hash_hex(cifuse::config_hash(cfg));
  m["canonical_config"] = json::parse(cifuse::canonical_config(cfg));
  m["created_at"] = timestamp();
  m["metrics"] = "metrics.csv";
  m["summary"] = "summary.json";

  json rows = json::array();
  for (const auto& r : results) rows.push_back(r.row.id);
  m["rows"] = rows;
  m["seeds"] = cfg.seeds;

  const cifuse::Dataset train = cifuse::load_dataset_config(cfg.dataset, false);
  json orders, checksums;
  for (const auto& run : results.front().runs) {
    const auto order = cifuse::make_class_order(train.num_classes(), run.seed);
    orders[std::to_string(run.seed)] = order.permutation;
    checksums[std::to_string(run.seed)] = hash_hex(run.stream_checksum);
  }
  m["class_orders"] = orders;
  m["stream_checksums"] = checksums;

  if (with_checkpoints) {
    json checkpoints;
    for (const auto& run : results.front().runs) {
      json files = json::array();
      for (const auto& rep : run.reports) {
        char dirname[32];
        std::snprintf(dirname, sizeof(dirname), "seed_%lld/round_%02d",
                      static_cast<long long>(run.seed), rep.round);
        files.push_back({{"dir", dirname},
                         {"params", std::string(dirname) + "/params.bin"},
                         {"masks", std::string(dirname) + "/masks.bin"},
                         {"report", std::string(dirname) + "/report.json"}});
      }
      checkpoints[std::to_string(run.seed)] = files;
    }
    m["checkpoints"] = checkpoints;
    // extractor lineage: extractor k of the final model was learned at round k+1
    json lineage = json::array();
    for (size_t t = 1; t <= cfg.rounds.size(); ++t)
      lineage.push_back(
          {{"extractor", "ext" + std::to_string(t - 1)}, {"source_round", t}});
    m["lineage"] = lineage;
  }

  std::ofstream out(out_dir + "/manifest.json");
  out << m.dump(2) << "\n";
}

int cmd_run(const std::string& config_path, const std::string& out_override,
            int64_t seed_override, bool has_seed_override, bool force) {
  cifuse::RunConfig cfg = cifuse::load_run_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (has_seed_override) cfg.seeds = {seed_override};
  cfg.validate();

  const std::string out_dir = resolve_out_dir(cfg.output_dir);
  ensure_fresh_dir(out_dir, force);
  std::printf("config hash: %s\n", hash_hex(cifuse::config_hash(cfg)).c_str());

  const auto results = cifuse::run_ablation_suite(cfg, {cfg.row}, out_dir);
  cifuse::write_metrics_csv(out_dir + "/metrics.csv", results);
  std::ofstream(out_dir + "/summary.json") << cifuse::summary_to_json(results) << "\n";
  write_manifest(out_dir, "run", cfg, results, /*with_checkpoints=*/true);

  const auto& s = results.front().summary;
  std::printf("row %s: final ACC %.4f", s.row_id.c_str(), s.final_mean);
  if (s.final_sd) std::printf(" +- %.4f", *s.final_sd);
  std::printf(" | Mean %.4f", s.mean_mean);
  if (s.mean_sd) std::printf(" +- %.4f", *s.mean_sd);
  std::printf("\n");
  std::printf("wrote %s\n", out_dir.c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_override,
               bool force) {
  cifuse::RunConfig cfg = cifuse::load_run_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  cfg.validate();
  if (cfg.matrix.empty())
    throw cifuse::ConfigError("ablate: config has no 'matrix' of ablation rows");

  std::vector<cifuse::AblationRow> rows;
  for (const auto& id : cfg.matrix) rows.push_back(cifuse::make_ablation_row(id));

  const std::string out_dir = resolve_out_dir(cfg.output_dir);
  ensure_fresh_dir(out_dir, force);
  std::printf("config hash: %s\n", hash_hex(cifuse::config_hash(cfg)).c_str());

  const auto results = cifuse::run_ablation_suite(cfg, rows);
  cifuse::write_metrics_csv(out_dir + "/metrics.csv", results);
  std::ofstream(out_dir + "/summary.json") << cifuse::summary_to_json(results) << "\n";
  write_manifest(out_dir, "ablate", cfg, results, /*with_checkpoints=*/false);

  std::printf("%-16s %-18s %-18s\n", "row", "ACC", "Mean");
  for (const auto& r : results) {
    const auto& s = r.summary;
    char acc[32], mean[32];
    if (s.final_sd)
      std::snprintf(acc, sizeof(acc), "%.4f +- %.4f", s.final_mean, *s.final_sd);
    else
      std::snprintf(acc, sizeof(acc), "%.4f", s.final_mean);
    if (s.mean_sd)
      std::snprintf(mean, sizeof(mean), "%.4f +- %.4f", s.mean_mean, *s.mean_sd);
    else
      std::snprintf(mean, sizeof(mean), "%.4f", s.mean_mean);
    std::printf("%-16s %-18s %-18s\n", r.row.id.c_str(), acc, mean);
  }
  std::printf("wrote %s\n", out_dir.c_str());
  return 0;
}

struct MetricRow {
  std::string run_id;
  int64_t seed;
  int round;
  std::string metric;
  std::string subset;
  double value;
};

std::vector<MetricRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path);
  std::string line;
  std::getline(in, line);
  if (line != "run_id,seed,round,metric,subset,value")
    throw std::runtime_error("unexpected metrics header in " + path);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (int i = 0; i < 6; ++i)
      if (!std::getline(ss, f[i], ',') && i < 5)
        throw std::runtime_error("malformed metrics row: " + line);
    rows.push_back({f[0], std::stoll(f[1]), std::stoi(f[2]), f[3], f[4],
                    std::stod(f[5])});
  }
  if (rows.empty()) throw std::runtime_error("metrics file has no data rows");
  return rows;
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (auto& c : out)
    if (c == ':' || c == '/' || c == ' ') c = '_';
  return out;
}

int cmd_plot(const std::string& metrics_path, const std::string& kind,
             const std::string& out_dir) {
  const auto rows = read_metrics(metrics_path);
  fs::create_directories(out_dir);

  // (run_id, round[, subset]) -> mean over seeds
  if (kind == "accuracy") {
    std::map<std::string, std::map<int, std::pair<double, int>>> agg;
    for (const auto& r : rows)
      if (r.metric == "acc_nme") {
        auto& slot = agg[r.run_id][r.round];
        slot.first += r.value;
        slot.second += 1;
      }
    std::vector<cifuse::PlotSeries> series;
    for (const auto& [run_id, per_round] : agg) {
      cifuse::PlotSeries s;
      s.label = run_id;
      for (const auto& [t, v] : per_round) {
        s.x.push_back(t);
        s.y.push_back(v.first / v.second);
      }
      series.push_back(std::move(s));
    }
    const std::string path = out_dir + "/accuracy.svg";
    cifuse::write_svg_plot(path, "NME accuracy over rounds", "round", "accuracy",
                           series);
    std::printf("wrote %s\n", path.c_str());
    return 0;
  }
  if (kind == "forgetting") {
    std::set<std::string> run_ids;
    for (const auto& r : rows) run_ids.insert(r.run_id);
    for (const auto& run_id : run_ids) {
      std::map<int, std::map<int, std::pair<double, int>>> agg;  // k -> t -> mean
      for (const auto& r : rows)
        if (r.run_id == run_id && r.metric == "subset_acc") {
          auto& slot = agg[std::stoi(r.subset)][r.round];
          slot.first += r.value;
          slot.second += 1;
        }
      if (agg.empty()) continue;
      std::vector<cifuse::PlotSeries> series;
      for (const auto& [k, per_round] : agg) {
        cifuse::PlotSeries s;
        s.label = "round-" + std::to_string(k) + " classes";
        for (const auto& [t, v] : per_round) {
          s.x.push_back(t);
          s.y.push_back(v.first / v.second);
        }
        series.push_back(std::move(s));
      }
      const std::string path = out_dir + "/forgetting_" + sanitize(run_id) + ".svg";
      cifuse::write_svg_plot(path, "per-round subset accuracy (" + run_id + ")",
                             "round", "accuracy", series);
      std::printf("wrote %s\n", path.c_str());
    }
    return 0;
  }
  throw std::runtime_error("unknown plot kind '" + kind + "'");
}

int cmd_inspect(const std::string& run_dir) {
  std::ifstream in(run_dir + "/manifest.json");
  if (!in) throw std::runtime_error("no manifest.json under " + run_dir);
  json m;
  in >> m;
  std::printf("command:      %s\n", m.at("command").get<std::string>().c_str());
  std::printf("config hash:  %s\n", m.at("config_hash").get<std::string>().c_str());
  std::printf("created at:   %s\n", m.at("created_at").get<std::string>().c_str());
  std::printf("rows:        ");
  for (const auto& r : m.at("rows")) std::printf(" %s", r.get<std::string>().c_str());
  std::printf("\nseeds:       ");
  for (const auto& s : m.at("seeds")) std::printf(" %lld", s.get<long long>());
  std::printf("\n");

  if (m.contains("checkpoints")) {
    for (const auto& [seed, files] : m.at("checkpoints").items()) {
      std::printf("\nseed %s:\n", seed.c_str());
      std::printf("  %-8s %-12s %-10s %-12s %s\n", "round", "params", "ratio",
                  "acc(NME)", "kept kernels");
      for (const auto& f : files) {
        std::ifstream rep_in(run_dir + "/" + f.at("report").get<std::string>());
        if (!rep_in) continue;
        std::stringstream buf;
        buf << rep_in.rdbuf();
        const auto rep = cifuse::report_from_json(buf.str());
        std::string kept;
        for (const auto& l : rep.prune.layers) {
          if (!kept.empty()) kept += " ";
          kept += l.name + ":" + std::to_string(l.kept) + "/" + std::to_string(l.total);
        }
        std::printf("  %-8d %-12zu %-10.3f %-12.4f %s\n", rep.round, rep.param_count,
                    rep.size_ratio, rep.acc_nme, kept.c_str());
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual learning with fused frozen feature extractors"};
  app.require_subcommand(1);

  std::string config_path, out_dir, metrics_path, kind = "accuracy", run_dir;
  int64_t seed_override = 0;
  bool force = false;

  auto* run = app.add_subcommand("run", "full continual run per seed");
  run->add_option("--config", config_path, "config file (JSON)")->required();
  run->add_option("--out", out_dir, "output directory override");
  auto* seed_opt = run->add_option("--seed", seed_override, "single-seed override");
  run->add_flag("--force", force, "overwrite an existing output directory");

  auto* ablate = app.add_subcommand("ablate", "run the config's ablation matrix");
  ablate->add_option("--config", config_path, "config file (JSON)")->required();
  ablate->add_option("--out", out_dir, "output directory override");
  ablate->add_flag("--force", force, "overwrite an existing output directory");

  auto* plot = app.add_subcommand("plot", "render metric curves as SVG");
  plot->add_option("--metrics", metrics_path, "metrics.csv path")->required();
  plot->add_option("--kind", kind, "accuracy | forgetting");
  plot->add_option("--out", out_dir, "output directory")->required();

  auto* inspect = app.add_subcommand("inspect", "print manifest and prune stats");
  inspect->add_option("--run", run_dir, "run output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed())
      return cmd_run(config_path, out_dir, seed_override, !seed_opt->empty(), force);
    if (ablate->parsed()) return cmd_ablate(config_path, out_dir, force);
    if (plot->parsed()) return cmd_plot(metrics_path, kind, out_dir);
    if (inspect->parsed()) return cmd_inspect(run_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
