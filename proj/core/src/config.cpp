#include "cifuse/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cifuse/rng.hpp"

namespace cifuse {

using nlohmann::json;

namespace {

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_into(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

AblationRow make_ablation_row(const std::string& id) {
  AblationRow row;
  row.id = id;
  auto starts_with = [&](const char* p) { return id.rfind(p, 0) == 0; };
  if (id == "full") {
    // defaults
  } else if (id == "fusion_fc") {
    row.flags.mask = false;
  } else if (id == "fusion") {
    row.flags.mask = false;
    row.flags.transforms = false;
  } else if (id == "none") {
    row.flags.fusion = false;
    row.flags.transforms = false;
    row.flags.mask = false;
  } else if (id == "unfrozen") {
    row.flags.freeze_old = false;
  } else if (id == "multi_teacher") {
    row.flags.fusion = false;
    row.flags.transforms = false;
    row.flags.mask = false;
    row.flags.multi_teacher = true;
  } else if (starts_with("drop:")) {
    row.drop_extractor = std::stoi(id.substr(5));
    if (row.drop_extractor < 1) throw ConfigError("bad drop row: " + id);
  } else if (starts_with("keep_only:")) {
    row.keep_only_extractor = std::stoi(id.substr(10));
    if (row.keep_only_extractor < 1) throw ConfigError("bad keep_only row: " + id);
  } else {
    throw ConfigError("unknown ablation row '" + id + "'");
  }
  row.flags.validate();
  return row;
}

void RunConfig::validate() const {
  if (rounds.empty()) throw ConfigError("config: no rounds");
  for (int c : rounds)
    if (c < 1) throw ConfigError("config: round sizes must be positive");
  if (seeds.empty()) throw ConfigError("config: no seeds");
  if (memory_budget < 1) throw ConfigError("config: memory budget must be positive");
  if (output_dir.empty()) throw ConfigError("config: output directory required");
  int total = 0;
  for (int c : rounds) total += c;
  const int classes = dataset.kind == DatasetConfig::Kind::kSynthetic
                          ? dataset.synthetic.classes
                          : -1;
  if (classes >= 0 && total > classes)
    throw ConfigError("config: round sizes exceed dataset classes");
  try {
    train.validate();
    row.flags.validate();
    for (const auto& id : matrix) make_ablation_row(id);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (row.drop_extractor > 0 && row.keep_only_extractor > 0)
    throw ConfigError("config: drop and keep_only probes are exclusive");
}

namespace {

RunConfig parse_json(const json& j) {
  RunConfig cfg;
  check_keys(j, "config root",
             {"dataset", "rounds", "seeds", "memory_budget", "train", "ablation",
              "matrix", "output_dir", "workers"});

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, "dataset",
               {"kind", "classes", "train_per_class", "test_per_class", "height",
                "width", "channels", "noise", "center_jitter", "scale_jitter",
                "color_jitter", "pair_ratio", "distractor", "seed", "train_path",
                "test_path"});
    std::string kind = "synthetic";
    read_into(d, "kind", kind);
    if (kind == "synthetic") {
      cfg.dataset.kind = DatasetConfig::Kind::kSynthetic;
      auto& s = cfg.dataset.synthetic;
      read_into(d, "classes", s.classes);
      read_into(d, "train_per_class", s.train_per_class);
      read_into(d, "test_per_class", s.test_per_class);
      read_into(d, "height", s.height);
      read_into(d, "width", s.width);
      read_into(d, "channels", s.channels);
      read_into(d, "noise", s.noise);
      read_into(d, "center_jitter", s.center_jitter);
      read_into(d, "scale_jitter", s.scale_jitter);
      read_into(d, "color_jitter", s.color_jitter);
      read_into(d, "pair_ratio", s.pair_ratio);
      read_into(d, "distractor", s.distractor);
      read_into(d, "seed", s.seed);
    } else if (kind == "packed") {
      cfg.dataset.kind = DatasetConfig::Kind::kPacked;
      if (!d.contains("train_path") || !d.contains("test_path"))
        throw ConfigError("packed dataset needs train_path and test_path");
      cfg.dataset.train_path = d.at("train_path").get<std::string>();
      cfg.dataset.test_path = d.at("test_path").get<std::string>();
    } else {
      throw ConfigError("unknown dataset kind '" + kind + "'");
    }
  }

  read_into(j, "rounds", cfg.rounds);
  read_into(j, "seeds", cfg.seeds);
  read_into(j, "memory_budget", cfg.memory_budget);

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"lambda1", "lambda2", "temperature", "learning_rate", "batch_size",
                "max_epochs", "finetune_epochs", "patience", "common_dim",
                "fusion_mode", "widths", "augment_hflip", "freeze_old_transforms",
                "adaptive_threshold_scale"});
    auto& c = cfg.train;
    read_into(t, "lambda1", c.lambda1);
    read_into(t, "lambda2", c.lambda2);
    read_into(t, "temperature", c.temperature);
    read_into(t, "learning_rate", c.learning_rate);
    read_into(t, "batch_size", c.batch_size);
    read_into(t, "max_epochs", c.max_epochs);
    read_into(t, "finetune_epochs", c.finetune_epochs);
    read_into(t, "patience", c.patience);
    read_into(t, "common_dim", c.common_dim);
    read_into(t, "widths", c.widths);
    read_into(t, "augment_hflip", c.augment_hflip);
    read_into(t, "freeze_old_transforms", c.freeze_old_transforms);
    read_into(t, "adaptive_threshold_scale", c.adaptive_threshold_scale);
    if (t.contains("fusion_mode")) {
      const std::string m = t.at("fusion_mode").get<std::string>();
      if (m == "concat")
        c.fusion_mode = FusionMode::kConcat;
      else if (m == "average")
        c.fusion_mode = FusionMode::kAverage;
      else
        throw ConfigError("unknown fusion_mode '" + m + "'");
    }
  }

  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    if (a.is_string()) {
      cfg.row = make_ablation_row(a.get<std::string>());
    } else {
      check_keys(a, "ablation",
                 {"row", "fusion", "transforms", "mask", "freeze_old",
                  "multi_teacher", "drop_extractor", "keep_only_extractor"});
      if (a.contains("row")) cfg.row = make_ablation_row(a.at("row").get<std::string>());
      read_into(a, "fusion", cfg.row.flags.fusion);
      read_into(a, "transforms", cfg.row.flags.transforms);
      read_into(a, "mask", cfg.row.flags.mask);
      read_into(a, "freeze_old", cfg.row.flags.freeze_old);
      read_into(a, "multi_teacher", cfg.row.flags.multi_teacher);
      read_into(a, "drop_extractor", cfg.row.drop_extractor);
      read_into(a, "keep_only_extractor", cfg.row.keep_only_extractor);
    }
  }

  read_into(j, "matrix", cfg.matrix);
  read_into(j, "output_dir", cfg.output_dir);
  read_into(j, "workers", cfg.workers);

  try {
    cfg.row.flags.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_json(j);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string fusion_mode_name(FusionMode mode) {
  return mode == FusionMode::kConcat ? "concat" : "average";
}

std::string canonical_config(const RunConfig& config) {
  json j;
  json d;
  if (config.dataset.kind == DatasetConfig::Kind::kSynthetic) {
    const auto& s = config.dataset.synthetic;
    d["kind"] = "synthetic";
    d["classes"] = s.classes;
    d["train_per_class"] = s.train_per_class;
    d["test_per_class"] = s.test_per_class;
    d["height"] = s.height;
    d["width"] = s.width;
    d["channels"] = s.channels;
    d["noise"] = s.noise;
    d["center_jitter"] = s.center_jitter;
    d["scale_jitter"] = s.scale_jitter;
    d["color_jitter"] = s.color_jitter;
    d["pair_ratio"] = s.pair_ratio;
    d["distractor"] = s.distractor;
    d["seed"] = s.seed;
  } else {
    d["kind"] = "packed";
    d["train_path"] = config.dataset.train_path;
    d["test_path"] = config.dataset.test_path;
  }
  j["dataset"] = d;
  j["rounds"] = config.rounds;
  j["seeds"] = config.seeds;
  j["memory_budget"] = config.memory_budget;

  const auto& t = config.train;
  j["train"] = {{"lambda1", t.lambda1},
                {"lambda2", t.lambda2},
                {"temperature", t.temperature},
                {"learning_rate", t.learning_rate},
                {"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"finetune_epochs", t.finetune_epochs},
                {"patience", t.patience},
                {"common_dim", t.common_dim},
                {"fusion_mode", fusion_mode_name(t.fusion_mode)},
                {"widths", t.widths},
                {"augment_hflip", t.augment_hflip},
                {"freeze_old_transforms", t.freeze_old_transforms},
                {"adaptive_threshold_scale", t.adaptive_threshold_scale}};

  j["ablation"] = {{"row", config.row.id},
                   {"fusion", config.row.flags.fusion},
                   {"transforms", config.row.flags.transforms},
                   {"mask", config.row.flags.mask},
                   {"freeze_old", config.row.flags.freeze_old},
                   {"multi_teacher", config.row.flags.multi_teacher},
                   {"drop_extractor", config.row.drop_extractor},
                   {"keep_only_extractor", config.row.keep_only_extractor}};
  j["matrix"] = config.matrix;
  // the output directory does not change what a run computes, so it stays
  // out of the canonical form and the hash
  return j.dump();
}

uint64_t config_hash(const RunConfig& config) {
  const std::string s = canonical_config(config);
  return fnv1a(s.data(), s.size());
}

}  // namespace cifuse
