#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cifuse/checkpoint.hpp"
#include "cifuse/engine.hpp"
#include "cifuse/evalkit.hpp"
#include "oracles.hpp"

using namespace cifuse;

namespace {

struct MiniBench {
  SyntheticSpec spec;
  Dataset train, test;
  TrainConfig cfg;

  explicit MiniBench(int classes = 4, int per_class = 40) {
    spec.classes = classes;
    spec.train_per_class = per_class;
    spec.test_per_class = 10;
    spec.height = 12;
    spec.width = 12;
    spec.channels = 3;
    spec.seed = 2024;
    generate_synthetic(spec, train, test);

    cfg.widths = {4, 8};
    cfg.common_dim = 16;
    cfg.batch_size = 32;
    cfg.max_epochs = 15;
    cfg.finetune_epochs = 8;
    cfg.patience = 5;
    cfg.seed = 1;
  }

  Engine make_engine(AblationFlags flags = {}, int budget = 40) const {
    ExtractorSpec backbone{.in_h = spec.height, .in_w = spec.width,
                           .in_ch = spec.channels, .widths = cfg.widths,
                           .masked = true};
    return Engine(backbone, cfg, flags, budget);
  }

  TaskStream stream(std::vector<int> rounds, int64_t seed = kNaturalOrderSeed) const {
    return split_rounds(train, test, make_class_order(spec.classes, seed),
                        std::move(rounds));
  }

  static RoundData round_data(const TaskStream& s, int t) {
    return {s.round_classes(t), s.round_train(t), s.seen_test(t)};
  }
};

}  // namespace

TEST_CASE("adam: minimizes a quadratic") {
  std::vector<double> x = {5.0, -3.0};
  std::vector<double> g(2, 0.0);
  std::vector<ParamView> params{{"x", {2}, x.data(), g.data(), 2}};
  AdamOptimizer adam(0.1);
  adam.attach(params);
  for (int i = 0; i < 400; ++i) {
    g[0] = 2.0 * x[0];
    g[1] = 2.0 * x[1];
    adam.step();
  }
  CHECK(std::abs(x[0]) < 1e-2);
  CHECK(std::abs(x[1]) < 1e-2);
}

TEST_CASE("round 1 on separable blobs reaches high training accuracy") {
  MiniBench bench(2, 40);
  bench.spec.noise = 0.02;
  bench.spec.pair_ratio = 0.6;
  bench.spec.scale_jitter = 0.02;
  bench.spec.center_jitter = 0.3;
  generate_synthetic(bench.spec, bench.train, bench.test);
  bench.cfg.max_epochs = 30;

  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2});
  engine.run_round(MiniBench::round_data(stream, 1));

  std::vector<int> labels;
  for (const auto& e : stream.round_train(1)) labels.push_back(e.label);
  const auto preds = engine.nme_predict(stream.round_train(1));
  CHECK(overall_accuracy(preds, labels) > 0.95);
}

TEST_CASE("frozen extractors are byte-stable across a round; unfrozen flips it") {
  MiniBench bench;
  const auto stream = bench.stream({2, 2});

  SUBCASE("frozen") {
    Engine engine = bench.make_engine();
    engine.run_round(MiniBench::round_data(stream, 1));
    const uint64_t sum_before = engine.state().model.extractors[0].param_checksum();
    engine.run_round(MiniBench::round_data(stream, 2));
    CHECK(engine.state().model.extractors[0].param_checksum() == sum_before);
  }

  SUBCASE("unfrozen negative control") {
    AblationFlags flags;
    flags.freeze_old = false;
    Engine engine = bench.make_engine(flags);
    engine.run_round(MiniBench::round_data(stream, 1));
    const uint64_t sum_before = engine.state().model.extractors[0].param_checksum();
    engine.run_round(MiniBench::round_data(stream, 2));
    CHECK(engine.state().model.extractors[0].param_checksum() != sum_before);
  }
}

TEST_CASE("per-step loss telemetry satisfies the combination identity") {
  MiniBench bench;
  bench.cfg.max_epochs = 4;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2, 2});
  engine.run_round(MiniBench::round_data(stream, 1));
  engine.run_round(MiniBench::round_data(stream, 2));

  const auto& cfg = engine.config();
  REQUIRE(!engine.last_phase_steps().empty());
  for (const auto& lb : engine.last_phase_steps()) {
    const double expect =
        lb.fused_ce + cfg.lambda2 * (lb.ce_aux + cfg.lambda1 * lb.distillation);
    CHECK(std::abs(lb.total - expect) < 1e-6);
    CHECK(std::abs(lb.aux_combined - (lb.ce_aux + cfg.lambda1 * lb.distillation)) <
          1e-6);
    CHECK(lb.distillation > 0.0);  // teacher active at round 2
  }
}

TEST_CASE("head grows to the cumulative class count") {
  MiniBench bench(6, 20);
  bench.cfg.max_epochs = 3;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine({}, 60);
  const auto stream = bench.stream({2, 3, 1});
  int expected = 0;
  for (int t = 1; t <= 3; ++t) {
    engine.run_round(MiniBench::round_data(stream, t));
    expected += static_cast<int>(stream.round_classes(t).size());
    CHECK(engine.state().model.logit_count() == expected);
    CHECK(engine.state().model.extractor_count() == t);
  }
}

TEST_CASE("teacher provenance: the live teacher equals the round checkpoint") {
  MiniBench bench;
  bench.cfg.max_epochs = 4;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2, 2});
  engine.run_round(MiniBench::round_data(stream, 1));

  // checkpoint what run_round froze at the end of round 1
  const std::string path = "/tmp/cifuse_teacher_check.bin";
  save_tensors(path, snapshot_params(engine.state().model.all_params()));
  const auto tensors = load_tensors(path);
  std::filesystem::remove(path);

  // enter round 2: the teacher in play must be the round-1 individual
  // classifier, bit-identical to what the checkpoint recorded
  engine.begin_round(stream.round_classes(2));
  auto round_data = engine.state().memory.all();
  const auto fresh = stream.round_train(2);
  round_data.insert(round_data.end(), fresh.begin(), fresh.end());
  engine.train_round_joint(round_data);
  const auto& teacher = *engine.state().teacher;
  std::vector<ParamView> teacher_params;
  const_cast<FeatureExtractor&>(teacher.extractor)
      .collect_params("ext0", teacher_params);
  const_cast<Dense&>(teacher.head).collect_params("aux_head", teacher_params);

  int matched = 0;
  for (const auto& p : teacher_params) {
    for (const auto& t : tensors) {
      if (t.name != p.name) continue;
      REQUIRE(t.data.size() == p.size);
      for (size_t i = 0; i < p.size; ++i)
        CHECK(static_cast<float>(p.value[i]) == t.data[i]);
      ++matched;
    }
  }
  CHECK(matched == static_cast<int>(teacher_params.size()));
}

TEST_CASE("nme predictions match the brute-force oracle exactly") {
  MiniBench bench;
  bench.cfg.max_epochs = 6;
  bench.cfg.finetune_epochs = 3;
  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2, 2});
  engine.run_round(MiniBench::round_data(stream, 1));
  engine.run_round(MiniBench::round_data(stream, 2));

  const auto queries = stream.seen_test(2);
  REQUIRE(queries.size() == 40);
  const auto got = engine.nme_predict(queries);

  // oracle gets raw (unnormalized) fused features straight from the model
  std::vector<oracle::NmeClass> classes;
  for (int label : engine.state().memory.stored_classes()) {
    const auto& ex = engine.state().memory.exemplars(label);
    std::vector<const LabeledExample*> ptrs;
    for (const auto& e : ex) ptrs.push_back(&e);
    classes.push_back(
        {label, engine.nme_features(to_featuremap(ptrs, 12, 12, 3))});
  }
  std::vector<const LabeledExample*> qptrs;
  for (const auto& e : queries) qptrs.push_back(&e);
  Mat qfeat = engine.nme_features(to_featuremap(qptrs, 12, 12, 3));

  CHECK(oracle::nme(qfeat, classes) == got);

  // scale robustness: a common positive rescaling changes nothing
  Mat scaled = 3.7 * qfeat;
  auto scaled_classes = classes;
  for (auto& c : scaled_classes) c.exemplar_features *= 3.7;
  CHECK(oracle::nme(scaled, scaled_classes) == got);
}

TEST_CASE("single seen class: everything maps to it") {
  MiniBench bench(2, 10);
  bench.cfg.max_epochs = 2;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine({}, 10);
  const auto stream = bench.stream({1});
  engine.run_round(MiniBench::round_data(stream, 1));
  const auto preds = engine.nme_predict(stream.seen_test(1));
  for (int p : preds) CHECK(p == stream.round_classes(1)[0]);
}

TEST_CASE("parameter accounting identity and growing size ratio") {
  MiniBench bench(6, 15);
  bench.cfg.max_epochs = 3;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine({}, 60);
  const auto stream = bench.stream({2, 2, 2});

  std::vector<RoundReport> reports;
  for (int t = 1; t <= 3; ++t)
    reports.push_back(engine.run_round(MiniBench::round_data(stream, t)));

  for (size_t t = 1; t < reports.size(); ++t) {
    const auto& prev = reports[t - 1];
    const auto& cur = reports[t];
    const size_t expected = prev.param_count + cur.new_extractor_params +
                            cur.new_transform_params +
                            (cur.head_params - prev.head_params);
    CHECK(cur.param_count == expected);
    CHECK(cur.size_ratio > prev.size_ratio);
  }
}

TEST_CASE("run_round input validation") {
  MiniBench bench;
  bench.cfg.max_epochs = 2;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2, 2});
  engine.run_round(MiniBench::round_data(stream, 1));

  RoundData overlap = MiniBench::round_data(stream, 2);
  overlap.new_classes = stream.round_classes(1);  // already learned
  overlap.train = stream.round_train(1);
  CHECK_THROWS_AS(engine.run_round(overlap), std::invalid_argument);

  RoundData empty = MiniBench::round_data(stream, 2);
  empty.train.clear();
  CHECK_THROWS_AS(engine.run_round(empty), std::invalid_argument);
}

TEST_CASE("finetune requires a prior prune; fine-tuning helps on average") {
  MiniBench bench;
  bench.cfg.max_epochs = 8;
  bench.cfg.finetune_epochs = 6;
  const auto stream = bench.stream({2, 2});

  {
    Engine engine = bench.make_engine();
    engine.begin_round(stream.round_classes(1));
    CHECK_THROWS_AS(engine.finetune_pruned(stream.round_train(1)), std::logic_error);
  }

  // paired measurement over 5 seeds: held-out fused-head accuracy after the
  // fine-tune phase vs right after surgery
  double after_sum = 0.0, before_sum = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    MiniBench b;
    b.cfg.max_epochs = 8;
    b.cfg.finetune_epochs = 6;
    b.cfg.seed = seed;
    Engine engine = b.make_engine();
    const auto s = b.stream({2, 2});
    engine.begin_round(s.round_classes(1));
    engine.train_round_joint(s.round_train(1));
    engine.prune_current();

    const auto held_out = s.seen_test(1);
    auto head_acc = [&] {
      std::vector<const LabeledExample*> ptrs;
      std::vector<int> labels;
      for (const auto& e : held_out) {
        ptrs.push_back(&e);
        labels.push_back(e.label);
      }
      const Mat logits = engine.state().model.fused_logits(
          to_featuremap(ptrs, b.spec.height, b.spec.width, b.spec.channels));
      std::vector<int> preds(labels.size());
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        preds[i] = engine.state().learned_classes[arg];
      }
      return overall_accuracy(preds, labels);
    };
    before_sum += head_acc();
    engine.finetune_pruned(s.round_train(1));
    after_sum += head_acc();
  }
  CHECK(after_sum >= before_sum);
}

TEST_CASE("ablation shapes: none has no fused head, multi-teacher pools models") {
  MiniBench bench;
  bench.cfg.max_epochs = 2;
  bench.cfg.finetune_epochs = 2;
  const auto stream = bench.stream({2, 2});

  AblationFlags none;
  none.fusion = none.transforms = none.mask = false;
  Engine e1 = bench.make_engine(none);
  e1.run_round(MiniBench::round_data(stream, 1));
  e1.run_round(MiniBench::round_data(stream, 2));
  CHECK_FALSE(e1.state().model.fused_head.has_value());
  CHECK(e1.state().model.extractor_count() == 1);
  CHECK(e1.state().model.logit_count() == 4);

  AblationFlags multi = none;
  multi.multi_teacher = true;
  Engine e2 = bench.make_engine(multi);
  e2.run_round(MiniBench::round_data(stream, 1));
  e2.run_round(MiniBench::round_data(stream, 2));
  CHECK(e2.state().teacher_pool.size() == 2);
}

TEST_CASE("probe: dropping an extractor leaves a working reduced model") {
  MiniBench bench;
  bench.cfg.max_epochs = 4;
  bench.cfg.finetune_epochs = 2;
  Engine engine = bench.make_engine();
  const auto stream = bench.stream({2, 2});
  engine.run_round(MiniBench::round_data(stream, 1));
  engine.run_round(MiniBench::round_data(stream, 2));

  const auto probe = engine.probe_extractor(1, false, stream.seen_test(2));
  CHECK(probe.k == 1);
  CHECK(probe.subset_acc.size() == 2);
  CHECK(probe.acc_nme >= 0.0);
  CHECK(probe.acc_nme <= 1.0);

  const auto keep = engine.probe_extractor(1, true, stream.seen_test(2));
  CHECK(keep.keep_only);
  CHECK_THROWS_AS(engine.probe_extractor(5, false, stream.seen_test(2)),
                  std::invalid_argument);
}

TEST_CASE("full runs are deterministic given config and seed") {
  MiniBench bench;
  bench.cfg.max_epochs = 3;
  bench.cfg.finetune_epochs = 2;

  RunConfig cfg;
  cfg.dataset.synthetic = bench.spec;
  cfg.rounds = {2, 2};
  cfg.seeds = {3};
  cfg.memory_budget = 40;
  cfg.train = bench.cfg;
  cfg.output_dir = "unused";

  const auto r1 = run_experiment(cfg, AblationFlags{}, "full", 3, bench.train,
                                 bench.test, {});
  const auto r2 = run_experiment(cfg, AblationFlags{}, "full", 3, bench.train,
                                 bench.test, {});
  REQUIRE(r1.reports.size() == r2.reports.size());
  for (size_t i = 0; i < r1.reports.size(); ++i)
    CHECK(report_to_json(r1.reports[i]) == report_to_json(r2.reports[i]));
  CHECK(r1.stream_checksum == r2.stream_checksum);
}
