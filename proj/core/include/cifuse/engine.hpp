#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cifuse/losses.hpp"
#include "cifuse/nets.hpp"
#include "cifuse/pruning.hpp"
#include "cifuse/stream.hpp"

namespace cifuse {

// Framework components that the ablation experiments switch off. The full
// method keeps the defaults.
struct AblationFlags {
  bool fusion = true;       // keep previously learned extractors in the model
  bool transforms = true;   // learnable per-extractor feature transforms
  bool mask = true;         // kernel mask learning + pruning + fine-tune
  bool freeze_old = true;   // false lets old extractors keep training
  bool multi_teacher = false;  // single model distilled from all stored models

  void validate() const;
};

// Snapshot of an individual classifier (extractor + its head); serves as the
// distillation teacher for the following round.
struct AuxModel {
  FeatureExtractor extractor;
  Dense head;

  Mat logits(const FeatureMap& x) const { return head.forward(extractor.forward(x)); }
  void quantize_f32();
  uint64_t checksum() const;
};

struct SystemState {
  int round = 0;  // rounds completed
  FusionClassifier model;
  std::optional<AuxModel> teacher;   // previous round's individual classifier
  std::vector<AuxModel> teacher_pool;  // multi-teacher ablation only
  ExemplarMemory memory{1};
  std::vector<int> learned_classes;  // label of each logit, in learning order
  std::vector<int> logit_round;      // round that introduced each logit (1-based)
  size_t backbone_params = 0;        // unpruned single-backbone reference size
};

struct RoundReport {
  int round = 0;
  std::vector<int> new_classes;
  int seen_class_count = 0;
  double acc_nme = 0.0;   // primary metric, all seen classes
  double acc_head = 0.0;  // head-softmax accuracy, secondary metric
  std::vector<double> subset_acc;  // [k-1]: NME accuracy on round-k classes
  size_t param_count = 0;          // deployed classifier parameters
  double size_ratio = 0.0;         // param_count / backbone_params
  size_t new_extractor_params = 0;
  size_t new_transform_params = 0;
  size_t head_params = 0;
  PruneStats prune;
  std::vector<LossBreakdown> joint_epoch_loss;
  std::vector<LossBreakdown> finetune_epoch_loss;
};

// Inference-time modification of a trained model (extractor removal probes).
struct ProbeReport {
  int k = 0;
  bool keep_only = false;
  double acc_nme = 0.0;
  double acc_head_refit = 0.0;
  std::vector<double> subset_acc;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);
  void attach(std::vector<ParamView> params);
  void step();

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<ParamView> params_;
  std::vector<double> m_, v_;
};

struct RoundData {
  std::vector<int> new_classes;
  std::vector<LabeledExample> train;      // new-class training examples
  std::vector<LabeledExample> test_seen;  // test set over all seen classes
};

// Per-round continual learning: joint training of the fused and individual
// classifiers, mask binarization and structural pruning, fine-tuning,
// teacher hand-off, exemplar memory update and NME evaluation.
class Engine {
 public:
  Engine(ExtractorSpec backbone, TrainConfig cfg, AblationFlags flags,
         int memory_budget);

  RoundReport run_round(const RoundData& data);

  // pipeline stages, exposed for testing; run_round drives them in order
  void begin_round(const std::vector<int>& new_classes);
  std::vector<LossBreakdown> train_round_joint(const std::vector<LabeledExample>& round_data);
  void prune_current();
  std::vector<LossBreakdown> finetune_pruned(const std::vector<LabeledExample>& round_data);

  std::vector<int> nme_predict(const std::vector<LabeledExample>& batch) const;
  Mat nme_features(const FeatureMap& x) const { return state_.model.fused_features(x); }
  // normalized class means in ascending label order
  std::vector<std::pair<int, Vec>> nme_class_means() const;

  struct BatchInput {
    FeatureMap X;
    Mat Y;                         // one-hot over the current logit count
    Mat teacher_logits;            // empty when distillation is inactive
    std::vector<Mat> pool_logits;  // multi-teacher mode
    std::vector<Mat> old_feats;    // precomputed frozen features; empty = compute
  };
  // The round's total loss on one batch; fills parameter gradients when
  // `with_grads`. This is the exact function optimized by the training loop,
  // which makes it the target of the finite-difference gradient checks.
  LossBreakdown batch_pass(const BatchInput& input, bool with_grads);
  LossBreakdown compute_batch_loss(const std::vector<LabeledExample>& batch,
                                   bool with_grads);

  ProbeReport probe_extractor(int k, bool keep_only,
                              const std::vector<LabeledExample>& test_seen) const;

  const SystemState& state() const { return state_; }
  SystemState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }
  const AblationFlags& flags() const { return flags_; }
  const BinaryMaskSet& last_masks() const { return last_masks_; }
  // per-step loss telemetry of the most recent training phase
  const std::vector<LossBreakdown>& last_phase_steps() const { return last_steps_; }

 private:
  struct PhaseContext;
  std::vector<LossBreakdown> train_phase(const std::vector<LabeledExample>& data,
                                         int max_epochs, const std::string& tag);
  Mat forward_features_chunked(const FeatureExtractor& ext,
                               const std::vector<LabeledExample>& examples) const;
  Mat fused_features_chunked(const FusionClassifier& model,
                             const std::vector<LabeledExample>& examples) const;
  void update_exemplars(const RoundData& data);
  RoundReport evaluate(const RoundData& data) const;
  Mat onehot(const std::vector<int>& logit_labels, int count) const;

  ExtractorSpec backbone_;
  TrainConfig cfg_;
  AblationFlags flags_;
  SystemState state_;
  BinaryMaskSet last_masks_;
  PruneStats last_prune_;
  std::vector<LossBreakdown> last_steps_;
  bool pruned_this_round_ = false;
};

// Accuracy of label predictions; the shared helper behind the reports.
double overall_accuracy(const std::vector<int>& predictions,
                        const std::vector<int>& labels);

}  // namespace cifuse
