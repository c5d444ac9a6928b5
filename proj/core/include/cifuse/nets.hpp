#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cifuse/tensor.hpp"

namespace cifuse {

// softmax of a logit vector; the masks m_l of every masked layer come from
// this applied to the learnable logits e_l.
Vec mask_values(const Vec& e);

// 3x3, stride 1, pad 1 convolution with per-channel instance normalization,
// a learnable affine and an optional learnable importance mask. The mask
// multiplies the complete normalized channel output (scale, shift and all),
// so a zero mask silences the channel exactly and structural pruning is
// lossless.
class MaskedConv2d {
 public:
  MaskedConv2d() = default;
  MaskedConv2d(int in_channels, int out_channels, bool with_mask, uint64_t seed);

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  bool has_mask() const { return has_mask_; }
  Vec mask() const;  // softmax(e); all-ones when the layer carries no mask

  struct Cache {
    Mat col;        // K x (N*H*W), K = in_ch*9
    Mat pre;        // out_ch x (N*H*W), raw convolution output
    Mat mu;         // out_ch x N, per-example channel means
    Mat inv_sigma;  // out_ch x N, 1/sqrt(var + eps)
    int n = 0, h = 0, w = 0;
  };

  FeatureMap forward(const FeatureMap& x, Cache* cache = nullptr) const;
  // Accumulates weight/affine/mask gradients; returns input gradient when
  // `need_dx` (the first layer of an extractor skips it).
  FeatureMap backward(const FeatureMap& dout, const Cache& cache, bool need_dx);
  // Zeroes the gradient wherever this layer's pre-relu output is negative.
  void apply_relu_mask(FeatureMap& d, const Cache& cache) const;

  void collect_params(const std::string& prefix, std::vector<ParamView>& out);
  void zero_grads();
  size_t param_count() const;

  // exposed for pruning surgery and tests
  Mat W;   // out_ch x (in_ch*9), row h = kernel h flattened (ch, ky, kx)
  Vec g;   // post-normalization scale
  Vec b;   // post-normalization shift
  Vec e;   // mask logits, size out_ch (empty when has_mask() is false)
  Mat gW;
  Vec gg;
  Vec gb;
  Vec ge;

  void rebuild(int in_channels, int out_channels, bool with_mask);

 private:
  int in_ch_ = 0, out_ch_ = 0;
  bool has_mask_ = false;
};

struct ExtractorSpec {
  int in_h = 12, in_w = 12, in_ch = 3;
  std::vector<int> widths = {16, 32, 64};  // kernels per conv block
  bool masked = true;
};

// Convolutional stack: [conv -> relu -> 2x2 stride-2 avg pool] per block,
// the last block ends in global average pooling instead. Pooled feature
// dimension equals the last block width.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ExtractorSpec& spec, uint64_t seed);

  int output_dim() const { return convs_.empty() ? 0 : convs_.back().out_channels(); }
  const ExtractorSpec& spec() const { return spec_; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }
  bool masked() const;

  struct Cache {
    std::vector<MaskedConv2d::Cache> blocks;
    int last_h = 0, last_w = 0;
  };

  // Pooled features, one row per example. Pass a cache to enable backward.
  Mat forward(const FeatureMap& x, Cache* cache = nullptr) const;
  void backward(const Mat& dfeat, const Cache& cache);

  void collect_params(const std::string& prefix, std::vector<ParamView>& out);
  void zero_grads();
  size_t param_count() const;
  uint64_t param_checksum() const;
  // Round parameters through 32-bit floats, matching the checkpoint format.
  void quantize_f32();

  std::vector<MaskedConv2d>& convs() { return convs_; }
  const std::vector<MaskedConv2d>& convs() const { return convs_; }

 private:
  ExtractorSpec spec_;
  std::vector<MaskedConv2d> convs_;
  bool frozen_ = false;
};

// Fully connected layer; used for the per-extractor feature transforms and
// for the fused / auxiliary heads.
class Dense {
 public:
  Dense() = default;
  Dense(int in, int out, uint64_t seed);

  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }

  Mat forward(const Mat& x) const;  // x: N x in -> N x out
  // Accumulates gradients given the forward input; returns dX.
  Mat backward(const Mat& x, const Mat& dy);

  void collect_params(const std::string& prefix, std::vector<ParamView>& out);
  void zero_grads();
  size_t param_count() const { return static_cast<size_t>(W.size()) + b.size(); }

  Mat W;  // out x in
  Vec b;
  Mat gW;
  Vec gb;
};

// Grow a layer to (new_in x new_out), keeping the old weight block in the top
// left corner and initializing the new rows/columns fresh.
Dense extend_dense(const Dense& old, int new_in, int new_out, uint64_t seed);

enum class FusionMode { kConcat, kAverage };

// The full per-round classifier: frozen old extractors, the current
// extractor, per-extractor transforms into a common feature space, the fused
// head over the combined features and the auxiliary head on the current
// extractor's pooled features.
class FusionClassifier {
 public:
  std::vector<FeatureExtractor> extractors;  // old (frozen) first, current last
  std::vector<Dense> transforms;             // one per extractor; empty = raw fusion
  std::optional<Dense> fused_head;           // absent in the no-fusion ablation
  Dense aux_head;
  FusionMode mode = FusionMode::kConcat;

  int extractor_count() const { return static_cast<int>(extractors.size()); }
  FeatureExtractor& current() { return extractors.back(); }
  const FeatureExtractor& current() const { return extractors.back(); }
  bool uses_transforms() const { return !transforms.empty(); }
  int logit_count() const { return aux_head.out_dim(); }
  int fused_dim() const;

  // Transformed and fused feature vectors (the NME space when fusion is on).
  Mat fused_features(const FeatureMap& x) const;
  Mat fused_logits(const FeatureMap& x) const;
  // The auxiliary path touches only the current extractor.
  Mat aux_logits(const FeatureMap& x) const;

  // Trainable parameter set: current extractor, transforms, both heads.
  // Frozen extractors join only when `unfreeze_old` is set; old extractors'
  // transforms drop out when `include_old_transforms` is off.
  std::vector<ParamView> trainable(bool unfreeze_old = false,
                                   bool include_old_transforms = true);
  std::vector<ParamView> all_params();
  void zero_grads();

  // Deployed classifier size: extractors + transforms + fused head. The
  // auxiliary head only serves training-time distillation and is excluded.
  size_t deployed_param_count() const;
};

// Forward pass with every layer's mask replaced by an explicit vector
// (components may be exactly zero). Reference path for pruning equivalence.
Mat masked_reference_forward(const FeatureExtractor& extractor, const FeatureMap& x,
                             const std::vector<Vec>& layer_masks);

// Assemble the round-t classifier. Old extractors are marked frozen; their
// transforms carry over; the new extractor and heads are freshly initialized.
// `common_dim` is ignored when `use_transforms` is false (raw fusion).
FusionClassifier build_fusion_model(std::vector<FeatureExtractor> old_extractors,
                                    std::vector<Dense> old_transforms,
                                    const ExtractorSpec& new_spec, int common_dim,
                                    int old_classes, int new_classes,
                                    FusionMode mode, bool use_transforms,
                                    uint64_t seed);

struct TrainConfig {
  double lambda1 = 1.0;       // distillation weight inside the auxiliary loss
  double lambda2 = 0.1;       // auxiliary loss weight in the total loss
  double temperature = 2.0;   // distillation temperature, >= 1
  double learning_rate = 1e-3;
  int batch_size = 128;
  int max_epochs = 100;
  int finetune_epochs = 100;
  int patience = 10;          // early stop on training-loss plateau
  int common_dim = 64;
  FusionMode fusion_mode = FusionMode::kConcat;
  std::vector<int> widths = {16, 32, 64};
  bool augment_hflip = false;
  // keep each old extractor's transform fixed after its own round; by
  // default transforms stay trainable every round
  bool freeze_old_transforms = false;
  double adaptive_threshold_scale = 1.0;  // pruning threshold = scale / n_l
  uint64_t seed = 1;

  void validate() const;
};

}  // namespace cifuse
