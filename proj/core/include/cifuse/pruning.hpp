#pragma once

#include <string>
#include <vector>

#include "cifuse/nets.hpp"

namespace cifuse {

// Keep/drop decision per kernel, one vector per convolution layer.
struct BinaryMaskSet {
  std::vector<std::vector<bool>> keep;

  int kept(size_t layer) const;
  bool all_ones() const;
};

struct LayerPruneCount {
  std::string name;
  int kept = 0;
  int total = 0;
};

struct PruneStats {
  std::vector<LayerPruneCount> layers;
  // kernel weight coefficients only; biases and mask logits excluded so the
  // fraction reflects the convolution structure
  size_t weights_before = 0;
  size_t weights_after = 0;

  double kept_kernel_fraction() const;
  double param_fraction() const;
};

// Threshold each layer's mask at threshold_scale / n_l (inclusive). With the
// default scale 1 the softmax maximum guarantees at least one kept kernel;
// with an adaptive scale the argmax kernel is kept as a floor.
BinaryMaskSet binarize_masks(const FeatureExtractor& extractor,
                             double threshold_scale = 1.0);

// Remove dropped kernels and the matching input channels of the next layer.
// Surviving kernels absorb their learned mask scale, so the pruned extractor
// reproduces the binary-masked forward pass exactly and needs no mask
// machinery afterwards.
FeatureExtractor structural_prune(const FeatureExtractor& extractor,
                                  const BinaryMaskSet& masks);

PruneStats prune_stats(const FeatureExtractor& before, const FeatureExtractor& after);

}  // namespace cifuse
