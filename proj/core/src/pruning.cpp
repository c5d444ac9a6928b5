#include "cifuse/pruning.hpp"

#include <cassert>
#include <stdexcept>

namespace cifuse {

int BinaryMaskSet::kept(size_t layer) const {
  int n = 0;
  for (bool k : keep[layer]) n += k;
  return n;
}

bool BinaryMaskSet::all_ones() const {
  for (const auto& layer : keep)
    for (bool k : layer)
      if (!k) return false;
  return true;
}

double PruneStats::kept_kernel_fraction() const {
  int kept = 0, total = 0;
  for (const auto& l : layers) {
    kept += l.kept;
    total += l.total;
  }
  return total == 0 ? 1.0 : static_cast<double>(kept) / total;
}

double PruneStats::param_fraction() const {
  return weights_before == 0
             ? 1.0
             : static_cast<double>(weights_after) / weights_before;
}

BinaryMaskSet binarize_masks(const FeatureExtractor& extractor,
                             double threshold_scale) {
  BinaryMaskSet set;
  for (const auto& conv : extractor.convs()) {
    const int n = conv.out_channels();
    std::vector<bool> keep(n, true);
    if (conv.has_mask()) {
      const Vec m = conv.mask();
      const double threshold = threshold_scale / n;
      int kept = 0;
      for (int h = 0; h < n; ++h) {
        keep[h] = m[h] >= threshold;
        kept += keep[h];
      }
      if (threshold_scale == 1.0) {
        // softmax max >= 1/n, so an empty layer cannot happen
        assert(kept >= 1);
      } else if (kept == 0) {
        int best = 0;
        for (int h = 1; h < n; ++h)
          if (m[h] > m[best]) best = h;
        keep[best] = true;
      }
    }
    set.keep.push_back(std::move(keep));
  }
  return set;
}

FeatureExtractor structural_prune(const FeatureExtractor& extractor,
                                  const BinaryMaskSet& masks) {
  const auto& convs = extractor.convs();
  if (masks.keep.size() != convs.size())
    throw std::invalid_argument("structural_prune: mask/layer count mismatch");
  for (size_t l = 0; l < convs.size(); ++l) {
    if (static_cast<int>(masks.keep[l].size()) != convs[l].out_channels())
      throw std::invalid_argument("structural_prune: mask width mismatch");
    if (masks.kept(l) < 1)
      throw std::invalid_argument("structural_prune: layer would lose all kernels");
  }

  ExtractorSpec spec = extractor.spec();
  spec.masked = false;
  spec.widths.clear();
  for (size_t l = 0; l < convs.size(); ++l) spec.widths.push_back(masks.kept(l));

  FeatureExtractor pruned(spec, /*seed=*/0);
  pruned.set_frozen(extractor.frozen());

  std::vector<bool> in_keep(static_cast<size_t>(extractor.spec().in_ch), true);
  for (size_t l = 0; l < convs.size(); ++l) {
    const auto& src = convs[l];
    auto& dst = pruned.convs()[l];
    const Vec m = src.mask();
    const auto& out_keep = masks.keep[l];

    // surviving kernels keep their weights; the mask scale folds into the
    // post-normalization affine, which the normalization cannot undo
    int dr = 0;
    for (int h = 0; h < src.out_channels(); ++h) {
      if (!out_keep[h]) continue;
      int dc = 0;
      for (int ch = 0; ch < src.in_channels(); ++ch) {
        if (!in_keep[ch]) continue;
        for (int k = 0; k < 9; ++k)
          dst.W(dr, dc * 9 + k) = src.W(h, ch * 9 + k);
        ++dc;
      }
      dst.g[dr] = m[h] * src.g[h];
      dst.b[dr] = m[h] * src.b[h];
      ++dr;
    }
    in_keep.assign(out_keep.begin(), out_keep.end());
  }
  return pruned;
}

PruneStats prune_stats(const FeatureExtractor& before, const FeatureExtractor& after) {
  if (before.convs().size() != after.convs().size())
    throw std::invalid_argument("prune_stats: layer count mismatch");
  PruneStats stats;
  for (size_t l = 0; l < before.convs().size(); ++l) {
    const auto& b = before.convs()[l];
    const auto& a = after.convs()[l];
    stats.layers.push_back(
        {"conv" + std::to_string(l), a.out_channels(), b.out_channels()});
    stats.weights_before += static_cast<size_t>(b.W.size());
    stats.weights_after += static_cast<size_t>(a.W.size());
  }
  return stats;
}

}  // namespace cifuse
