#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cifuse/pruning.hpp"
#include "cifuse/rng.hpp"
#include "oracles.hpp"

using namespace cifuse;

namespace {

FeatureMap random_map(Rng& rng, int n, int c, int h, int w) {
  FeatureMap fm(n, c, h, w);
  for (auto& v : fm.v) v = rng.normal();
  return fm;
}

FeatureExtractor random_masked_extractor(uint64_t seed, std::vector<int> widths = {4, 6}) {
  ExtractorSpec spec{.in_h = 8, .in_w = 8, .in_ch = 2, .widths = std::move(widths),
                     .masked = true};
  FeatureExtractor ext(spec, seed);
  Rng rng(seed ^ 0xabcdef);
  for (auto& conv : ext.convs()) {
    for (int i = 0; i < conv.e.size(); ++i) conv.e[i] = 1.5 * rng.normal();
    for (int i = 0; i < conv.b.size(); ++i) conv.b[i] = 0.2 * rng.normal();
  }
  return ext;
}

// reference: original network with dropped channels zeroed and kept channels
// still carrying their learned soft-mask scale
std::vector<Vec> binarized_reference_masks(const FeatureExtractor& ext,
                                           const BinaryMaskSet& masks) {
  std::vector<Vec> out;
  for (size_t l = 0; l < ext.convs().size(); ++l) {
    Vec m = ext.convs()[l].mask();
    for (int h = 0; h < m.size(); ++h)
      if (!masks.keep[l][h]) m[h] = 0.0;
    out.push_back(std::move(m));
  }
  return out;
}

// the pruned extractor's feature space is the kept coordinates of the
// reference; dropped coordinates must be exactly zero there
Mat kept_columns(const Mat& ref, const std::vector<bool>& keep_last) {
  int kept = 0;
  for (bool k : keep_last) kept += k;
  Mat out(ref.rows(), kept);
  int dc = 0;
  for (size_t c = 0; c < keep_last.size(); ++c) {
    if (keep_last[c]) {
      out.col(dc++) = ref.col(c);
    } else {
      CHECK(ref.col(c).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("binarize: uniform mask keeps everything (inclusive threshold)") {
  ExtractorSpec spec{.in_h = 8, .in_w = 8, .in_ch = 1, .widths = {5}, .masked = true};
  FeatureExtractor ext(spec, 3);  // e = 0 -> mask exactly 1/5 everywhere
  const auto masks = binarize_masks(ext);
  CHECK(masks.kept(0) == 5);
  CHECK(masks.all_ones());
}

TEST_CASE("binarize: threshold at 1/n") {
  ExtractorSpec spec{.in_h = 8, .in_w = 8, .in_ch = 1, .widths = {3}, .masked = true};
  FeatureExtractor ext(spec, 5);
  // softmax(log m) = m when m sums to 1
  ext.convs()[0].e[0] = std::log(0.5);
  ext.convs()[0].e[1] = std::log(0.3);
  ext.convs()[0].e[2] = std::log(0.2);
  const auto masks = binarize_masks(ext);
  CHECK(masks.keep[0] == std::vector<bool>{true, false, false});
}

TEST_CASE("binarize: at least one kernel survives any logits") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto ext = random_masked_extractor(100 + trial, {3, 7});
    const auto masks = binarize_masks(ext);
    for (size_t l = 0; l < masks.keep.size(); ++l) CHECK(masks.kept(l) >= 1);
  }
}

TEST_CASE("structural prune: identity surgery with all-ones masks") {
  ExtractorSpec spec{.in_h = 8, .in_w = 8, .in_ch = 2, .widths = {4, 6}, .masked = true};
  FeatureExtractor ext(spec, 11);  // zero logits -> uniform masks, all kept
  const auto masks = binarize_masks(ext);
  REQUIRE(masks.all_ones());
  const auto pruned = structural_prune(ext, masks);
  // kernels all kept; mask logits are folded away
  CHECK(prune_stats(ext, pruned).kept_kernel_fraction() == 1.0);
  CHECK(pruned.param_count() == ext.param_count() - 4 - 6);  // e vectors gone

  Rng rng(12);
  const FeatureMap x = random_map(rng, 3, 2, 8, 8);
  const Mat ref = masked_reference_forward(ext, x, binarized_reference_masks(ext, masks));
  const Mat got = pruned.forward(x);
  CHECK((ref - got).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("structural prune: dropping one kernel preserves the masked forward") {
  Rng rng(13);
  auto ext = random_masked_extractor(21);
  // force exactly one kernel of layer 0 below threshold
  auto& e = ext.convs()[0].e;
  e.setZero();
  e[1] = -3.0;
  auto masks = binarize_masks(ext);
  REQUIRE(masks.kept(0) == 3);

  const auto pruned = structural_prune(ext, masks);
  CHECK(pruned.param_count() < ext.param_count());
  CHECK(pruned.convs()[0].out_channels() == 3);
  CHECK(pruned.convs()[1].in_channels() == 3);

  const auto ref_masks = binarized_reference_masks(ext, masks);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const FeatureMap x = random_map(rng, 1, 2, 8, 8);
    const Mat ref = kept_columns(masked_reference_forward(ext, x, ref_masks),
                                 masks.keep.back());
    const Mat got = pruned.forward(x);
    worst = std::max(worst, (ref - got).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("structural prune: idempotent on an already pruned network") {
  auto ext = random_masked_extractor(31);
  const auto pruned = structural_prune(ext, binarize_masks(ext));
  // a mask-free network binarizes to all-ones; pruning again is a no-op
  const auto masks2 = binarize_masks(pruned);
  CHECK(masks2.all_ones());
  const auto pruned2 = structural_prune(pruned, masks2);
  CHECK(pruned2.param_count() == pruned.param_count());
  CHECK(pruned2.param_checksum() == pruned.param_checksum());
}

TEST_CASE("structural prune: equivalence over 20 random extractors") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    auto ext = random_masked_extractor(500 + trial, {3, 5});
    const auto masks = binarize_masks(ext);
    const auto pruned = structural_prune(ext, masks);
    const auto ref_masks = binarized_reference_masks(ext, masks);
    for (int i = 0; i < 5; ++i) {
      const FeatureMap x = random_map(rng, 2, 2, 8, 8);
      const Mat ref = kept_columns(masked_reference_forward(ext, x, ref_masks),
                                   masks.keep.back());
      const Mat got = pruned.forward(x);
      CHECK((ref - got).cwiseAbs().maxCoeff() < 1e-5);
    }
    // strictly fewer parameters whenever anything fell below threshold
    if (!masks.all_ones()) CHECK(pruned.param_count() < ext.param_count());
  }
}

TEST_CASE("structural prune: mask mismatch rejected") {
  auto ext = random_masked_extractor(51);
  BinaryMaskSet masks;
  masks.keep.push_back(std::vector<bool>(4, true));
  CHECK_THROWS_AS(structural_prune(ext, masks), std::invalid_argument);  // layer count
  masks.keep.push_back(std::vector<bool>(5, true));                      // wrong width
  CHECK_THROWS_AS(structural_prune(ext, masks), std::invalid_argument);
}

TEST_CASE("prune stats: identity surgery") {
  auto ext = random_masked_extractor(61);
  const auto stats = prune_stats(ext, ext);
  CHECK(stats.kept_kernel_fraction() == 1.0);
  CHECK(stats.param_fraction() == 1.0);
}

TEST_CASE("prune stats: the 4-to-2 kernel example") {
  // 2 layers, 1 input channel, 4 kernels each; drop 2 of layer 1's kernels:
  // layer-1 weights 4*9 -> 2*9, layer-2 weights 4*4*9 -> 4*2*9
  ExtractorSpec spec{.in_h = 8, .in_w = 8, .in_ch = 1, .widths = {4, 4}, .masked = true};
  FeatureExtractor ext(spec, 71);
  auto& e = ext.convs()[0].e;
  e.setZero();
  e[0] = e[1] = 2.0;
  e[2] = e[3] = -2.0;
  const auto masks = binarize_masks(ext);
  REQUIRE(masks.kept(0) == 2);
  REQUIRE(masks.kept(1) == 4);
  const auto pruned = structural_prune(ext, masks);
  const auto stats = prune_stats(ext, pruned);
  CHECK(stats.weights_before == 36 + 144);
  CHECK(stats.weights_after == 18 + 72);
  CHECK(stats.param_fraction() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(stats.layers[0].kept == 2);
  CHECK(stats.layers[0].total == 4);
}

TEST_CASE("prune stats: parameter count never grows") {
  for (int trial = 0; trial < 10; ++trial) {
    auto ext = random_masked_extractor(800 + trial);
    const auto pruned = structural_prune(ext, binarize_masks(ext));
    CHECK(prune_stats(ext, pruned).param_fraction() <= 1.0);
    CHECK(pruned.param_count() <= ext.param_count());
  }
}
