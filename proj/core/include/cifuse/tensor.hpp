#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "cifuse/stream.hpp"

namespace cifuse {

// Batched image / activation tensor, NCHW, double precision everywhere so the
// analytic gradients can be checked against finite differences.
struct FeatureMap {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  FeatureMap() = default;
  FeatureMap(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}

  size_t idx(int i, int ch, int y, int x) const {
    return ((static_cast<size_t>(i) * c + ch) * h + y) * w + x;
  }
  double& at(int i, int ch, int y, int x) { return v[idx(i, ch, y, x)]; }
  double at(int i, int ch, int y, int x) const { return v[idx(i, ch, y, x)]; }
  size_t size() const { return v.size(); }
};

// Decode u8 images into [0,1] doubles; channel-last input becomes NCHW.
// `hflip` mirrors selected examples around the vertical axis.
FeatureMap to_featuremap(const std::vector<const LabeledExample*>& batch, int h,
                         int w, int c, const std::vector<bool>* hflip = nullptr);

inline FeatureMap to_featuremap(const std::vector<LabeledExample>& batch, int h,
                                int w, int c) {
  std::vector<const LabeledExample*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& e : batch) ptrs.push_back(&e);
  return to_featuremap(ptrs, h, w, c);
}

// Mutable view of one named parameter tensor and its gradient buffer.
struct ParamView {
  std::string name;
  std::vector<int> shape;
  double* value = nullptr;
  double* grad = nullptr;
  size_t size = 0;
};

}  // namespace cifuse
