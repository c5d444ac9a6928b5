#include "cifuse/nets.hpp"

#include <cmath>
#include <cstring>

#include "cifuse/rng.hpp"

namespace cifuse {

namespace {

constexpr int kK = 3;  // kernel extent; the stack is all 3x3 convolutions

void he_normal(double* data, size_t n, double std, Rng& rng) {
  for (size_t i = 0; i < n; ++i) data[i] = rng.normal(0.0, std);
}

}  // namespace

FeatureMap to_featuremap(const std::vector<const LabeledExample*>& batch, int h,
                         int w, int c, const std::vector<bool>* hflip) {
  FeatureMap fm(static_cast<int>(batch.size()), c, h, w);
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& px = batch[i]->pixels;
    if (px.size() != static_cast<size_t>(h) * w * c)
      throw std::invalid_argument("to_featuremap: pixel count mismatch");
    const bool flip = hflip && (*hflip)[i];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sx = flip ? (w - 1 - x) : x;
        for (int ch = 0; ch < c; ++ch)
          fm.at(static_cast<int>(i), ch, y, x) =
              px[(static_cast<size_t>(y) * w + sx) * c + ch] / 255.0;
      }
  }
  return fm;
}

Vec mask_values(const Vec& e) {
  if (e.size() == 0) throw std::invalid_argument("mask_values: empty logit vector");
  const double m = e.maxCoeff();
  Vec out = (e.array() - m).exp();
  out /= out.sum();
  return out;
}

MaskedConv2d::MaskedConv2d(int in_channels, int out_channels, bool with_mask,
                           uint64_t seed) {
  rebuild(in_channels, out_channels, with_mask);
  Rng rng(seed);
  const double std = std::sqrt(2.0 / (in_ch_ * kK * kK));
  he_normal(W.data(), W.size(), std, rng);
}

void MaskedConv2d::rebuild(int in_channels, int out_channels, bool with_mask) {
  in_ch_ = in_channels;
  out_ch_ = out_channels;
  has_mask_ = with_mask;
  W = Mat::Zero(out_ch_, in_ch_ * kK * kK);
  g = Vec::Ones(out_ch_);
  b = Vec::Zero(out_ch_);
  e = with_mask ? Vec::Zero(out_ch_) : Vec();
  zero_grads();
}

void MaskedConv2d::zero_grads() {
  gW = Mat::Zero(W.rows(), W.cols());
  gg = Vec::Zero(g.size());
  gb = Vec::Zero(b.size());
  ge = Vec::Zero(e.size());
}

Vec MaskedConv2d::mask() const {
  return has_mask_ ? mask_values(e) : Vec::Ones(out_ch_);
}

size_t MaskedConv2d::param_count() const {
  return static_cast<size_t>(W.size()) + g.size() + b.size() + e.size();
}

void MaskedConv2d::collect_params(const std::string& prefix,
                                  std::vector<ParamView>& out) {
  out.push_back({prefix + ".W", {out_ch_, in_ch_, kK, kK}, W.data(), gW.data(),
                 static_cast<size_t>(W.size())});
  out.push_back({prefix + ".g", {out_ch_}, g.data(), gg.data(),
                 static_cast<size_t>(g.size())});
  out.push_back({prefix + ".b", {out_ch_}, b.data(), gb.data(),
                 static_cast<size_t>(b.size())});
  if (has_mask_)
    out.push_back({prefix + ".e", {out_ch_}, e.data(), ge.data(),
                   static_cast<size_t>(e.size())});
}

namespace {

// col has one column per output position (i, y, x); rows follow the
// (channel, ky, kx) flattening used by MaskedConv2d::W.
void im2col(const FeatureMap& x, Mat& col) {
  const int K = x.c * kK * kK;
  col.resize(K, static_cast<Eigen::Index>(x.n) * x.h * x.w);
  Eigen::Index j = 0;
  for (int i = 0; i < x.n; ++i)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx, ++j) {
        double* dst = col.data() + j * K;
        for (int ch = 0; ch < x.c; ++ch)
          for (int ky = 0; ky < kK; ++ky) {
            const int sy = y + ky - 1;
            for (int kx = 0; kx < kK; ++kx) {
              const int sx = xx + kx - 1;
              *dst++ = (sy >= 0 && sy < x.h && sx >= 0 && sx < x.w)
                           ? x.at(i, ch, sy, sx)
                           : 0.0;
            }
          }
      }
}

void col2im(const Mat& dcol, FeatureMap& dx) {
  Eigen::Index j = 0;
  const int K = dx.c * kK * kK;
  for (int i = 0; i < dx.n; ++i)
    for (int y = 0; y < dx.h; ++y)
      for (int xx = 0; xx < dx.w; ++xx, ++j) {
        const double* src = dcol.data() + j * K;
        for (int ch = 0; ch < dx.c; ++ch)
          for (int ky = 0; ky < kK; ++ky) {
            const int sy = y + ky - 1;
            for (int kx = 0; kx < kK; ++kx) {
              const int sx = xx + kx - 1;
              if (sy >= 0 && sy < dx.h && sx >= 0 && sx < dx.w)
                dx.at(i, ch, sy, sx) += *src;
              ++src;
            }
          }
      }
}

}  // namespace

namespace {
constexpr double kNormEps = 1e-5;
}

FeatureMap MaskedConv2d::forward(const FeatureMap& x, Cache* cache) const {
  if (x.c != in_ch_)
    throw std::invalid_argument("MaskedConv2d: input channel mismatch");
  Mat local_col;
  Mat& col = cache ? cache->col : local_col;
  im2col(x, col);

  Mat local_pre;
  Mat& pre = cache ? cache->pre : local_pre;
  pre.noalias() = W * col;

  // instance normalization: per example and channel over the spatial extent
  const int hw = x.h * x.w;
  Mat local_mu, local_inv;
  Mat& mu = cache ? cache->mu : local_mu;
  Mat& inv_sigma = cache ? cache->inv_sigma : local_inv;
  mu.resize(out_ch_, x.n);
  inv_sigma.resize(out_ch_, x.n);
  for (int i = 0; i < x.n; ++i) {
    const auto seg = pre.middleCols(static_cast<Eigen::Index>(i) * hw, hw);
    mu.col(i) = seg.rowwise().mean();
    inv_sigma.col(i) =
        ((seg.colwise() - mu.col(i)).array().square().rowwise().mean() + kNormEps)
            .sqrt()
            .inverse()
            .matrix();
  }
  if (cache) {
    cache->n = x.n;
    cache->h = x.h;
    cache->w = x.w;
  }

  const Vec m = mask();
  FeatureMap out(x.n, out_ch_, x.h, x.w);
  Eigen::Index j = 0;
  for (int i = 0; i < x.n; ++i)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx, ++j) {
        const double* src = pre.data() + j * out_ch_;
        for (int h = 0; h < out_ch_; ++h) {
          const double xhat = (src[h] - mu(h, i)) * inv_sigma(h, i);
          const double nb = g[h] * xhat + b[h];
          out.at(i, h, y, xx) = (has_mask_ ? m[h] : 1.0) * nb;
        }
      }
  return out;
}

void MaskedConv2d::apply_relu_mask(FeatureMap& d, const Cache& cache) const {
  // the mask is strictly positive, so the output sign follows g*xhat + b
  Eigen::Index j = 0;
  for (int i = 0; i < d.n; ++i)
    for (int y = 0; y < d.h; ++y)
      for (int xx = 0; xx < d.w; ++xx, ++j) {
        const double* src = cache.pre.data() + j * d.c;
        for (int h = 0; h < d.c; ++h) {
          const double xhat = (src[h] - cache.mu(h, i)) * cache.inv_sigma(h, i);
          if (g[h] * xhat + b[h] <= 0.0) d.at(i, h, y, xx) = 0.0;
        }
      }
}

FeatureMap MaskedConv2d::backward(const FeatureMap& dout, const Cache& cache,
                                  bool need_dx) {
  if (dout.c != out_ch_ || dout.n != cache.n || dout.h != cache.h || dout.w != cache.w)
    throw std::invalid_argument("MaskedConv2d: gradient shape mismatch");
  const int hw = cache.h * cache.w;

  // gather the output gradient into the (out_ch x N*H*W) layout of `pre`
  Mat dz(out_ch_, cache.pre.cols());
  Eigen::Index j = 0;
  for (int i = 0; i < dout.n; ++i)
    for (int y = 0; y < dout.h; ++y)
      for (int xx = 0; xx < dout.w; ++xx, ++j) {
        double* dst = dz.data() + j * out_ch_;
        for (int h = 0; h < out_ch_; ++h) dst[h] = dout.at(i, h, y, xx);
      }

  // normalized activations
  Mat xhat(out_ch_, cache.pre.cols());
  for (int i = 0; i < cache.n; ++i) {
    const auto seg = cache.pre.middleCols(static_cast<Eigen::Index>(i) * hw, hw);
    xhat.middleCols(static_cast<Eigen::Index>(i) * hw, hw) =
        (seg.colwise() - cache.mu.col(i)).array().colwise() *
        cache.inv_sigma.col(i).array();
  }

  const Vec m = mask();
  if (has_mask_) {
    // the mask multiplies g*xhat + b; d/dm, then softmax backward
    Mat nb = xhat.array().colwise() * g.array();
    nb.colwise() += b;
    const Vec dm = (dz.array() * nb.array()).rowwise().sum().matrix();
    ge += m.asDiagonal() * (dm - Vec::Constant(dm.size(), dm.dot(m)));
    dz.array().colwise() *= m.array();
  }

  // affine backward; dz is now the gradient at g*xhat + b
  gg += (dz.array() * xhat.array()).rowwise().sum().matrix();
  gb += dz.rowwise().sum();
  Mat dxhat = dz.array().colwise() * g.array();

  // instance-norm backward per (example, channel)
  Mat dpre(out_ch_, cache.pre.cols());
  for (int i = 0; i < cache.n; ++i) {
    const auto xh = xhat.middleCols(static_cast<Eigen::Index>(i) * hw, hw);
    const auto dxh = dxhat.middleCols(static_cast<Eigen::Index>(i) * hw, hw);
    const Vec mean_dxh = dxh.rowwise().mean();
    const Vec mean_dxh_xh = (dxh.array() * xh.array()).rowwise().mean().matrix();
    dpre.middleCols(static_cast<Eigen::Index>(i) * hw, hw) =
        ((dxh.colwise() - mean_dxh).array() -
         xh.array().colwise() * mean_dxh_xh.array())
            .colwise() *
        cache.inv_sigma.col(i).array();
  }

  gW.noalias() += dpre * cache.col.transpose();

  FeatureMap dx;
  if (need_dx) {
    Mat dcol;
    dcol.noalias() = W.transpose() * dpre;
    dx = FeatureMap(cache.n, in_ch_, cache.h, cache.w);
    col2im(dcol, dx);
  }
  return dx;
}

namespace {

FeatureMap avgpool2(const FeatureMap& x) {
  FeatureMap out(x.n, x.c, x.h / 2, x.w / 2);
  for (int i = 0; i < x.n; ++i)
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx)
          out.at(i, c, y, xx) = 0.25 * (x.at(i, c, 2 * y, 2 * xx) +
                                        x.at(i, c, 2 * y, 2 * xx + 1) +
                                        x.at(i, c, 2 * y + 1, 2 * xx) +
                                        x.at(i, c, 2 * y + 1, 2 * xx + 1));
  return out;
}

FeatureMap avgpool2_backward(const FeatureMap& dout, int in_h, int in_w) {
  FeatureMap dx(dout.n, dout.c, in_h, in_w);
  for (int i = 0; i < dout.n; ++i)
    for (int c = 0; c < dout.c; ++c)
      for (int y = 0; y < dout.h; ++y)
        for (int xx = 0; xx < dout.w; ++xx) {
          const double g = 0.25 * dout.at(i, c, y, xx);
          dx.at(i, c, 2 * y, 2 * xx) = g;
          dx.at(i, c, 2 * y, 2 * xx + 1) = g;
          dx.at(i, c, 2 * y + 1, 2 * xx) = g;
          dx.at(i, c, 2 * y + 1, 2 * xx + 1) = g;
        }
  return dx;
}

void relu_inplace(FeatureMap& x) {
  for (auto& v : x.v) v = v > 0.0 ? v : 0.0;
}

}  // namespace

FeatureExtractor::FeatureExtractor(const ExtractorSpec& spec, uint64_t seed)
    : spec_(spec) {
  if (spec.widths.empty())
    throw std::invalid_argument("FeatureExtractor: empty width list");
  int in_ch = spec.in_ch;
  for (size_t l = 0; l < spec.widths.size(); ++l) {
    if (spec.widths[l] < 1)
      throw std::invalid_argument("FeatureExtractor: widths must be positive");
    convs_.emplace_back(in_ch, spec.widths[l], spec.masked,
                        derive_seed(seed, "conv" + std::to_string(l)));
    in_ch = spec.widths[l];
  }
}

bool FeatureExtractor::masked() const {
  for (const auto& c : convs_)
    if (c.has_mask()) return true;
  return false;
}

Mat FeatureExtractor::forward(const FeatureMap& x, Cache* cache) const {
  if (x.h != spec_.in_h || x.w != spec_.in_w || x.c != spec_.in_ch)
    throw std::invalid_argument("FeatureExtractor: input shape mismatch");
  if (cache) cache->blocks.resize(convs_.size());

  FeatureMap cur = x;
  const int last = static_cast<int>(convs_.size()) - 1;
  for (int l = 0; l <= last; ++l) {
    FeatureMap z = convs_[l].forward(cur, cache ? &cache->blocks[l] : nullptr);
    relu_inplace(z);
    if (l < last) {
      cur = avgpool2(z);
    } else {
      if (cache) {
        cache->last_h = z.h;
        cache->last_w = z.w;
      }
      // global average pooling
      Mat feat(z.n, z.c);
      const double inv = 1.0 / (z.h * z.w);
      for (int i = 0; i < z.n; ++i)
        for (int c = 0; c < z.c; ++c) {
          double s = 0.0;
          for (int y = 0; y < z.h; ++y)
            for (int xx = 0; xx < z.w; ++xx) s += z.at(i, c, y, xx);
          feat(i, c) = s * inv;
        }
      return feat;
    }
  }
  throw std::logic_error("unreachable");
}

void FeatureExtractor::backward(const Mat& dfeat, const Cache& cache) {
  const int last = static_cast<int>(convs_.size()) - 1;
  // global average pool backward
  FeatureMap d(static_cast<int>(dfeat.rows()), convs_[last].out_channels(),
               cache.last_h, cache.last_w);
  const double inv = 1.0 / (cache.last_h * cache.last_w);
  for (int i = 0; i < d.n; ++i)
    for (int c = 0; c < d.c; ++c) {
      const double g = dfeat(i, c) * inv;
      for (int y = 0; y < d.h; ++y)
        for (int xx = 0; xx < d.w; ++xx) d.at(i, c, y, xx) = g;
    }

  for (int l = last; l >= 0; --l) {
    convs_[l].apply_relu_mask(d, cache.blocks[l]);
    FeatureMap dx = convs_[l].backward(d, cache.blocks[l], l > 0);
    if (l > 0) {
      d = avgpool2_backward(dx, cache.blocks[l - 1].h, cache.blocks[l - 1].w);
    }
  }
}

void FeatureExtractor::collect_params(const std::string& prefix,
                                      std::vector<ParamView>& out) {
  for (size_t l = 0; l < convs_.size(); ++l)
    convs_[l].collect_params(prefix + ".conv" + std::to_string(l), out);
}

void FeatureExtractor::zero_grads() {
  for (auto& c : convs_) c.zero_grads();
}

size_t FeatureExtractor::param_count() const {
  size_t n = 0;
  for (const auto& c : convs_) n += c.param_count();
  return n;
}

uint64_t FeatureExtractor::param_checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& c : convs_) {
    h = fnv1a(c.W.data(), sizeof(double) * c.W.size(), h);
    h = fnv1a(c.g.data(), sizeof(double) * c.g.size(), h);
    h = fnv1a(c.b.data(), sizeof(double) * c.b.size(), h);
    if (c.has_mask()) h = fnv1a(c.e.data(), sizeof(double) * c.e.size(), h);
  }
  return h;
}

void FeatureExtractor::quantize_f32() {
  auto q = [](double* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  };
  for (auto& c : convs_) {
    q(c.W.data(), c.W.size());
    q(c.g.data(), c.g.size());
    q(c.b.data(), c.b.size());
    if (c.has_mask()) q(c.e.data(), c.e.size());
  }
}

Dense::Dense(int in, int out, uint64_t seed) {
  if (in < 1 || out < 1) throw std::invalid_argument("Dense: bad dimensions");
  W = Mat::Zero(out, in);
  b = Vec::Zero(out);
  Rng rng(seed);
  he_normal(W.data(), W.size(), std::sqrt(1.0 / in), rng);
  zero_grads();
}

Mat Dense::forward(const Mat& x) const {
  if (x.cols() != W.cols()) throw std::invalid_argument("Dense: input dim mismatch");
  Mat y = x * W.transpose();
  y.rowwise() += b.transpose();
  return y;
}

Mat Dense::backward(const Mat& x, const Mat& dy) {
  gW.noalias() += dy.transpose() * x;
  gb += dy.colwise().sum();
  return dy * W;
}

void Dense::collect_params(const std::string& prefix, std::vector<ParamView>& out) {
  out.push_back({prefix + ".W", {out_dim(), in_dim()}, W.data(), gW.data(),
                 static_cast<size_t>(W.size())});
  out.push_back({prefix + ".b", {out_dim()}, b.data(), gb.data(),
                 static_cast<size_t>(b.size())});
}

void Dense::zero_grads() {
  gW = Mat::Zero(W.rows(), W.cols());
  gb = Vec::Zero(b.size());
}

Dense extend_dense(const Dense& old, int new_in, int new_out, uint64_t seed) {
  if (new_in < old.in_dim() || new_out < old.out_dim())
    throw std::invalid_argument("extend_dense: dimensions may only grow");
  Dense d(new_in, new_out, seed);
  d.W.topLeftCorner(old.out_dim(), old.in_dim()) = old.W;
  d.b.head(old.out_dim()) = old.b;
  return d;
}

int FusionClassifier::fused_dim() const {
  if (!fused_head) return current().output_dim();
  if (mode == FusionMode::kAverage)
    return uses_transforms() ? transforms.front().out_dim()
                             : extractors.front().output_dim();
  int dim = 0;
  for (int k = 0; k < extractor_count(); ++k)
    dim += uses_transforms() ? transforms[k].out_dim() : extractors[k].output_dim();
  return dim;
}

Mat FusionClassifier::fused_features(const FeatureMap& x) const {
  if (!fused_head) {
    // no-fusion ablation: the representation is the bare pooled feature
    return current().forward(x);
  }
  Mat fused;
  int offset = 0;
  for (int k = 0; k < extractor_count(); ++k) {
    Mat g = extractors[k].forward(x);
    if (uses_transforms()) g = transforms[k].forward(g);
    if (mode == FusionMode::kAverage) {
      if (k == 0)
        fused = g / extractor_count();
      else
        fused += g / extractor_count();
    } else {
      if (k == 0) fused.resize(g.rows(), fused_dim());
      fused.middleCols(offset, g.cols()) = g;
      offset += static_cast<int>(g.cols());
    }
  }
  return fused;
}

Mat FusionClassifier::fused_logits(const FeatureMap& x) const {
  if (!fused_head) throw std::logic_error("fused_logits: model built without fusion");
  return fused_head->forward(fused_features(x));
}

Mat FusionClassifier::aux_logits(const FeatureMap& x) const {
  return aux_head.forward(current().forward(x));
}

std::vector<ParamView> FusionClassifier::trainable(bool unfreeze_old,
                                                   bool include_old_transforms) {
  std::vector<ParamView> out;
  for (int k = 0; k < extractor_count(); ++k) {
    const bool is_current = (k == extractor_count() - 1);
    if (is_current || unfreeze_old || !extractors[k].frozen())
      extractors[k].collect_params("ext" + std::to_string(k), out);
  }
  for (size_t k = 0; k < transforms.size(); ++k) {
    const bool is_current = (k + 1 == transforms.size());
    if (is_current || include_old_transforms)
      transforms[k].collect_params("transform" + std::to_string(k), out);
  }
  if (fused_head) fused_head->collect_params("fused_head", out);
  aux_head.collect_params("aux_head", out);
  return out;
}

std::vector<ParamView> FusionClassifier::all_params() {
  std::vector<ParamView> out;
  for (int k = 0; k < extractor_count(); ++k)
    extractors[k].collect_params("ext" + std::to_string(k), out);
  for (size_t k = 0; k < transforms.size(); ++k)
    transforms[k].collect_params("transform" + std::to_string(k), out);
  if (fused_head) fused_head->collect_params("fused_head", out);
  aux_head.collect_params("aux_head", out);
  return out;
}

void FusionClassifier::zero_grads() {
  for (auto& e : extractors) e.zero_grads();
  for (auto& t : transforms) t.zero_grads();
  if (fused_head) fused_head->zero_grads();
  aux_head.zero_grads();
}

size_t FusionClassifier::deployed_param_count() const {
  size_t n = 0;
  for (const auto& e : extractors) n += e.param_count();
  for (const auto& t : transforms) n += t.param_count();
  n += fused_head ? fused_head->param_count() : aux_head.param_count();
  return n;
}

Mat masked_reference_forward(const FeatureExtractor& extractor, const FeatureMap& x,
                             const std::vector<Vec>& layer_masks) {
  const auto& convs = extractor.convs();
  if (layer_masks.size() != convs.size())
    throw std::invalid_argument("masked_reference_forward: mask count mismatch");
  FeatureMap cur = x;
  const int last = static_cast<int>(convs.size()) - 1;
  for (int l = 0; l <= last; ++l) {
    if (layer_masks[l].size() != convs[l].out_channels())
      throw std::invalid_argument("masked_reference_forward: mask width mismatch");
    const auto& conv = convs[l];
    MaskedConv2d::Cache cache;
    FeatureMap z = conv.forward(cur, &cache);
    // rebuild the normalized affine output and scale by the explicit mask
    Eigen::Index j = 0;
    for (int i = 0; i < z.n; ++i)
      for (int y = 0; y < z.h; ++y)
        for (int xx = 0; xx < z.w; ++xx, ++j) {
          const double* src = cache.pre.data() + j * z.c;
          for (int h = 0; h < z.c; ++h) {
            const double xhat = (src[h] - cache.mu(h, i)) * cache.inv_sigma(h, i);
            const double v = layer_masks[l][h] * (conv.g[h] * xhat + conv.b[h]);
            z.at(i, h, y, xx) = v > 0.0 ? v : 0.0;  // relu folded in
          }
        }
    if (l < last) {
      cur = avgpool2(z);
    } else {
      Mat feat(z.n, z.c);
      const double inv = 1.0 / (z.h * z.w);
      for (int i = 0; i < z.n; ++i)
        for (int c = 0; c < z.c; ++c) {
          double s = 0.0;
          for (int y = 0; y < z.h; ++y)
            for (int xx = 0; xx < z.w; ++xx) s += z.at(i, c, y, xx);
          feat(i, c) = s * inv;
        }
      return feat;
    }
  }
  throw std::logic_error("unreachable");
}

FusionClassifier build_fusion_model(std::vector<FeatureExtractor> old_extractors,
                                    std::vector<Dense> old_transforms,
                                    const ExtractorSpec& new_spec, int common_dim,
                                    int old_classes, int new_classes,
                                    FusionMode mode, bool use_transforms,
                                    uint64_t seed) {
  if (new_classes < 1) throw std::invalid_argument("build_fusion_model: no new classes");
  for (const auto& ext : old_extractors)
    if (ext.spec().in_h != new_spec.in_h || ext.spec().in_w != new_spec.in_w ||
        ext.spec().in_ch != new_spec.in_ch)
      throw std::invalid_argument("build_fusion_model: extractor input shapes differ");
  if (use_transforms) {
    if (old_transforms.size() != old_extractors.size())
      throw std::invalid_argument("build_fusion_model: transform/extractor count mismatch");
    for (size_t k = 0; k < old_transforms.size(); ++k) {
      if (old_transforms[k].out_dim() != common_dim)
        throw std::invalid_argument("build_fusion_model: inconsistent transform dimension");
      if (old_transforms[k].in_dim() != old_extractors[k].output_dim())
        throw std::invalid_argument("build_fusion_model: transform does not match extractor");
    }
  } else if (!old_transforms.empty()) {
    throw std::invalid_argument("build_fusion_model: transforms given but disabled");
  }

  FusionClassifier m;
  m.mode = mode;
  for (auto& ext : old_extractors) ext.set_frozen(true);
  m.extractors = std::move(old_extractors);
  m.extractors.emplace_back(new_spec, derive_seed(seed, "new_extractor"));
  m.extractors.back().set_frozen(false);

  if (use_transforms) {
    m.transforms = std::move(old_transforms);
    m.transforms.emplace_back(m.extractors.back().output_dim(), common_dim,
                              derive_seed(seed, "new_transform"));
  } else if (mode == FusionMode::kAverage) {
    for (const auto& ext : m.extractors)
      if (ext.output_dim() != m.extractors.front().output_dim())
        throw std::invalid_argument(
            "build_fusion_model: average fusion needs equal feature dims");
  }

  int fdim = 0;
  if (mode == FusionMode::kAverage) {
    fdim = use_transforms ? common_dim : m.extractors.front().output_dim();
  } else {
    for (const auto& ext : m.extractors)
      fdim += use_transforms ? common_dim : ext.output_dim();
  }
  m.fused_head = Dense(fdim, old_classes + new_classes, derive_seed(seed, "fused_head"));
  m.aux_head = Dense(m.extractors.back().output_dim(), old_classes + new_classes,
                     derive_seed(seed, "aux_head"));
  return m;
}

void TrainConfig::validate() const {
  if (temperature < 1.0) throw std::invalid_argument("TrainConfig: temperature must be >= 1");
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
  if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: bad learning rate");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: bad batch size");
  if (max_epochs < 1 || finetune_epochs < 1)
    throw std::invalid_argument("TrainConfig: bad epoch budget");
  if (common_dim < 1) throw std::invalid_argument("TrainConfig: bad common dimension");
  if (widths.empty()) throw std::invalid_argument("TrainConfig: empty backbone widths");
  if (adaptive_threshold_scale <= 0.0)
    throw std::invalid_argument("TrainConfig: bad adaptive threshold scale");
}

}  // namespace cifuse
