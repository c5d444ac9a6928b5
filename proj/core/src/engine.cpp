#include "cifuse/engine.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>

#include "cifuse/rng.hpp"

namespace cifuse {

void AblationFlags::validate() const {
  if (transforms && !fusion)
    throw std::invalid_argument("ablation flags: transforms require fusion");
  if (mask && !fusion)
    throw std::invalid_argument("ablation flags: mask requires fusion");
  if (mask && !transforms)
    throw std::invalid_argument("ablation flags: mask requires transforms");
  if (!freeze_old && !fusion)
    throw std::invalid_argument("ablation flags: unfreezing needs old extractors");
  if (multi_teacher && fusion)
    throw std::invalid_argument("ablation flags: multi-teacher mode is single-model");
}

void AuxModel::quantize_f32() {
  extractor.quantize_f32();
  auto q = [](double* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  };
  q(head.W.data(), head.W.size());
  q(head.b.data(), head.b.size());
}

uint64_t AuxModel::checksum() const {
  uint64_t h = extractor.param_checksum();
  h = fnv1a(head.W.data(), sizeof(double) * head.W.size(), h);
  h = fnv1a(head.b.data(), sizeof(double) * head.b.size(), h);
  return h;
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::attach(std::vector<ParamView> params) {
  params_ = std::move(params);
  size_t total = 0;
  for (const auto& p : params_) total += p.size;
  m_.assign(total, 0.0);
  v_.assign(total, 0.0);
  t_ = 0;
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  size_t off = 0;
  for (const auto& p : params_) {
    for (size_t j = 0; j < p.size; ++j) {
      const double g = p.grad[j];
      double& m = m_[off + j];
      double& v = v_[off + j];
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g * g;
      p.value[j] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
    }
    off += p.size;
  }
}

double overall_accuracy(const std::vector<int>& predictions,
                        const std::vector<int>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw std::invalid_argument("overall_accuracy: empty or mismatched inputs");
  int correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i)
    correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / predictions.size();
}

namespace {

Dense shrink_dense_columns(const Dense& d, const std::vector<bool>& keep) {
  if (static_cast<int>(keep.size()) != d.in_dim())
    throw std::invalid_argument("shrink_dense_columns: keep size mismatch");
  int kept = 0;
  for (bool k : keep) kept += k;
  Dense out(kept, d.out_dim(), /*seed=*/0);
  int dc = 0;
  for (int c = 0; c < d.in_dim(); ++c)
    if (keep[c]) out.W.col(dc++) = d.W.col(c);
  out.b = d.b;
  return out;
}

void normalize_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
}

// argmin distance to class means; ties go to the smaller class label
std::vector<int> nearest_mean(const Mat& queries,
                              const std::vector<std::pair<int, Vec>>& means) {
  std::vector<int> out(queries.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    int best = means.front().first;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [label, mu] : means) {
      const double d = (queries.row(i).transpose() - mu).norm();
      if (d < best_d) {
        best_d = d;
        best = label;
      }
    }
    out[i] = best;
  }
  return out;
}

std::vector<std::pair<int, Vec>> class_means_from(
    const ExemplarMemory& memory,
    const std::function<Mat(const std::vector<LabeledExample>&)>& featurize) {
  std::vector<int> classes = memory.stored_classes();
  std::sort(classes.begin(), classes.end());
  std::vector<std::pair<int, Vec>> means;
  for (int label : classes) {
    const auto& ex = memory.exemplars(label);
    if (ex.empty()) throw std::logic_error("nme: class with zero exemplars");
    Mat f = featurize(ex);
    normalize_rows(f);
    Vec mu = f.colwise().mean();
    const double n = mu.norm();
    if (n > 0.0) mu /= n;
    means.emplace_back(label, std::move(mu));
  }
  return means;
}

}  // namespace

Engine::Engine(ExtractorSpec backbone, TrainConfig cfg, AblationFlags flags,
               int memory_budget)
    : backbone_(std::move(backbone)), cfg_(std::move(cfg)), flags_(flags) {
  cfg_.validate();
  flags_.validate();
  backbone_.widths = cfg_.widths;
  state_.memory = ExemplarMemory(memory_budget);
  ExtractorSpec plain = backbone_;
  plain.masked = false;
  state_.backbone_params = FeatureExtractor(plain, 0).param_count();
}

void Engine::begin_round(const std::vector<int>& new_classes) {
  if (new_classes.empty())
    throw std::invalid_argument("begin_round: no new classes");
  for (int label : new_classes)
    if (std::find(state_.learned_classes.begin(), state_.learned_classes.end(),
                  label) != state_.learned_classes.end())
      throw std::invalid_argument("begin_round: class already learned");

  const int t = state_.round + 1;
  const int u = static_cast<int>(state_.learned_classes.size());
  const int c_new = static_cast<int>(new_classes.size());
  const uint64_t rseed = derive_seed(cfg_.seed, "round" + std::to_string(t));

  if (flags_.fusion) {
    ExtractorSpec spec = backbone_;
    spec.masked = flags_.mask;
    if (t == 1) {
      state_.model = build_fusion_model({}, {}, spec, cfg_.common_dim, 0, c_new,
                                        cfg_.fusion_mode, flags_.transforms, rseed);
    } else {
      auto old_exts = std::move(state_.model.extractors);
      auto old_transforms = std::move(state_.model.transforms);
      Dense prev_head = std::move(*state_.model.fused_head);
      state_.model =
          build_fusion_model(std::move(old_exts), std::move(old_transforms), spec,
                             cfg_.common_dim, u, c_new, cfg_.fusion_mode,
                             flags_.transforms, rseed);
      state_.model.fused_head =
          extend_dense(prev_head, state_.model.fused_dim(), u + c_new,
                       derive_seed(rseed, "fused_head_ext"));
    }
  } else {
    if (t == 1) {
      ExtractorSpec spec = backbone_;
      spec.masked = false;
      FusionClassifier m;
      m.extractors.emplace_back(spec, derive_seed(rseed, "extractor"));
      m.aux_head = Dense(m.extractors.back().output_dim(), c_new,
                         derive_seed(rseed, "head"));
      state_.model = std::move(m);
    } else {
      state_.model.aux_head =
          extend_dense(state_.model.aux_head, state_.model.current().output_dim(),
                       u + c_new, derive_seed(rseed, "head_ext"));
    }
  }

  state_.round = t;
  for (int label : new_classes) {
    state_.learned_classes.push_back(label);
    state_.logit_round.push_back(t);
  }
  pruned_this_round_ = false;
  last_masks_ = BinaryMaskSet{};
}

Mat Engine::onehot(const std::vector<int>& logit_labels, int count) const {
  Mat y = Mat::Zero(static_cast<Eigen::Index>(logit_labels.size()), count);
  for (size_t i = 0; i < logit_labels.size(); ++i) y(i, logit_labels[i]) = 1.0;
  return y;
}

LossBreakdown Engine::batch_pass(const BatchInput& input, bool with_grads) {
  auto& model = state_.model;
  const int t = model.extractor_count();
  const int old_classes = static_cast<int>(state_.learned_classes.size()) -
                          static_cast<int>(std::count(state_.logit_round.begin(),
                                                      state_.logit_round.end(),
                                                      state_.round));
  const bool use_fused = model.fused_head.has_value();
  const bool distill_single = input.teacher_logits.size() > 0;
  const bool distill_multi = !input.pool_logits.empty();
  const Eigen::Index n = input.Y.rows();

  if (with_grads) model.zero_grads();

  FeatureExtractor::Cache cur_cache;
  const Mat feat_cur =
      model.current().forward(input.X, with_grads ? &cur_cache : nullptr);

  std::vector<Mat> feats(t);
  std::vector<FeatureExtractor::Cache> old_caches;
  const bool old_need_grads = with_grads && !flags_.freeze_old;
  if (use_fused) {
    if (old_need_grads) old_caches.resize(t - 1);
    for (int k = 0; k + 1 < t; ++k) {
      if (!input.old_feats.empty()) {
        feats[k] = input.old_feats[k];
      } else {
        feats[k] = model.extractors[k].forward(
            input.X, old_need_grads ? &old_caches[k] : nullptr);
      }
    }
  }
  feats[t - 1] = feat_cur;

  LossBreakdown lb;
  const Mat aux = model.aux_head.forward(feat_cur);
  Mat d_aux_ce;
  lb.ce_aux = cross_entropy_grad(aux, input.Y, d_aux_ce);

  Mat d_aux_distill;
  if (distill_single) {
    lb.distillation = distillation_loss_grad(input.teacher_logits, aux, old_classes,
                                             cfg_.temperature, d_aux_distill);
  } else if (distill_multi) {
    lb.distillation = multi_teacher_distillation_loss_grad(
        input.pool_logits, aux, cfg_.temperature, d_aux_distill);
  }
  lb.aux_combined = combined_aux_loss(lb.ce_aux, lb.distillation, cfg_.lambda1);

  Mat d_fused_logits;
  Mat fused;
  std::vector<int> block_offsets;
  if (use_fused) {
    fused.resize(n, model.fused_dim());
    if (model.mode == FusionMode::kAverage) {
      fused.setZero();
      for (int k = 0; k < t; ++k) {
        const Mat g = model.uses_transforms() ? model.transforms[k].forward(feats[k])
                                              : feats[k];
        fused += g / t;
      }
    } else {
      int off = 0;
      for (int k = 0; k < t; ++k) {
        const Mat g = model.uses_transforms() ? model.transforms[k].forward(feats[k])
                                              : feats[k];
        block_offsets.push_back(off);
        fused.middleCols(off, g.cols()) = g;
        off += static_cast<int>(g.cols());
      }
    }
    const Mat fused_logits = model.fused_head->forward(fused);
    lb.fused_ce = cross_entropy_grad(fused_logits, input.Y, d_fused_logits);
    lb.total = total_loss(lb.fused_ce, lb.aux_combined, cfg_.lambda2);
  } else {
    lb.total = lb.aux_combined;
  }

  if (!with_grads) return lb;

  const double aux_scale = use_fused ? cfg_.lambda2 : 1.0;
  Mat d_aux = aux_scale * d_aux_ce;
  if (d_aux_distill.size() > 0) d_aux += (aux_scale * cfg_.lambda1) * d_aux_distill;
  Mat d_feat_cur = model.aux_head.backward(feat_cur, d_aux);

  if (use_fused) {
    const Mat d_fused = model.fused_head->backward(fused, d_fused_logits);
    for (int k = 0; k < t; ++k) {
      Mat d_g;
      if (model.mode == FusionMode::kAverage)
        d_g = d_fused / t;
      else
        d_g = d_fused.middleCols(block_offsets[k],
                                 model.uses_transforms()
                                     ? cfg_.common_dim
                                     : model.extractors[k].output_dim());
      Mat d_feat_k = model.uses_transforms()
                         ? model.transforms[k].backward(feats[k], d_g)
                         : std::move(d_g);
      if (k == t - 1)
        d_feat_cur += d_feat_k;
      else if (old_need_grads)
        model.extractors[k].backward(d_feat_k, old_caches[k]);
    }
  }
  model.current().backward(d_feat_cur, cur_cache);
  return lb;
}

LossBreakdown Engine::compute_batch_loss(const std::vector<LabeledExample>& batch,
                                         bool with_grads) {
  if (batch.empty()) throw std::invalid_argument("compute_batch_loss: empty batch");
  std::map<int, int> logit_of_label;
  for (size_t i = 0; i < state_.learned_classes.size(); ++i)
    logit_of_label[state_.learned_classes[i]] = static_cast<int>(i);

  const int old_classes = static_cast<int>(state_.learned_classes.size()) -
                          static_cast<int>(std::count(state_.logit_round.begin(),
                                                      state_.logit_round.end(),
                                                      state_.round));
  BatchInput in;
  std::vector<const LabeledExample*> ptrs(batch.size());
  std::vector<int> targets(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    ptrs[i] = &batch[i];
    targets[i] = logit_of_label.at(batch[i].label);
  }
  in.X = to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch);
  in.Y = onehot(targets, state_.model.logit_count());
  if (state_.teacher && cfg_.lambda1 > 0.0 && !flags_.multi_teacher && old_classes > 0)
    in.teacher_logits = state_.teacher->logits(in.X);
  if (flags_.multi_teacher && cfg_.lambda1 > 0.0 && old_classes > 0)
    for (const auto& teacher : state_.teacher_pool)
      in.pool_logits.push_back(teacher.logits(in.X));
  return batch_pass(in, with_grads);
}

std::vector<LossBreakdown> Engine::train_phase(
    const std::vector<LabeledExample>& data, int max_epochs,
    const std::string& tag) {
  if (data.empty()) throw std::invalid_argument("train: empty round data");
  auto& model = state_.model;
  const int t = model.extractor_count();
  const int logits = model.logit_count();

  std::map<int, int> logit_of_label;
  for (size_t i = 0; i < state_.learned_classes.size(); ++i)
    logit_of_label[state_.learned_classes[i]] = static_cast<int>(i);

  const int old_classes = static_cast<int>(state_.learned_classes.size()) -
                          std::count(state_.logit_round.begin(),
                                     state_.logit_round.end(), state_.round);
  const bool teacher_active = state_.teacher.has_value() && cfg_.lambda1 > 0.0 &&
                              !flags_.multi_teacher && old_classes > 0;
  const bool multi_active = flags_.multi_teacher && !state_.teacher_pool.empty() &&
                            cfg_.lambda1 > 0.0 && old_classes > 0;
  const bool use_fused = model.fused_head.has_value();
  const bool precompute = flags_.freeze_old && !cfg_.augment_hflip;

  // logit indices per example
  std::vector<int> targets(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    auto it = logit_of_label.find(data[i].label);
    if (it == logit_of_label.end())
      throw std::invalid_argument("train: example of an unseen class");
    targets[i] = it->second;
  }

  // fixed per-phase tensors: frozen extractor features and teacher logits
  std::vector<Mat> old_feats;
  if (use_fused && precompute)
    for (int k = 0; k + 1 < t; ++k)
      old_feats.push_back(forward_features_chunked(model.extractors[k], data));
  Mat teacher_logits;
  if (teacher_active && !cfg_.augment_hflip)
    teacher_logits = [&] {
      Mat out(static_cast<Eigen::Index>(data.size()), state_.teacher->head.out_dim());
      const int chunk = cfg_.batch_size;
      for (size_t s = 0; s < data.size(); s += chunk) {
        const size_t n = std::min<size_t>(chunk, data.size() - s);
        std::vector<const LabeledExample*> ptrs(n);
        for (size_t i = 0; i < n; ++i) ptrs[i] = &data[s + i];
        out.middleRows(static_cast<Eigen::Index>(s), n) = state_.teacher->logits(
            to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch));
      }
      return out;
    }();
  std::vector<Mat> pool_logits;
  if (multi_active && !cfg_.augment_hflip)
    for (const auto& teacher : state_.teacher_pool) {
      Mat out(static_cast<Eigen::Index>(data.size()), teacher.head.out_dim());
      const int chunk = cfg_.batch_size;
      for (size_t s = 0; s < data.size(); s += chunk) {
        const size_t n = std::min<size_t>(chunk, data.size() - s);
        std::vector<const LabeledExample*> ptrs(n);
        for (size_t i = 0; i < n; ++i) ptrs[i] = &data[s + i];
        out.middleRows(static_cast<Eigen::Index>(s), n) = teacher.logits(
            to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch));
      }
      pool_logits.push_back(std::move(out));
    }

  AdamOptimizer adam(cfg_.learning_rate);
  adam.attach(model.trainable(/*unfreeze_old=*/!flags_.freeze_old,
                              /*include_old_transforms=*/!cfg_.freeze_old_transforms));

  Rng shuffle_rng(derive_seed(cfg_.seed, "shuffle:" + tag + ":round" +
                                             std::to_string(state_.round)));
  Rng aug_rng(derive_seed(cfg_.seed, "augment:" + tag + ":round" +
                                         std::to_string(state_.round)));

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<LossBreakdown> epoch_means;
  last_steps_.clear();
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    shuffle_rng.shuffle(order.data(), order.size());
    LossBreakdown sum;
    int steps = 0;

    for (size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const size_t n = std::min<size_t>(cfg_.batch_size, order.size() - start);
      std::vector<const LabeledExample*> ptrs(n);
      std::vector<int> batch_targets(n);
      std::vector<bool> flips(n, false);
      for (size_t i = 0; i < n; ++i) {
        const int idx = order[start + i];
        ptrs[i] = &data[idx];
        batch_targets[i] = targets[idx];
        if (cfg_.augment_hflip) flips[i] = aug_rng.uniform() < 0.5;
      }

      BatchInput in;
      in.X = to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch,
                           cfg_.augment_hflip ? &flips : nullptr);
      in.Y = onehot(batch_targets, logits);

      if (use_fused && precompute) {
        in.old_feats.resize(t - 1);
        for (int k = 0; k + 1 < t; ++k) {
          Mat f(static_cast<Eigen::Index>(n), old_feats[k].cols());
          for (size_t i = 0; i < n; ++i) f.row(i) = old_feats[k].row(order[start + i]);
          in.old_feats[k] = std::move(f);
        }
      }
      if (teacher_active) {
        if (cfg_.augment_hflip) {
          in.teacher_logits = state_.teacher->logits(in.X);
        } else {
          in.teacher_logits.resize(static_cast<Eigen::Index>(n), teacher_logits.cols());
          for (size_t i = 0; i < n; ++i)
            in.teacher_logits.row(i) = teacher_logits.row(order[start + i]);
        }
      } else if (multi_active) {
        for (size_t ti = 0; ti < state_.teacher_pool.size(); ++ti) {
          if (cfg_.augment_hflip) {
            in.pool_logits.push_back(state_.teacher_pool[ti].logits(in.X));
          } else {
            Mat z(static_cast<Eigen::Index>(n), pool_logits[ti].cols());
            for (size_t i = 0; i < n; ++i) z.row(i) = pool_logits[ti].row(order[start + i]);
            in.pool_logits.push_back(std::move(z));
          }
        }
      }

      const LossBreakdown lb = batch_pass(in, /*with_grads=*/true);
      adam.step();
      last_steps_.push_back(lb);
      sum.distillation += lb.distillation;
      sum.ce_aux += lb.ce_aux;
      sum.aux_combined += lb.aux_combined;
      sum.fused_ce += lb.fused_ce;
      sum.total += lb.total;
      ++steps;
    }

    LossBreakdown mean{sum.distillation / steps, sum.ce_aux / steps,
                       sum.aux_combined / steps, sum.fused_ce / steps,
                       sum.total / steps};
    epoch_means.push_back(mean);
    if (mean.total < best - 1e-5) {
      best = mean.total;
      since_best = 0;
    } else if (++since_best >= cfg_.patience) {
      break;
    }
  }
  return epoch_means;
}

std::vector<LossBreakdown> Engine::train_round_joint(
    const std::vector<LabeledExample>& round_data) {
  return train_phase(round_data, cfg_.max_epochs, "joint");
}

void Engine::prune_current() {
  auto& model = state_.model;
  if (!flags_.mask || !model.current().masked())
    throw std::logic_error("prune_current: current extractor carries no masks");
  const FeatureExtractor before = model.current();
  last_masks_ = binarize_masks(before, cfg_.adaptive_threshold_scale);
  FeatureExtractor pruned = structural_prune(before, last_masks_);

  const auto& keep_last = last_masks_.keep.back();
  model.transforms.back() = shrink_dense_columns(model.transforms.back(), keep_last);
  model.aux_head = shrink_dense_columns(model.aux_head, keep_last);
  model.extractors.back() = std::move(pruned);
  last_prune_ = prune_stats(before, model.current());
  pruned_this_round_ = true;
}

std::vector<LossBreakdown> Engine::finetune_pruned(
    const std::vector<LabeledExample>& round_data) {
  if (!pruned_this_round_)
    throw std::logic_error("finetune_pruned: called before structural pruning");
  return train_phase(round_data, cfg_.finetune_epochs, "finetune");
}

Mat Engine::forward_features_chunked(
    const FeatureExtractor& ext, const std::vector<LabeledExample>& examples) const {
  Mat out(static_cast<Eigen::Index>(examples.size()), ext.output_dim());
  const size_t chunk = static_cast<size_t>(cfg_.batch_size);
  for (size_t s = 0; s < examples.size(); s += chunk) {
    const size_t n = std::min(chunk, examples.size() - s);
    std::vector<const LabeledExample*> ptrs(n);
    for (size_t i = 0; i < n; ++i) ptrs[i] = &examples[s + i];
    out.middleRows(static_cast<Eigen::Index>(s), n) = ext.forward(
        to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch));
  }
  return out;
}

Mat Engine::fused_features_chunked(const FusionClassifier& model,
                                   const std::vector<LabeledExample>& examples) const {
  Mat out;
  const size_t chunk = static_cast<size_t>(cfg_.batch_size);
  for (size_t s = 0; s < examples.size(); s += chunk) {
    const size_t n = std::min(chunk, examples.size() - s);
    std::vector<const LabeledExample*> ptrs(n);
    for (size_t i = 0; i < n; ++i) ptrs[i] = &examples[s + i];
    const Mat f = model.fused_features(
        to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch));
    if (out.size() == 0) out.resize(static_cast<Eigen::Index>(examples.size()), f.cols());
    out.middleRows(static_cast<Eigen::Index>(s), n) = f;
  }
  return out;
}

void Engine::update_exemplars(const RoundData& data) {
  std::vector<ClassCandidates> cands;
  for (int label : data.new_classes) {
    ClassCandidates c;
    c.label = label;
    for (const auto& e : data.train)
      if (e.label == label) c.examples.push_back(e);
    if (c.examples.empty())
      throw std::invalid_argument("update_exemplars: class without training data");
    c.features = forward_features_chunked(state_.model.current(), c.examples);
    cands.push_back(std::move(c));
  }
  update_memory(state_.memory, cands,
                static_cast<int>(state_.learned_classes.size()));
}

std::vector<std::pair<int, Vec>> Engine::nme_class_means() const {
  return class_means_from(state_.memory, [this](const std::vector<LabeledExample>& ex) {
    return fused_features_chunked(state_.model, ex);
  });
}

std::vector<int> Engine::nme_predict(const std::vector<LabeledExample>& batch) const {
  const auto means = nme_class_means();
  Mat q = fused_features_chunked(state_.model, batch);
  normalize_rows(q);
  return nearest_mean(q, means);
}

RoundReport Engine::evaluate(const RoundData& data) const {
  RoundReport r;
  r.round = state_.round;
  r.new_classes = data.new_classes;
  r.seen_class_count = static_cast<int>(state_.learned_classes.size());

  std::vector<int> labels(data.test_seen.size());
  for (size_t i = 0; i < data.test_seen.size(); ++i) labels[i] = data.test_seen[i].label;

  const auto preds = nme_predict(data.test_seen);
  r.acc_nme = overall_accuracy(preds, labels);

  // head-softmax secondary metric
  {
    std::vector<int> head_preds(data.test_seen.size());
    const size_t chunk = static_cast<size_t>(cfg_.batch_size);
    for (size_t s = 0; s < data.test_seen.size(); s += chunk) {
      const size_t n = std::min(chunk, data.test_seen.size() - s);
      std::vector<const LabeledExample*> ptrs(n);
      for (size_t i = 0; i < n; ++i) ptrs[i] = &data.test_seen[s + i];
      const FeatureMap X =
          to_featuremap(ptrs, backbone_.in_h, backbone_.in_w, backbone_.in_ch);
      const Mat logits = state_.model.fused_head ? state_.model.fused_logits(X)
                                                 : state_.model.aux_logits(X);
      for (size_t i = 0; i < n; ++i) {
        Eigen::Index arg;
        logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
        head_preds[s + i] = state_.learned_classes[arg];
      }
    }
    r.acc_head = overall_accuracy(head_preds, labels);
  }

  // per-introduction-round subsets
  std::map<int, int> round_of_label;
  for (size_t i = 0; i < state_.learned_classes.size(); ++i)
    round_of_label[state_.learned_classes[i]] = state_.logit_round[i];
  r.subset_acc.assign(state_.round, 0.0);
  for (int k = 1; k <= state_.round; ++k) {
    int correct = 0, total = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (round_of_label.at(labels[i]) != k) continue;
      ++total;
      correct += preds[i] == labels[i];
    }
    r.subset_acc[k - 1] = total > 0 ? static_cast<double>(correct) / total : 0.0;
  }

  r.param_count = state_.model.deployed_param_count();
  r.size_ratio = static_cast<double>(r.param_count) / state_.backbone_params;
  r.new_extractor_params = state_.model.current().param_count();
  r.new_transform_params =
      state_.model.uses_transforms() ? state_.model.transforms.back().param_count() : 0;
  r.head_params = state_.model.fused_head ? state_.model.fused_head->param_count()
                                          : state_.model.aux_head.param_count();
  r.prune = pruned_this_round_
                ? last_prune_
                : prune_stats(state_.model.current(), state_.model.current());
  return r;
}

RoundReport Engine::run_round(const RoundData& data) {
  if (data.train.empty()) throw std::invalid_argument("run_round: empty round data");
  for (const auto& e : data.train)
    if (std::find(data.new_classes.begin(), data.new_classes.end(), e.label) ==
        data.new_classes.end())
      throw std::invalid_argument("run_round: training example of a foreign class");

  begin_round(data.new_classes);

  std::vector<LabeledExample> round_data = state_.memory.total_stored() > 0
                                               ? state_.memory.all()
                                               : std::vector<LabeledExample>{};
  round_data.insert(round_data.end(), data.train.begin(), data.train.end());

  auto joint = train_round_joint(round_data);
  std::vector<LossBreakdown> finetune;
  if (flags_.mask) {
    prune_current();
    finetune = finetune_pruned(round_data);
  }

  // freeze the finished extractor and snapshot the individual classifier;
  // parameters round-trip through f32 so checkpoints reproduce them exactly
  for (auto& p : state_.model.all_params())
    for (size_t j = 0; j < p.size; ++j)
      p.value[j] = static_cast<double>(static_cast<float>(p.value[j]));
  if (flags_.fusion) state_.model.current().set_frozen(true);

  AuxModel snapshot{state_.model.current(), state_.model.aux_head};
  if (flags_.multi_teacher)
    state_.teacher_pool.push_back(snapshot);
  state_.teacher = std::move(snapshot);

  update_exemplars(data);

  RoundReport r = evaluate(data);
  r.joint_epoch_loss = std::move(joint);
  r.finetune_epoch_loss = std::move(finetune);
  return r;
}

ProbeReport Engine::probe_extractor(int k, bool keep_only,
                                    const std::vector<LabeledExample>& test_seen) const {
  const auto& model = state_.model;
  if (!model.fused_head)
    throw std::logic_error("probe_extractor: model has no fusion pathway");
  const int t = model.extractor_count();
  if (k < 1 || k > t) throw std::invalid_argument("probe_extractor: bad extractor index");

  FusionClassifier mod;
  mod.mode = model.mode;
  for (int i = 0; i < t; ++i) {
    const bool keep = keep_only ? (i == k - 1 || i == t - 1) : (i != k - 1);
    if (!keep) continue;
    mod.extractors.push_back(model.extractors[i]);
    if (model.uses_transforms()) mod.transforms.push_back(model.transforms[i]);
  }
  if (mod.extractors.empty())
    throw std::invalid_argument("probe_extractor: no extractors left");
  mod.aux_head = model.aux_head;

  // the fused head is re-fit on exemplars only; NME needs no head but the
  // secondary head metric does
  int fdim = 0;
  for (size_t i = 0; i < mod.extractors.size(); ++i)
    fdim += model.uses_transforms() ? mod.transforms[i].out_dim()
                                    : mod.extractors[i].output_dim();
  if (mod.mode == FusionMode::kAverage)
    fdim = model.uses_transforms() ? mod.transforms.front().out_dim()
                                   : mod.extractors.front().output_dim();
  const int logits = model.logit_count();
  mod.fused_head = Dense(fdim, logits, derive_seed(cfg_.seed, "probe_head"));

  const auto exemplars = state_.memory.all();
  Mat F = fused_features_chunked(mod, exemplars);
  std::map<int, int> logit_of_label;
  for (size_t i = 0; i < state_.learned_classes.size(); ++i)
    logit_of_label[state_.learned_classes[i]] = static_cast<int>(i);
  std::vector<int> ex_targets(exemplars.size());
  for (size_t i = 0; i < exemplars.size(); ++i)
    ex_targets[i] = logit_of_label.at(exemplars[i].label);
  const Mat Y = onehot(ex_targets, logits);

  AdamOptimizer adam(1e-2);
  std::vector<ParamView> head_params;
  mod.fused_head->collect_params("probe_head", head_params);
  adam.attach(head_params);
  for (int step = 0; step < 300; ++step) {
    mod.fused_head->zero_grads();
    Mat dlogits;
    cross_entropy_grad(mod.fused_head->forward(F), Y, dlogits);
    mod.fused_head->backward(F, dlogits);
    adam.step();
  }

  ProbeReport pr;
  pr.k = k;
  pr.keep_only = keep_only;

  const auto means = class_means_from(
      state_.memory,
      [&](const std::vector<LabeledExample>& ex) { return fused_features_chunked(mod, ex); });
  Mat q = fused_features_chunked(mod, test_seen);
  normalize_rows(q);
  const auto preds = nearest_mean(q, means);

  std::vector<int> labels(test_seen.size());
  for (size_t i = 0; i < test_seen.size(); ++i) labels[i] = test_seen[i].label;
  pr.acc_nme = overall_accuracy(preds, labels);

  std::map<int, int> round_of_label;
  for (size_t i = 0; i < state_.learned_classes.size(); ++i)
    round_of_label[state_.learned_classes[i]] = state_.logit_round[i];
  pr.subset_acc.assign(state_.round, 0.0);
  for (int kk = 1; kk <= state_.round; ++kk) {
    int correct = 0, total = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (round_of_label.at(labels[i]) != kk) continue;
      ++total;
      correct += preds[i] == labels[i];
    }
    pr.subset_acc[kk - 1] = total > 0 ? static_cast<double>(correct) / total : 0.0;
  }

  // head accuracy with the re-fit head
  {
    const Mat ql = mod.fused_head->forward(fused_features_chunked(mod, test_seen));
    std::vector<int> head_preds(test_seen.size());
    for (Eigen::Index i = 0; i < ql.rows(); ++i) {
      Eigen::Index arg;
      ql.row(i).maxCoeff(&arg);
      head_preds[i] = state_.learned_classes[arg];
    }
    pr.acc_head_refit = overall_accuracy(head_preds, labels);
  }
  return pr;
}

}  // namespace cifuse
