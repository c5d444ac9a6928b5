#include "cifuse/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace cifuse {

Mat softmax_rows(const Mat& logits, double temperature) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Vec row = logits.row(i).transpose() / temperature;
    const double m = row.maxCoeff();
    Vec ex = (row.array() - m).exp();
    p.row(i) = (ex / ex.sum()).transpose();
  }
  return p;
}

namespace {

void check_distill_args(const Mat& teacher, const Mat& student, int old_classes,
                        double temperature) {
  if (old_classes < 1)
    throw std::invalid_argument("distillation_loss: no old classes to distill");
  if (temperature < 1.0)
    throw std::invalid_argument("distillation_loss: temperature must be >= 1");
  if (teacher.cols() != old_classes)
    throw std::invalid_argument("distillation_loss: teacher logit count mismatch");
  if (student.cols() < old_classes)
    throw std::invalid_argument("distillation_loss: student has too few logits");
  if (teacher.rows() != student.rows())
    throw std::invalid_argument("distillation_loss: batch size mismatch");
}

}  // namespace

double distillation_loss(const Mat& teacher_logits, const Mat& student_logits,
                         int old_classes, double temperature) {
  check_distill_args(teacher_logits, student_logits, old_classes, temperature);
  const Mat p = softmax_rows(teacher_logits, temperature);
  const Mat ph = softmax_rows(student_logits.leftCols(old_classes), temperature);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (int j = 0; j < old_classes; ++j) loss -= p(i, j) * std::log(ph(i, j));
  return loss / p.rows();
}

double distillation_loss_grad(const Mat& teacher_logits, const Mat& student_logits,
                              int old_classes, double temperature, Mat& dstudent) {
  check_distill_args(teacher_logits, student_logits, old_classes, temperature);
  const Mat p = softmax_rows(teacher_logits, temperature);
  const Mat ph = softmax_rows(student_logits.leftCols(old_classes), temperature);
  const auto n = p.rows();
  double loss = 0.0;
  dstudent = Mat::Zero(n, student_logits.cols());
  const double scale = 1.0 / (n * temperature);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < old_classes; ++j) {
      loss -= p(i, j) * std::log(ph(i, j));
      dstudent(i, j) = (ph(i, j) - p(i, j)) * scale;
    }
  return loss / n;
}

namespace {

void check_onehot(const Mat& logits, const Mat& onehot) {
  if (logits.rows() != onehot.rows() || logits.cols() != onehot.cols())
    throw std::invalid_argument("cross_entropy: label shape mismatch");
  if (logits.rows() == 0) throw std::invalid_argument("cross_entropy: empty batch");
  for (Eigen::Index i = 0; i < onehot.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < onehot.cols(); ++k) {
      const double y = onehot(i, k);
      if (y != 0.0 && y != 1.0)
        throw std::invalid_argument("cross_entropy: labels must be one-hot");
      sum += y;
    }
    if (sum != 1.0) throw std::invalid_argument("cross_entropy: labels must be one-hot");
  }
}

}  // namespace

double cross_entropy(const Mat& logits, const Mat& onehot) {
  check_onehot(logits, onehot);
  const Mat p = softmax_rows(logits, 1.0);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      if (onehot(i, k) == 1.0) loss -= std::log(p(i, k));
  return loss / p.rows();
}

double cross_entropy_grad(const Mat& logits, const Mat& onehot, Mat& dlogits) {
  check_onehot(logits, onehot);
  const Mat p = softmax_rows(logits, 1.0);
  dlogits = (p - onehot) / p.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      if (onehot(i, k) == 1.0) loss -= std::log(p(i, k));
  return loss / p.rows();
}

double combined_aux_loss(double ce_aux, double distillation, double lambda1) {
  return ce_aux + lambda1 * distillation;
}

double total_loss(double fused_ce, double aux_combined, double lambda2) {
  return fused_ce + lambda2 * aux_combined;
}

namespace {

void check_teacher_sets(const std::vector<Mat>& teachers, const Mat& student) {
  if (teachers.empty())
    throw std::invalid_argument("multi_teacher_distillation_loss: no teachers");
  Eigen::Index prev = 0;
  for (const auto& t : teachers) {
    if (t.cols() <= prev)
      throw std::invalid_argument(
          "multi_teacher_distillation_loss: teacher blocks must strictly grow");
    if (t.cols() > student.cols())
      throw std::invalid_argument(
          "multi_teacher_distillation_loss: teacher exceeds student logits");
    prev = t.cols();
  }
}

}  // namespace

double multi_teacher_distillation_loss(const std::vector<Mat>& teacher_logit_sets,
                                       const Mat& student_logits,
                                       double temperature) {
  check_teacher_sets(teacher_logit_sets, student_logits);
  double loss = 0.0;
  for (const auto& t : teacher_logit_sets)
    loss += distillation_loss(t, student_logits, static_cast<int>(t.cols()),
                              temperature);
  return loss / teacher_logit_sets.size();
}

double multi_teacher_distillation_loss_grad(const std::vector<Mat>& teacher_logit_sets,
                                            const Mat& student_logits,
                                            double temperature, Mat& dstudent) {
  check_teacher_sets(teacher_logit_sets, student_logits);
  dstudent = Mat::Zero(student_logits.rows(), student_logits.cols());
  double loss = 0.0;
  Mat dterm;
  for (const auto& t : teacher_logit_sets) {
    loss += distillation_loss_grad(t, student_logits, static_cast<int>(t.cols()),
                                   temperature, dterm);
    dstudent += dterm;
  }
  dstudent /= static_cast<double>(teacher_logit_sets.size());
  return loss / teacher_logit_sets.size();
}

}  // namespace cifuse
