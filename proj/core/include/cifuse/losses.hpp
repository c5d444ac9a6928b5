#pragma once

#include <vector>

#include "cifuse/tensor.hpp"

namespace cifuse {

// One training step's loss components. The auxiliary classifier is trained
// with ce_aux + lambda1 * distillation, the whole model with
// fused_ce + lambda2 * aux_combined.
struct LossBreakdown {
  double distillation = 0.0;  // L_d
  double ce_aux = 0.0;        // L_o
  double aux_combined = 0.0;  // L_s = L_o + lambda1 * L_d
  double fused_ce = 0.0;      // L_f
  double total = 0.0;         // L = L_f + lambda2 * L_s
};

// Row-wise softmax at temperature T.
Mat softmax_rows(const Mat& logits, double temperature = 1.0);

// Temperature-softened cross entropy between the teacher's distribution over
// the old classes and the student's distribution over its first `old_classes`
// logits; mean over the batch. The student's new-class logits do not enter
// the softmax.
double distillation_loss(const Mat& teacher_logits, const Mat& student_logits,
                         int old_classes, double temperature);

// Same value; also writes d(loss)/d(student_logits), zero beyond the old
// block.
double distillation_loss_grad(const Mat& teacher_logits, const Mat& student_logits,
                              int old_classes, double temperature, Mat& dstudent);

// Plain softmax cross entropy against one-hot labels, mean over the batch.
double cross_entropy(const Mat& logits, const Mat& onehot);
double cross_entropy_grad(const Mat& logits, const Mat& onehot, Mat& dlogits);

double combined_aux_loss(double ce_aux, double distillation, double lambda1);
double total_loss(double fused_ce, double aux_combined, double lambda2);

// Mean over k of distillation_loss(teacher_k, student, u_k, T). Teacher k
// covers the first u_k student logits; the u_k must be strictly increasing.
double multi_teacher_distillation_loss(const std::vector<Mat>& teacher_logit_sets,
                                       const Mat& student_logits, double temperature);
double multi_teacher_distillation_loss_grad(const std::vector<Mat>& teacher_logit_sets,
                                            const Mat& student_logits,
                                            double temperature, Mat& dstudent);

}  // namespace cifuse
