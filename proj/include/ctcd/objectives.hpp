// SPDX-License-Identifier: Apache-2.0
/**
 * @file   objectives.hpp
 * @brief  Hard MLM loss, tempered KL soft loss and the distillation objectives
 *         built from them.
 *
 * The reference side of every soft loss must already be cut from the graph
 * (stopGradient or a frozen binding); softLoss refuses anything else. Terms
 * whose weight is zero are left out of the graph entirely.
 */
#ifndef CTCD_OBJECTIVES_HPP
#define CTCD_OBJECTIVES_HPP

#include "ctcd/autodiff.hpp"
#include "ctcd/data.hpp"

namespace ctcd {

enum class SoftPositions { MaskedOnly, AllPositions };

struct DistillConfig {
  double tau = 2.0;
  double alpha_h = 1.0;  ///< student hard weight
  double alpha_s = 1.0;  ///< student soft weight (teacher -> student)
  double beta_h = 1.0;   ///< teacher hard weight
  double beta_s = 1.0;   ///< teacher soft weight (student -> teacher)
  SoftPositions positions = SoftPositions::MaskedOnly;
  bool tau_squared = false;
  /// Weights of the frozen-teacher terms in the community objective.
  double community_weight_1 = 1.0;
  double community_weight_2 = 1.0;

  void validate() const;
};

template <typename Scalar>
struct LossAndGradients {
  Var<Scalar> loss;
  GradientMap<Scalar> grads;
};

/// Mean masked-token cross-entropy of [batch, seq, vocab] logits at temperature 1.
template <typename Scalar>
Var<Scalar> hardLoss(const Var<Scalar> &logits, const MaskedBatch &batch);

/// Mean over rows of KL(p_ref^tau || p_learner^tau) for rank-2 logits.
template <typename Scalar>
Var<Scalar> softLoss(const Var<Scalar> &reference, const Var<Scalar> &learner, const DistillConfig &cfg);

/// KL over the positions of `batch` selected by cfg.positions.
template <typename Scalar>
Var<Scalar> softLoss(const Var<Scalar> &reference, const Var<Scalar> &learner, const MaskedBatch &batch,
                     const DistillConfig &cfg);

/// alpha_h * hard(student) + alpha_s * KL(StopG(teacher) || student).
template <typename Scalar>
Var<Scalar> kdLoss(const Var<Scalar> &student_logits, const Var<Scalar> &teacher_logits, const MaskedBatch &batch,
                   const DistillConfig &cfg);

/// beta_h * hard(teacher) + beta_s * KL(StopG(student) || teacher).
template <typename Scalar>
Var<Scalar> reversedKdLoss(const Var<Scalar> &teacher_logits, const Var<Scalar> &student_logits,
                           const MaskedBatch &batch, const DistillConfig &cfg);

/// kdLoss + reversedKdLoss, with gradients for both models.
template <typename Scalar>
LossAndGradients<Scalar> ctcdLoss(const Var<Scalar> &student_logits, const Var<Scalar> &teacher_logits,
                                  const MaskedBatch &batch, const DistillConfig &cfg);

/// Two students co-distilling, each also learning from a frozen teacher.
/// student1 plays the student role and student2 the teacher role of ctcdLoss.
template <typename Scalar>
LossAndGradients<Scalar> communityLoss(const Var<Scalar> &student1_logits, const Var<Scalar> &student2_logits,
                                       const Var<Scalar> &frozen_teacher_logits, const MaskedBatch &batch,
                                       const DistillConfig &cfg);

}  // namespace ctcd

#endif  // CTCD_OBJECTIVES_HPP
