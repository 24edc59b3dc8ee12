// SPDX-License-Identifier: Apache-2.0
/**
 * @file   objectives.cpp
 * @brief  Loss functions for MLM pre-training and co-distillation.
 */
#include "ctcd/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace ctcd {

namespace {

template <typename Scalar>
Var<Scalar> flatten(const Var<Scalar> &logits) {
  const Shape &s = logits.shape();
  if (s.size() == 2) return logits;
  if (s.size() != 3) throw std::invalid_argument("logits must be rank 2 or 3, got " + shapeToString(s));
  return reshape(logits, {s[0] * s[1], s[2]});
}

std::vector<Index> softRows(const MaskedBatch &batch, SoftPositions positions) {
  if (positions == SoftPositions::MaskedOnly) return batch.maskedRows();
  std::vector<Index> rows;
  for (std::size_t i = 0; i < batch.attention_mask.size(); ++i)
    if (batch.attention_mask[i]) rows.push_back(static_cast<Index>(i));
  return rows;
}

template <typename Scalar>
Var<Scalar> zero() {
  return constant(Tensor<Scalar>::scalar(Scalar(0)));
}

/// Sum of weighted terms, skipping zero weights. An empty sum is a constant 0.
template <typename Scalar>
Var<Scalar> weightedSum(std::initializer_list<std::pair<double, std::function<Var<Scalar>()>>> terms) {
  Var<Scalar> total;
  bool any = false;
  for (const auto &[weight, term] : terms) {
    if (weight == 0.0) continue;
    Var<Scalar> t = scale(term(), static_cast<Scalar>(weight));
    total = any ? add(total, t) : t;
    any = true;
  }
  return any ? total : zero<Scalar>();
}

}  // namespace

void DistillConfig::validate() const {
  if (!(tau > 0) || !std::isfinite(tau)) throw std::invalid_argument("temperature must be positive");
  for (double w : {alpha_h, alpha_s, beta_h, beta_s, community_weight_1, community_weight_2})
    if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be non-negative");
}

template <typename Scalar>
Var<Scalar> hardLoss(const Var<Scalar> &logits, const MaskedBatch &batch) {
  const auto rows = batch.maskedRows();
  if (rows.empty()) throw std::invalid_argument("empty mask");
  const auto targets = batch.maskedTargets();
  const Var<Scalar> picked = gatherRows(flatten(logits), rows);
  return scale(mean(pickPerRow(logSoftmax(picked), targets)), Scalar(-1));
}

template <typename Scalar>
Var<Scalar> softLoss(const Var<Scalar> &reference, const Var<Scalar> &learner, const DistillConfig &cfg) {
  if (reference.shape() != learner.shape())
    throw std::invalid_argument("soft loss shape mismatch: " + shapeToString(reference.shape()) + " vs " +
                                shapeToString(learner.shape()));
  if (reference.requiresGrad()) throw std::invalid_argument("reference must be detached");
  if (!(cfg.tau > 0)) throw std::invalid_argument("temperature must be positive");
  const Var<Scalar> ref = flatten(reference);
  const Var<Scalar> lrn = flatten(learner);
  const auto tau = static_cast<Scalar>(cfg.tau);

  const Var<Scalar> ref_logp = logSoftmax(ref, tau);
  Tensor<Scalar> ref_p(ref_logp.shape());
  ref_p.matrix() = ref_logp.matrix().array().exp().matrix();
  const Var<Scalar> terms = mul(constant(std::move(ref_p)), sub(ref_logp, logSoftmax(lrn, tau)));
  const Scalar factor = (cfg.tau_squared ? tau * tau : Scalar(1)) / static_cast<Scalar>(ref.shape()[0]);
  return scale(sum(terms), factor);
}

template <typename Scalar>
Var<Scalar> softLoss(const Var<Scalar> &reference, const Var<Scalar> &learner, const MaskedBatch &batch,
                     const DistillConfig &cfg) {
  if (reference.shape() != learner.shape())
    throw std::invalid_argument("soft loss shape mismatch: " + shapeToString(reference.shape()) + " vs " +
                                shapeToString(learner.shape()));
  if (reference.requiresGrad()) throw std::invalid_argument("reference must be detached");
  const auto rows = softRows(batch, cfg.positions);
  if (rows.empty()) throw std::invalid_argument("empty mask");
  return softLoss(gatherRows(flatten(reference), rows), gatherRows(flatten(learner), rows), cfg);
}

template <typename Scalar>
Var<Scalar> kdLoss(const Var<Scalar> &student_logits, const Var<Scalar> &teacher_logits, const MaskedBatch &batch,
                   const DistillConfig &cfg) {
  return weightedSum<Scalar>({
      {cfg.alpha_h, [&] { return hardLoss(student_logits, batch); }},
      {cfg.alpha_s, [&] { return softLoss(stopGradient(teacher_logits), student_logits, batch, cfg); }},
  });
}

template <typename Scalar>
Var<Scalar> reversedKdLoss(const Var<Scalar> &teacher_logits, const Var<Scalar> &student_logits,
                           const MaskedBatch &batch, const DistillConfig &cfg) {
  return weightedSum<Scalar>({
      {cfg.beta_h, [&] { return hardLoss(teacher_logits, batch); }},
      {cfg.beta_s, [&] { return softLoss(stopGradient(student_logits), teacher_logits, batch, cfg); }},
  });
}

template <typename Scalar>
LossAndGradients<Scalar> ctcdLoss(const Var<Scalar> &student_logits, const Var<Scalar> &teacher_logits,
                                  const MaskedBatch &batch, const DistillConfig &cfg) {
  cfg.validate();
  const Var<Scalar> loss = add(kdLoss(student_logits, teacher_logits, batch, cfg),
                               reversedKdLoss(teacher_logits, student_logits, batch, cfg));
  return {loss, backward(loss)};
}

template <typename Scalar>
LossAndGradients<Scalar> communityLoss(const Var<Scalar> &student1_logits, const Var<Scalar> &student2_logits,
                                       const Var<Scalar> &frozen_teacher_logits, const MaskedBatch &batch,
                                       const DistillConfig &cfg) {
  cfg.validate();
  const Var<Scalar> teacher = stopGradient(frozen_teacher_logits);
  const Var<Scalar> pair = add(kdLoss(student1_logits, student2_logits, batch, cfg),
                               reversedKdLoss(student2_logits, student1_logits, batch, cfg));
  const Var<Scalar> from_teacher = weightedSum<Scalar>({
      {cfg.community_weight_1, [&] { return softLoss(teacher, student1_logits, batch, cfg); }},
      {cfg.community_weight_2, [&] { return softLoss(teacher, student2_logits, batch, cfg); }},
  });
  const Var<Scalar> loss = add(pair, from_teacher);
  return {loss, backward(loss)};
}

#define CTCD_INSTANTIATE_OBJECTIVES(S)                                                                       \
  template Var<S> hardLoss<S>(const Var<S> &, const MaskedBatch &);                                          \
  template Var<S> softLoss<S>(const Var<S> &, const Var<S> &, const DistillConfig &);                        \
  template Var<S> softLoss<S>(const Var<S> &, const Var<S> &, const MaskedBatch &, const DistillConfig &);   \
  template Var<S> kdLoss<S>(const Var<S> &, const Var<S> &, const MaskedBatch &, const DistillConfig &);     \
  template Var<S> reversedKdLoss<S>(const Var<S> &, const Var<S> &, const MaskedBatch &,                     \
                                    const DistillConfig &);                                                  \
  template LossAndGradients<S> ctcdLoss<S>(const Var<S> &, const Var<S> &, const MaskedBatch &,              \
                                           const DistillConfig &);                                           \
  template LossAndGradients<S> communityLoss<S>(const Var<S> &, const Var<S> &, const Var<S> &,              \
                                                const MaskedBatch &, const DistillConfig &);

CTCD_INSTANTIATE_OBJECTIVES(float)
CTCD_INSTANTIATE_OBJECTIVES(double)

}  // namespace ctcd
