// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Pre-norm transformer encoder with MLM and classification heads.
 *
 * Parameters live in plain tensors (ModelParameters). A forward pass first
 * binds them into graph leaves: trainable leaves are keyed "<role>/<name>" in
 * the GradientMap, frozen bindings are constants and never get gradients.
 */
#ifndef CTCD_MODEL_HPP
#define CTCD_MODEL_HPP

#include "ctcd/autodiff.hpp"
#include "ctcd/data.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ctcd {

struct ModelConfig {
  Index num_layers = 2;
  Index hidden_dim = 128;
  Index num_heads = 4;
  Index ffn_dim = 256;
  Index vocab_size = 64;
  Index max_seq_len = 32;
  Index num_classes = 2;
  bool tie_embeddings = false;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an inconsistent config.
  void validate() const;
  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

/// Closed-form parameter count.
Index parameterCount(const ModelConfig &config);

template <typename Scalar>
struct EncoderLayerParams {
  Tensor<Scalar> attn_norm_scale, attn_norm_shift;
  Tensor<Scalar> query_w, query_b, key_w, key_b, value_w, value_b, output_w, output_b;
  Tensor<Scalar> ffn_norm_scale, ffn_norm_shift;
  Tensor<Scalar> ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
};

template <typename Scalar>
struct ModelParameters {
  ModelConfig config;
  std::string role = "model";

  Tensor<Scalar> token_embedding, position_embedding;
  std::vector<EncoderLayerParams<Scalar>> layers;
  Tensor<Scalar> final_norm_scale, final_norm_shift;
  Tensor<Scalar> mlm_w, mlm_b;  // mlm_w unused when embeddings are tied
  Tensor<Scalar> classifier_w, classifier_b;

  /// Visits every tensor with its stable name, in a fixed order.
  void forEach(const std::function<void(const std::string &, Tensor<Scalar> &)> &fn);
  void forEach(const std::function<void(const std::string &, const Tensor<Scalar> &)> &fn) const;
  std::string parameterId(const std::string &name) const { return role + "/" + name; }
  Index count() const;
  bool allFinite() const;

  friend bool operator==(const ModelParameters &a, const ModelParameters &b) {
    bool same = a.config == b.config;
    std::vector<const Tensor<Scalar> *> ta, tb;
    a.forEach([&](const std::string &, const Tensor<Scalar> &t) { ta.push_back(&t); });
    b.forEach([&](const std::string &, const Tensor<Scalar> &t) { tb.push_back(&t); });
    same = same && ta.size() == tb.size();
    for (std::size_t i = 0; same && i < ta.size(); ++i) same = *ta[i] == *tb[i];
    return same;
  }
};

/// Truncated normal(0, 0.02) weights clipped at two standard deviations,
/// zero biases and shifts, unit norm scales. Deterministic in config.seed.
template <typename Scalar>
ModelParameters<Scalar> initModel(const ModelConfig &config, std::string role = "model");

/// Re-draws the classification head from `seed`.
template <typename Scalar>
void resetClassifier(ModelParameters<Scalar> &params, std::uint64_t seed);

enum class Binding { Trainable, Frozen };

template <typename Scalar>
struct BoundLayer {
  Var<Scalar> attn_norm_scale, attn_norm_shift;
  Var<Scalar> query_w, query_b, key_w, key_b, value_w, value_b, output_w, output_b;
  Var<Scalar> ffn_norm_scale, ffn_norm_shift;
  Var<Scalar> ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
};

/// Parameters bound into one graph.
template <typename Scalar>
struct BoundModel {
  ModelConfig config;
  Var<Scalar> token_embedding, position_embedding;
  std::vector<BoundLayer<Scalar>> layers;
  Var<Scalar> final_norm_scale, final_norm_shift;
  Var<Scalar> mlm_w, mlm_b;
  Var<Scalar> classifier_w, classifier_b;
};

template <typename Scalar>
BoundModel<Scalar> bind(const ModelParameters<Scalar> &params, Binding binding = Binding::Trainable);

/// Final-layer hidden states [batch*seq, hidden] after the closing layer norm.
template <typename Scalar>
Var<Scalar> encode(const BoundModel<Scalar> &model, std::span<const Index> token_ids,
                   std::span<const std::uint8_t> attention_mask, Index batch, Index seq_len);

/// Logits of shape [batch, seq, vocab].
template <typename Scalar>
Var<Scalar> forwardMlmLogits(const BoundModel<Scalar> &model, const MaskedBatch &batch);
/// Logits of shape [batch, num_classes] read from position 0 ([CLS]).
template <typename Scalar>
Var<Scalar> forwardClassLogits(const BoundModel<Scalar> &model, const TokenBatch &batch);

template <typename Scalar>
Var<Scalar> forwardMlmLogits(const ModelParameters<Scalar> &params, const MaskedBatch &batch) {
  return forwardMlmLogits(bind(params), batch);
}
template <typename Scalar>
Var<Scalar> forwardClassLogits(const ModelParameters<Scalar> &params, const TokenBatch &batch) {
  return forwardClassLogits(bind(params), batch);
}

// Checkpoints -------------------------------------------------------------------

/// Element width in bytes: 4 for single, 8 for double precision.
template <typename Scalar>
constexpr std::uint32_t precisionTag() {
  return sizeof(Scalar);
}

template <typename Scalar>
void saveCheckpoint(const ModelParameters<Scalar> &params, const std::filesystem::path &path);
template <typename Scalar>
ModelParameters<Scalar> loadCheckpoint(const std::filesystem::path &path);
/// Reads only the precision tag of a checkpoint.
std::uint32_t checkpointPrecision(const std::filesystem::path &path);

}  // namespace ctcd

#endif  // CTCD_MODEL_HPP
