// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit and acceptance tests.
#ifndef CTCD_TESTS_SUPPORT_HPP
#define CTCD_TESTS_SUPPORT_HPP

#include "ctcd/model.hpp"
#include "ctcd/objectives.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ctcd::testing {

inline ModelConfig tinyModel(std::uint64_t seed, Index layers = 1, Index hidden = 8, Index vocab = 16) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = hidden;
  c.num_heads = 2;
  c.ffn_dim = 2 * hidden;
  c.vocab_size = vocab;
  c.max_seq_len = 10;
  c.seed = seed;
  return c;
}

/// Random framed sequences masked with rate 0.3.
inline MaskedBatch randomMaskedBatch(std::int32_t vocab, std::size_t batch, std::uint64_t seed,
                                     std::size_t max_content = 6) {
  Rng rng(seed);
  std::vector<MaskedSequence> masked;
  for (std::size_t b = 0; b < batch; ++b) {
    TokenSequence seq{Vocab::kCls};
    const std::size_t len = 2 + uniformIndex(rng, max_content - 1);
    for (std::size_t i = 0; i < len; ++i)
      seq.push_back(Vocab::kFirstContent + static_cast<std::int32_t>(uniformIndex(rng, vocab - Vocab::kFirstContent)));
    seq.push_back(Vocab::kSep);
    masked.push_back(applyMasking(seq, Vocab{vocab}, MaskingOptions{0.3}, rng()));
  }
  return collate(masked);
}

/// Random logits tensor.
template <typename S>
Tensor<S> randomLogits(Shape shape, std::uint64_t seed, double spread = 3.0) {
  Rng rng(seed);
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(spread * (2 * uniform01(rng) - 1));
  return t;
}

/// Copy of `params` with tensor `name` replaced by `value`.
template <typename S>
ModelParameters<S> withTensor(const ModelParameters<S> &params, const std::string &name, const Tensor<S> &value) {
  ModelParameters<S> out = params;
  out.forEach([&](const std::string &n, Tensor<S> &t) {
    if (n == name) t = value;
  });
  return out;
}

template <typename S>
Tensor<S> tensorNamed(const ModelParameters<S> &params, const std::string &name) {
  Tensor<S> out;
  params.forEach([&](const std::string &n, const Tensor<S> &t) {
    if (n == name) out = t;
  });
  return out;
}

/// Worst relative error between the analytic gradient of every tensor of
/// `model` and central differences of `side_loss`, where side_loss receives
/// the perturbed model and evaluates the loss with everything else frozen.
/// Probes up to `probes` coordinates per tensor.
inline double sideGradientError(const ModelParameters<double> &model, const GradientMap<double> &grads,
                                const std::function<double(const ModelParameters<double> &)> &side_loss,
                                Index probes = 3) {
  double worst = 0;
  model.forEach([&](const std::string &name, const Tensor<double> &t) {
    const auto it = grads.find(model.parameterId(name));
    const Tensor<double> analytic = it == grads.end() ? Tensor<double>(t.shape()) : it->second;
    std::vector<Index> coords;
    for (Index i = 0; i < t.size() && static_cast<Index>(coords.size()) < probes; i += std::max<Index>(1, t.size() / probes))
      coords.push_back(i);
    const double err = compareWithFiniteDifferences<double>(
        analytic, [&](const Tensor<double> &p) { return side_loss(withTensor(model, name, p)); }, t, 1e-5, coords);
    worst = std::max(worst, err);
  });
  return worst;
}

/// Keys of a gradient map that start with "<role>/".
template <typename S>
std::size_t keysWithRole(const GradientMap<S> &grads, const std::string &role) {
  std::size_t n = 0;
  for (const auto &[k, v] : grads) n += k.rfind(role + "/", 0) == 0;
  return n;
}

}  // namespace ctcd::testing

#endif  // CTCD_TESTS_SUPPORT_HPP
