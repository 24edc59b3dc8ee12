// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.cpp
 * @brief  Encoder initialization, forward passes and checkpoint I/O.
 */
#include "ctcd/model.hpp"

#include "ctcd/binary_io.hpp"
#include "ctcd/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace ctcd {

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'T', 'C', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Params, typename Fn>
void visitParameters(Params &p, Fn &&fn) {
  fn("embeddings.token", p.token_embedding);
  fn("embeddings.position", p.position_embedding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto &l = p.layers[i];
    const std::string pre = "layer." + std::to_string(i) + ".";
    fn(pre + "attention_norm.scale", l.attn_norm_scale);
    fn(pre + "attention_norm.shift", l.attn_norm_shift);
    fn(pre + "attention.query.weight", l.query_w);
    fn(pre + "attention.query.bias", l.query_b);
    fn(pre + "attention.key.weight", l.key_w);
    fn(pre + "attention.key.bias", l.key_b);
    fn(pre + "attention.value.weight", l.value_w);
    fn(pre + "attention.value.bias", l.value_b);
    fn(pre + "attention.output.weight", l.output_w);
    fn(pre + "attention.output.bias", l.output_b);
    fn(pre + "ffn_norm.scale", l.ffn_norm_scale);
    fn(pre + "ffn_norm.shift", l.ffn_norm_shift);
    fn(pre + "ffn.in.weight", l.ffn_in_w);
    fn(pre + "ffn.in.bias", l.ffn_in_b);
    fn(pre + "ffn.out.weight", l.ffn_out_w);
    fn(pre + "ffn.out.bias", l.ffn_out_b);
  }
  fn("final_norm.scale", p.final_norm_scale);
  fn("final_norm.shift", p.final_norm_shift);
  if (!p.config.tie_embeddings) fn("mlm_head.weight", p.mlm_w);
  fn("mlm_head.bias", p.mlm_b);
  fn("classifier.weight", p.classifier_w);
  fn("classifier.bias", p.classifier_b);
}

bool endsWith(const std::string &s, const std::string &suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename Scalar>
void truncatedNormal(Tensor<Scalar> &t, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < t.size(); ++i) {
    double z;
    do {
      z = normal(rng);
    } while (std::abs(z) > 2.0);
    t[i] = static_cast<Scalar>(0.02 * z);
  }
}

/// Shapes and initial values of every tensor, before any random draw.
template <typename Scalar>
ModelParameters<Scalar> skeleton(const ModelConfig &c) {
  c.validate();
  const Index h = c.hidden_dim, f = c.ffn_dim;
  auto ones = [](Index n) {
    Tensor<Scalar> t({n});
    t.matrix().setOnes();
    return t;
  };
  ModelParameters<Scalar> p;
  p.config = c;
  p.token_embedding = Tensor<Scalar>({c.vocab_size, h});
  p.position_embedding = Tensor<Scalar>({c.max_seq_len, h});
  p.layers.resize(static_cast<std::size_t>(c.num_layers));
  for (auto &l : p.layers) {
    l.attn_norm_scale = ones(h);
    l.attn_norm_shift = Tensor<Scalar>({h});
    for (auto *w : {&l.query_w, &l.key_w, &l.value_w, &l.output_w}) *w = Tensor<Scalar>({h, h});
    for (auto *b : {&l.query_b, &l.key_b, &l.value_b, &l.output_b}) *b = Tensor<Scalar>({h});
    l.ffn_norm_scale = ones(h);
    l.ffn_norm_shift = Tensor<Scalar>({h});
    l.ffn_in_w = Tensor<Scalar>({h, f});
    l.ffn_in_b = Tensor<Scalar>({f});
    l.ffn_out_w = Tensor<Scalar>({f, h});
    l.ffn_out_b = Tensor<Scalar>({h});
  }
  p.final_norm_scale = ones(h);
  p.final_norm_shift = Tensor<Scalar>({h});
  if (!c.tie_embeddings) p.mlm_w = Tensor<Scalar>({h, c.vocab_size});
  p.mlm_b = Tensor<Scalar>({c.vocab_size});
  p.classifier_w = Tensor<Scalar>({h, c.num_classes});
  p.classifier_b = Tensor<Scalar>({c.num_classes});
  return p;
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar> &x, const Var<Scalar> &w, const Var<Scalar> &b) {
  return addRowVector(matmul(x, w), b);
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](Index v, const char *name) {
    if (v <= 0) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  positive(num_layers, "num_layers");
  positive(hidden_dim, "hidden_dim");
  positive(num_heads, "num_heads");
  positive(ffn_dim, "ffn_dim");
  positive(max_seq_len, "max_seq_len");
  if (hidden_dim % num_heads != 0) throw std::invalid_argument("hidden_dim must be divisible by num_heads");
  if (vocab_size <= Vocab::kFirstContent) throw std::invalid_argument("vocab_size too small");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
}

Index parameterCount(const ModelConfig &c) {
  const Index h = c.hidden_dim, f = c.ffn_dim, v = c.vocab_size;
  const Index per_layer = 4 * (h * h + h) + 2 * h * f + f + h + 4 * h;
  return v * h + c.max_seq_len * h + c.num_layers * per_layer + 2 * h + (c.tie_embeddings ? 0 : h * v) + v +
         h * c.num_classes + c.num_classes;
}

template <typename Scalar>
void ModelParameters<Scalar>::forEach(const std::function<void(const std::string &, Tensor<Scalar> &)> &fn) {
  visitParameters(*this, fn);
}

template <typename Scalar>
void ModelParameters<Scalar>::forEach(
    const std::function<void(const std::string &, const Tensor<Scalar> &)> &fn) const {
  visitParameters(*this, fn);
}

template <typename Scalar>
Index ModelParameters<Scalar>::count() const {
  Index n = 0;
  forEach([&](const std::string &, const Tensor<Scalar> &t) { n += t.size(); });
  return n;
}

template <typename Scalar>
bool ModelParameters<Scalar>::allFinite() const {
  bool ok = true;
  forEach([&](const std::string &, const Tensor<Scalar> &t) { ok = ok && t.allFinite(); });
  return ok;
}

template <typename Scalar>
ModelParameters<Scalar> initModel(const ModelConfig &config, std::string role) {
  ModelParameters<Scalar> p = skeleton<Scalar>(config);
  p.role = std::move(role);
  p.forEach([&](const std::string &name, Tensor<Scalar> &t) {
    if (endsWith(name, ".weight") || name.rfind("embeddings.", 0) == 0)
      truncatedNormal(t, mixSeed(config.seed, name));
  });
  return p;
}

template <typename Scalar>
void resetClassifier(ModelParameters<Scalar> &params, std::uint64_t seed) {
  truncatedNormal(params.classifier_w, mixSeed(seed, "classifier.weight"));
  params.classifier_b.matrix().setZero();
}

template <typename Scalar>
BoundModel<Scalar> bind(const ModelParameters<Scalar> &p, Binding binding) {
  auto leaf = [&](const std::string &name, const Tensor<Scalar> &t) {
    return binding == Binding::Trainable ? parameter(p.parameterId(name), t) : constant(t);
  };
  BoundModel<Scalar> m;
  m.config = p.config;
  m.layers.resize(p.layers.size());
  // Same traversal as forEach, assigning into the matching Var.
  std::vector<Var<Scalar> *> slots;
  slots.push_back(&m.token_embedding);
  slots.push_back(&m.position_embedding);
  for (auto &l : m.layers)
    for (auto *s : {&l.attn_norm_scale, &l.attn_norm_shift, &l.query_w, &l.query_b, &l.key_w, &l.key_b, &l.value_w,
                    &l.value_b, &l.output_w, &l.output_b, &l.ffn_norm_scale, &l.ffn_norm_shift, &l.ffn_in_w,
                    &l.ffn_in_b, &l.ffn_out_w, &l.ffn_out_b})
      slots.push_back(s);
  slots.push_back(&m.final_norm_scale);
  slots.push_back(&m.final_norm_shift);
  if (!p.config.tie_embeddings) slots.push_back(&m.mlm_w);
  slots.push_back(&m.mlm_b);
  slots.push_back(&m.classifier_w);
  slots.push_back(&m.classifier_b);
  std::size_t i = 0;
  p.forEach([&](const std::string &name, const Tensor<Scalar> &t) { *slots.at(i++) = leaf(name, t); });
  if (p.config.tie_embeddings) m.mlm_w = transpose(m.token_embedding);
  return m;
}

template <typename Scalar>
Var<Scalar> encode(const BoundModel<Scalar> &m, std::span<const Index> token_ids,
                   std::span<const std::uint8_t> attention_mask, Index batch, Index seq_len) {
  const ModelConfig &c = m.config;
  if (seq_len > c.max_seq_len)
    throw std::invalid_argument("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  if (static_cast<Index>(token_ids.size()) != batch * seq_len || attention_mask.size() != token_ids.size())
    throw std::invalid_argument("batch layout does not match token count");

  Var<Scalar> x = addTiled(embedding(m.token_embedding, token_ids), sliceRows(m.position_embedding, 0, seq_len));
  const AttentionLayout layout{batch, seq_len, c.num_heads};
  for (const auto &l : m.layers) {
    const Var<Scalar> a = layerNorm(x, l.attn_norm_scale, l.attn_norm_shift);
    const Var<Scalar> ctx = multiHeadAttention(linear(a, l.query_w, l.query_b), linear(a, l.key_w, l.key_b),
                                               linear(a, l.value_w, l.value_b), layout, attention_mask);
    x = add(x, linear(ctx, l.output_w, l.output_b));
    const Var<Scalar> f = layerNorm(x, l.ffn_norm_scale, l.ffn_norm_shift);
    x = add(x, linear(gelu(linear(f, l.ffn_in_w, l.ffn_in_b)), l.ffn_out_w, l.ffn_out_b));
  }
  return layerNorm(x, m.final_norm_scale, m.final_norm_shift);
}

template <typename Scalar>
Var<Scalar> forwardMlmLogits(const BoundModel<Scalar> &m, const MaskedBatch &batch) {
  const Var<Scalar> h = encode(m, batch.token_ids, batch.attention_mask, batch.batch, batch.seq_len);
  return reshape(linear(h, m.mlm_w, m.mlm_b), {batch.batch, batch.seq_len, m.config.vocab_size});
}

template <typename Scalar>
Var<Scalar> forwardClassLogits(const BoundModel<Scalar> &m, const TokenBatch &batch) {
  const Var<Scalar> h = encode(m, batch.token_ids, batch.attention_mask, batch.batch, batch.seq_len);
  std::vector<Index> cls_rows(static_cast<std::size_t>(batch.batch));
  for (Index b = 0; b < batch.batch; ++b) cls_rows[static_cast<std::size_t>(b)] = b * batch.seq_len;
  return linear(gatherRows(h, cls_rows), m.classifier_w, m.classifier_b);
}

// Checkpoints -------------------------------------------------------------------

namespace {

void writeConfig(std::ostream &os, const ModelConfig &c) {
  for (Index v : {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_seq_len, c.num_classes})
    io::write<std::int64_t>(os, v);
  io::write<std::uint8_t>(os, c.tie_embeddings ? 1 : 0);
  io::write<std::uint64_t>(os, c.seed);
}

ModelConfig readConfig(std::istream &is) {
  ModelConfig c;
  for (Index *v : {&c.num_layers, &c.hidden_dim, &c.num_heads, &c.ffn_dim, &c.vocab_size, &c.max_seq_len,
                   &c.num_classes})
    *v = io::read<std::int64_t>(is);
  c.tie_embeddings = io::read<std::uint8_t>(is) != 0;
  c.seed = io::read<std::uint64_t>(is);
  return c;
}

std::uint32_t readHeader(std::istream &is, const std::filesystem::path &path) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint: " + path.string());
  const auto version = io::read<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  return io::read<std::uint32_t>(is);
}

}  // namespace

template <typename Scalar>
void saveCheckpoint(const ModelParameters<Scalar> &params, const std::filesystem::path &path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, 8);
    io::write<std::uint32_t>(os, kCheckpointVersion);
    io::write<std::uint32_t>(os, precisionTag<Scalar>());
    writeConfig(os, params.config);
    io::writeString(os, params.role);
    std::uint32_t n = 0;
    params.forEach([&](const std::string &, const Tensor<Scalar> &) { ++n; });
    io::write<std::uint32_t>(os, n);
    params.forEach([&](const std::string &name, const Tensor<Scalar> &t) {
      io::writeString(os, name);
      io::write<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (Index d : t.shape()) io::write<std::uint64_t>(os, static_cast<std::uint64_t>(d));
      for (Index i = 0; i < t.size(); ++i) io::write<Scalar>(os, t[i]);
    });
    if (!os) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
ModelParameters<Scalar> loadCheckpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  const auto tag = readHeader(is, path);
  if (tag != precisionTag<Scalar>())
    throw std::runtime_error("checkpoint precision mismatch: file has " + std::to_string(tag * 8) +
                             "-bit values, expected " + std::to_string(precisionTag<Scalar>() * 8));
  const ModelConfig config = readConfig(is);
  ModelParameters<Scalar> p = skeleton<Scalar>(config);
  p.role = io::readString(is, 256);
  const auto n = io::read<std::uint32_t>(is);
  std::uint32_t expected = 0;
  p.forEach([&](const std::string &, Tensor<Scalar> &) { ++expected; });
  if (n != expected) throw std::runtime_error("checkpoint tensor count mismatch");
  p.forEach([&](const std::string &name, Tensor<Scalar> &t) {
    const std::string stored = io::readString(is, 1024);
    if (stored != name) throw std::runtime_error("checkpoint tensor '" + stored + "' where '" + name + "' expected");
    const auto rank = io::read<std::uint32_t>(is);
    Shape shape(rank);
    for (auto &d : shape) d = static_cast<Index>(io::read<std::uint64_t>(is));
    if (shape != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " + shapeToString(shape) + " vs " +
                               shapeToString(t.shape()));
    for (Index i = 0; i < t.size(); ++i) t[i] = io::read<Scalar>(is);
  });
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in checkpoint");
  return p;
}

std::uint32_t checkpointPrecision(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  return readHeader(is, path);
}

#define CTCD_INSTANTIATE_MODEL(S)                                                                          \
  template struct ModelParameters<S>;                                                                      \
  template ModelParameters<S> initModel<S>(const ModelConfig &, std::string);                              \
  template void resetClassifier<S>(ModelParameters<S> &, std::uint64_t);                                   \
  template BoundModel<S> bind<S>(const ModelParameters<S> &, Binding);                                     \
  template Var<S> encode<S>(const BoundModel<S> &, std::span<const Index>, std::span<const std::uint8_t>,  \
                            Index, Index);                                                                 \
  template Var<S> forwardMlmLogits<S>(const BoundModel<S> &, const MaskedBatch &);                         \
  template Var<S> forwardClassLogits<S>(const BoundModel<S> &, const TokenBatch &);                        \
  template void saveCheckpoint<S>(const ModelParameters<S> &, const std::filesystem::path &);              \
  template ModelParameters<S> loadCheckpoint<S>(const std::filesystem::path &);

CTCD_INSTANTIATE_MODEL(float)
CTCD_INSTANTIATE_MODEL(double)

}  // namespace ctcd
