// SPDX-License-Identifier: Apache-2.0
#include "ctcd/data.hpp"

#include "ctcd/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace ctcd {

namespace {

std::size_t sampleDiscrete(std::span<const double> weights, Rng &rng) {
  double u = uniform01(rng);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0) return i;
  }
  return weights.size() - 1;
}

constexpr char kCorpusMagic[8] = {'C', 'T', 'C', 'D', 'C', 'O', 'R', 'P'};

}  // namespace

MarkovSource::MarkovSource(Vocab vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {
  if (vocab.contentCount() < kStates)
    throw std::invalid_argument("vocab must hold at least " + std::to_string(kStates) + " content tokens");
  Rng rng(mixSeed(seed, "markov-chain"));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int s = 0; s < kStates; ++s) {
    // Log-normal rows, redrawn until max >= 3 * min.
    std::array<double, kStates> row{};
    do {
      for (double &w : row) w = std::exp(1.5 * normal(rng));
    } while (*std::max_element(row.begin(), row.end()) < 3.0 * *std::min_element(row.begin(), row.end()));
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (int j = 0; j < kStates; ++j) transitions_[s][j] = row[j] / total;
  }
  for (std::int32_t t = Vocab::kFirstContent; t < vocab.size; ++t) tokens_[stateOf(t)].push_back(t);
  for (int s = 0; s < kStates; ++s) {
    // Zipf-like emissions over a seeded permutation of the state's tokens.
    const std::size_t n = tokens_[s].size();
    std::vector<std::size_t> rank(n);
    std::iota(rank.begin(), rank.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(rank[i - 1], rank[uniformIndex(rng, i)]);
    emissions_[s].resize(n);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) total += emissions_[s][i] = 1.0 / static_cast<double>(rank[i] + 1);
    for (double &w : emissions_[s]) w /= total;
  }
}

int MarkovSource::stateOf(std::int32_t token) const {
  if (!vocab_.isContent(token)) throw std::invalid_argument("not a content token: " + std::to_string(token));
  return (token - Vocab::kFirstContent) % kStates;
}

std::int32_t MarkovSource::topToken(int state) const {
  const auto &e = emissions_[state];
  return tokens_[state][static_cast<std::size_t>(std::max_element(e.begin(), e.end()) - e.begin())];
}

TokenSequence MarkovSource::sampleContent(std::size_t length, Rng &rng) const {
  TokenSequence out;
  out.reserve(length);
  int state = static_cast<int>(uniformIndex(rng, kStates));
  for (std::size_t i = 0; i < length; ++i) {
    if (i > 0) state = static_cast<int>(sampleDiscrete(transitions_[state], rng));
    out.push_back(tokens_[state][sampleDiscrete(emissions_[state], rng)]);
  }
  return out;
}

namespace {
TokenSequence framedSample(const MarkovSource &source, std::size_t min_len, std::size_t max_len, Rng &rng) {
  const std::size_t len = min_len + uniformIndex(rng, max_len - min_len + 1);
  TokenSequence seq;
  seq.reserve(len + 2);
  seq.push_back(Vocab::kCls);
  const TokenSequence content = source.sampleContent(len, rng);
  seq.insert(seq.end(), content.begin(), content.end());
  seq.push_back(Vocab::kSep);
  return seq;
}
}  // namespace

Corpus generateCorpus(const MarkovSource &source, const CorpusOptions &options) {
  if (options.min_len < 8) throw std::invalid_argument("min-len must be at least 8");
  if (options.max_len < options.min_len) throw std::invalid_argument("max-len must be >= min-len");
  if (options.max_len > 65533) throw std::invalid_argument("max-len too large for the corpus format");
  Corpus corpus;
  corpus.vocab = source.vocab();
  corpus.seed = options.seed;
  corpus.sequences.resize(options.num_sequences);
  for (std::size_t i = 0; i < options.num_sequences; ++i) {
    Rng rng(mixSeed({options.seed, tagHash("corpus"), i}));
    corpus.sequences[i] = framedSample(source, options.min_len, options.max_len, rng);
  }
  return corpus;
}

void saveCorpus(const Corpus &corpus, const std::filesystem::path &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write corpus cache " + path.string());
  os.write(kCorpusMagic, sizeof kCorpusMagic);
  io::write<std::uint32_t>(os, Corpus::kGeneratorVersion);
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(corpus.vocab.size));
  io::write<std::uint64_t>(os, corpus.seed);
  io::write<std::uint64_t>(os, corpus.sequences.size());
  for (const auto &seq : corpus.sequences) {
    io::write<std::uint16_t>(os, static_cast<std::uint16_t>(seq.size()));
    for (std::int32_t id : seq) io::write<std::uint16_t>(os, static_cast<std::uint16_t>(id));
  }
  if (!os) throw std::runtime_error("failed writing corpus cache " + path.string());
}

Corpus loadCorpus(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus cache " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCorpusMagic))
    throw std::runtime_error("not a corpus cache: " + path.string());
  const auto version = io::read<std::uint32_t>(is);
  if (version != Corpus::kGeneratorVersion)
    throw std::runtime_error("corpus cache generator version " + std::to_string(version) + " is not supported");
  Corpus corpus;
  corpus.vocab.size = static_cast<std::int32_t>(io::read<std::uint32_t>(is));
  corpus.seed = io::read<std::uint64_t>(is);
  const auto count = io::read<std::uint64_t>(is);
  corpus.sequences.resize(count);
  for (auto &seq : corpus.sequences) {
    seq.resize(io::read<std::uint16_t>(is));
    for (auto &id : seq) {
      id = io::read<std::uint16_t>(is);
      if (id >= corpus.vocab.size) throw std::runtime_error("corpus cache holds an out-of-vocabulary id");
    }
  }
  return corpus;
}

// Masking --------------------------------------------------------------------------

MaskedSequence applyMasking(const TokenSequence &sequence, const Vocab &vocab, const MaskingOptions &options,
                            std::uint64_t seed) {
  if (!(options.rate > 0.0 && options.rate <= 1.0)) throw std::invalid_argument("mask rate must be in (0, 1]");
  std::vector<Index> maskable;
  for (std::size_t i = 0; i < sequence.size(); ++i)
    if (vocab.isContent(sequence[i])) maskable.push_back(static_cast<Index>(i));
  if (maskable.empty()) throw std::invalid_argument("sequence has no maskable positions");

  Rng rng(seed);
  MaskedSequence out;
  out.tokens = sequence;
  out.seed = seed;
  while (out.positions.empty())
    for (Index p : maskable)
      if (uniform01(rng) < options.rate) out.positions.push_back(p);

  for (Index p : out.positions) {
    const std::int32_t original = sequence[static_cast<std::size_t>(p)];
    out.originals.push_back(original);
    std::int32_t replacement = Vocab::kMask;
    if (options.split) {
      const double u = uniform01(rng);
      if (u >= options.mask_fraction + options.random_fraction)
        replacement = original;
      else if (u >= options.mask_fraction)
        replacement = Vocab::kFirstContent + static_cast<std::int32_t>(uniformIndex(rng, vocab.contentCount()));
    }
    out.tokens[static_cast<std::size_t>(p)] = replacement;
  }
  return out;
}

std::vector<Index> MaskedBatch::maskedRows() const {
  std::vector<Index> rows;
  for (Index b = 0; b < batch; ++b)
    for (Index p : mask_positions[static_cast<std::size_t>(b)]) rows.push_back(b * seq_len + p);
  return rows;
}

std::vector<Index> MaskedBatch::maskedTargets() const {
  std::vector<Index> targets;
  for (const auto &orig : original_tokens)
    for (std::int32_t t : orig) targets.push_back(t);
  return targets;
}

std::size_t MaskedBatch::maskedCount() const {
  std::size_t n = 0;
  for (const auto &p : mask_positions) n += p.size();
  return n;
}

std::uint64_t MaskedBatch::fingerprint() const {
  std::uint64_t h = mixSeed({static_cast<std::uint64_t>(batch), static_cast<std::uint64_t>(seq_len)});
  for (Index id : token_ids) h = splitmix64(h ^ static_cast<std::uint64_t>(id));
  for (std::uint64_t s : seed_trace) h = splitmix64(h ^ s);
  return h;
}

MaskedBatch collate(std::span<const MaskedSequence> sequences) {
  if (sequences.empty()) throw std::invalid_argument("cannot collate an empty batch");
  MaskedBatch out;
  out.batch = static_cast<Index>(sequences.size());
  for (const auto &s : sequences) out.seq_len = std::max(out.seq_len, static_cast<Index>(s.tokens.size()));
  out.token_ids.assign(static_cast<std::size_t>(out.batch * out.seq_len), Vocab::kPad);
  out.attention_mask.assign(out.token_ids.size(), 0);
  for (Index b = 0; b < out.batch; ++b) {
    const auto &s = sequences[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      out.token_ids[static_cast<std::size_t>(b * out.seq_len) + t] = s.tokens[t];
      out.attention_mask[static_cast<std::size_t>(b * out.seq_len) + t] = 1;
    }
    out.mask_positions.push_back(s.positions);
    out.original_tokens.push_back(s.originals);
    out.seed_trace.push_back(s.seed);
  }
  return out;
}

BatchStream::BatchStream(const Corpus &corpus, std::size_t batch_size, MaskingOptions masking, std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), masking_(masking), seed_(seed) {
  if (batch_size == 0 || batch_size > corpus.sequences.size())
    throw std::invalid_argument("batch size must be in [1, corpus size]");
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(corpus_->sequences.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(mixSeed({seed_, tagHash("epoch-order"), epoch_}));
  std::shuffle(order_.begin(), order_.end(), rng);
}

MaskedBatch BatchStream::next() {
  std::vector<MaskedSequence> items;
  items.reserve(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t slot = cursor_ + i;
    const std::uint64_t seed = mixSeed({seed_, tagHash("mask"), epoch_, slot});
    items.push_back(applyMasking(corpus_->sequences[order_[slot]], corpus_->vocab, masking_, seed));
  }
  cursor_ += batch_size_;
  ++served_;
  if (cursor_ + batch_size_ > order_.size()) {
    cursor_ = 0;
    ++epoch_;
    reshuffle();
  }
  return collate(items);
}

std::vector<MaskedBatch> heldOutBatches(const Corpus &corpus, std::size_t batch_size, const MaskingOptions &masking,
                                        std::uint64_t seed) {
  std::vector<MaskedBatch> out;
  for (std::size_t start = 0; start < corpus.sequences.size(); start += batch_size) {
    std::vector<MaskedSequence> items;
    for (std::size_t i = start; i < std::min(corpus.sequences.size(), start + batch_size); ++i)
      items.push_back(applyMasking(corpus.sequences[i], corpus.vocab, masking, mixSeed({seed, tagHash("heldout"), i})));
    out.push_back(collate(items));
  }
  return out;
}

// Downstream tasks ------------------------------------------------------------------------

std::string taskName(TaskId task) {
  switch (task) {
    case TaskId::Parity: return "parity";
    case TaskId::Majority: return "majority";
    case TaskId::Pattern: return "pattern";
    case TaskId::PatternImbalanced: return "pattern-imbalanced";
  }
  return "unknown";
}

TaskId parseTask(const std::string &name) {
  if (name == "parity") return TaskId::Parity;
  if (name == "majority") return TaskId::Majority;
  if (name == "pattern") return TaskId::Pattern;
  if (name == "pattern-imbalanced") return TaskId::PatternImbalanced;
  throw std::invalid_argument("unknown task-id '" + name + "'");
}

double positiveRate(TaskId task) { return task == TaskId::PatternImbalanced ? 0.2 : 0.5; }

bool usesMcc(TaskId task) { return task == TaskId::PatternImbalanced; }

TaskRules taskRules(const MarkovSource &source) {
  TaskRules rules;
  rules.parity_token = source.topToken(0);
  // Most likely state path of length three, emitted through each state's top token.
  double best = -1;
  std::array<int, 3> path{};
  for (int a = 0; a < MarkovSource::kStates; ++a)
    for (int b = 0; b < MarkovSource::kStates; ++b)
      for (int c = 0; c < MarkovSource::kStates; ++c) {
        const double p = source.transition(a, b) * source.transition(b, c);
        if (p > best) {
          best = p;
          path = {a, b, c};
        }
      }
  for (int i = 0; i < 3; ++i) rules.trigram[static_cast<std::size_t>(i)] = source.topToken(path[static_cast<std::size_t>(i)]);
  return rules;
}

namespace {
int labelWithRules(TaskId task, const MarkovSource &source, const TaskRules &rules, const TokenSequence &tokens) {
  switch (task) {
    case TaskId::Parity:
      return static_cast<int>(std::count(tokens.begin(), tokens.end(), rules.parity_token) % 2);
    case TaskId::Majority: {
      long first = 0, rest = 0;
      for (std::int32_t t : tokens) {
        if (!source.vocab().isContent(t)) continue;
        (source.stateOf(t) < MarkovSource::kStates / 2 ? first : rest) += 1;
      }
      return first > rest ? 1 : 0;
    }
    case TaskId::Pattern:
    case TaskId::PatternImbalanced:
      return std::search(tokens.begin(), tokens.end(), rules.trigram.begin(), rules.trigram.end()) != tokens.end()
                 ? 1
                 : 0;
  }
  throw std::invalid_argument("unknown task");
}
}  // namespace

int labelFor(TaskId task, const MarkovSource &source, const TokenSequence &tokens) {
  return labelWithRules(task, source, taskRules(source), tokens);
}

std::vector<DownstreamExample> makeDownstreamTask(TaskId task, const MarkovSource &source, std::size_t num_examples,
                                                  std::uint64_t seed, const TaskOptions &options) {
  // Exact class quota, spread by a seeded shuffle, then per-example rejection.
  const auto positives = static_cast<std::size_t>(std::llround(positiveRate(task) * static_cast<double>(num_examples)));
  std::vector<int> wanted(num_examples, 0);
  std::fill(wanted.begin(), wanted.begin() + static_cast<std::ptrdiff_t>(std::min(positives, num_examples)), 1);
  Rng shuffle_rng(mixSeed({seed, tagHash(taskName(task)), tagHash("labels")}));
  std::shuffle(wanted.begin(), wanted.end(), shuffle_rng);

  const TaskRules rules = taskRules(source);
  std::vector<DownstreamExample> out(num_examples);
  for (std::size_t i = 0; i < num_examples; ++i) {
    Rng rng(mixSeed({seed, tagHash(taskName(task)), i}));
    std::size_t attempts = 0;
    for (;;) {
      TokenSequence seq = framedSample(source, options.min_len, options.max_len, rng);
      if (labelWithRules(task, source, rules, seq) == wanted[i]) {
        out[i] = DownstreamExample{std::move(seq), wanted[i], task};
        break;
      }
      if (++attempts >= options.max_attempts)
        throw std::runtime_error("rejection sampling exhausted for task " + taskName(task));
    }
  }
  return out;
}

TokenBatch collateTokens(std::span<const TokenSequence> sequences) {
  if (sequences.empty()) throw std::invalid_argument("cannot collate an empty batch");
  TokenBatch out;
  out.batch = static_cast<Index>(sequences.size());
  for (const auto &s : sequences) out.seq_len = std::max(out.seq_len, static_cast<Index>(s.size()));
  out.token_ids.assign(static_cast<std::size_t>(out.batch * out.seq_len), Vocab::kPad);
  out.attention_mask.assign(out.token_ids.size(), 0);
  for (Index b = 0; b < out.batch; ++b) {
    const auto &s = sequences[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < s.size(); ++t) {
      out.token_ids[static_cast<std::size_t>(b * out.seq_len) + t] = s[t];
      out.attention_mask[static_cast<std::size_t>(b * out.seq_len) + t] = 1;
    }
  }
  return out;
}

}  // namespace ctcd
