// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Synthetic corpus, MLM masking and downstream classification tasks.
 *
 * Text comes from an 8-state Markov chain. Every content token belongs to
 * exactly one state (token t -> state (t - 4) mod 8); a sequence walks the
 * chain and emits a token from the current state's emission table. The state
 * sequence is therefore observable from the tokens, which is what makes the
 * bigram statistics checkable and the MLM task learnable above chance.
 */
#ifndef CTCD_DATA_HPP
#define CTCD_DATA_HPP

#include "ctcd/rng.hpp"
#include "ctcd/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ctcd {

using TokenSequence = std::vector<std::int32_t>;

struct Vocab {
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kMask = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kFirstContent = 4;

  std::int32_t size = 64;

  std::int32_t contentCount() const { return size - kFirstContent; }
  bool isContent(std::int32_t id) const { return id >= kFirstContent && id < size; }

  friend bool operator==(const Vocab &, const Vocab &) = default;
};

class MarkovSource {
 public:
  static constexpr int kStates = 8;

  MarkovSource(Vocab vocab, std::uint64_t seed);

  const Vocab &vocab() const { return vocab_; }
  std::uint64_t seed() const { return seed_; }
  int stateOf(std::int32_t token) const;
  double transition(int from, int to) const { return transitions_[from][to]; }
  const std::vector<std::int32_t> &tokensOf(int state) const { return tokens_[state]; }
  const std::vector<double> &emissionOf(int state) const { return emissions_[state]; }
  /// Most probable token of a state.
  std::int32_t topToken(int state) const;

  /// Content tokens only, no framing.
  TokenSequence sampleContent(std::size_t length, Rng &rng) const;

 private:
  Vocab vocab_;
  std::uint64_t seed_;
  std::array<std::array<double, kStates>, kStates> transitions_{};
  std::array<std::vector<std::int32_t>, kStates> tokens_;
  std::array<std::vector<double>, kStates> emissions_;
};

struct CorpusOptions {
  std::size_t num_sequences = 100000;
  std::size_t min_len = 8;
  std::size_t max_len = 30;
  std::uint64_t seed = 1;
};

/// Sequences framed as [CLS] content... [SEP].
struct Corpus {
  static constexpr std::uint32_t kGeneratorVersion = 1;

  Vocab vocab;
  std::uint64_t seed = 0;
  std::vector<TokenSequence> sequences;

  friend bool operator==(const Corpus &, const Corpus &) = default;
};

Corpus generateCorpus(const MarkovSource &source, const CorpusOptions &options);

void saveCorpus(const Corpus &corpus, const std::filesystem::path &path);
Corpus loadCorpus(const std::filesystem::path &path);

// Masking ----------------------------------------------------------------------

struct MaskingOptions {
  double rate = 0.15;
  /// When false every selected position becomes [MASK].
  bool split = true;
  double mask_fraction = 0.8;
  double random_fraction = 0.1;
};

struct MaskedSequence {
  TokenSequence tokens;
  std::vector<Index> positions;
  std::vector<std::int32_t> originals;
  std::uint64_t seed = 0;
};

MaskedSequence applyMasking(const TokenSequence &sequence, const Vocab &vocab, const MaskingOptions &options,
                            std::uint64_t seed);

/// A padded batch of masked sequences; rows are example-major (b * seq_len + t).
struct MaskedBatch {
  Index batch = 0;
  Index seq_len = 0;
  std::vector<Index> token_ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::vector<Index>> mask_positions;
  std::vector<std::vector<std::int32_t>> original_tokens;
  std::vector<std::uint64_t> seed_trace;

  /// Flat row indices of masked positions and their targets, example-major.
  std::vector<Index> maskedRows() const;
  std::vector<Index> maskedTargets() const;
  std::size_t maskedCount() const;
  std::uint64_t fingerprint() const;
};

MaskedBatch collate(std::span<const MaskedSequence> sequences);

/// Epoch-wise shuffled, masked batches over a corpus. The stream depends only
/// on (corpus, batch size, masking options, seed).
class BatchStream {
 public:
  BatchStream(const Corpus &corpus, std::size_t batch_size, MaskingOptions masking, std::uint64_t seed);

  MaskedBatch next();
  std::size_t epoch() const { return epoch_; }
  std::size_t stepsPerEpoch() const { return corpus_->sequences.size() / batch_size_; }
  /// True when the last call to next() finished an epoch.
  bool epochBoundary() const { return cursor_ == 0 && served_ > 0; }

 private:
  void reshuffle();

  const Corpus *corpus_;
  std::size_t batch_size_;
  MaskingOptions masking_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::size_t served_ = 0;
};

/// Fixed masked batches over a held-out corpus for evaluation.
std::vector<MaskedBatch> heldOutBatches(const Corpus &corpus, std::size_t batch_size, const MaskingOptions &masking,
                                        std::uint64_t seed);

// Downstream tasks ----------------------------------------------------------------

enum class TaskId { Parity, Majority, Pattern, PatternImbalanced };

std::string taskName(TaskId task);
TaskId parseTask(const std::string &name);
/// Fraction of positive labels the generator targets.
double positiveRate(TaskId task);
/// Imbalanced tasks are scored by Matthews correlation, the rest by accuracy.
bool usesMcc(TaskId task);

struct DownstreamExample {
  TokenSequence tokens;  // [CLS] content... [SEP]
  int label = 0;
  TaskId task = TaskId::Parity;
};

/// The fixed ingredients of each rule, derived from the chain.
struct TaskRules {
  std::int32_t parity_token = 0;
  std::array<std::int32_t, 3> trigram{};
};

TaskRules taskRules(const MarkovSource &source);
int labelFor(TaskId task, const MarkovSource &source, const TokenSequence &tokens);

struct TaskOptions {
  std::size_t min_len = 8;
  std::size_t max_len = 30;
  std::size_t max_attempts = 200000;
};

std::vector<DownstreamExample> makeDownstreamTask(TaskId task, const MarkovSource &source, std::size_t num_examples,
                                                  std::uint64_t seed, const TaskOptions &options = {});

/// Padded token batch (no masking) for classification.
struct TokenBatch {
  Index batch = 0;
  Index seq_len = 0;
  std::vector<Index> token_ids;
  std::vector<std::uint8_t> attention_mask;
};

TokenBatch collateTokens(std::span<const TokenSequence> sequences);

}  // namespace ctcd

#endif  // CTCD_DATA_HPP
