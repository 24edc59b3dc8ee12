// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctcd/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

using namespace ctcd;

namespace {

std::vector<char> fileBytes(const std::filesystem::path &p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Straight-line re-implementations of the downstream rules, written against
// the chain parameters only.
struct OracleRules {
  std::int32_t parity_token;
  std::int32_t tri[3];
};

std::int32_t oracleTopToken(const MarkovSource &src, int state) {
  std::int32_t best = -1;
  double best_p = -1;
  const auto &toks = src.tokensOf(state);
  const auto &em = src.emissionOf(state);
  for (std::size_t i = 0; i < toks.size(); ++i)
    if (em[i] > best_p) {
      best_p = em[i];
      best = toks[i];
    }
  return best;
}

OracleRules oracleRules(const MarkovSource &src) {
  OracleRules r{};
  r.parity_token = oracleTopToken(src, 0);
  double best = -1;
  int pa = 0, pb = 0, pc = 0;
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b)
      for (int c = 0; c < 8; ++c)
        if (src.transition(a, b) * src.transition(b, c) > best) {
          best = src.transition(a, b) * src.transition(b, c);
          pa = a;
          pb = b;
          pc = c;
        }
  r.tri[0] = oracleTopToken(src, pa);
  r.tri[1] = oracleTopToken(src, pb);
  r.tri[2] = oracleTopToken(src, pc);
  return r;
}

int oracleLabel(TaskId task, const OracleRules &r, const TokenSequence &t) {
  if (task == TaskId::Parity) {
    int count = 0;
    for (auto x : t) count += (x == r.parity_token);
    return count % 2;
  }
  if (task == TaskId::Majority) {
    int first = 0, rest = 0;
    for (auto x : t) {
      if (x < 4) continue;
      if ((x - 4) % 8 < 4)
        ++first;
      else
        ++rest;
    }
    return first > rest;
  }
  for (std::size_t i = 0; i + 2 < t.size(); ++i)
    if (t[i] == r.tri[0] && t[i + 1] == r.tri[1] && t[i + 2] == r.tri[2]) return 1;
  return 0;
}

}  // namespace

TEST_CASE("Markov source structure") {
  const MarkovSource src(Vocab{}, 42);
  for (int s = 0; s < 8; ++s) {
    double total = 0, lo = 1, hi = 0;
    for (int j = 0; j < 8; ++j) {
      total += src.transition(s, j);
      lo = std::min(lo, src.transition(s, j));
      hi = std::max(hi, src.transition(s, j));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(hi >= 3 * lo);
  }
  for (std::int32_t t = 4; t < 64; ++t) CHECK(src.stateOf(t) == (t - 4) % 8);
  CHECK_THROWS(src.stateOf(Vocab::kCls));
}

TEST_CASE("generateCorpus is deterministic and framed") {
  const MarkovSource src(Vocab{}, 5);
  const CorpusOptions opts{500, 8, 30, 9};
  const Corpus a = generateCorpus(src, opts);
  const Corpus b = generateCorpus(src, opts);
  CHECK(a == b);
  for (const auto &s : a.sequences) {
    REQUIRE(s.size() >= 10);
    CHECK(s.size() <= 32);
    CHECK(s.front() == Vocab::kCls);
    CHECK(s.back() == Vocab::kSep);
    for (std::size_t i = 1; i + 1 < s.size(); ++i) CHECK(Vocab{}.isContent(s[i]));
  }
  CHECK_THROWS(generateCorpus(src, CorpusOptions{10, 7, 30, 1}));
  CHECK_THROWS(generateCorpus(src, CorpusOptions{10, 12, 10, 1}));
}

TEST_CASE("state bigrams match the transition matrix") {
  const MarkovSource src(Vocab{}, 3);
  // ~100k content tokens
  const Corpus corpus = generateCorpus(src, CorpusOptions{5000, 10, 30, 77});
  std::array<std::array<double, 8>, 8> counts{};
  std::size_t tokens = 0;
  for (const auto &s : corpus.sequences) {
    tokens += s.size() - 2;
    for (std::size_t i = 1; i + 2 < s.size(); ++i) counts[src.stateOf(s[i])][src.stateOf(s[i + 1])] += 1;
  }
  CHECK(tokens >= 95000);
  double total = 0, weighted_tv = 0;
  for (auto &row : counts)
    for (double c : row) total += c;
  for (int i = 0; i < 8; ++i) {
    double row_total = 0;
    for (double c : counts[i]) row_total += c;
    double tv = 0;
    for (int j = 0; j < 8; ++j) tv += std::abs(counts[i][j] / row_total - src.transition(i, j));
    weighted_tv += (row_total / total) * 0.5 * tv;
  }
  CHECK(weighted_tv < 0.02);
}

TEST_CASE("corpus cache round-trips bit-identically") {
  const MarkovSource src(Vocab{}, 5);
  const Corpus corpus = generateCorpus(src, CorpusOptions{300, 8, 20, 4});
  const auto dir = std::filesystem::temp_directory_path() / "ctcd_test_data";
  std::filesystem::create_directories(dir);
  saveCorpus(corpus, dir / "a.bin");
  const Corpus loaded = loadCorpus(dir / "a.bin");
  CHECK(loaded == corpus);
  saveCorpus(generateCorpus(src, CorpusOptions{300, 8, 20, 4}), dir / "b.bin");
  CHECK(fileBytes(dir / "a.bin") == fileBytes(dir / "b.bin"));
  std::ofstream(dir / "bad.bin") << "nonsense";
  CHECK_THROWS(loadCorpus(dir / "bad.bin"));
}

TEST_CASE("masking") {
  const Vocab vocab;
  const MarkovSource src(vocab, 8);
  const Corpus corpus = generateCorpus(src, CorpusOptions{600, 8, 30, 2});

  SUBCASE("selection frequency near the rate; reserved positions never selected") {
    std::size_t selected = 0, maskable = 0;
    std::map<std::string, int> kinds;
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
      const auto &seq = corpus.sequences[i];
      const auto m = applyMasking(seq, vocab, MaskingOptions{}, 1000 + i);
      maskable += seq.size() - 2;
      selected += m.positions.size();
      CHECK(!m.positions.empty());
      REQUIRE(m.originals.size() == m.positions.size());
      for (std::size_t k = 0; k < m.positions.size(); ++k) {
        const auto p = static_cast<std::size_t>(m.positions[k]);
        CHECK(vocab.isContent(seq[p]));
        CHECK(m.originals[k] == seq[p]);
        if (m.tokens[p] == Vocab::kMask)
          ++kinds["mask"];
        else if (m.tokens[p] == seq[p])
          ++kinds["keep"];
        else
          ++kinds["random"];
      }
      // unselected positions untouched
      for (std::size_t p = 0; p < seq.size(); ++p)
        if (std::find(m.positions.begin(), m.positions.end(), static_cast<Index>(p)) == m.positions.end())
          CHECK(m.tokens[p] == seq[p]);
    }
    CHECK(maskable >= 10000);
    const double rate = static_cast<double>(selected) / static_cast<double>(maskable);
    CHECK(rate >= 0.13);
    CHECK(rate <= 0.17);
    const double n = static_cast<double>(selected);
    CHECK(kinds["mask"] / n == doctest::Approx(0.8).epsilon(0.1));
    CHECK(kinds["keep"] / n > 0.05);
  }

  SUBCASE("rate 1 without split masks every content position") {
    const auto &seq = corpus.sequences[0];
    const auto m = applyMasking(seq, vocab, MaskingOptions{1.0, false}, 7);
    CHECK(m.positions.size() == seq.size() - 2);
    CHECK(m.tokens.front() == Vocab::kCls);
    CHECK(m.tokens.back() == Vocab::kSep);
    for (std::size_t p = 1; p + 1 < seq.size(); ++p) CHECK(m.tokens[p] == Vocab::kMask);
    CHECK(m.originals == TokenSequence(seq.begin() + 1, seq.end() - 1));
  }

  SUBCASE("no maskable positions is an error") {
    CHECK_THROWS(applyMasking({Vocab::kCls, Vocab::kSep}, vocab, MaskingOptions{}, 1));
  }
}

TEST_CASE("batch stream is deterministic and padded") {
  const MarkovSource src(Vocab{}, 8);
  const Corpus corpus = generateCorpus(src, CorpusOptions{40, 8, 20, 2});
  BatchStream a(corpus, 8, MaskingOptions{}, 3);
  BatchStream b(corpus, 8, MaskingOptions{}, 3);
  BatchStream c(corpus, 8, MaskingOptions{}, 4);
  bool differs = false;
  for (int step = 0; step < 12; ++step) {
    const auto ba = a.next();
    const auto bb = b.next();
    const auto bc = c.next();
    CHECK(ba.token_ids == bb.token_ids);
    CHECK(ba.seed_trace == bb.seed_trace);
    CHECK(ba.fingerprint() == bb.fingerprint());
    differs = differs || ba.fingerprint() != bc.fingerprint();
    CHECK(ba.maskedRows().size() == ba.maskedTargets().size());
    for (Index r = 0; r < ba.batch; ++r) {
      CHECK(!ba.mask_positions[static_cast<std::size_t>(r)].empty());
      for (Index t = 0; t < ba.seq_len; ++t) {
        const auto idx = static_cast<std::size_t>(r * ba.seq_len + t);
        CHECK((ba.attention_mask[idx] == 0) == (ba.token_ids[idx] == Vocab::kPad));
      }
    }
  }
  CHECK(differs);
  CHECK(a.epoch() == 2);
}

TEST_CASE("downstream tasks") {
  const MarkovSource src(Vocab{}, 11);
  const OracleRules rules = oracleRules(src);

  SUBCASE("rule by construction") {
    TokenSequence seq{Vocab::kCls};
    for (int i = 0; i < 3; ++i) {
      seq.push_back(rules.parity_token);
      seq.push_back(rules.parity_token == 4 ? 5 : 4);
    }
    seq.push_back(Vocab::kSep);
    CHECK(labelFor(TaskId::Parity, src, seq) == 1);
  }

  for (TaskId task : {TaskId::Parity, TaskId::Majority, TaskId::Pattern, TaskId::PatternImbalanced}) {
    CAPTURE(taskName(task));
    const auto examples = makeDownstreamTask(task, src, 2000, 5);
    REQUIRE(examples.size() == 2000);
    int positives = 0;
    for (const auto &ex : examples) {
      CHECK(ex.label == oracleLabel(task, rules, ex.tokens));
      CHECK(ex.tokens.front() == Vocab::kCls);
      positives += ex.label;
    }
    const double balance = positives / 2000.0;
    if (task == TaskId::PatternImbalanced) {
      CHECK(balance == doctest::Approx(0.2).epsilon(0.01));
    } else {
      CHECK(balance >= 0.4);
      CHECK(balance <= 0.6);
    }
    CHECK(makeDownstreamTask(task, src, 50, 5)[7].tokens == makeDownstreamTask(task, src, 50, 5)[7].tokens);
  }
  CHECK_THROWS(parseTask("sentiment"));
  CHECK(parseTask("pattern-imbalanced") == TaskId::PatternImbalanced);
}
