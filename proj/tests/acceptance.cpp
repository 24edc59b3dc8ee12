// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. Prints one PASS/FAIL line per criterion. Exits 1 when an
// exact or structural criterion fails; a failing directional claim (6, 7) is
// printed as FAIL but, like the report's exit status 2, is not an execution error.
//
//   acceptance [--desk-config desk.json --desk-out dir] [--threads n]
//
// Criteria 6, 7 and 9 need the desk-scale grid; its cells are cached under
// --desk-out, so only the first invocation pays for training.
#include "support.hpp"

#include "ctcd/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

using namespace ctcd;
using namespace ctcd::testing;

namespace {

struct Line {
  int id;
  bool pass;
  std::string detail;
};

std::vector<Line> lines;

void record(int id, bool pass, std::string detail) {
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  lines.push_back({id, pass, std::move(detail)});
}

std::string fmt(const char *f, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

double seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fileBytes(const std::filesystem::path &p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

DistillConfig weights(double ah, double as, double bh, double bs) {
  DistillConfig c;
  c.alpha_h = ah;
  c.alpha_s = as;
  c.beta_h = bh;
  c.beta_s = bs;
  return c;
}

/// Random tiny instance: two models, a batch and loss weights.
struct Instance {
  ModelParameters<double> student, teacher, frozen;
  MaskedBatch batch;
  DistillConfig cfg;
};

Instance randomInstance(std::uint64_t seed) {
  Rng rng(mixSeed(seed, "instance"));
  const Index hidden = 8 + 4 * static_cast<Index>(uniformIndex(rng, 3));
  const Index vocab = 12 + 4 * static_cast<Index>(uniformIndex(rng, 2));
  const double choices[] = {0.5, 1, 2, 4};
  auto pick = [&] { return choices[uniformIndex(rng, 4)]; };
  Instance in{initModel<double>(tinyModel(rng(), 1, hidden, vocab), "student"),
              initModel<double>(tinyModel(rng(), 2, hidden, vocab), "teacher"),
              initModel<double>(tinyModel(rng(), 1 + uniformIndex(rng, 2), hidden, vocab), "frozen"),
              randomMaskedBatch(static_cast<std::int32_t>(vocab), 2 + uniformIndex(rng, 2), rng()),
              weights(pick(), pick(), pick(), pick())};
  in.cfg.tau = pick();
  in.cfg.community_weight_1 = pick();
  in.cfg.community_weight_2 = pick();
  in.cfg.positions = uniformIndex(rng, 2) ? SoftPositions::AllPositions : SoftPositions::MaskedOnly;
  in.cfg.tau_squared = uniformIndex(rng, 2) == 1;
  return in;
}

Var<double> logitsOf(const ModelParameters<double> &m, const MaskedBatch &b, Binding binding = Binding::Trainable) {
  return forwardMlmLogits(bind(m, binding), b);
}

void gradientCorrectness() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Instance in = randomInstance(i);
    const auto &b = in.batch;
    const auto &cfg = in.cfg;
    auto frozen = [&](const ModelParameters<double> &m) { return logitsOf(m, b, Binding::Frozen); };

    const auto hard = backward(hardLoss(logitsOf(in.student, b), b));
    worst = std::max(worst, sideGradientError(in.student, hard, [&](const ModelParameters<double> &m) {
                       return hardLoss(frozen(m), b).item();
                     }));
    const auto kd = backward(kdLoss(logitsOf(in.student, b), logitsOf(in.teacher, b), b, cfg));
    worst = std::max(worst, sideGradientError(in.student, kd, [&](const ModelParameters<double> &m) {
                       return kdLoss(frozen(m), frozen(in.teacher), b, cfg).item();
                     }));
    const auto rekd = backward(reversedKdLoss(logitsOf(in.teacher, b), logitsOf(in.student, b), b, cfg));
    worst = std::max(worst, sideGradientError(in.teacher, rekd, [&](const ModelParameters<double> &m) {
                       return reversedKdLoss(frozen(m), frozen(in.student), b, cfg).item();
                     }));
    const auto joint = ctcdLoss(logitsOf(in.student, b), logitsOf(in.teacher, b), b, cfg);
    worst = std::max(worst, sideGradientError(in.student, joint.grads, [&](const ModelParameters<double> &m) {
                       return kdLoss(frozen(m), frozen(in.teacher), b, cfg).item();
                     }));
    worst = std::max(worst, sideGradientError(in.teacher, joint.grads, [&](const ModelParameters<double> &m) {
                       return reversedKdLoss(frozen(m), frozen(in.student), b, cfg).item();
                     }));

    // community: student plays student1, teacher plays student2, frozen is the teacher
    const auto cm = communityLoss(logitsOf(in.student, b), logitsOf(in.teacher, b), frozen(in.frozen), b, cfg);
    const auto t = frozen(in.frozen);
    worst = std::max(worst, sideGradientError(in.student, cm.grads, [&](const ModelParameters<double> &m) {
                       const auto l = frozen(m);
                       return add(kdLoss(l, frozen(in.teacher), b, cfg),
                                  scale(softLoss(t, l, b, cfg), cfg.community_weight_1))
                           .item();
                     }));
    worst = std::max(worst, sideGradientError(in.teacher, cm.grads, [&](const ModelParameters<double> &m) {
                       const auto l = frozen(m);
                       return add(reversedKdLoss(l, frozen(in.student), b, cfg),
                                  scale(softLoss(t, l, b, cfg), cfg.community_weight_2))
                           .item();
                     }));
  }
  const double s = seconds(start);
  record(1, worst < 1e-4 && s < 120,
         fmt("20 instances, 6 objectives, max relative error %.3g (< 1e-4), %.1f s (< 120 s)", worst, s));
}

void stopGradient(const std::filesystem::path &scratch) {
  bool ok = true;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const Instance in = randomInstance(100 + i);
    const auto kd = backward(kdLoss(logitsOf(in.student, in.batch), logitsOf(in.teacher, in.batch), in.batch, in.cfg));
    const auto re =
        backward(reversedKdLoss(logitsOf(in.teacher, in.batch), logitsOf(in.student, in.batch), in.batch, in.cfg));
    const auto cm = communityLoss(logitsOf(in.student, in.batch), logitsOf(in.teacher, in.batch),
                                  logitsOf(in.frozen, in.batch), in.batch, in.cfg);
    ok = ok && keysWithRole(kd, "teacher") == 0 && keysWithRole(kd, "student") > 0;
    ok = ok && keysWithRole(re, "student") == 0 && keysWithRole(re, "teacher") > 0;
    ok = ok && keysWithRole(cm.grads, "frozen") == 0;
  }

  // 500 community steps against a checkpointed teacher
  const MarkovSource source(Vocab{16}, 4);
  const Corpus corpus = generateCorpus(source, CorpusOptions{200, 8, 8, 1});
  const Corpus heldout = generateCorpus(source, CorpusOptions{40, 8, 8, 2});
  const auto teacher_path = scratch / "frozen_teacher.ckpt";
  saveCheckpoint(initModel<double>(tinyModel(11, 2), "teacher"), teacher_path);
  const std::string before = fileBytes(teacher_path);
  PretrainSetup setup;
  setup.teacher = tinyModel(11, 2);
  setup.student = tinyModel(0, 1);
  setup.train.regime = Regime::Community;
  setup.train.total_steps = 500;
  setup.train.batch_size = 4;
  setup.train.peak_lr = 2e-3;
  setup.out_dir = scratch / "community";
  setup.frozen_teacher = teacher_path;
  setup.heldout_batches = 2;
  const auto outcome = pretrain<double>(setup, corpus, heldout);
  const bool unchanged = fileBytes(teacher_path) == before;
  const bool trained = outcome.history.size() > 1;
  record(2, ok && unchanged && trained,
         std::string("zero-gradient key sets exact on 5 instances; frozen teacher bytes ") +
             (unchanged ? "identical" : "CHANGED") + " after 500 community steps");
}

void decomposition() {
  double worst = 0;
  bool keys = true;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Instance in = randomInstance(200 + i);
    const auto &b = in.batch;
    const auto joint = ctcdLoss(logitsOf(in.student, b), logitsOf(in.teacher, b), b, in.cfg);
    const auto kd = backward(kdLoss(logitsOf(in.student, b), logitsOf(in.teacher, b), b, in.cfg));
    const auto re = backward(reversedKdLoss(logitsOf(in.teacher, b), logitsOf(in.student, b), b, in.cfg));
    keys = keys && joint.grads.size() == kd.size() + re.size();
    for (const auto &[key, g] : joint.grads) {
      const auto &side = key.rfind("student/", 0) == 0 ? kd : re;
      const auto it = side.find(key);
      if (it == side.end()) {
        keys = false;
        continue;
      }
      worst = std::max(worst, (g.matrix() - it->second.matrix()).cwiseAbs().maxCoeff());
    }
  }
  record(3, keys && worst <= 1e-12, fmt("10 instances, max element-wise difference %.3g (<= 1e-12)", worst));
}

void lattice() {
  std::vector<MaskedBatch> stream;
  for (std::uint64_t i = 0; i < 10; ++i) stream.push_back(randomMaskedBatch(16, 3, 500 + i));
  auto trainee = [](std::uint64_t seed, Index layers, const std::string &role) {
    return makeTrainee(initModel<double>(tinyModel(seed, layers), role));
  };
  bool hard_only = true, oneway = true, community = true;
  {
    auto t = trainee(1, 2, "teacher"), s = trainee(2, 1, "student");
    auto t2 = t, s2 = s;
    for (const auto &b : stream) {
      coTrainStep(t, s, b, weights(1, 0, 1, 0), 1e-3);
      standaloneStep(t2, b, 1.0, 1e-3);
      standaloneStep(s2, b, 1.0, 1e-3);
      hard_only = hard_only && t.params == t2.params && s.params == s2.params;
    }
  }
  {
    // full pre-training runs: the co-oneway regime against ctcd with beta_s = 0
    const MarkovSource source(Vocab{16}, 4);
    const Corpus corpus = generateCorpus(source, CorpusOptions{200, 8, 8, 1});
    PretrainSetup setup;
    setup.teacher = tinyModel(0, 2);
    setup.student = tinyModel(0, 1);
    setup.train.total_steps = 10;
    setup.train.batch_size = 4;
    setup.train.regime = Regime::CoOneway;
    setup.heldout_batches = 1;
    const auto oneway_run = pretrain<double>(setup, corpus, corpus);
    setup.train.regime = Regime::Ctcd;
    setup.train.distill.beta_s = 0;
    const auto ctcd_run = pretrain<double>(setup, corpus, corpus);
    oneway = oneway_run.models.at("teacher") == ctcd_run.models.at("teacher") &&
             oneway_run.models.at("student") == ctcd_run.models.at("student");
  }
  {
    const auto frozen = initModel<double>(tinyModel(9, 2), "teacher");
    auto a = trainee(3, 1, "student1"), c = trainee(4, 1, "student2");
    auto a2 = a, c2 = c;
    DistillConfig cfg = weights(1, 2, 1, 0.5);
    cfg.community_weight_1 = cfg.community_weight_2 = 0;
    for (const auto &b : stream) {
      communityTrainStep(a, c, frozen, b, cfg, 1e-3);
      coTrainStep(c2, a2, b, cfg, 1e-3);
      community = community && a.params == a2.params && c.params == c2.params;
    }
  }
  record(4, hard_only && oneway && community,
         std::string("10 steps, bitwise: hard-only ctcd = 2x standalone ") + (hard_only ? "yes" : "NO") +
             ", ctcd(beta_s=0) teacher = co-oneway teacher " + (oneway ? "yes" : "NO") +
             ", community(teacher weights 0) = ctcd " + (community ? "yes" : "NO"));
}

void identities() {
  DistillConfig cfg;
  const auto p = randomLogits<double>({5, 7}, 1);
  const double self = softLoss(constant(p), constant(p), cfg).item();

  double min_kl = 1e9;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto a = randomLogits<double>({2, 9}, 2 * i + 10, 5.0), c = randomLogits<double>({2, 9}, 2 * i + 11, 5.0);
    min_kl = std::min(min_kl, softLoss(constant(a), constant(c), cfg).item());
  }

  MaskedBatch uniform = randomMaskedBatch(4 + Vocab::kFirstContent, 3, 7);
  for (auto &row : uniform.original_tokens)
    for (auto &t : row) t -= Vocab::kFirstContent;
  const double hard = hardLoss(constant(Tensor<double>({uniform.batch, uniform.seq_len, 4})), uniform).item();

  Tensor<double> ref({1, 2}), learner({1, 2});
  ref[0] = std::log(0.5);
  ref[1] = std::log(0.5);
  learner[0] = std::log(0.25);
  learner[1] = std::log(0.75);
  DistillConfig unit;
  unit.tau = 1;
  const double kl = softLoss(constant(ref), constant(learner), unit).item();

  ModelParameters<double> model = initModel<double>(tinyModel(1), "m");
  const std::string name = "classifier.bias";
  model.forEach([&](const std::string &n, Tensor<double> &t) {
    if (n == name) t.matrix().setZero();
  });
  auto state = makeOptimizerState(model);
  Tensor<double> grad(tensorNamed(model, name).shape());
  grad.matrix().setOnes();
  GradientMap<double> g{{model.parameterId(name), grad}};
  adamwStep(model, g, state, 1e-3);
  const double step = tensorNamed(model, name)[0];

  const bool pass = self < 1e-9 && min_kl >= 0 && std::abs(hard - std::log(4.0)) < 1e-9 &&
                    std::abs(kl - 0.143841) < 1e-6 && std::abs(step - -0.000999999990) < 1e-6;
  char buf[300];
  std::snprintf(buf, sizeof buf,
                "soft(p,p)=%.2g, min soft over 1000 pairs=%.3g, uniform hard-ln4=%.2g, KL=%.6f, AdamW step=%.12f",
                self, min_kl, hard - std::log(4.0), kl, step);
  record(5, pass, buf);
}

ExperimentSpec tinySpec() {
  ExperimentSpec s;
  s.seeds = {1, 2};
  for (ModelConfig *m : {&s.teacher, &s.student}) {
    m->hidden_dim = 16;
    m->num_heads = 2;
    m->ffn_dim = 32;
    m->vocab_size = 24;
    m->max_seq_len = 16;
  }
  s.teacher.num_layers = 2;
  s.student.num_layers = 1;
  s.train.peak_lr = 2e-3;
  s.train.total_steps = 30;
  s.train.batch_size = 8;
  s.corpus = {24, 300, 8, 12, 1, 48};
  s.finetune.lr = 1e-3;
  s.finetune.epochs = 1;
  s.finetune.train_examples = 48;
  s.finetune.validation_examples = 32;
  s.finetune.test_examples = 32;
  s.finetune.task = {8, 12};
  s.budgets = {15, 30};
  s.heldout_batches = 2;
  return s;
}

/// Every regular file below `dir` except wall-clock sidecars, keyed by relative path.
std::map<std::string, std::string> digestTree(const std::filesystem::path &dir) {
  std::map<std::string, std::string> out;
  for (const auto &f : std::filesystem::recursive_directory_iterator(dir)) {
    if (!f.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(f.path(), dir).string();
    if (f.path().filename() == "timing.json" || f.path().filename() == "train_log.jsonl") continue;
    out[rel] = sha256File(f.path());
  }
  return out;
}

void determinism(const std::filesystem::path &scratch) {
  std::map<std::string, std::string> digests[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = scratch / ("determinism" + std::to_string(run));
    std::filesystem::remove_all(out);
    const ExperimentSpec spec = tinySpec();
    runRegimeComparison(spec, out, 1);
    runLengthAblation(spec, out, 1);
    runCommunityComparison(spec, out, 1);
    writeReport(out);
    digests[run] = digestTree(out);
  }
  std::size_t ckpts = 0, results = 0;
  for (const auto &[path, digest] : digests[0]) {
    ckpts += path.ends_with(".ckpt");
    results += path.ends_with("result.json");
  }
  const bool same = digests[0] == digests[1];
  record(8, same && ckpts > 0 && results > 0 && digests[0].count("report.txt"),
         "two independent runs: " + std::to_string(digests[0].size()) + " files (" + std::to_string(ckpts) +
             " checkpoints, " + std::to_string(results) + " results, reports) " +
             (same ? "byte-identical" : "DIFFER"));
}

/// Criteria 6 and 7; returns the regime-comparison manifest for criterion 9.
ExperimentOutcome desk(const std::filesystem::path &config, const std::filesystem::path &out, int threads) {
  const ExperimentSpec spec = loadSpec(config);
  const auto start = std::chrono::steady_clock::now();
  const auto cmp = runRegimeComparison(spec, out, threads);
  const auto len = runLengthAblation(spec, out, threads);
  const Report report = writeReport(out);
  const double s = seconds(start);
  std::printf("desk grid: %zu + %zu cells, %.0f s this invocation\n", cmp.entries.size(), len.entries.size(), s);

  auto claim = [&](const std::string &id) -> const Claim * {
    for (const auto &c : report.claim_list)
      if (c.id == id) return &c;
    return nullptr;
  };
  const Claim *a = claim("a"), *b = claim("b"), *c = claim("c"), *length = claim("length");
  const bool ok6 = cmp.allOk() && a && b && a->holds && b->holds && spec.seeds.size() >= 5;
  char buf[400];
  std::snprintf(buf, sizeof buf,
                "%zu seeds, median task average: (a) ctcd teacher %.4f vs standalone teacher %.4f %s; "
                "(b) ctcd student %.4f vs co-oneway student %.4f %s; (c, reported) ctcd student %.4f vs "
                "standalone student %.4f %s",
                spec.seeds.size(), a ? a->lhs_median : NAN, a ? a->rhs_median : NAN,
                a && a->holds ? "holds" : "does not hold", b ? b->lhs_median : NAN, b ? b->rhs_median : NAN,
                b && b->holds ? "holds" : "does not hold", c ? c->lhs_median : NAN, c ? c->rhs_median : NAN,
                c && c->holds ? "holds" : "does not hold");
  record(6, ok6, buf);

  std::snprintf(buf, sizeof buf,
                "median imbalanced-task MCC gain from doubling steps: ctcd student %.4f vs co-oneway student %.4f %s",
                length ? length->lhs_median : NAN, length ? length->rhs_median : NAN,
                length && length->holds ? "holds" : "does not hold");
  record(7, len.allOk() && length && length->holds, buf);

  return cmp;
}

void learnability(const ExperimentSpec &spec, const ExperimentOutcome &cmp, const std::filesystem::path &out) {
  double lowest = 1;
  std::size_t n = 0;
  for (const auto &e : cmp.entries) {
    if (!e.ok) continue;
    const RunResult r = resultFromJson(nlohmann::json::parse(fileBytes(out / e.dir / "result.json")));
    lowest = std::min(lowest, r.roles.at("student").masked_accuracy);
    ++n;
  }
  const double chance = 1.0 / (spec.corpus.vocab_size - Vocab::kFirstContent);
  char buf[200];
  std::snprintf(buf, sizeof buf, "lowest held-out student masked accuracy over %zu runs %.4f vs 3x chance %.4f",
                n, lowest, 3 * chance);
  record(9, n > 0 && lowest > 3 * chance, buf);
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"acceptance checks"};
  std::string desk_config, desk_out;
  std::string scratch = (std::filesystem::temp_directory_path() / "ctcd_acceptance").string();
  int threads = 1;
  std::string summary;
  app.add_option("--summary", summary, "also write the criterion lines to this file");
  app.add_option("--desk-config", desk_config, "desk-scale spec; criteria 6, 7 and 9 run only when given");
  app.add_option("--desk-out", desk_out, "cache directory of the desk-scale cells");
  app.add_option("--scratch", scratch, "scratch directory")->capture_default_str();
  app.add_option("--threads", threads, "concurrent cells")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::filesystem::remove_all(scratch);
  std::filesystem::create_directories(scratch);
  try {
    gradientCorrectness();
    stopGradient(scratch);
    decomposition();
    lattice();
    identities();
    const std::filesystem::path desk_dir = desk_out.empty() ? std::string("desk") : desk_out;
    std::optional<ExperimentOutcome> cmp;
    if (!desk_config.empty()) cmp = desk(desk_config, desk_dir, threads);
    determinism(scratch);
    if (cmp) learnability(loadSpec(desk_config), *cmp, desk_dir);
  } catch (const std::exception &e) {
    std::printf("error: %s\n", e.what());
    return 1;
  }
  std::size_t failed = 0, directional = 0;
  for (const auto &l : lines) {
    failed += !l.pass;
    directional += !l.pass && (l.id == 6 || l.id == 7);
  }
  std::printf("%zu/%zu criteria pass\n", lines.size() - failed, lines.size());
  if (!summary.empty()) {
    std::ofstream os(summary);
    for (const auto &l : lines) os << "criterion " << l.id << ": " << (l.pass ? "PASS" : "FAIL") << "  " << l.detail << '\n';
  }
  if (directional)
    std::printf("directional criteria failing: %zu (gated claims, reported as exit status 2 by the report)\n",
                directional);
  return failed > directional ? 1 : 0;
}
