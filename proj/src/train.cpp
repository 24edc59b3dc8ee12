// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.cpp
 * @brief  Optimizer, training steps, pre-training loop and fine-tuning.
 */
#include "ctcd/train.hpp"

#include "ctcd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace ctcd {

std::string regimeName(Regime regime) {
  switch (regime) {
    case Regime::Standalone: return "standalone";
    case Regime::CoOneway: return "co-oneway";
    case Regime::Ctcd: return "ctcd";
    case Regime::Community: return "community";
    case Regime::OnewayFrozen: return "oneway-frozen";
  }
  throw std::invalid_argument("bad regime");
}

Regime parseRegime(const std::string &name) {
  for (Regime r : {Regime::Standalone, Regime::CoOneway, Regime::Ctcd, Regime::Community, Regime::OnewayFrozen})
    if (regimeName(r) == name) return r;
  throw std::invalid_argument("unknown regime '" + name + "'");
}

std::vector<std::string> trainedRoles(Regime regime) {
  switch (regime) {
    case Regime::Community: return {"student1", "student2"};
    case Regime::OnewayFrozen: return {"student"};
    default: return {"teacher", "student"};
  }
}

bool needsFrozenTeacher(Regime regime) { return regime == Regime::Community || regime == Regime::OnewayFrozen; }

void TrainConfig::validate() const {
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw std::invalid_argument("warmup fraction must be in (0, 1)");
  if (total_steps < 1) throw std::invalid_argument("total steps must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  if (!(peak_lr > 0)) throw std::invalid_argument("peak learning rate must be positive");
  if (log_every < 1) throw std::invalid_argument("log interval must be at least 1");
  distill.validate();
  if (distill.alpha_h == 0 && distill.alpha_s == 0)
    throw std::invalid_argument("student needs a positive hard or soft weight");
  if (regime == Regime::Standalone && (distill.alpha_h == 0 || distill.beta_h == 0))
    throw std::invalid_argument("standalone training needs positive hard weights");
}

double lrAt(std::int64_t step, double peak, double warmup_fraction, std::int64_t total, LrSchedule schedule) {
  if (step < 0 || step > total)
    throw std::out_of_range("step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  const auto warmup =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total) - 1e-9)));
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  if (schedule == LrSchedule::Constant) return peak;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

double lrAt(std::int64_t step, const TrainConfig &c) {
  return lrAt(step, c.peak_lr, c.warmup_fraction, c.total_steps, c.schedule);
}

// Optimizer ------------------------------------------------------------------------

template <typename Scalar>
OptimizerState<Scalar> makeOptimizerState(const ModelParameters<Scalar> &params, const AdamWConfig &hp) {
  OptimizerState<Scalar> s;
  s.hp = hp;
  params.forEach([&](const std::string &name, const Tensor<Scalar> &t) {
    s.m.emplace(name, Tensor<Scalar>(t.shape()));
    s.v.emplace(name, Tensor<Scalar>(t.shape()));
  });
  return s;
}

template <typename Scalar>
void adamwStep(ModelParameters<Scalar> &params, const GradientMap<Scalar> &grads, OptimizerState<Scalar> &state,
               double lr) {
  params.forEach([&](const std::string &name, Tensor<Scalar> &t) {
    const auto it = grads.find(params.parameterId(name));
    if (it == grads.end()) return;
    if (it->second.shape() != t.shape())
      throw std::invalid_argument("gradient shape mismatch for " + params.parameterId(name));
    if (!it->second.allFinite()) throw NumericError("non-finite gradient for " + params.parameterId(name));
  });

  const AdamWConfig &hp = state.hp;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const auto bc1 = static_cast<Scalar>(1 - std::pow(hp.beta1, t));
  const auto bc2 = static_cast<Scalar>(1 - std::pow(hp.beta2, t));
  const auto b1 = static_cast<Scalar>(hp.beta1), b2 = static_cast<Scalar>(hp.beta2);
  const auto eps = static_cast<Scalar>(hp.eps), wd = static_cast<Scalar>(hp.weight_decay);
  const auto step_size = static_cast<Scalar>(lr);

  params.forEach([&](const std::string &name, Tensor<Scalar> &param) {
    auto theta = param.matrix().array();
    const auto it = grads.find(params.parameterId(name));
    if (it == grads.end()) {
      theta -= step_size * wd * theta;
      return;
    }
    const auto g = it->second.matrix().array();
    auto m = state.m.at(name).matrix().array();
    auto v = state.v.at(name).matrix().array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    theta -= step_size * ((m / bc1) / ((v / bc2).sqrt() + eps) + wd * theta);
  });
}

template <typename Scalar>
Trainee<Scalar> makeTrainee(ModelParameters<Scalar> params, const AdamWConfig &hp) {
  OptimizerState<Scalar> opt = makeOptimizerState(params, hp);
  return {std::move(params), std::move(opt)};
}

// Steps ----------------------------------------------------------------------------

namespace {

template <typename Scalar>
double observeHard(const Var<Scalar> &logits, const MaskedBatch &batch) {
  return static_cast<double>(hardLoss(constant(logits.value()), batch).item());
}

template <typename Scalar>
double observeSoft(const Var<Scalar> &reference, const Var<Scalar> &learner, const MaskedBatch &batch,
                   const DistillConfig &cfg) {
  return static_cast<double>(softLoss(constant(reference.value()), constant(learner.value()), batch, cfg).item());
}

}  // namespace

template <typename Scalar>
StepMetrics standaloneStep(Trainee<Scalar> &model, const MaskedBatch &batch, double weight, double lr) {
  const Var<Scalar> hard = hardLoss(forwardMlmLogits(bind(model.params), batch), batch);
  adamwStep(model.params, backward(scale(hard, static_cast<Scalar>(weight))), model.opt, lr);
  StepMetrics out;
  out.hard[model.params.role] = static_cast<double>(hard.item());
  return out;
}

template <typename Scalar>
StepMetrics coTrainStep(Trainee<Scalar> &teacher, Trainee<Scalar> &student, const MaskedBatch &batch,
                        const DistillConfig &cfg, double lr) {
  const Var<Scalar> t = forwardMlmLogits(bind(teacher.params), batch);
  const Var<Scalar> s = forwardMlmLogits(bind(student.params), batch);
  const auto joint = ctcdLoss(s, t, batch, cfg);
  adamwStep(teacher.params, joint.grads, teacher.opt, lr);
  adamwStep(student.params, joint.grads, student.opt, lr);

  StepMetrics out;
  out.hard[teacher.params.role] = observeHard(t, batch);
  out.hard[student.params.role] = observeHard(s, batch);
  if (cfg.alpha_s > 0) out.soft[student.params.role] = observeSoft(t, s, batch, cfg);
  if (cfg.beta_s > 0) out.soft[teacher.params.role] = observeSoft(s, t, batch, cfg);
  return out;
}

template <typename Scalar>
StepMetrics communityTrainStep(Trainee<Scalar> &student1, Trainee<Scalar> &student2,
                               const ModelParameters<Scalar> &frozen_teacher, const MaskedBatch &batch,
                               const DistillConfig &cfg, double lr) {
  const Var<Scalar> t = forwardMlmLogits(bind(frozen_teacher, Binding::Frozen), batch);
  const Var<Scalar> s1 = forwardMlmLogits(bind(student1.params), batch);
  const Var<Scalar> s2 = forwardMlmLogits(bind(student2.params), batch);
  const auto joint = communityLoss(s1, s2, t, batch, cfg);
  adamwStep(student1.params, joint.grads, student1.opt, lr);
  adamwStep(student2.params, joint.grads, student2.opt, lr);

  StepMetrics out;
  out.hard[student1.params.role] = observeHard(s1, batch);
  out.hard[student2.params.role] = observeHard(s2, batch);
  out.soft[student1.params.role] = observeSoft(t, s1, batch, cfg);
  out.soft[student2.params.role] = observeSoft(t, s2, batch, cfg);
  return out;
}

template <typename Scalar>
StepMetrics frozenKdStep(Trainee<Scalar> &student, const ModelParameters<Scalar> &frozen_teacher,
                         const MaskedBatch &batch, const DistillConfig &cfg, double lr) {
  cfg.validate();
  const Var<Scalar> t = forwardMlmLogits(bind(frozen_teacher, Binding::Frozen), batch);
  const Var<Scalar> s = forwardMlmLogits(bind(student.params), batch);
  adamwStep(student.params, backward(kdLoss(s, t, batch, cfg)), student.opt, lr);

  StepMetrics out;
  out.hard[student.params.role] = observeHard(s, batch);
  out.soft[student.params.role] = observeSoft(t, s, batch, cfg);
  return out;
}

template <typename Scalar>
double maskedAccuracy(const ModelParameters<Scalar> &params, const std::vector<MaskedBatch> &batches) {
  const BoundModel<Scalar> model = bind(params, Binding::Frozen);
  std::size_t hits = 0, total = 0;
  for (const auto &batch : batches) {
    const Var<Scalar> logits = forwardMlmLogits(model, batch);
    const Index vocab = params.config.vocab_size;
    const auto rows = batch.maskedRows();
    const auto targets = batch.maskedTargets();
    const Scalar *data = logits.value().data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Scalar *row = data + rows[i] * vocab;
      hits += (std::max_element(row, row + vocab) - row) == targets[i];
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

// Pre-training ---------------------------------------------------------------------

std::uint64_t initSeed(std::uint64_t run_seed, const std::string &role) {
  return mixSeed({run_seed, tagHash("init"), tagHash(role)});
}

namespace {

bool sameShape(ModelConfig a, ModelConfig b) {
  a.seed = b.seed = 0;
  return a == b;
}

nlohmann::json logRecord(const std::vector<StepRecord> &history, std::size_t from, double seconds) {
  const StepRecord &last = history.back();
  nlohmann::json rec;
  rec["step"] = last.step + 1;
  rec["lr"] = last.lr;
  std::map<std::string, std::pair<double, int>> hard, soft;
  for (std::size_t i = from; i < history.size(); ++i) {
    for (const auto &[role, v] : history[i].metrics.hard) hard[role].first += v, hard[role].second += 1;
    for (const auto &[role, v] : history[i].metrics.soft) soft[role].first += v, soft[role].second += 1;
  }
  for (const auto &[role, acc] : hard) rec["hard"][role] = acc.first / acc.second;
  for (const auto &[role, acc] : soft) rec["soft"][role] = acc.first / acc.second;
  rec["wall_clock_s"] = seconds;
  return rec;
}

}  // namespace

template <typename Scalar>
PretrainOutcome<Scalar> pretrain(const PretrainSetup &setup, const Corpus &corpus, const Corpus &heldout) {
  const TrainConfig &tc = setup.train;
  tc.validate();
  const Regime regime = tc.regime;
  if (corpus.vocab.size != setup.student.vocab_size || corpus.vocab.size != setup.teacher.vocab_size)
    throw std::invalid_argument("model vocabulary does not match the corpus");

  std::optional<ModelParameters<Scalar>> frozen;
  if (needsFrozenTeacher(regime)) {
    if (!setup.frozen_teacher || !std::filesystem::exists(*setup.frozen_teacher))
      throw std::runtime_error("regime " + regimeName(regime) +
                               " needs a pre-trained teacher checkpoint from a prior standalone run at teacher size");
    frozen = loadCheckpoint<Scalar>(*setup.frozen_teacher);
    if (!sameShape(frozen->config, setup.teacher))
      throw std::runtime_error("frozen teacher checkpoint does not match the teacher config");
  }

  std::map<std::string, Trainee<Scalar>> models;
  for (const auto &role : trainedRoles(regime)) {
    ModelConfig mc = role == "teacher" ? setup.teacher : setup.student;
    mc.seed = initSeed(tc.seed, role);
    models.emplace(role, makeTrainee(initModel<Scalar>(mc, role), tc.adamw));
  }

  const bool persist = !setup.out_dir.empty();
  std::ofstream log;
  if (persist) {
    std::filesystem::create_directories(setup.out_dir);
    log.open(setup.out_dir / "train_log.jsonl", std::ios::trunc);
  }
  auto checkpointAll = [&] {
    if (!persist) return;
    for (const auto &[role, m] : models) saveCheckpoint(m.params, setup.out_dir / (role + ".ckpt"));
  };
  checkpointAll();

  BatchStream stream(corpus, tc.batch_size, tc.masking, mixSeed(tc.seed, "batches"));
  PretrainOutcome<Scalar> out;
  out.history.reserve(static_cast<std::size_t>(tc.total_steps));
  const auto start = std::chrono::steady_clock::now();
  std::size_t window_start = 0;

  for (std::int64_t step = 0; step < tc.total_steps; ++step) {
    const double lr = lrAt(step, tc);
    const MaskedBatch batch = stream.next();
    out.stream_fingerprint = splitmix64(out.stream_fingerprint ^ batch.fingerprint());
    StepRecord rec{step, lr, {}};
    try {
      switch (regime) {
        case Regime::Standalone: {
          rec.metrics = standaloneStep(models.at("teacher"), batch, tc.distill.beta_h, lr);
          const auto s = standaloneStep(models.at("student"), batch, tc.distill.alpha_h, lr);
          rec.metrics.hard.insert(s.hard.begin(), s.hard.end());
          break;
        }
        case Regime::CoOneway: {
          DistillConfig oneway = tc.distill;
          oneway.beta_s = 0;
          rec.metrics = coTrainStep(models.at("teacher"), models.at("student"), batch, oneway, lr);
          break;
        }
        case Regime::Ctcd:
          rec.metrics = coTrainStep(models.at("teacher"), models.at("student"), batch, tc.distill, lr);
          break;
        case Regime::Community:
          rec.metrics = communityTrainStep(models.at("student1"), models.at("student2"), *frozen, batch, tc.distill, lr);
          break;
        case Regime::OnewayFrozen:
          rec.metrics = frozenKdStep(models.at("student"), *frozen, batch, tc.distill, lr);
          break;
      }
    } catch (const NumericError &e) {
      if (log.is_open()) log << nlohmann::json{{"step", step + 1}, {"error", e.what()}}.dump() << '\n';
      throw NumericError("step " + std::to_string(step + 1) + ": " + e.what() + " (last checkpoints kept)");
    }
    out.history.push_back(std::move(rec));

    const bool interval_done = (step + 1) % tc.log_every == 0 || step + 1 == tc.total_steps;
    if (log.is_open() && interval_done) {
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log << logRecord(out.history, window_start, seconds).dump() << '\n' << std::flush;
    }
    if (interval_done) window_start = out.history.size();
    if (stream.epochBoundary()) checkpointAll();
  }
  checkpointAll();

  const auto eval = heldOutBatches(heldout, tc.batch_size, tc.masking, setup.heldout_seed);
  const std::vector<MaskedBatch> probe(eval.begin(),
                                       eval.begin() + static_cast<std::ptrdiff_t>(std::min(eval.size(), setup.heldout_batches)));
  for (auto &[role, m] : models) {
    out.heldout_accuracy[role] = maskedAccuracy(m.params, probe);
    out.models.emplace(role, std::move(m.params));
  }
  return out;
}

// Fine-tuning ----------------------------------------------------------------------

double matthewsCorrelation(std::int64_t tp, std::int64_t tn, std::int64_t fp, std::int64_t fn) {
  const double denom = std::sqrt(static_cast<double>(tp + fp) * static_cast<double>(tp + fn) *
                                 static_cast<double>(tn + fp) * static_cast<double>(tn + fn));
  if (denom == 0) return 0.0;
  return (static_cast<double>(tp) * static_cast<double>(tn) - static_cast<double>(fp) * static_cast<double>(fn)) /
         denom;
}

ClassificationMetrics classificationMetrics(const std::vector<int> &labels, const std::vector<int> &predictions) {
  if (labels.size() != predictions.size() || labels.empty())
    throw std::invalid_argument("labels and predictions must be non-empty and aligned");
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool y = labels[i] == 1, p = predictions[i] == 1;
    tp += y && p;
    tn += !y && !p;
    fp += !y && p;
    fn += y && !p;
  }
  return {static_cast<double>(tp + tn) / static_cast<double>(labels.size()), matthewsCorrelation(tp, tn, fp, fn)};
}

template <typename Scalar>
std::vector<int> predictLabels(const ModelParameters<Scalar> &params, const std::vector<DownstreamExample> &examples,
                               std::size_t batch_size) {
  const BoundModel<Scalar> model = bind(params, Binding::Frozen);
  std::vector<int> out;
  out.reserve(examples.size());
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const std::size_t end = std::min(examples.size(), begin + batch_size);
    std::vector<TokenSequence> seqs;
    for (std::size_t i = begin; i < end; ++i) seqs.push_back(examples[i].tokens);
    const auto logits = forwardClassLogits(model, collateTokens(seqs)).matrix();
    for (Index r = 0; r < logits.rows(); ++r) {
      Index best = 0;
      logits.row(r).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

template <typename Scalar>
FinetuneResult finetune(const ModelParameters<Scalar> &pretrained, TaskId task, const MarkovSource &source,
                        const FinetuneConfig &config) {
  if (config.epochs < 1 || config.batch_size < 1 || config.train_examples < config.batch_size)
    throw std::invalid_argument("fine-tuning needs at least one epoch and one full batch");
  const auto task_tag = static_cast<std::uint64_t>(task);
  const auto train = makeDownstreamTask(task, source, config.train_examples, mixSeed({config.seed, tagHash("train"), task_tag}), config.task);
  const auto validation =
      makeDownstreamTask(task, source, config.validation_examples, mixSeed({config.seed, tagHash("validation"), task_tag}), config.task);
  const auto test = makeDownstreamTask(task, source, config.test_examples, mixSeed({config.seed, tagHash("test"), task_tag}), config.task);
  auto labelsOf = [](const std::vector<DownstreamExample> &xs) {
    std::vector<int> y;
    for (const auto &x : xs) y.push_back(x.label);
    return y;
  };
  const auto val_labels = labelsOf(validation), test_labels = labelsOf(test);

  ModelParameters<Scalar> params = pretrained;
  resetClassifier(params, mixSeed({config.seed, tagHash("head"), task_tag}));
  Trainee<Scalar> model = makeTrainee(std::move(params), config.adamw);

  const std::size_t steps_per_epoch = train.size() / config.batch_size;
  const auto total = static_cast<std::int64_t>(steps_per_epoch) * config.epochs;
  std::vector<std::size_t> order(train.size());
  std::int64_t step = 0;
  FinetuneResult result;
  double best = -2;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mixSeed({config.seed, tagHash("order"), task_tag, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      std::vector<TokenSequence> seqs;
      std::vector<Index> labels;
      for (std::size_t i = b * config.batch_size; i < (b + 1) * config.batch_size; ++i) {
        seqs.push_back(train[order[i]].tokens);
        labels.push_back(train[order[i]].label);
      }
      const Var<Scalar> logits = forwardClassLogits(bind(model.params), collateTokens(seqs));
      const Var<Scalar> loss = scale(mean(pickPerRow(logSoftmax(logits), labels)), Scalar(-1));
      adamwStep(model.params, backward(loss), model.opt,
                lrAt(step, config.lr, config.warmup_fraction, total, LrSchedule::LinearDecay));
    }
    const auto val = classificationMetrics(val_labels, predictLabels(model.params, validation, 64));
    const double score = usesMcc(task) ? val.mcc : val.accuracy;
    if (score > best) {
      best = score;
      result.validation = val;
      result.best_epoch = epoch + 1;
      result.test = classificationMetrics(test_labels, predictLabels(model.params, test, 64));
    }
  }
  return result;
}

#define CTCD_INSTANTIATE_TRAIN(S)                                                                               \
  template OptimizerState<S> makeOptimizerState<S>(const ModelParameters<S> &, const AdamWConfig &);            \
  template void adamwStep<S>(ModelParameters<S> &, const GradientMap<S> &, OptimizerState<S> &, double);        \
  template Trainee<S> makeTrainee<S>(ModelParameters<S>, const AdamWConfig &);                                  \
  template StepMetrics standaloneStep<S>(Trainee<S> &, const MaskedBatch &, double, double);                    \
  template StepMetrics coTrainStep<S>(Trainee<S> &, Trainee<S> &, const MaskedBatch &, const DistillConfig &,  \
                                      double);                                                                  \
  template StepMetrics communityTrainStep<S>(Trainee<S> &, Trainee<S> &, const ModelParameters<S> &,            \
                                             const MaskedBatch &, const DistillConfig &, double);               \
  template StepMetrics frozenKdStep<S>(Trainee<S> &, const ModelParameters<S> &, const MaskedBatch &,           \
                                       const DistillConfig &, double);                                          \
  template double maskedAccuracy<S>(const ModelParameters<S> &, const std::vector<MaskedBatch> &);              \
  template PretrainOutcome<S> pretrain<S>(const PretrainSetup &, const Corpus &, const Corpus &);               \
  template std::vector<int> predictLabels<S>(const ModelParameters<S> &, const std::vector<DownstreamExample> &, \
                                             std::size_t);                                                      \
  template FinetuneResult finetune<S>(const ModelParameters<S> &, TaskId, const MarkovSource &,                 \
                                      const FinetuneConfig &);

CTCD_INSTANTIATE_TRAIN(float)
CTCD_INSTANTIATE_TRAIN(double)

}  // namespace ctcd
