// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.hpp
 * @brief  AdamW, learning-rate schedule, per-regime training steps,
 *         pre-training and downstream fine-tuning.
 */
#ifndef CTCD_TRAIN_HPP
#define CTCD_TRAIN_HPP

#include "ctcd/model.hpp"
#include "ctcd/objectives.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ctcd {

/// standalone: both sizes trained independently on the hard loss.
/// co-oneway: joint training, knowledge flows teacher -> student only.
/// ctcd: joint training with distillation in both directions.
/// community: two students distilling from each other and a frozen teacher.
/// oneway-frozen: one student distilling from a frozen teacher.
enum class Regime { Standalone, CoOneway, Ctcd, Community, OnewayFrozen };

std::string regimeName(Regime regime);
Regime parseRegime(const std::string &name);
/// Roles of the models a regime trains, e.g. {"teacher", "student"}.
std::vector<std::string> trainedRoles(Regime regime);
bool needsFrozenTeacher(Regime regime);

enum class LrSchedule { LinearDecay, Constant };

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  double peak_lr = 5e-4;
  double warmup_fraction = 0.05;
  std::int64_t total_steps = 3000;
  std::size_t batch_size = 16;
  LrSchedule schedule = LrSchedule::LinearDecay;
  Regime regime = Regime::Ctcd;
  DistillConfig distill;
  AdamWConfig adamw;
  MaskingOptions masking;
  std::uint64_t seed = 1;
  std::int64_t log_every = 50;

  void validate() const;
};

/// Linear warmup from 0 to peak over ceil(warmup_fraction * total) steps,
/// then linear decay to 0 at `total` (or constant at peak).
double lrAt(std::int64_t step, double peak, double warmup_fraction, std::int64_t total,
            LrSchedule schedule = LrSchedule::LinearDecay);
double lrAt(std::int64_t step, const TrainConfig &config);

template <typename Scalar>
struct OptimizerState {
  AdamWConfig hp;
  std::int64_t step = 0;
  std::map<std::string, Tensor<Scalar>> m, v;
};

template <typename Scalar>
OptimizerState<Scalar> makeOptimizerState(const ModelParameters<Scalar> &params, const AdamWConfig &hp = {});

/// One decoupled-weight-decay Adam update. Tensors without a gradient entry
/// are only decayed; their moments stay as they are. Throws NumericError,
/// leaving params and state untouched, if any gradient is non-finite.
template <typename Scalar>
void adamwStep(ModelParameters<Scalar> &params, const GradientMap<Scalar> &grads, OptimizerState<Scalar> &state,
               double lr);

/// Unweighted loss components observed during one step.
struct StepMetrics {
  std::map<std::string, double> hard;  ///< role -> hard loss
  std::map<std::string, double> soft;  ///< role -> soft loss it learned from (absent if none)
};

/// A model being trained together with its optimizer state.
template <typename Scalar>
struct Trainee {
  ModelParameters<Scalar> params;
  OptimizerState<Scalar> opt;
};

template <typename Scalar>
Trainee<Scalar> makeTrainee(ModelParameters<Scalar> params, const AdamWConfig &hp = {});

/// Hard-loss step on one model; `weight` scales its loss.
template <typename Scalar>
StepMetrics standaloneStep(Trainee<Scalar> &model, const MaskedBatch &batch, double weight, double lr);

/// Joint step on the summed co-distillation objective. The co-oneway regime is
/// this step with beta_s forced to 0.
template <typename Scalar>
StepMetrics coTrainStep(Trainee<Scalar> &teacher, Trainee<Scalar> &student, const MaskedBatch &batch,
                        const DistillConfig &cfg, double lr);

template <typename Scalar>
StepMetrics communityTrainStep(Trainee<Scalar> &student1, Trainee<Scalar> &student2,
                               const ModelParameters<Scalar> &frozen_teacher, const MaskedBatch &batch,
                               const DistillConfig &cfg, double lr);

/// Classic distillation from a frozen teacher: alpha_h * hard + alpha_s * soft.
template <typename Scalar>
StepMetrics frozenKdStep(Trainee<Scalar> &student, const ModelParameters<Scalar> &frozen_teacher,
                         const MaskedBatch &batch, const DistillConfig &cfg, double lr);

/// Masked-token accuracy over fixed batches.
template <typename Scalar>
double maskedAccuracy(const ModelParameters<Scalar> &params, const std::vector<MaskedBatch> &batches);

// Pre-training --------------------------------------------------------------------

struct PretrainSetup {
  ModelConfig teacher;  ///< also the frozen teacher's expected shape
  ModelConfig student;
  TrainConfig train;
  std::filesystem::path out_dir;  ///< checkpoints and log; empty disables both
  std::optional<std::filesystem::path> frozen_teacher;
  std::size_t heldout_batches = 40;
  std::uint64_t heldout_seed = 0;
};

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0;
  StepMetrics metrics;
};

template <typename Scalar>
struct PretrainOutcome {
  std::map<std::string, ModelParameters<Scalar>> models;  ///< role -> trained parameters
  std::vector<StepRecord> history;
  std::map<std::string, double> heldout_accuracy;  ///< role -> masked-token accuracy
  std::uint64_t stream_fingerprint = 0;           ///< digest of every batch consumed
};

/// Seed used to initialize the model playing `role` in a run.
std::uint64_t initSeed(std::uint64_t run_seed, const std::string &role);

/// Runs the configured regime over `corpus`. Checkpoints (<role>.ckpt) are
/// written at start, at every epoch boundary and at the end. On a numeric
/// failure the last checkpoints stay on disk and the error is rethrown.
template <typename Scalar>
PretrainOutcome<Scalar> pretrain(const PretrainSetup &setup, const Corpus &corpus, const Corpus &heldout);

// Fine-tuning ---------------------------------------------------------------------

struct FinetuneConfig {
  double lr = 1e-4;
  double warmup_fraction = 0.05;
  int epochs = 3;
  std::size_t batch_size = 16;
  std::size_t train_examples = 1000;
  std::size_t validation_examples = 500;
  std::size_t test_examples = 1000;
  std::uint64_t seed = 1;
  TaskOptions task;
  AdamWConfig adamw;
};

struct ClassificationMetrics {
  double accuracy = 0;
  double mcc = 0;
};

ClassificationMetrics classificationMetrics(const std::vector<int> &labels, const std::vector<int> &predictions);
double matthewsCorrelation(std::int64_t tp, std::int64_t tn, std::int64_t fp, std::int64_t fn);

struct FinetuneResult {
  ClassificationMetrics test;
  ClassificationMetrics validation;
  int best_epoch = 0;
};

/// Fresh classification head, all parameters trained; the epoch with the best
/// validation score (MCC for imbalanced tasks) is evaluated on the test split.
template <typename Scalar>
FinetuneResult finetune(const ModelParameters<Scalar> &pretrained, TaskId task, const MarkovSource &source,
                        const FinetuneConfig &config);

template <typename Scalar>
std::vector<int> predictLabels(const ModelParameters<Scalar> &params, const std::vector<DownstreamExample> &examples,
                               std::size_t batch_size);

}  // namespace ctcd

#endif  // CTCD_TRAIN_HPP
