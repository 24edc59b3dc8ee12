// SPDX-License-Identifier: Apache-2.0
// Command-line front end: single runs, experiment grids and reports.
#include "ctcd/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace ctcd;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::optional<std::string> precision;
  int threads = 1;
};

void addCommon(CLI::App *app, Common &c) {
  app->add_option("--config", c.config, "JSON experiment spec")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run a single seed instead of the config's list");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--precision", c.precision, "floating-point precision")->check(CLI::IsMember({"single", "double"}));
  app->add_option("--threads", c.threads, "cells run concurrently")->check(CLI::PositiveNumber)->capture_default_str();
}

ExperimentSpec resolveSpec(const Common &c) {
  ExperimentSpec spec = c.config.empty() ? ExperimentSpec{} : loadSpec(c.config);
  if (c.seed) spec.seeds = {*c.seed};
  if (c.precision) spec.precision = parsePrecision(*c.precision);
  spec.validate();
  return spec;
}

template <typename Scalar>
int runPretrain(const ExperimentSpec &spec, Regime regime, const std::string &out,
                const std::optional<std::string> &teacher) {
  const ExperimentData data = makeExperimentData(spec.corpus);
  PretrainSetup setup;
  setup.teacher = spec.teacher;
  setup.student = spec.student;
  setup.train = spec.train;
  setup.train.regime = regime;
  setup.train.seed = spec.seeds.front();
  setup.out_dir = out;
  if (teacher) setup.frozen_teacher = *teacher;
  setup.heldout_batches = spec.heldout_batches;
  setup.heldout_seed = mixSeed(spec.corpus.seed, "heldout-masking");
  const auto outcome = pretrain<Scalar>(setup, data.corpus, data.heldout);
  for (const auto &[role, acc] : outcome.heldout_accuracy)
    std::printf("%s: held-out masked accuracy %.6f, checkpoint %s\n", role.c_str(), acc,
                (std::filesystem::path(out) / (role + ".ckpt")).c_str());
  return 0;
}

template <typename Scalar>
int runFinetune(const ExperimentSpec &spec, const std::string &checkpoint, const std::vector<std::string> &tasks) {
  const auto params = loadCheckpoint<Scalar>(checkpoint);
  const MarkovSource source(Vocab{spec.corpus.vocab_size}, spec.corpus.seed);
  FinetuneConfig fc = spec.finetune;
  fc.seed = spec.seeds.front();
  nlohmann::json out = nlohmann::json::object();
  for (const auto &name : tasks) {
    const FinetuneResult r = finetune(params, parseTask(name), source, fc);
    out[name] = {{"accuracy", r.test.accuracy}, {"mcc", r.test.mcc}, {"best_epoch", r.best_epoch}};
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int summarize(const ExperimentOutcome &outcome, const std::string &out) {
  std::size_t ok = 0;
  for (const auto &e : outcome.entries) {
    if (e.ok)
      ++ok;
    else
      std::fprintf(stderr, "cell %s seed %llu failed: %s\n", e.label.c_str(),
                   static_cast<unsigned long long>(e.cell.seed), e.error.c_str());
  }
  std::printf("%s: %zu/%zu cells ok\n", outcome.kind.c_str(), ok, outcome.entries.size());
  const Report report = writeReport(out);
  std::cout << report.text;
  return outcome.allOk() ? report.exitCode() : 1;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Co-training and co-distillation of masked language models"};
  app.require_subcommand(1);

  Common common;
  std::string regime_name = "ctcd";
  std::optional<std::string> teacher_ckpt;
  std::string checkpoint;
  std::vector<std::string> tasks;

  auto *pre = app.add_subcommand("pretrain", "pre-train the models of one regime");
  addCommon(pre, common);
  pre->add_option("--regime", regime_name, "standalone, co-oneway, ctcd, community or oneway-frozen")
      ->capture_default_str();
  pre->add_option("--teacher-checkpoint", teacher_ckpt, "frozen teacher for community and oneway-frozen");

  auto *fine = app.add_subcommand("finetune", "fine-tune a checkpoint on downstream tasks");
  addCommon(fine, common);
  fine->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  fine->add_option("--task", tasks, "task name (repeatable); default: the config's tasks");

  auto *cmp = app.add_subcommand("compare-regimes", "every regime x seed cell");
  auto *sw = app.add_subcommand("sweep-weights", "teacher-side and student-side loss-weight grids");
  auto *sl = app.add_subcommand("sweep-length", "co-oneway and ctcd at two step budgets");
  auto *cm = app.add_subcommand("community", "community students vs classic KD from a frozen teacher");
  auto *rep = app.add_subcommand("report", "aggregate results under --out");
  for (auto *sub : {cmp, sw, sl, cm, rep}) addCommon(sub, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (rep->parsed()) {
      const Report report = writeReport(common.out);
      std::cout << report.text;
      return report.exitCode();
    }
    const ExperimentSpec spec = resolveSpec(common);
    const bool single = spec.precision == Precision::Single;
    if (pre->parsed()) {
      const Regime regime = parseRegime(regime_name);
      return single ? runPretrain<float>(spec, regime, common.out, teacher_ckpt)
                    : runPretrain<double>(spec, regime, common.out, teacher_ckpt);
    }
    if (fine->parsed()) {
      if (tasks.empty())
        for (TaskId t : spec.tasks) tasks.push_back(taskName(t));
      const bool ckpt_single = checkpointPrecision(checkpoint) == sizeof(float);
      if (common.precision && ckpt_single != single)
        throw std::invalid_argument("--precision does not match the checkpoint");
      return ckpt_single ? runFinetune<float>(spec, checkpoint, tasks) : runFinetune<double>(spec, checkpoint, tasks);
    }
    if (cmp->parsed()) return summarize(runRegimeComparison(spec, common.out, common.threads), common.out);
    if (sw->parsed()) return summarize(runLossWeightSweep(spec, common.out, common.threads), common.out);
    if (sl->parsed()) return summarize(runLengthAblation(spec, common.out, common.threads), common.out);
    if (cm->parsed()) return summarize(runCommunityComparison(spec, common.out, common.threads), common.out);
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
