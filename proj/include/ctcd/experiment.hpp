// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiment.hpp
 * @brief  Experiment specs, cached run cells and the comparison drivers.
 *
 * A cell is one pre-training run plus fine-tuning of every model it trains.
 * Cells live under <out>/cells/<name>-<hash>/ and are reused whenever a cell
 * with the same config hash already has a result. Each driver also writes a
 * manifest under <out>/experiments/ naming the cells it used; the report is
 * built from the manifests and results alone.
 */
#ifndef CTCD_EXPERIMENT_HPP
#define CTCD_EXPERIMENT_HPP

#include "ctcd/train.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ctcd {

inline constexpr const char *kEngineVersion = "1.0.0";
inline constexpr int kResultSchemaVersion = 1;

enum class Precision { Single, Double };
std::string precisionName(Precision p);
Precision parsePrecision(const std::string &name);

struct CorpusSpec {
  std::int32_t vocab_size = 64;
  std::size_t num_sequences = 100000;
  std::size_t min_len = 8;
  std::size_t max_len = 30;
  std::uint64_t seed = 1;
  std::size_t heldout_sequences = 2000;
};

struct ExperimentSpec {
  std::vector<Regime> regimes{Regime::Standalone, Regime::CoOneway, Regime::Ctcd};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  ModelConfig teacher;
  ModelConfig student;
  TrainConfig train;  ///< template; regime, seed and steps are set per cell
  CorpusSpec corpus;
  FinetuneConfig finetune;
  std::vector<TaskId> tasks{TaskId::Parity, TaskId::Majority, TaskId::PatternImbalanced};
  std::vector<std::int64_t> budgets{1500, 3000};  ///< {T, 2T} for the length study
  Precision precision = Precision::Single;
  std::size_t heldout_batches = 40;

  ExperimentSpec();
  void validate() const;
};

nlohmann::json toJson(const ExperimentSpec &spec);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentSpec specFromJson(const nlohmann::json &j);
ExperimentSpec loadSpec(const std::filesystem::path &path);

nlohmann::json toJson(const ModelConfig &c);
nlohmann::json toJson(const DistillConfig &c);

/// One run of the grid.
struct CellSpec {
  Regime regime = Regime::Ctcd;
  std::uint64_t seed = 1;
  std::int64_t budget = 0;  ///< total steps; 0 means the config's train.total_steps
  DistillConfig distill;
  std::optional<std::filesystem::path> frozen_teacher;
};

/// Everything that determines a cell's outcome, in canonical form.
nlohmann::json cellConfig(const ExperimentSpec &spec, const CellSpec &cell);
std::string sha256Hex(const std::string &bytes);
std::string sha256File(const std::filesystem::path &path);
std::string configHash(const nlohmann::json &config);
/// Directory name of a cell: <regime>-s<seed>-<first 12 hash chars>.
std::string cellDirName(const CellSpec &cell, const std::string &hash);

struct RoleResult {
  double masked_accuracy = 0;
  double final_hard = 0;  ///< mean over the last 50 steps
  std::optional<double> final_soft;
  std::map<std::string, FinetuneResult> tasks;
  double average = 0;  ///< mean primary metric over tasks
  std::string checkpoint;  ///< relative to the cell directory
  std::string checkpoint_sha256;
};

struct RunResult {
  std::string config_hash;
  nlohmann::json config;
  std::string stream_fingerprint;
  std::map<std::string, RoleResult> roles;
  nlohmann::json notes = nlohmann::json::object();  ///< e.g. frozen teacher digests
};

nlohmann::json toJson(const RunResult &r);
RunResult resultFromJson(const nlohmann::json &j);

/// Mean of the primary metric (MCC for imbalanced tasks, else accuracy).
double taskAverage(const std::map<std::string, FinetuneResult> &tasks);

/// Shared read-only inputs of every cell of a spec.
struct ExperimentData {
  MarkovSource source;
  Corpus corpus;
  Corpus heldout;
};
ExperimentData makeExperimentData(const CorpusSpec &spec);

/// Runs (or loads from cache) one cell below `out_dir`.
RunResult runCell(const ExperimentSpec &spec, const CellSpec &cell, const ExperimentData &data,
                  const std::filesystem::path &out_dir);

struct ManifestEntry {
  std::string label;  ///< cell label inside the experiment, e.g. "ctcd" or "ctcd@1500"
  CellSpec cell;
  std::string hash;
  std::string dir;  ///< relative to out_dir
  bool ok = false;
  std::string error;
};

struct ExperimentOutcome {
  std::string kind;
  std::vector<ManifestEntry> entries;
  bool allOk() const;
};

/// Drivers. Each runs its cells (up to `threads` at once), writes
/// <out>/experiments/<kind>.json and returns the manifest.
ExperimentOutcome runRegimeComparison(const ExperimentSpec &spec, const std::filesystem::path &out, int threads);
ExperimentOutcome runLossWeightSweep(const ExperimentSpec &spec, const std::filesystem::path &out, int threads);
ExperimentOutcome runLengthAblation(const ExperimentSpec &spec, const std::filesystem::path &out, int threads);
ExperimentOutcome runCommunityComparison(const ExperimentSpec &spec, const std::filesystem::path &out, int threads);

/// The eight loss-weight settings: teacher side (alpha 1:1, beta varied) then
/// student side (beta 1:1, alpha varied). Labels look like "teacher-side 1:1:1:4".
std::vector<std::pair<std::string, DistillConfig>> lossWeightGrid(const DistillConfig &base);

// Report ------------------------------------------------------------------------

struct Claim {
  std::string id;
  std::string description;
  std::string lhs, rhs;
  double lhs_median = 0, rhs_median = 0;
  bool holds = false;
  bool gated = false;
};

struct Report {
  std::string text;    ///< human-readable summary
  std::string table;   ///< CSV: experiment,cell,role,metric,n,median,values
  std::string claims;  ///< CSV: claim,description,lhs,rhs,lhs_median,rhs_median,holds,gated
  std::vector<Claim> claim_list;
  bool cells_ok = true;       ///< every manifest entry produced a result
  bool invariants_ok = true;  ///< stream sharing and frozen-teacher checks
  /// 1 on a failed cell or invariant, else 2 if a gated claim failed, else 0.
  int exitCode() const;
};

double median(std::vector<double> values);

/// Aggregates every manifest and result below `out_dir`. Throws if there is
/// no result at all.
Report buildReport(const std::filesystem::path &out_dir);
/// Builds the report and writes report.txt, report.csv and claims.csv.
Report writeReport(const std::filesystem::path &out_dir);

}  // namespace ctcd

#endif  // CTCD_EXPERIMENT_HPP
