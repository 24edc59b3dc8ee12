// SPDX-License-Identifier: Apache-2.0
/**
 * @file   experiment.cpp
 * @brief  Spec parsing, cell execution with caching, and experiment drivers.
 */
#include "ctcd/experiment.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ctcd {

using nlohmann::json;

std::string precisionName(Precision p) { return p == Precision::Single ? "single" : "double"; }

Precision parsePrecision(const std::string &name) {
  if (name == "single") return Precision::Single;
  if (name == "double") return Precision::Double;
  throw std::invalid_argument("precision must be 'single' or 'double', got '" + name + "'");
}

ExperimentSpec::ExperimentSpec() {
  teacher.num_layers = 4;
  student.num_layers = 2;
}

void ExperimentSpec::validate() const {
  if (regimes.empty()) throw std::invalid_argument("spec needs at least one regime");
  if (seeds.empty()) throw std::invalid_argument("spec needs at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw std::invalid_argument("seeds must be distinct");
  teacher.validate();
  student.validate();
  train.validate();
  if (teacher.vocab_size != corpus.vocab_size || student.vocab_size != corpus.vocab_size)
    throw std::invalid_argument("model vocab_size must equal corpus vocab_size");
  if (corpus.max_len + 2 > static_cast<std::size_t>(std::min(teacher.max_seq_len, student.max_seq_len)) ||
      finetune.task.max_len + 2 > static_cast<std::size_t>(std::min(teacher.max_seq_len, student.max_seq_len)))
    throw std::invalid_argument("max_seq_len must cover the longest framed sequence");
  if (tasks.empty()) throw std::invalid_argument("spec needs at least one downstream task");
  for (auto b : budgets)
    if (b < 1) throw std::invalid_argument("step budgets must be positive");
}

// JSON --------------------------------------------------------------------------

namespace {

/// Reads known keys of one object and rejects the rest.
class Fields {
 public:
  Fields(const json &j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + " must be an object");
  }
  template <typename T>
  void get(const char *key, T &out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception &e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  const json *child(const char *key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  std::string path(const char *key) const { return where_ + "." + key; }
  void finish() const {
    for (const auto &[k, v] : j_.items())
      if (!seen_.count(k)) throw std::invalid_argument("unknown config key '" + where_ + "." + k + "'");
  }

 private:
  const json &j_;
  std::string where_;
  std::set<std::string> seen_;
};

void readModel(const json &j, const std::string &where, ModelConfig &c) {
  Fields f(j, where);
  f.get("num_layers", c.num_layers);
  f.get("hidden_dim", c.hidden_dim);
  f.get("num_heads", c.num_heads);
  f.get("ffn_dim", c.ffn_dim);
  f.get("vocab_size", c.vocab_size);
  f.get("max_seq_len", c.max_seq_len);
  f.get("num_classes", c.num_classes);
  f.get("tie_embeddings", c.tie_embeddings);
  f.finish();
}

std::string positionsName(SoftPositions p) { return p == SoftPositions::MaskedOnly ? "masked-only" : "all-positions"; }

void readDistill(const json &j, const std::string &where, DistillConfig &c) {
  Fields f(j, where);
  f.get("tau", c.tau);
  f.get("alpha_h", c.alpha_h);
  f.get("alpha_s", c.alpha_s);
  f.get("beta_h", c.beta_h);
  f.get("beta_s", c.beta_s);
  std::string positions = positionsName(c.positions);
  f.get("soft_positions", positions);
  if (positions == "masked-only")
    c.positions = SoftPositions::MaskedOnly;
  else if (positions == "all-positions")
    c.positions = SoftPositions::AllPositions;
  else
    throw std::invalid_argument(f.path("soft_positions") + " must be 'masked-only' or 'all-positions'");
  f.get("tau_squared", c.tau_squared);
  f.get("community_weight_1", c.community_weight_1);
  f.get("community_weight_2", c.community_weight_2);
  f.finish();
}

json toJson(const MaskingOptions &m) {
  return {{"rate", m.rate}, {"split", m.split}, {"mask_fraction", m.mask_fraction}, {"random_fraction", m.random_fraction}};
}

json toJson(const AdamWConfig &a) {
  return {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

void readAdamW(const json &j, const std::string &where, AdamWConfig &a) {
  Fields f(j, where);
  f.get("beta1", a.beta1);
  f.get("beta2", a.beta2);
  f.get("eps", a.eps);
  f.get("weight_decay", a.weight_decay);
  f.finish();
}

json trainJson(const TrainConfig &t) {
  return {{"peak_lr", t.peak_lr},
          {"warmup_fraction", t.warmup_fraction},
          {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"schedule", t.schedule == LrSchedule::LinearDecay ? "linear" : "constant"},
          {"log_every", t.log_every},
          {"masking", toJson(t.masking)},
          {"adamw", toJson(t.adamw)},
          {"distill", toJson(t.distill)}};
}

json finetuneJson(const FinetuneConfig &c) {
  return {{"lr", c.lr},
          {"warmup_fraction", c.warmup_fraction},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"train_examples", c.train_examples},
          {"validation_examples", c.validation_examples},
          {"test_examples", c.test_examples},
          {"min_len", c.task.min_len},
          {"max_len", c.task.max_len},
          {"adamw", toJson(c.adamw)}};
}

json corpusJson(const CorpusSpec &c) {
  return {{"vocab_size", c.vocab_size},       {"num_sequences", c.num_sequences}, {"min_len", c.min_len},
          {"max_len", c.max_len},             {"seed", c.seed},                   {"heldout_sequences", c.heldout_sequences},
          {"generator_version", Corpus::kGeneratorVersion}};
}

std::string ratioNumber(double v) {
  char buf[32];
  if (v == std::floor(v))
    std::snprintf(buf, sizeof buf, "%.0f", v);
  else
    std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string weightLabel(const DistillConfig &d) {
  return ratioNumber(d.alpha_h) + ":" + ratioNumber(d.alpha_s) + ":" + ratioNumber(d.beta_h) + ":" +
         ratioNumber(d.beta_s);
}

void writeAtomically(const std::filesystem::path &path, const std::string &content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
  }
  std::filesystem::rename(tmp, path);
}

json readJsonFile(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception &e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

json toJson(const ModelConfig &c) {
  return {{"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},   {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},         {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"num_classes", c.num_classes}, {"tie_embeddings", c.tie_embeddings}};
}

json toJson(const DistillConfig &c) {
  return {{"tau", c.tau},
          {"alpha_h", c.alpha_h},
          {"alpha_s", c.alpha_s},
          {"beta_h", c.beta_h},
          {"beta_s", c.beta_s},
          {"soft_positions", positionsName(c.positions)},
          {"tau_squared", c.tau_squared},
          {"community_weight_1", c.community_weight_1},
          {"community_weight_2", c.community_weight_2}};
}

json toJson(const ExperimentSpec &s) {
  json regimes = json::array(), tasks = json::array();
  for (Regime r : s.regimes) regimes.push_back(regimeName(r));
  for (TaskId t : s.tasks) tasks.push_back(taskName(t));
  return {{"regimes", regimes},
          {"seeds", s.seeds},
          {"teacher", toJson(s.teacher)},
          {"student", toJson(s.student)},
          {"train", trainJson(s.train)},
          {"corpus", corpusJson(s.corpus)},
          {"finetune", finetuneJson(s.finetune)},
          {"tasks", tasks},
          {"budgets", s.budgets},
          {"precision", precisionName(s.precision)},
          {"heldout_batches", s.heldout_batches}};
}

ExperimentSpec specFromJson(const json &j) {
  ExperimentSpec s;
  Fields f(j, "spec");
  if (const json *r = f.child("regimes")) {
    s.regimes.clear();
    for (const auto &name : *r) s.regimes.push_back(parseRegime(name.get<std::string>()));
  }
  f.get("seeds", s.seeds);
  if (const json *m = f.child("teacher")) readModel(*m, "spec.teacher", s.teacher);
  if (const json *m = f.child("student")) readModel(*m, "spec.student", s.student);
  if (const json *t = f.child("train")) {
    Fields g(*t, "spec.train");
    g.get("peak_lr", s.train.peak_lr);
    g.get("warmup_fraction", s.train.warmup_fraction);
    g.get("total_steps", s.train.total_steps);
    g.get("batch_size", s.train.batch_size);
    std::string schedule = "linear";
    g.get("schedule", schedule);
    if (schedule == "linear")
      s.train.schedule = LrSchedule::LinearDecay;
    else if (schedule == "constant")
      s.train.schedule = LrSchedule::Constant;
    else
      throw std::invalid_argument("spec.train.schedule must be 'linear' or 'constant'");
    g.get("log_every", s.train.log_every);
    if (const json *m = g.child("masking")) {
      Fields h(*m, "spec.train.masking");
      h.get("rate", s.train.masking.rate);
      h.get("split", s.train.masking.split);
      h.get("mask_fraction", s.train.masking.mask_fraction);
      h.get("random_fraction", s.train.masking.random_fraction);
      h.finish();
    }
    if (const json *a = g.child("adamw")) readAdamW(*a, "spec.train.adamw", s.train.adamw);
    if (const json *d = g.child("distill")) readDistill(*d, "spec.train.distill", s.train.distill);
    g.finish();
  }
  if (const json *c = f.child("corpus")) {
    Fields g(*c, "spec.corpus");
    g.get("vocab_size", s.corpus.vocab_size);
    g.get("num_sequences", s.corpus.num_sequences);
    g.get("min_len", s.corpus.min_len);
    g.get("max_len", s.corpus.max_len);
    g.get("seed", s.corpus.seed);
    g.get("heldout_sequences", s.corpus.heldout_sequences);
    std::uint32_t version = Corpus::kGeneratorVersion;
    g.get("generator_version", version);
    if (version != Corpus::kGeneratorVersion) throw std::invalid_argument("unsupported corpus generator version");
    g.finish();
  }
  if (const json *c = f.child("finetune")) {
    Fields g(*c, "spec.finetune");
    g.get("lr", s.finetune.lr);
    g.get("warmup_fraction", s.finetune.warmup_fraction);
    g.get("epochs", s.finetune.epochs);
    g.get("batch_size", s.finetune.batch_size);
    g.get("train_examples", s.finetune.train_examples);
    g.get("validation_examples", s.finetune.validation_examples);
    g.get("test_examples", s.finetune.test_examples);
    g.get("min_len", s.finetune.task.min_len);
    g.get("max_len", s.finetune.task.max_len);
    if (const json *a = g.child("adamw")) readAdamW(*a, "spec.finetune.adamw", s.finetune.adamw);
    g.finish();
  }
  if (const json *t = f.child("tasks")) {
    s.tasks.clear();
    for (const auto &name : *t) s.tasks.push_back(parseTask(name.get<std::string>()));
  }
  f.get("budgets", s.budgets);
  std::string precision = precisionName(s.precision);
  f.get("precision", precision);
  s.precision = parsePrecision(precision);
  f.get("heldout_batches", s.heldout_batches);
  f.finish();
  s.validate();
  return s;
}

ExperimentSpec loadSpec(const std::filesystem::path &path) { return specFromJson(readJsonFile(path)); }

// Hashing -------------------------------------------------------------------------

std::string sha256Hex(const std::string &bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char *hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256File(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return sha256Hex(ss.str());
}

std::string configHash(const json &config) { return sha256Hex(config.dump()); }

json cellConfig(const ExperimentSpec &spec, const CellSpec &cell) {
  TrainConfig train = spec.train;
  train.regime = cell.regime;
  train.seed = cell.seed;
  train.total_steps = cell.budget > 0 ? cell.budget : spec.train.total_steps;
  train.distill = cell.distill;
  json tasks = json::array();
  for (TaskId t : spec.tasks) tasks.push_back(taskName(t));
  json c = {{"engine_version", kEngineVersion},
            {"regime", regimeName(cell.regime)},
            {"seed", cell.seed},
            {"teacher", toJson(spec.teacher)},
            {"student", toJson(spec.student)},
            {"train", trainJson(train)},
            {"corpus", corpusJson(spec.corpus)},
            {"finetune", finetuneJson(spec.finetune)},
            {"tasks", tasks},
            {"precision", precisionName(spec.precision)},
            {"heldout_batches", spec.heldout_batches}};
  if (needsFrozenTeacher(cell.regime)) {
    if (!cell.frozen_teacher) throw std::invalid_argument(regimeName(cell.regime) + " cell needs a frozen teacher");
    c["frozen_teacher_sha256"] = sha256File(*cell.frozen_teacher);
  }
  return c;
}

std::string cellDirName(const CellSpec &cell, const std::string &hash) {
  return regimeName(cell.regime) + "-s" + std::to_string(cell.seed) + "-" + hash.substr(0, 12);
}

// Results -------------------------------------------------------------------------

double taskAverage(const std::map<std::string, FinetuneResult> &tasks) {
  if (tasks.empty()) return 0;
  double sum = 0;
  for (const auto &[name, r] : tasks) sum += usesMcc(parseTask(name)) ? r.test.mcc : r.test.accuracy;
  return sum / static_cast<double>(tasks.size());
}

json toJson(const RunResult &r) {
  json roles = json::object();
  for (const auto &[role, rr] : r.roles) {
    json tasks = json::object();
    for (const auto &[name, t] : rr.tasks)
      tasks[name] = {{"accuracy", t.test.accuracy},
                     {"mcc", t.test.mcc},
                     {"validation_accuracy", t.validation.accuracy},
                     {"validation_mcc", t.validation.mcc},
                     {"best_epoch", t.best_epoch}};
    roles[role] = {{"masked_accuracy", rr.masked_accuracy},
                   {"final_hard_loss", rr.final_hard},
                   {"final_soft_loss", rr.final_soft ? json(*rr.final_soft) : json(nullptr)},
                   {"downstream", tasks},
                   {"average", rr.average},
                   {"checkpoint", rr.checkpoint},
                   {"checkpoint_sha256", rr.checkpoint_sha256}};
  }
  return {{"schema_version", kResultSchemaVersion},
          {"engine_version", kEngineVersion},
          {"config_hash", r.config_hash},
          {"config", r.config},
          {"stream_fingerprint", r.stream_fingerprint},
          {"roles", roles},
          {"notes", r.notes}};
}

RunResult resultFromJson(const json &j) {
  if (j.at("schema_version").get<int>() != kResultSchemaVersion) throw std::runtime_error("unsupported result schema");
  RunResult r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.config = j.at("config");
  r.stream_fingerprint = j.at("stream_fingerprint").get<std::string>();
  r.notes = j.value("notes", json::object());
  for (const auto &[role, v] : j.at("roles").items()) {
    RoleResult rr;
    rr.masked_accuracy = v.at("masked_accuracy").get<double>();
    rr.final_hard = v.at("final_hard_loss").get<double>();
    if (!v.at("final_soft_loss").is_null()) rr.final_soft = v.at("final_soft_loss").get<double>();
    for (const auto &[name, t] : v.at("downstream").items()) {
      FinetuneResult f;
      f.test = {t.at("accuracy").get<double>(), t.at("mcc").get<double>()};
      f.validation = {t.at("validation_accuracy").get<double>(), t.at("validation_mcc").get<double>()};
      f.best_epoch = t.at("best_epoch").get<int>();
      rr.tasks[name] = f;
    }
    rr.average = v.at("average").get<double>();
    rr.checkpoint = v.at("checkpoint").get<std::string>();
    rr.checkpoint_sha256 = v.at("checkpoint_sha256").get<std::string>();
    r.roles[role] = rr;
  }
  return r;
}

ExperimentData makeExperimentData(const CorpusSpec &spec) {
  MarkovSource source(Vocab{spec.vocab_size}, spec.seed);
  Corpus corpus = generateCorpus(source, CorpusOptions{spec.num_sequences, spec.min_len, spec.max_len, spec.seed});
  Corpus heldout = generateCorpus(
      source, CorpusOptions{spec.heldout_sequences, spec.min_len, spec.max_len, mixSeed(spec.seed, "heldout")});
  return {std::move(source), std::move(corpus), std::move(heldout)};
}

// Cells ---------------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename Scalar>
RunResult executeCell(const ExperimentSpec &spec, const CellSpec &cell, const ExperimentData &data,
                      const std::filesystem::path &dir, const json &config, const std::string &hash) {
  PretrainSetup setup;
  setup.teacher = spec.teacher;
  setup.student = spec.student;
  setup.train = spec.train;
  setup.train.regime = cell.regime;
  setup.train.seed = cell.seed;
  setup.train.total_steps = cell.budget > 0 ? cell.budget : spec.train.total_steps;
  setup.train.distill = cell.distill;
  setup.out_dir = dir;
  setup.frozen_teacher = cell.frozen_teacher;
  setup.heldout_batches = spec.heldout_batches;
  setup.heldout_seed = mixSeed(spec.corpus.seed, "heldout-masking");

  const auto outcome = pretrain<Scalar>(setup, data.corpus, data.heldout);

  RunResult result;
  result.config = config;
  result.config_hash = hash;
  result.stream_fingerprint = hex64(outcome.stream_fingerprint);
  if (cell.frozen_teacher) {
    const std::string after = sha256File(*cell.frozen_teacher);
    if (after != config.at("frozen_teacher_sha256")) throw std::runtime_error("frozen teacher checkpoint changed");
    result.notes["frozen_teacher_sha256_before"] = config.at("frozen_teacher_sha256");
    result.notes["frozen_teacher_sha256_after"] = after;
  }

  FinetuneConfig fc = spec.finetune;
  fc.seed = cell.seed;
  for (const auto &[role, params] : outcome.models) {
    RoleResult rr;
    rr.masked_accuracy = outcome.heldout_accuracy.at(role);
    const std::size_t n = outcome.history.size(), from = n > 50 ? n - 50 : 0;
    double hard = 0, soft = 0;
    std::size_t soft_n = 0;
    for (std::size_t i = from; i < n; ++i) {
      hard += outcome.history[i].metrics.hard.at(role);
      if (const auto it = outcome.history[i].metrics.soft.find(role); it != outcome.history[i].metrics.soft.end()) {
        soft += it->second;
        ++soft_n;
      }
    }
    rr.final_hard = hard / static_cast<double>(n - from);
    if (soft_n) rr.final_soft = soft / static_cast<double>(soft_n);
    for (TaskId task : spec.tasks) rr.tasks[taskName(task)] = finetune(params, task, data.source, fc);
    rr.average = taskAverage(rr.tasks);
    rr.checkpoint = role + ".ckpt";
    rr.checkpoint_sha256 = sha256File(dir / rr.checkpoint);
    result.roles[role] = rr;
  }
  return result;
}

}  // namespace

RunResult runCell(const ExperimentSpec &spec, const CellSpec &cell, const ExperimentData &data,
                  const std::filesystem::path &out_dir) {
  const json config = cellConfig(spec, cell);
  const std::string hash = configHash(config);
  const auto dir = out_dir / "cells" / cellDirName(cell, hash);
  const auto result_path = dir / "result.json";
  if (std::filesystem::exists(result_path)) {
    RunResult cached = resultFromJson(readJsonFile(result_path));
    if (cached.config_hash == hash) return cached;
  }
  std::filesystem::create_directories(dir);
  const auto start = std::chrono::steady_clock::now();
  RunResult result = spec.precision == Precision::Single ? executeCell<float>(spec, cell, data, dir, config, hash)
                                                         : executeCell<double>(spec, cell, data, dir, config, hash);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  writeAtomically(dir / "timing.json", json{{"wall_clock_s", seconds}}.dump(2) + "\n");
  writeAtomically(result_path, toJson(result).dump(2) + "\n");
  return result;
}

// Drivers -------------------------------------------------------------------------

bool ExperimentOutcome::allOk() const {
  return std::all_of(entries.begin(), entries.end(), [](const ManifestEntry &e) { return e.ok; });
}

std::vector<std::pair<std::string, DistillConfig>> lossWeightGrid(const DistillConfig &base) {
  std::vector<std::pair<std::string, DistillConfig>> grid;
  const std::pair<double, double> ratios[] = {{1, 1}, {1, 2}, {1, 4}, {4, 4}};
  for (const auto &[h, s] : ratios) {
    DistillConfig d = base;
    d.alpha_h = d.alpha_s = 1;
    d.beta_h = h;
    d.beta_s = s;
    grid.emplace_back("teacher-side " + weightLabel(d), d);
  }
  for (const auto &[h, s] : ratios) {
    DistillConfig d = base;
    d.beta_h = d.beta_s = 1;
    d.alpha_h = h;
    d.alpha_s = s;
    grid.emplace_back("student-side " + weightLabel(d), d);
  }
  return grid;
}

namespace {

json manifestJson(const ExperimentSpec &spec, const ExperimentOutcome &o) {
  json entries = json::array();
  for (const auto &e : o.entries) {
    json item = {{"label", e.label},
                 {"regime", regimeName(e.cell.regime)},
                 {"seed", e.cell.seed},
                 {"budget", e.cell.budget > 0 ? e.cell.budget : spec.train.total_steps},
                 {"weights", weightLabel(e.cell.distill)},
                 {"hash", e.hash},
                 {"dir", e.dir},
                 {"ok", e.ok}};
    if (!e.ok) item["error"] = e.error;
    entries.push_back(item);
  }
  return {{"kind", o.kind}, {"engine_version", kEngineVersion}, {"spec", toJson(spec)}, {"entries", entries}};
}

/// Runs every entry, `threads` at a time, then writes the manifest.
ExperimentOutcome runEntries(const ExperimentSpec &spec, const std::filesystem::path &out, int threads,
                             std::string kind, std::vector<ManifestEntry> entries) {
  spec.validate();
  const ExperimentData data = makeExperimentData(spec.corpus);
  for (auto &e : entries) {
    try {
      e.hash = configHash(cellConfig(spec, e.cell));
      e.dir = (std::filesystem::path("cells") / cellDirName(e.cell, e.hash)).string();
    } catch (const std::exception &ex) {
      e.error = ex.what();
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      ManifestEntry &e = entries[i];
      if (!e.error.empty()) continue;
      try {
        runCell(spec, e.cell, data, out);
        e.ok = true;
      } catch (const std::exception &ex) {
        e.error = ex.what();
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(entries.size())));
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto &t : pool) t.join();

  ExperimentOutcome outcome{std::move(kind), std::move(entries)};
  std::filesystem::create_directories(out / "experiments");
  writeAtomically(out / "experiments" / (outcome.kind + ".json"), manifestJson(spec, outcome).dump(2) + "\n");
  return outcome;
}

ManifestEntry entry(std::string label, Regime regime, std::uint64_t seed, std::int64_t budget,
                    const DistillConfig &distill) {
  ManifestEntry e;
  e.label = std::move(label);
  e.cell.regime = regime;
  e.cell.seed = seed;
  e.cell.budget = budget;
  e.cell.distill = distill;
  return e;
}

}  // namespace

ExperimentOutcome runRegimeComparison(const ExperimentSpec &spec, const std::filesystem::path &out, int threads) {
  std::vector<ManifestEntry> entries;
  for (Regime r : spec.regimes) {
    if (needsFrozenTeacher(r)) throw std::invalid_argument(regimeName(r) + " belongs to the community comparison");
    for (auto seed : spec.seeds) entries.push_back(entry(regimeName(r), r, seed, 0, spec.train.distill));
  }
  return runEntries(spec, out, threads, "compare-regimes", std::move(entries));
}

ExperimentOutcome runLossWeightSweep(const ExperimentSpec &spec, const std::filesystem::path &out, int threads) {
  std::vector<ManifestEntry> entries;
  for (const auto &[label, distill] : lossWeightGrid(spec.train.distill))
    for (auto seed : spec.seeds) entries.push_back(entry(label, Regime::Ctcd, seed, 0, distill));
  return runEntries(spec, out, threads, "sweep-weights", std::move(entries));
}

ExperimentOutcome runLengthAblation(const ExperimentSpec &spec, const std::filesystem::path &out, int threads) {
  if (spec.budgets.size() != 2 || spec.budgets[1] != 2 * spec.budgets[0])
    throw std::invalid_argument("the length study needs two budgets {T, 2T}");
  std::vector<ManifestEntry> entries;
  for (Regime r : {Regime::CoOneway, Regime::Ctcd})
    for (auto budget : spec.budgets)
      for (auto seed : spec.seeds)
        entries.push_back(entry(regimeName(r) + "@" + std::to_string(budget), r, seed, budget, spec.train.distill));
  return runEntries(spec, out, threads, "sweep-length", std::move(entries));
}

ExperimentOutcome runCommunityComparison(const ExperimentSpec &spec, const std::filesystem::path &out, int threads) {
  std::vector<ManifestEntry> entries;
  for (auto seed : spec.seeds) {
    const CellSpec teacher_cell{Regime::Standalone, seed, 0, spec.train.distill, std::nullopt};
    const auto teacher_dir = out / "cells" / cellDirName(teacher_cell, configHash(cellConfig(spec, teacher_cell)));
    const auto checkpoint = teacher_dir / "teacher.ckpt";
    if (!std::filesystem::exists(teacher_dir / "result.json") || !std::filesystem::exists(checkpoint))
      throw std::runtime_error("missing teacher checkpoint " + checkpoint.string() +
                               ": run compare-regimes with the standalone regime (seed " + std::to_string(seed) +
                               ") on the same spec and --out first");
    auto cm = entry("community", Regime::Community, seed, 0, spec.train.distill);
    cm.cell.frozen_teacher = checkpoint;
    auto kd = entry("classic-kd", Regime::OnewayFrozen, seed, 0, spec.train.distill);
    kd.cell.frozen_teacher = checkpoint;
    entries.push_back(cm);
    entries.push_back(kd);
  }
  return runEntries(spec, out, threads, "community", std::move(entries));
}

}  // namespace ctcd
