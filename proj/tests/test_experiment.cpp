// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctcd/experiment.hpp"

#include <fstream>
#include <iterator>

using namespace ctcd;
using nlohmann::json;

namespace {

std::string fileBytes(const std::filesystem::path &p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::filesystem::path scratch(const std::string &name) {
  const auto dir = std::filesystem::temp_directory_path() / "ctcd_test_experiment" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
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
  s.train.total_steps = 20;
  s.train.batch_size = 8;
  s.train.log_every = 10;
  s.corpus = {24, 300, 8, 12, 1, 48};
  s.finetune.lr = 1e-3;
  s.finetune.epochs = 1;
  s.finetune.train_examples = 48;
  s.finetune.validation_examples = 32;
  s.finetune.test_examples = 32;
  s.finetune.task = {8, 12};
  s.tasks = {TaskId::Parity, TaskId::PatternImbalanced};
  s.budgets = {10, 20};
  s.heldout_batches = 2;
  return s;
}

}  // namespace

TEST_CASE("spec round-trips through JSON and rejects unknown keys") {
  const ExperimentSpec s = tinySpec();
  const json j = toJson(s);
  CHECK(toJson(specFromJson(j)) == j);

  json bad = j;
  bad["train"]["learning_rate"] = 1;
  CHECK_THROWS_WITH_AS(specFromJson(bad), doctest::Contains("spec.train.learning_rate"), std::invalid_argument);
  bad = j;
  bad["precision"] = "half";
  CHECK_THROWS_AS(specFromJson(bad), std::invalid_argument);
  bad = j;
  bad["seeds"] = {1, 1};
  CHECK_THROWS_AS(specFromJson(bad), std::invalid_argument);

  const ExperimentSpec desk = loadSpec(CTCD_SOURCE_DIR "/configs/desk.json");
  CHECK(desk.seeds.size() == 5);
  CHECK(desk.teacher.num_layers == 4);
  CHECK(desk.student.num_layers == 2);
  CHECK(desk.corpus.num_sequences == 100000);
  CHECK(loadSpec(CTCD_SOURCE_DIR "/configs/tiny.json").seeds.size() == 2);
}

TEST_CASE("hashing") {
  CHECK(sha256Hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256Hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");

  const ExperimentSpec s = tinySpec();
  CellSpec a{Regime::Ctcd, 1, 0, s.train.distill, std::nullopt};
  const std::string h = configHash(cellConfig(s, a));
  CHECK(h.size() == 64);
  CHECK(cellDirName(a, h) == "ctcd-s1-" + h.substr(0, 12));

  CellSpec b = a;
  b.budget = s.train.total_steps;
  CHECK(configHash(cellConfig(s, b)) == h);
  b.seed = 2;
  CHECK(configHash(cellConfig(s, b)) != h);
  b = a;
  b.distill.beta_s = 4;
  CHECK(configHash(cellConfig(s, b)) != h);
  b = a;
  b.regime = Regime::CoOneway;
  CHECK(configHash(cellConfig(s, b)) != h);

  CellSpec frozen{Regime::Community, 1, 0, s.train.distill, std::nullopt};
  CHECK_THROWS_AS(cellConfig(s, frozen), std::invalid_argument);
}

TEST_CASE("median and task average") {
  CHECK(median({3, 1, 2}) == 2);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK(median({0.7}) == 0.7);
  CHECK_THROWS_AS(median({}), std::invalid_argument);

  std::map<std::string, FinetuneResult> tasks;
  tasks["parity"].test = {0.8, 0.1};
  tasks["pattern-imbalanced"].test = {0.9, 0.4};
  CHECK(taskAverage(tasks) == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("loss-weight grid") {
  const auto grid = lossWeightGrid(DistillConfig{});
  std::vector<std::string> labels;
  for (const auto &[label, d] : grid) labels.push_back(label);
  CHECK(labels == std::vector<std::string>{"teacher-side 1:1:1:1", "teacher-side 1:1:1:2", "teacher-side 1:1:1:4",
                                           "teacher-side 1:1:4:4", "student-side 1:1:1:1", "student-side 1:2:1:1",
                                           "student-side 1:4:1:1", "student-side 4:4:1:1"});
  CHECK(grid[2].second.beta_h == 1);
  CHECK(grid[2].second.beta_s == 4);
  CHECK(grid[7].second.alpha_h == 4);
}

TEST_CASE("regime comparison, caching and report") {
  const ExperimentSpec spec = tinySpec();
  const auto out = scratch("compare");
  const ExperimentOutcome o = runRegimeComparison(spec, out, 2);
  REQUIRE(o.allOk());
  CHECK(o.entries.size() == spec.regimes.size() * spec.seeds.size());
  CHECK(std::filesystem::exists(out / "experiments" / "compare-regimes.json"));

  for (const auto &e : o.entries) {
    const RunResult r = resultFromJson(json::parse(fileBytes(out / e.dir / "result.json")));
    CHECK(configHash(r.config) == r.config_hash);
    CHECK(r.config_hash == e.hash);
    CHECK(r.roles.size() == 2);
    for (const auto &[role, rr] : r.roles) {
      CHECK(sha256File(out / e.dir / rr.checkpoint) == rr.checkpoint_sha256);
      CHECK(rr.tasks.size() == 2);
      CHECK(std::filesystem::exists(out / e.dir / "timing.json"));
    }
  }

  const std::string result_bytes = fileBytes(out / o.entries[0].dir / "result.json");
  const std::string timing_bytes = fileBytes(out / o.entries[0].dir / "timing.json");
  runRegimeComparison(spec, out, 1);
  CHECK(fileBytes(out / o.entries[0].dir / "result.json") == result_bytes);
  CHECK(fileBytes(out / o.entries[0].dir / "timing.json") == timing_bytes);

  const Report r1 = writeReport(out);
  const Report r2 = buildReport(out);
  CHECK(r1.text == r2.text);
  CHECK(r1.table == r2.table);
  CHECK(fileBytes(out / "report.csv") == r1.table);
  CHECK(r1.invariants_ok);
  CHECK(r1.cells_ok);
  CHECK(r1.exitCode() != 1);
  CHECK(r1.claim_list.size() == 4);

  SUBCASE("order invariance") {
    const auto copy = scratch("compare-reordered");
    std::filesystem::copy(out, copy, std::filesystem::copy_options::recursive);
    json manifest = json::parse(fileBytes(copy / "experiments" / "compare-regimes.json"));
    std::reverse(manifest["entries"].begin(), manifest["entries"].end());
    std::ofstream(copy / "experiments" / "compare-regimes.json") << manifest.dump(1);
    const Report r = buildReport(copy);
    CHECK(r.table == r1.table);
    CHECK(r.claims == r1.claims);
  }

  SUBCASE("single seed medians are the values") {
    ExperimentSpec one = spec;
    one.seeds = {2};
    const auto dir = scratch("single");
    const auto entries = runRegimeComparison(one, dir, 1).entries;
    const Report r = buildReport(dir);
    for (const auto &c : r.claim_list) {
      const auto side = [&](const std::string &name) {
        const auto slash = name.find('/');
        for (const auto &entry : entries)
          if (entry.label == name.substr(0, slash))
            return resultFromJson(json::parse(fileBytes(dir / entry.dir / "result.json")))
                .roles.at(name.substr(slash + 1))
                .average;
        return -1.0;
      };
      CHECK(c.lhs_median == side(c.lhs));
      CHECK(c.rhs_median == side(c.rhs));
    }
  }
}

TEST_CASE("report errors and failures") {
  CHECK_THROWS_WITH(buildReport(scratch("empty")), doctest::Contains("no run results"));

  ExperimentSpec spec = tinySpec();
  spec.seeds = {1};
  spec.regimes = {Regime::Ctcd};
  spec.train.peak_lr = 1e35;
  const auto out = scratch("failing");
  const ExperimentOutcome o = runRegimeComparison(spec, out, 1);
  CHECK_FALSE(o.allOk());
  CHECK(o.entries[0].error.find("step") != std::string::npos);

  spec.train.peak_lr = 2e-3;
  spec.seeds = {1, 2};
  runRegimeComparison(spec, out, 1);
  const Report r = buildReport(out);
  CHECK(r.cells_ok);
  spec.seeds = {3};
  spec.train.peak_lr = 1e35;
  runRegimeComparison(spec, out, 1);
  CHECK(buildReport(out).exitCode() == 1);
}

TEST_CASE("community needs the standalone teacher and leaves it untouched") {
  ExperimentSpec spec = tinySpec();
  spec.seeds = {1};
  const auto out = scratch("community");
  CHECK_THROWS_WITH(runCommunityComparison(spec, out, 1), doctest::Contains("standalone"));

  spec.regimes = {Regime::Standalone};
  runRegimeComparison(spec, out, 1);
  const auto o = runCommunityComparison(spec, out, 1);
  REQUIRE(o.allOk());
  REQUIRE(o.entries.size() == 2);
  const RunResult cm = resultFromJson(json::parse(fileBytes(out / o.entries[0].dir / "result.json")));
  CHECK(cm.roles.count("student1"));
  CHECK(cm.roles.count("student2"));
  CHECK(cm.notes.at("frozen_teacher_sha256_before") == cm.notes.at("frozen_teacher_sha256_after"));
  const RunResult kd = resultFromJson(json::parse(fileBytes(out / o.entries[1].dir / "result.json")));
  CHECK(kd.roles.size() == 1);
  CHECK(kd.roles.count("student"));

  const Report r = buildReport(out);
  CHECK(r.invariants_ok);
  CHECK(r.claims.find("community-student1") != std::string::npos);
}

TEST_CASE("length study shares the stream at the short budget") {
  ExperimentSpec spec = tinySpec();
  spec.seeds = {1};
  const auto out = scratch("length");
  const auto o = runLengthAblation(spec, out, 1);
  REQUIRE(o.allOk());
  CHECK(o.entries.size() == 4);
  std::map<std::string, std::string> prints;
  for (const auto &e : o.entries)
    prints[e.label] = resultFromJson(json::parse(fileBytes(out / e.dir / "result.json"))).stream_fingerprint;
  CHECK(prints.at("co-oneway@10") == prints.at("ctcd@10"));
  CHECK(prints.at("co-oneway@20") == prints.at("ctcd@20"));
  CHECK(prints.at("ctcd@10") != prints.at("ctcd@20"));
  const Report r = buildReport(out);
  CHECK(r.invariants_ok);
  REQUIRE(r.claim_list.size() == 1);
  CHECK(r.claim_list[0].id == "length");
  CHECK(r.claim_list[0].gated);

  spec.budgets = {10, 30};
  CHECK_THROWS_AS(runLengthAblation(spec, out, 1), std::invalid_argument);
}
