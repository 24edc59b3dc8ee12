// SPDX-License-Identifier: Apache-2.0
// Aggregation of finished cells into tables and directional claims.
#include "ctcd/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace ctcd {

using nlohmann::json;

int Report::exitCode() const {
  if (!cells_ok || !invariants_ok) return 1;
  for (const auto &c : claim_list)
    if (c.gated && !c.holds) return 2;
  return 0;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct Cell {
  std::uint64_t seed = 0;
  RunResult result;
};

struct Experiment {
  std::string kind;
  std::vector<std::string> labels;  ///< manifest order
  std::map<std::string, std::vector<Cell>> cells;  ///< label -> cells sorted by seed
  std::vector<std::string> failures;
};

/// Seed -> value of one metric of one role, for every cell of a label.
using Series = std::map<std::uint64_t, double>;

Series series(const Experiment &e, const std::string &label, const std::string &role, const std::string &metric) {
  Series s;
  const auto it = e.cells.find(label);
  if (it == e.cells.end()) return s;
  for (const auto &cell : it->second) {
    const auto r = cell.result.roles.find(role);
    if (r == cell.result.roles.end()) continue;
    const RoleResult &rr = r->second;
    if (metric == "average")
      s[cell.seed] = rr.average;
    else if (metric == "masked_accuracy")
      s[cell.seed] = rr.masked_accuracy;
    else if (metric == "final_hard_loss")
      s[cell.seed] = rr.final_hard;
    else if (metric == "final_soft_loss") {
      if (rr.final_soft) s[cell.seed] = *rr.final_soft;
    } else {
      const auto dot = metric.rfind('.');
      const auto t = rr.tasks.find(metric.substr(0, dot));
      if (t == rr.tasks.end()) continue;
      s[cell.seed] = metric.substr(dot + 1) == "mcc" ? t->second.test.mcc : t->second.test.accuracy;
    }
  }
  return s;
}

std::vector<double> valuesOf(const Series &s) {
  std::vector<double> v;
  for (const auto &[seed, x] : s) v.push_back(x);
  return v;
}

std::vector<std::string> rolesOf(const Experiment &e, const std::string &label) {
  std::set<std::string> roles;
  for (const auto &cell : e.cells.at(label))
    for (const auto &[role, rr] : cell.result.roles) roles.insert(role);
  return {roles.begin(), roles.end()};
}

std::vector<std::string> metricsOf(const Experiment &e, const std::string &label, const std::string &role) {
  std::vector<std::string> metrics{"average", "masked_accuracy", "final_hard_loss", "final_soft_loss"};
  std::set<std::string> tasks;
  for (const auto &cell : e.cells.at(label))
    if (const auto r = cell.result.roles.find(role); r != cell.result.roles.end())
      for (const auto &[task, t] : r->second.tasks) tasks.insert(task);
  for (const auto &t : tasks) {
    metrics.push_back(t + ".accuracy");
    metrics.push_back(t + ".mcc");
  }
  return metrics;
}

/// Canonical display order of cell labels, independent of file contents order.
std::tuple<int, std::int64_t, std::string> labelKey(const std::string &label) {
  static const char *prefixes[] = {"standalone", "co-oneway", "ctcd", "community", "classic-kd", "teacher-side",
                                   "student-side"};
  int rank = std::size(prefixes);
  for (int i = 0; i < static_cast<int>(std::size(prefixes)); ++i)
    if (label.rfind(prefixes[i], 0) == 0) {
      rank = i;
      break;
    }
  std::int64_t budget = 0;
  if (const auto at = label.find('@'); at != std::string::npos) budget = std::stoll(label.substr(at + 1));
  return {rank, budget, label};
}

std::map<std::string, Experiment> loadExperiments(const std::filesystem::path &out_dir) {
  const auto dir = out_dir / "experiments";
  std::map<std::string, Experiment> experiments;
  if (!std::filesystem::is_directory(dir)) return experiments;
  std::vector<std::filesystem::path> files;
  for (const auto &f : std::filesystem::directory_iterator(dir))
    if (f.path().extension() == ".json") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  for (const auto &file : files) {
    std::ifstream is(file);
    const json manifest = json::parse(is);
    Experiment e;
    e.kind = manifest.at("kind").get<std::string>();
    for (const auto &entry : manifest.at("entries")) {
      const std::string label = entry.at("label").get<std::string>();
      if (std::find(e.labels.begin(), e.labels.end(), label) == e.labels.end()) e.labels.push_back(label);
      const auto seed = entry.at("seed").get<std::uint64_t>();
      const auto result_path = out_dir / entry.at("dir").get<std::string>() / "result.json";
      if (!entry.at("ok").get<bool>() || !std::filesystem::exists(result_path)) {
        e.failures.push_back(label + " seed " + std::to_string(seed) + ": " + entry.value("error", "no result"));
        continue;
      }
      std::ifstream rs(result_path);
      e.cells[label].push_back({seed, resultFromJson(json::parse(rs))});
    }
    std::sort(e.labels.begin(), e.labels.end(),
              [](const std::string &a, const std::string &b) { return labelKey(a) < labelKey(b); });
    for (auto &[label, cells] : e.cells)
      std::sort(cells.begin(), cells.end(), [](const Cell &a, const Cell &b) { return a.seed < b.seed; });
    experiments[e.kind] = std::move(e);
  }
  return experiments;
}

struct Side {
  std::string label, role;
  std::string name() const { return label + "/" + role; }
};

/// Compares medians over the seeds both sides share.
std::optional<Claim> compare(const Experiment &e, std::string id, std::string description, const Side &lhs,
                             const Side &rhs, const std::string &metric, bool strict, bool gated) {
  const Series l = series(e, lhs.label, lhs.role, metric), r = series(e, rhs.label, rhs.role, metric);
  std::vector<double> lv, rv;
  for (const auto &[seed, x] : l)
    if (const auto it = r.find(seed); it != r.end()) {
      lv.push_back(x);
      rv.push_back(it->second);
    }
  if (lv.empty()) return std::nullopt;
  Claim c;
  c.id = std::move(id);
  c.description = std::move(description);
  c.lhs = lhs.name();
  c.rhs = rhs.name();
  c.lhs_median = median(lv);
  c.rhs_median = median(rv);
  c.holds = strict ? c.lhs_median > c.rhs_median : c.lhs_median >= c.rhs_median;
  c.gated = gated;
  return c;
}

/// Budget-doubling gain per seed for one regime of the length study.
Series gain(const Experiment &e, const std::string &regime, std::int64_t t, const std::string &metric) {
  const Series lo = series(e, regime + "@" + std::to_string(t), "student", metric);
  const Series hi = series(e, regime + "@" + std::to_string(2 * t), "student", metric);
  Series g;
  for (const auto &[seed, x] : hi)
    if (const auto it = lo.find(seed); it != lo.end()) g[seed] = x - it->second;
  return g;
}

std::optional<std::int64_t> shortBudget(const Experiment &e) {
  std::set<std::int64_t> budgets;
  for (const auto &label : e.labels)
    if (const auto at = label.find('@'); at != std::string::npos) budgets.insert(std::stoll(label.substr(at + 1)));
  if (budgets.size() != 2 || *budgets.rbegin() != 2 * *budgets.begin()) return std::nullopt;
  return *budgets.begin();
}

/// Cells of the listed labels must see the same batch stream for a given seed.
bool streamsShared(const Experiment &e, const std::vector<std::string> &labels) {
  std::map<std::uint64_t, std::set<std::string>> by_seed;
  for (const auto &label : labels)
    if (const auto it = e.cells.find(label); it != e.cells.end())
      for (const auto &cell : it->second) by_seed[cell.seed].insert(cell.result.stream_fingerprint);
  for (const auto &[seed, prints] : by_seed)
    if (prints.size() > 1) return false;
  return true;
}

}  // namespace

Report buildReport(const std::filesystem::path &out_dir) {
  const auto experiments = loadExperiments(out_dir);
  std::size_t total = 0;
  for (const auto &[kind, e] : experiments)
    total += e.failures.size() + std::accumulate(e.cells.begin(), e.cells.end(), std::size_t{0},
                                                 [](std::size_t n, const auto &kv) { return n + kv.second.size(); });
  if (total == 0) throw std::runtime_error("no run results found under " + out_dir.string());

  Report report;
  std::ostringstream text, table, claims;
  table << "experiment,cell,role,metric,n,median,values\n";
  text << "Run report (engine " << kEngineVersion << ")\n";

  std::vector<std::string> order{"compare-regimes", "sweep-weights", "sweep-length", "community"};
  for (const auto &[kind, e] : experiments)
    if (std::find(order.begin(), order.end(), kind) == order.end()) order.push_back(kind);
  for (const auto &kind : order) {
    if (!experiments.count(kind)) continue;
    const Experiment &e = experiments.at(kind);
    text << "\n== " << kind << " ==\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-26s %-9s %3s %10s %10s\n", "cell", "role", "n", "average", "mlm_acc");
    text << line;
    for (const auto &label : e.labels) {
      if (!e.cells.count(label)) continue;
      for (const auto &role : rolesOf(e, label)) {
        for (const auto &metric : metricsOf(e, label, role)) {
          const Series s = series(e, label, role, metric);
          if (s.empty()) continue;
          table << kind << ',' << label << ',' << role << ',' << metric << ',' << s.size() << ','
                << fmt(median(valuesOf(s))) << ',';
          bool first = true;
          for (const auto &[seed, x] : s) {
            table << (first ? "" : ";") << seed << ':' << fmt(x);
            first = false;
          }
          table << '\n';
        }
        const Series avg = series(e, label, role, "average"), mlm = series(e, label, role, "masked_accuracy");
        std::snprintf(line, sizeof line, "%-26s %-9s %3zu %10s %10s\n", label.c_str(), role.c_str(), avg.size(),
                      fmt(median(valuesOf(avg))).c_str(), fmt(median(valuesOf(mlm))).c_str());
        text << line;
      }
    }
    for (const auto &f : e.failures) {
      text << "FAILED " << f << '\n';
      report.cells_ok = false;
    }

    if (kind == "compare-regimes") {
      const bool shared = streamsShared(e, e.labels);
      report.invariants_ok = report.invariants_ok && shared;
      text << "batch streams shared across regimes per seed: " << (shared ? "yes" : "NO") << '\n';
      text << "reference: at full scale the co-distilled student exceeded the stand-alone teacher by 1.66 average "
              "points (78.06 -> 79.12)\n";
      const Side t_ctcd{"ctcd", "teacher"}, s_ctcd{"ctcd", "student"};
      for (auto c : {compare(e, "a", "ctcd teacher > standalone teacher", t_ctcd, {"standalone", "teacher"},
                             "average", true, true),
                     compare(e, "b", "ctcd student > co-oneway student", s_ctcd, {"co-oneway", "student"}, "average",
                             true, true),
                     compare(e, "c", "ctcd student >= standalone student", s_ctcd, {"standalone", "student"},
                             "average", false, false),
                     compare(e, "d", "ctcd student > standalone teacher", s_ctcd, {"standalone", "teacher"},
                             "average", true, false)})
        if (c) report.claim_list.push_back(*c);
    } else if (kind == "sweep-weights") {
      text << "note: teacher-side 1:1:1:4 is the reference best teacher setting (79.86 at full scale)\n";
    } else if (kind == "sweep-length") {
      if (const auto t = shortBudget(e)) {
        const std::string metric = "pattern-imbalanced.mcc";
        const bool shared = streamsShared(e, {"co-oneway@" + std::to_string(*t), "ctcd@" + std::to_string(*t)});
        report.invariants_ok = report.invariants_ok && shared;
        text << "batch streams shared at budget " << *t << ": " << (shared ? "yes" : "NO") << '\n';
        text << "reference: at full scale doubling training gained 11.21 MCC with co-distillation vs 0.07 one-way\n";
        const Series g_ctcd = gain(e, "ctcd", *t, metric), g_one = gain(e, "co-oneway", *t, metric);
        std::vector<double> lv, rv;
        for (const auto &[seed, x] : g_ctcd)
          if (const auto it = g_one.find(seed); it != g_one.end()) {
            lv.push_back(x);
            rv.push_back(it->second);
          }
        if (!lv.empty()) {
          Claim c{"length", "ctcd student MCC gain from doubling > co-oneway student gain",
                  "ctcd/student " + metric + " gain", "co-oneway/student " + metric + " gain",
                  median(lv), median(rv), false, true};
          c.holds = c.lhs_median > c.rhs_median;
          report.claim_list.push_back(c);
        }
      }
    } else if (kind == "community") {
      bool unchanged = true;
      for (const auto &[label, cells] : e.cells)
        for (const auto &cell : cells) {
          const json &n = cell.result.notes;
          if (n.contains("frozen_teacher_sha256_before") &&
              n.at("frozen_teacher_sha256_before") != n.at("frozen_teacher_sha256_after"))
            unchanged = false;
        }
      report.invariants_ok = report.invariants_ok && unchanged;
      text << "frozen teacher unchanged: " << (unchanged ? "yes" : "NO") << '\n';
      text << "reference: at full scale a community student gained 1.04 average points over classic KD\n";
      for (const char *role : {"student1", "student2"})
        if (auto c = compare(e, std::string("community-") + role, std::string("community ") + role + " > classic KD",
                             {"community", role}, {"classic-kd", "student"}, "average", true, false))
          report.claim_list.push_back(*c);
    }
  }

  claims << "claim,description,lhs,rhs,lhs_median,rhs_median,holds,gated\n";
  if (!report.claim_list.empty()) text << "\n== claims ==\n";
  for (const auto &c : report.claim_list) {
    claims << c.id << ',' << c.description << ',' << c.lhs << ',' << c.rhs << ',' << fmt(c.lhs_median) << ','
           << fmt(c.rhs_median) << ',' << (c.holds ? "true" : "false") << ',' << (c.gated ? "true" : "false") << '\n';
    text << '(' << c.id << ") " << c.description << ": " << fmt(c.lhs_median) << " vs " << fmt(c.rhs_median) << " -> "
         << (c.holds ? "holds" : "does not hold") << (c.gated ? " [gated]" : " [reported]") << '\n';
  }
  text << "\nexit status: " << report.exitCode() << '\n';
  report.text = text.str();
  report.table = table.str();
  report.claims = claims.str();
  return report;
}

Report writeReport(const std::filesystem::path &out_dir) {
  Report r = buildReport(out_dir);
  const std::pair<const char *, const std::string *> files[] = {
      {"report.txt", &r.text}, {"report.csv", &r.table}, {"claims.csv", &r.claims}};
  for (const auto &[name, content] : files) {
    std::ofstream os(out_dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + (out_dir / name).string());
    os << *content;
  }
  return r;
}

}  // namespace ctcd
