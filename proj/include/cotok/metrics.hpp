#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cotok/ingest.hpp"
#include "cotok/tensor.hpp"

namespace cotok {

/// Lowercase, trim, and collapse internal whitespace runs to one space.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

enum class MatchRule { normalized, raw };

inline bool answers_equal(std::string_view a, std::string_view b, MatchRule rule = MatchRule::normalized) {
  if (rule == MatchRule::raw) return a == b;
  return normalize_answer(a) == normalize_answer(b);
}

inline int exact_match(std::string_view pred, std::string_view gt, MatchRule rule = MatchRule::normalized) {
  return answers_equal(pred, gt, rule) ? 1 : 0;
}

/// Mean over the five leave-one-out subsets of min(matches / 2, 1).
inline double ivqa_accuracy(std::string_view pred, const std::vector<std::string>& answers,
                            MatchRule rule = MatchRule::normalized) {
  if (answers.size() != 5)
    throw Error("ivqa_accuracy: need exactly 5 answers, got " + std::to_string(answers.size()));
  std::vector<int> hit(5);
  for (std::size_t i = 0; i < 5; ++i) hit[i] = exact_match(pred, answers[i], rule);
  int total = 0;
  for (std::size_t left_out = 0; left_out < 5; ++left_out) {
    int c = 0;
    for (std::size_t i = 0; i < 5; ++i)
      if (i != left_out) c += hit[i];
    total += std::min(c, 2);  // in half points
  }
  return static_cast<double>(total) / 10.0;
}

enum class MetricMode { exact, ivqa };

inline MetricMode parse_metric_mode(std::string_view s) {
  if (s == "exact") return MetricMode::exact;
  if (s == "ivqa") return MetricMode::ivqa;
  throw Error("unknown metric '" + std::string(s) + "' (exact, ivqa)");
}

struct Prediction {
  std::string id;
  std::string answer;
  double score = 0.0;
};

/// Lines of "id<TAB>answer[<TAB>score]". Blank lines are skipped.
inline std::vector<Prediction> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions file '" + path + "'");
  std::vector<Prediction> out;
  std::map<std::string, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (fields.size() != 2 && fields.size() != 3)
      throw Error(where + "expected 'id<TAB>answer[<TAB>score]', got " + std::to_string(fields.size()) + " fields");
    if (fields[0].empty()) throw Error(where + "empty id");
    Prediction p{fields[0], fields[1], 0.0};
    if (fields.size() == 3) {
      std::size_t used = 0;
      try {
        p.score = std::stod(fields[2], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != fields[2].size()) throw Error(where + "score '" + fields[2] + "' is not a number");
    }
    if (const auto [it, fresh] = seen.emplace(p.id, lineno); !fresh)
      throw Error(where + "duplicate id '" + p.id + "' (first on line " + std::to_string(it->second) + ")");
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_predictions(const std::string& path, const std::vector<Prediction>& predictions) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write predictions file '" + path + "'");
  for (const auto& p : predictions) {
    if (p.answer.find_first_of("\t\n") != std::string::npos)
      throw Error("prediction for '" + p.id + "' contains a tab or newline");
    std::ostringstream score;
    score << std::setprecision(9) << p.score;
    out << p.id << '\t' << p.answer << '\t' << score.str() << "\n";
  }
}

struct TaskScore {
  std::size_t n = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::size_t n_examples = 0;
  std::size_t n_missing = 0;
  double accuracy = 0.0;
  std::map<std::string, TaskScore> per_task;
};

/// Scores one example: exact mode accepts a match with any listed answer.
inline double score_example(const std::string& pred, const QAExample& gt, MetricMode mode, MatchRule rule) {
  if (mode == MetricMode::ivqa) return ivqa_accuracy(pred, gt.answers, rule);
  for (const auto& a : gt.answers)
    if (exact_match(pred, a, rule)) return 1.0;
  return 0.0;
}

/// Joins predictions to ground truth by id. Missing predictions score 0.
inline EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<QAExample>& gt,
                           MetricMode mode, MatchRule rule = MatchRule::normalized) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions)
    if (!by_id.emplace(p.id, &p).second) throw Error("evaluate: duplicate prediction id '" + p.id + "'");
  std::map<std::string, const QAExample*> gt_ids;
  for (const auto& ex : gt)
    if (!gt_ids.emplace(ex.id, &ex).second) throw Error("evaluate: duplicate ground-truth id '" + ex.id + "'");
  for (const auto& [id, _] : by_id)
    if (!gt_ids.count(id)) throw Error("evaluate: prediction id '" + id + "' is not in the ground truth");

  EvalReport report;
  std::map<std::string, double> task_sum;
  double sum = 0.0;
  // iterate in id order so the floating-point sum does not depend on file order
  for (const auto& [id, ex] : gt_ids) {
    const auto it = by_id.find(id);
    const double s = it == by_id.end() ? 0.0 : score_example(it->second->answer, *ex, mode, rule);
    if (it == by_id.end()) ++report.n_missing;
    const std::string task = task_of(*ex);
    ++report.per_task[task].n;
    task_sum[task] += s;
    sum += s;
  }
  report.n_examples = gt.size();
  report.accuracy = gt.empty() ? 0.0 : sum / static_cast<double>(gt.size());
  for (auto& [task, ts] : report.per_task) ts.accuracy = task_sum[task] / static_cast<double>(ts.n);
  return report;
}

inline EvalReport evaluate_files(const std::string& predictions_path, const std::string& gt_path, MetricMode mode,
                                 MatchRule rule = MatchRule::normalized) {
  return evaluate(read_predictions(predictions_path), read_qa_file(gt_path), mode, rule);
}

inline std::string format_eval(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "examples " << r.n_examples << "  missing " << r.n_missing << "  accuracy " << r.accuracy << "\n";
  for (const auto& [task, ts] : r.per_task)
    out << "  " << std::left << std::setw(18) << task << std::right << std::setw(8) << ts.n << "  " << ts.accuracy
        << "\n";
  return out.str();
}

inline std::string eval_csv(const EvalReport& r) {
  std::ostringstream out;
  out << std::setprecision(9) << "task,n,accuracy\n";
  for (const auto& [task, ts] : r.per_task) out << task << ',' << ts.n << ',' << ts.accuracy << "\n";
  out << "all," << r.n_examples << ',' << r.accuracy << "\n";
  return out.str();
}

}  // namespace cotok
