#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cotok/metrics.hpp"

using namespace cotok;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << body;
  return p;
}

QAExample gt(std::string id, std::vector<std::string> answers, std::string video = "clip.txt") {
  return QAExample{std::move(id), std::move(video), "what", std::move(answers)};
}

}  // namespace

TEST(ExactMatch, NormalizedComparison) {
  EXPECT_EQ(exact_match("cat", "cat"), 1);
  EXPECT_EQ(exact_match("cat", "dog"), 0);
  EXPECT_EQ(exact_match("  Cat ", "cat"), 1);
  EXPECT_EQ(exact_match("a \t big   cat", "A big cat"), 1);
  EXPECT_EQ(exact_match("  Cat ", "cat", MatchRule::raw), 0);
  EXPECT_EQ(normalize_answer("  Two\tWords  "), "two words");
}

TEST(Ivqa, Fixtures) {
  const std::vector<std::string> answers{"a", "a", "a", "a", "b"};
  EXPECT_DOUBLE_EQ(ivqa_accuracy("a", answers), 1.0);
  EXPECT_DOUBLE_EQ(ivqa_accuracy("b", answers), 0.4);
  EXPECT_DOUBLE_EQ(ivqa_accuracy("c", answers), 0.0);
  EXPECT_DOUBLE_EQ(ivqa_accuracy("b", {"a", "b", "c", "b", "d"}), 0.8);
  EXPECT_THROW(ivqa_accuracy("a", {"a", "a", "a", "a"}), Error);
}

TEST(Ivqa, ValuesOnTenthGrid) {
  const std::vector<std::string> pool{"x", "y", "z"};
  for (int mask = 0; mask < 243; ++mask) {
    std::vector<std::string> answers;
    for (int i = 0, m = mask; i < 5; ++i, m /= 3) answers.push_back(pool[static_cast<std::size_t>(m % 3)]);
    for (const auto& pred : pool) {
      const double v = ivqa_accuracy(pred, answers);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      EXPECT_NEAR(v * 10, std::round(v * 10), 1e-12);
    }
  }
}

TEST(Ivqa, InvariantUnderAnswerPermutation) {
  std::vector<std::string> answers{"a", "a", "b", "c", "a"};
  std::sort(answers.begin(), answers.end());
  const double ref_a = ivqa_accuracy("a", answers), ref_b = ivqa_accuracy("b", answers);
  int perms = 0;
  std::vector<int> idx{0, 1, 2, 3, 4};
  do {
    std::vector<std::string> p;
    for (int i : idx) p.push_back(answers[static_cast<std::size_t>(i)]);
    EXPECT_EQ(ivqa_accuracy("a", p), ref_a);
    EXPECT_EQ(ivqa_accuracy("b", p), ref_b);
    ++perms;
  } while (std::next_permutation(idx.begin(), idx.end()));
  EXPECT_EQ(perms, 120);
}

TEST(Evaluate, PerfectPredictions) {
  const std::vector<QAExample> truth{gt("1", {"red"}), gt("2", {"blue"}), gt("3", {"two"})};
  std::vector<Prediction> preds;
  for (const auto& ex : truth) preds.push_back({ex.id, ex.answers[0], 0.0});
  const auto r = evaluate(preds, truth, MetricMode::exact);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.n_examples, 3u);
  EXPECT_EQ(r.n_missing, 0u);
}

TEST(Evaluate, MissingPredictionsScoreZero) {
  const std::vector<QAExample> truth{gt("1", {"red"}), gt("2", {"blue"})};
  const auto r = evaluate({}, truth, MetricMode::exact);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.n_examples, 2u);
  EXPECT_EQ(r.n_missing, 2u);
}

TEST(Evaluate, MixedFixture) {
  const std::vector<QAExample> truth{gt("a", {"red"}, "synth:frame_color:1:0"), gt("b", {"blue"}, "synth:frame_color:1:1"),
                                     gt("c", {"2"}, "synth:repeat_count:1:0"), gt("d", {"3"}, "synth:repeat_count:1:1")};
  const std::vector<Prediction> preds{{"a", "Red", 0}, {"b", "green", 0}, {"c", "2", 0}, {"d", "three", 0}};
  const auto r = evaluate(preds, truth, MetricMode::exact);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  ASSERT_EQ(r.per_task.size(), 2u);
  EXPECT_EQ(r.per_task.at("frame_color").n, 2u);
  EXPECT_DOUBLE_EQ(r.per_task.at("frame_color").accuracy, 0.5);
  std::size_t weight = 0;
  for (const auto& [_, ts] : r.per_task) weight += ts.n;
  EXPECT_EQ(weight, r.n_examples);
}

TEST(Evaluate, IvqaMode) {
  const std::vector<QAExample> truth{gt("1", {"a", "a", "a", "a", "b"}), gt("2", {"a", "a", "a", "a", "b"})};
  const auto r = evaluate({{"1", "a", 0}, {"2", "b", 0}}, truth, MetricMode::ivqa);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.7);
}

TEST(Evaluate, RejectsUnknownAndDuplicateIds) {
  const std::vector<QAExample> truth{gt("1", {"red"})};
  EXPECT_THROW(evaluate({{"9", "red", 0}}, truth, MetricMode::exact), Error);
  EXPECT_THROW(evaluate({{"1", "red", 0}, {"1", "red", 0}}, truth, MetricMode::exact), Error);
}

TEST(Evaluate, IndependentOfLineOrder) {
  std::vector<QAExample> truth;
  std::vector<Prediction> preds;
  for (int i = 0; i < 30; ++i) {
    truth.push_back(gt(std::to_string(i), {std::to_string(i % 4)}, "synth:repeat_count:0:" + std::to_string(i)));
    preds.push_back({std::to_string(i), std::to_string(i % 3), 0});
  }
  const auto r1 = evaluate(preds, truth, MetricMode::exact);
  std::reverse(preds.begin(), preds.end());
  std::rotate(truth.begin(), truth.begin() + 7, truth.end());
  const auto r2 = evaluate(preds, truth, MetricMode::exact);
  EXPECT_EQ(r1.accuracy, r2.accuracy);
  EXPECT_EQ(eval_csv(r1), eval_csv(r2));
}

TEST(PredictionsFile, RoundTripAndErrors) {
  const auto path = std::filesystem::temp_directory_path() / "cotok_preds.tsv";
  write_predictions(path.string(), {{"x", "red square", -0.25}, {"y", "two", -1.5}});
  const auto back = read_predictions(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].answer, "red square");
  EXPECT_DOUBLE_EQ(back[1].score, -1.5);
  EXPECT_THROW(write_predictions(path.string(), {{"x", "a\tb", 0}}), Error);

  const auto bad = temp_file("cotok_bad_preds.tsv", "x\tred\n\ny\tblue\tnot-a-number\n");
  try {
    read_predictions(bad.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  const auto dup = temp_file("cotok_dup_preds.tsv", "x\tred\ny\tblue\nx\tgreen\n");
  try {
    read_predictions(dup.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_predictions("/nonexistent/preds.tsv"), Error);
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
  std::filesystem::remove(dup);
}

TEST(EvaluateFiles, JoinsPredictionsWithGroundTruth) {
  const auto truth = temp_file("cotok_gt.tsv", "1\twhat color\tred\tv1.txt\n2\thow many\t3|three\tv2.txt\n");
  const auto preds = temp_file("cotok_eval_preds.tsv", "2\tthree\t-0.1\n");
  const auto r = evaluate_files(preds.string(), truth.string(), MetricMode::exact);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_EQ(r.n_missing, 1u);
  EXPECT_NE(format_eval(r).find("accuracy 0.5000"), std::string::npos);
  std::filesystem::remove(truth);
  std::filesystem::remove(preds);
}
