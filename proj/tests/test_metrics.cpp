#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "stad/metrics.hpp"
#include "stad/rng.hpp"

namespace stad {

TEST(Metrics, PerfectRankingScoresFullAuc) {
  EXPECT_EQ(auc({0.1, 0.9}, {0, 1}), 1.0);
  EXPECT_EQ(auc({0.9, 0.1}, {0, 1}), 0.0);
}

TEST(Metrics, AllTiedScoresLandAtHalf) {
  EXPECT_DOUBLE_EQ(auc({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1}), 0.5);
}

TEST(Metrics, ConcordantPairCountMatchesHandArithmetic) {
  // Positives 0.8 and 0.4 against negatives 0.2 and 0.5: three of the four
  // cross pairs are concordant.
  EXPECT_DOUBLE_EQ(auc({0.2, 0.8, 0.5, 0.4}, {0, 1, 0, 1}), 0.75);
}

TEST(Metrics, SingleClassLabelsAreRejected) {
  EXPECT_THROW(auc({0.1, 0.2}, {1, 1}), MetricsError);
  EXPECT_THROW(auc({0.1, 0.2}, {0, 0}), MetricsError);
  EXPECT_THROW(auc({0.1}, {0, 1}), MetricsError);
}

TEST(Metrics, AucIgnoresScoreScale) {
  Rng rng(7);
  std::vector<double> scores(60);
  std::vector<int> labels(60);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform(0.0, 1.0);
    labels[i] = rng.uniform(0.0, 1.0) < 0.3 ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<double> scaled = scores;
  for (double& s : scaled) s *= 4.0;
  EXPECT_EQ(auc(scaled, labels), auc(scores, labels));
}

TEST(Metrics, NegatedScoresMirrorTheAuc) {
  std::vector<double> scores = {0.11, 0.52, 0.23, 0.94, 0.45, 0.66};
  std::vector<int> labels = {0, 1, 0, 1, 1, 0};
  std::vector<double> neg = scores;
  for (double& s : neg) s = -s;
  EXPECT_DOUBLE_EQ(auc(neg, labels), 1.0 - auc(scores, labels));
}

TEST(Metrics, PerfectScoresGiveUnitF1) {
  EvalResult r = f1_at_prevalence({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0});
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.threshold_used, 0.8);
}

TEST(Metrics, ReversedScoresGiveZeroF1) {
  EvalResult r = f1_at_prevalence({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0});
  EXPECT_EQ(r.f1, 0.0);
}

TEST(Metrics, PrevalenceCutMatchesHandArithmetic) {
  EvalResult r = f1_at_prevalence({0.9, 0.8, 0.1}, {1, 0, 1});
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
  EXPECT_EQ(r.threshold_used, 0.8);
}

TEST(Metrics, TiesAtTheCutFallToTheLowerIndex) {
  // Spots 1 and 2 tie at 0.5 with one slot left; index 1 (a negative) wins it.
  EvalResult r = f1_at_prevalence({0.9, 0.5, 0.5, 0.1}, {1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
  EXPECT_EQ(r.threshold_used, 0.5);
}

TEST(Metrics, PrecisionEqualsRecallByConstruction) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> scores(40);
    std::vector<int> labels(40, 0);
    for (auto& s : scores) s = rng.uniform(0.0, 1.0);
    for (int i = 0; i < 9; ++i) labels[static_cast<std::size_t>(i * 4)] = 1;
    EvalResult r = f1_at_prevalence(scores, labels);
    EXPECT_EQ(r.precision, r.recall);
    EXPECT_EQ(r.f1, r.precision);
  }
}

TEST(Metrics, MissingPositivesAreRejected) {
  EXPECT_THROW(f1_at_prevalence({0.1, 0.2}, {0, 0}), MetricsError);
}

TEST(Metrics, EvaluateCombinesBothMetrics) {
  EvalResult r = evaluate({0.9, 0.8, 0.1}, {1, 0, 1});
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
  EXPECT_DOUBLE_EQ(r.auc, 0.5);
}

TEST(Metrics, CsvRoundTripKeepsRowOrderAndValues) {
  EvalResult a = evaluate({0.9, 0.8, 0.1, 0.3}, {1, 0, 1, 0});
  EvalResult b = evaluate({0.9, 0.2, 0.1, 0.3}, {1, 0, 0, 1});
  const std::string csv = eval_csv({{"full", a}, {"no_tnm", b}});
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "name,auc,f1,precision,recall,threshold");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("full,", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("no_tnm,", 0), 0u);
  double auc_v = 0, f1_v = 0;
  std::sscanf(line.c_str(), "no_tnm,%lf,%lf", &auc_v, &f1_v);
  EXPECT_NEAR(auc_v, b.auc, 1e-9);
  EXPECT_NEAR(f1_v, b.f1, 1e-9);
}

}  // namespace stad
