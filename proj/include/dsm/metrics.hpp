#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace dsm::metrics {

// Probability that a random positive outscores a random negative, ties worth
// 0.5; rank-sum computation. Throws std::invalid_argument on single-class
// input.
double auc(const std::vector<double>& scores, const std::vector<double>& labels);

struct AccuracyResult {
  double accuracy = 0.0;
  double threshold = 0.5;
};

// Predicts positive where score >= threshold.
AccuracyResult accuracy_at_threshold(const std::vector<double>& scores,
                                     const std::vector<double>& labels, double threshold);
// Scans midpoints of adjacent distinct scores (plus sentinels beyond both
// ends) and returns the best accuracy with the lowest such threshold. Run
// this on a validation split, then apply the threshold to test.
AccuracyResult accuracy_maximized(const std::vector<double>& scores,
                                  const std::vector<double>& labels);

// Sum of scores over sum of labels; 1.0 is perfectly calibrated. Throws when
// there are no positive labels.
double prediction_bias(const std::vector<double>& scores, const std::vector<double>& labels);

struct RankedCandidate {
  double score = 0.0;
  int grade = 0;  // 0 (irrelevant) .. 5 (perfect)
};

struct QueryRanking {
  std::string query;
  std::vector<RankedCandidate> candidates;
};

struct RankMetric {
  double mean = 0.0;
  std::vector<double> per_query;
  std::size_t queries_skipped = 0;  // empty candidate lists
};

// Gain 2^grade - 1, discount 1/log2(rank+1) with ranks from 1, normalized by
// the ideal ordering. Queries whose ideal DCG is zero contribute 1.0. Model
// order sorts by score descending, ties kept in input order.
RankMetric ndcg_at_k(const std::vector<QueryRanking>& rankings, std::size_t k);

// Fraction of the top k (or the whole list when shorter) with grade >=
// threshold.
RankMetric precision_at_k(const std::vector<QueryRanking>& rankings, std::size_t k,
                          int relevant_grade_threshold = 3);

struct WilcoxonResult {
  double w = 0.0;       // min(W+, W-)
  double p = 1.0;       // two-sided, normal approximation
  std::size_t n = 0;    // pairs remaining after dropping zero differences
};

// Signed-rank test with midrank ties, tie-corrected variance and continuity
// correction. Requires >= 6 nonzero differences.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

struct BucketStat {
  std::size_t n = 0;
  bool auc_defined = false;
  double auc = 0.0;
};

struct MetricsReport {
  double auc = 0.0;
  double accuracy = 0.0;
  double threshold = 0.5;
  double bias = 0.0;
  std::size_t n = 0;
  std::map<std::string, BucketStat> buckets;   // head/torso/tail, position_1..5
  std::map<std::size_t, double> ndcg;          // k -> mean
  std::map<std::size_t, double> precision;     // k -> mean
  nlohmann::json to_json() const;
};

struct EvalExample {
  double score = 0.0;
  double label = 0.0;
  int position = 1;
  std::string query_key;
};

// Global metrics plus per-frequency-bucket (head: train count > 20, tail:
// < 5, torso otherwise; unseen queries count 0) and per-position AUC. Buckets
// where only one class is present report auc_defined=false. When threshold
// is NaN the accuracy threshold is maximized on the examples themselves.
MetricsReport decompose_eval(const std::vector<EvalExample>& examples,
                             const std::unordered_map<std::string, std::size_t>& freq_table,
                             double threshold);

}  // namespace dsm::metrics
