#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsm/text.hpp"
#include "json.hpp"

namespace dsm::synth {

// Topic-model corpus with a planted position-biased click model. Every query
// and ad carries a two-topic mixture; relevance is the cosine of the two
// mixtures, and clicks are Bernoulli with log-odds
// logit(position_ctr) + relevance_weight * (relevance - mean relevance).
struct GeneratorConfig {
  std::size_t n_topics = 10;
  std::size_t vocab_size = 400;
  std::size_t n_queries = 1000;
  std::size_t ads_per_query = 8;  // candidate pool per query
  std::size_t n_searches = 8000;
  std::uint64_t seed = 1;
  std::array<double, 5> position_ctrs{0.30, 0.15, 0.10, 0.07, 0.05};
  double relevance_weight = 3.0;
  // Unique-query shares; tail is the remainder. The weights set how often a
  // query from each share is searched.
  double head_frac = 0.03;
  double torso_frac = 0.22;
  double head_weight = 45.0;
  double torso_weight = 12.0;
  double tail_weight = 2.2;
  double train_frac = 0.8;
  double valid_frac = 0.1;  // test is the remainder

  void validate() const;  // throws ConfigError
};

struct GroundTruthRow {
  std::string query;
  std::string ad_id;
  double relevance = 0.0;
  int grade = 0;  // 0..5 by quantile over all (query, pool ad) pairs
};

struct GradedCandidate {
  std::string ad_id;
  text::AdImpression ad;  // clicked unused
  double relevance = 0.0;
  int grade = 0;
};

struct GradedQuery {
  std::string query;
  std::vector<GradedCandidate> candidates;
};

struct TestTruthRow {
  std::string search_id;
  int position = 1;
  double true_p = 0.0;
  int clicked = 0;
};

struct GeneratedCorpus {
  std::vector<text::CohortRecord> train, valid, test;
  std::vector<TestTruthRow> test_truth;  // one row per test impression, file order
  std::unordered_map<std::string, std::size_t> train_query_counts;  // searches per query key
  std::vector<GroundTruthRow> ground_truth;
  std::vector<GradedQuery> graded;  // unique test queries with their full pools
  std::array<double, 5> position_ctr_empirical{};
  std::array<std::size_t, 5> position_impressions{};
  double mean_relevance = 0.0;  // over served impressions
  double bayes_auc = 0.0;       // AUC of the true click probability, test split
  double bias_true = 0.0;       // sum of true p over sum of clicks, test split
};

GeneratedCorpus generate_corpus(const GeneratorConfig& config);

// AUC of the generating probabilities against the sampled clicks; the ceiling
// any model can reach in expectation. Throws on single-class clicks.
double bayes_auc_bound(const std::vector<double>& true_p, const std::vector<int>& clicked);

// Writes train/valid/test.jsonl, ground_truth.tsv, graded.jsonl,
// freq_table.tsv, test_truth.tsv and summary.json under out_dir; returns the
// summary document.
nlohmann::json write_corpus(const GeneratedCorpus& corpus, const std::string& out_dir);

// Readers for the sidecar files written above; all throw DataError on
// unreadable or malformed input.
std::vector<GradedQuery> read_graded(const std::string& path);
std::unordered_map<std::string, std::size_t> read_freq_table(const std::string& path);
std::vector<TestTruthRow> read_test_truth(const std::string& path);

}  // namespace dsm::synth
