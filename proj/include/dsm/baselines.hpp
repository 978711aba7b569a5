#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsm/metrics.hpp"
#include "dsm/synth.hpp"
#include "dsm/tensor.hpp"
#include "dsm/text.hpp"
#include "dsm/train.hpp"

namespace dsm::base {

// Logistic regression over concatenated mask-aware mean-pooled word
// embeddings. An all-PAD side pools to the zero vector.
struct LmConfig {
  std::size_t dim = 40;
  std::size_t l_q = 10;
  std::size_t l_a = 50;
  double learning_rate = 0.001;
  std::size_t batch_pairs = 256;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;
  train::Schedule schedule = train::Schedule::inverse_sqrt;
  double init_stddev = 0.1;

  void validate() const;  // throws ConfigError
};

struct LmModel {
  std::size_t dim = 0;
  std::size_t l_q = 0;
  std::size_t l_a = 0;
  ad::Tensor embedding;  // |V| x dim, PAD row zero
  ad::Tensor out_w;      // 2 dim
  ad::Tensor out_b;      // 1

  std::vector<std::pair<std::string, ad::Tensor*>> named();
  std::vector<std::pair<std::string, const ad::Tensor*>> named() const;
};

LmModel lm_make(const LmConfig& config, std::size_t vocab_size, std::uint64_t seed,
                const ad::Tensor* pretrained_embedding = nullptr);

// Flattens cohorts to encoded pairs. Unlike the main model the LM keeps
// pairs with an empty side; they pool to zero vectors.
std::vector<text::EncodedPair> lm_encode(const std::vector<text::CohortRecord>& cohorts,
                                         const text::Vocab& vocab, std::size_t l_q,
                                         std::size_t l_a);

struct LmTrainResult {
  LmModel model;  // best validation AUC when a validation split exists
  train::TrainHistory history;
  double best_auc = 0.0;
  std::size_t best_epoch = 0;
  bool diverged = false;
};

LmTrainResult lm_train(const LmConfig& config,
                       const std::vector<text::CohortRecord>& train_cohorts,
                       const std::vector<text::CohortRecord>& valid_cohorts,
                       const text::Vocab& vocab,
                       const ad::Tensor* pretrained_embedding = nullptr);

double lm_predict(LmModel& model, const text::EncodedPair& pair);
std::vector<double> lm_predict_batch(LmModel& model, const std::vector<text::EncodedPair>& pairs);

// Checkpoints share the container format under a distinct magic.
void lm_save(const std::string& path, const LmModel& model, const text::Vocab& vocab,
             const nlohmann::json& extra_meta);

struct LoadedLm {
  LmModel model;
  text::Vocab vocab;
  nlohmann::json meta;
};

LoadedLm lm_load(const std::string& path);

// Okapi BM25 over ads flattened to one document each.
struct Bm25Stats {
  std::unordered_map<std::string, std::size_t> df;
  double avg_len = 0.0;
  std::size_t n_docs = 0;
  double k1 = 1.2;
  double b = 0.75;
};

Bm25Stats bm25_build(const std::vector<std::vector<std::string>>& docs);  // throws on empty

double bm25_score(const std::vector<std::string>& query_tokens,
                  const std::vector<std::string>& doc_tokens, const Bm25Stats& stats);

// Ad token stream used for BM25 documents: title + description + url tokens.
std::vector<std::string> bm25_document(const text::AdImpression& ad);

// Ranks every graded candidate list with BM25 statistics built over the
// distinct ads of the graded set itself.
std::vector<metrics::QueryRanking> bm25_rank(const std::vector<synth::GradedQuery>& graded);

// Ranks graded candidates with LM probabilities.
std::vector<metrics::QueryRanking> lm_rank(LmModel& model, const text::Vocab& vocab,
                                           const std::vector<synth::GradedQuery>& graded);

}  // namespace dsm::base
