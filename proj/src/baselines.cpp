#include "dsm/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "dsm/checkpoint.hpp"
#include "dsm/errors.hpp"
#include "dsm/log.hpp"
#include "dsm/rng.hpp"
#include "dsm/tape.hpp"

namespace dsm::base {
namespace {

constexpr std::uint64_t kLmInitStream = 0x7a11;
constexpr std::uint64_t kLmShuffleStream = 0xa7000000;
constexpr double kDivergenceThreshold = 1e6;

// Mask-aware mean pooling: constant row of 1/n over unmasked slots, zero
// elsewhere; an empty side stays the zero vector.
ad::NodeId pooled_side(ad::Tape& tape, LmModel& model, const std::vector<int>& ids,
                       const ad::Mask& mask) {
  ad::NodeId rows = tape.embed_rows(model.embedding, ids, mask);
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  std::vector<double> weights(ids.size(), 0.0);
  if (n > 0) {
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) weights[i] = 1.0 / static_cast<double>(n);
    }
  }
  ad::Tensor w({1, ids.size()}, std::move(weights));
  return tape.matmul(tape.constant(std::move(w)), rows);
}

ad::NodeId lm_forward(ad::Tape& tape, LmModel& model, const text::EncodedPair& pair) {
  ad::NodeId q = pooled_side(tape, model, pair.query_ids, pair.query_mask);
  ad::NodeId a = pooled_side(tape, model, pair.ad_ids, pair.ad_mask);
  ad::NodeId flat = tape.reshape(tape.concat_cols(q, a), {2 * model.dim});
  ad::NodeId logit = tape.add(tape.dot(flat, tape.leaf(model.out_w)), tape.leaf(model.out_b));
  return tape.sigmoid(logit);
}

}  // namespace

std::vector<text::EncodedPair> lm_encode(const std::vector<text::CohortRecord>& cohorts,
                                         const text::Vocab& vocab, std::size_t l_q,
                                         std::size_t l_a) {
  std::vector<text::EncodedPair> out;
  for (const auto& rec : cohorts) {
    for (const auto& ad : rec.ads) {
      out.push_back(text::encode_pair(rec.query_text, ad, vocab, l_q, l_a));
    }
  }
  return out;
}

void LmConfig::validate() const {
  if (dim < 1) throw ConfigError("lm dim must be >= 1");
  if (l_q < 1 || l_a < 1) throw ConfigError("lm sequence lengths must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("lm learning_rate must be positive");
  if (batch_pairs < 1) throw ConfigError("lm batch_pairs must be >= 1");
  if (epochs < 1) throw ConfigError("lm epochs must be >= 1");
  if (!(init_stddev > 0.0)) throw ConfigError("lm init_stddev must be positive");
}

std::vector<std::pair<std::string, ad::Tensor*>> LmModel::named() {
  return {{"embedding", &embedding}, {"out_b", &out_b}, {"out_w", &out_w}};
}

std::vector<std::pair<std::string, const ad::Tensor*>> LmModel::named() const {
  auto mut = const_cast<LmModel*>(this)->named();
  std::vector<std::pair<std::string, const ad::Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

LmModel lm_make(const LmConfig& config, std::size_t vocab_size, std::uint64_t seed,
                const ad::Tensor* pretrained_embedding) {
  config.validate();
  if (vocab_size < 3) throw ConfigError("vocab must contain PAD, OOV and the separator");
  LmModel model;
  model.dim = config.dim;
  model.l_q = config.l_q;
  model.l_a = config.l_a;
  model.embedding = ad::Tensor::zeros({vocab_size, config.dim}, true);
  model.out_w = ad::Tensor::zeros({2 * config.dim}, true);
  model.out_b = ad::Tensor::zeros({1}, true);
  Rng rng(mix_seed(seed, kLmInitStream));
  for (auto& [name, tensor] : model.named()) {
    (void)name;
    for (double& v : tensor->values) v = rng.truncated_normal(config.init_stddev);
  }
  if (pretrained_embedding != nullptr) {
    if (pretrained_embedding->shape != model.embedding.shape) {
      throw ConfigError("pretrained embedding shape " +
                        ad::shape_str(pretrained_embedding->shape) + " does not match model " +
                        ad::shape_str(model.embedding.shape));
    }
    model.embedding.values = pretrained_embedding->values;
  }
  std::fill_n(model.embedding.values.begin(), config.dim, 0.0);  // PAD row
  return model;
}

LmTrainResult lm_train(const LmConfig& config,
                       const std::vector<text::CohortRecord>& train_cohorts,
                       const std::vector<text::CohortRecord>& valid_cohorts,
                       const text::Vocab& vocab,
                       const ad::Tensor* pretrained_embedding) {
  config.validate();
  if (train_cohorts.empty()) throw DataError("no training searches");

  LmTrainResult result;
  result.model = lm_make(config, vocab.size(), config.seed, pretrained_embedding);
  LmModel& model = result.model;
  auto named = model.named();
  train::AdamState adam;
  train::adam_init(adam, named);
  train::TrainConfig bridge;  // carries the step-size schedule for adam_step
  bridge.learning_rate = config.learning_rate;
  bridge.schedule = config.schedule;

  std::vector<text::EncodedPair> pairs = lm_encode(train_cohorts, vocab, config.l_q, config.l_a);
  std::vector<text::EncodedPair> valid = lm_encode(valid_cohorts, vocab, config.l_q, config.l_a);

  LmModel best;
  bool have_best = false;
  double best_auc = -1.0;

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs && !result.diverged; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, kLmShuffleStream + epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = shuffle_rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < order.size(); start += config.batch_pairs) {
      const std::size_t stop = std::min(order.size(), start + config.batch_pairs);
      ad::Tape tape;
      std::vector<ad::NodeId> y_hats;
      std::vector<double> labels;
      y_hats.reserve(stop - start);
      labels.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        y_hats.push_back(lm_forward(tape, model, pairs[order[i]]));
        labels.push_back(static_cast<double>(pairs[order[i]].label));
      }
      ad::NodeId loss = tape.bce_mean(tape.stack_scalars(y_hats), labels);
      const double l_val = tape.value(loss).values[0];
      train::StepRecord record{l_val, 0.0, l_val, 0.0};
      if (!std::isfinite(l_val) || l_val > kDivergenceThreshold) {
        result.history.steps.push_back(record);
        result.diverged = true;
        log::error("lm training diverged (loss " + std::to_string(l_val) + ")");
        break;
      }
      tape.backward(loss);
      double grad_norm_sq = 0.0;
      for (auto& [name, tensor] : named) {
        (void)name;
        for (double g : tensor->grad) grad_norm_sq += g * g;
      }
      record.grad_norm_sq = grad_norm_sq;
      result.history.steps.push_back(record);
      train::adam_step(named, adam, bridge);
    }

    if (!valid.empty() && !result.diverged) {
      std::vector<double> scores = lm_predict_batch(model, valid);
      std::vector<double> labels(valid.size());
      for (std::size_t i = 0; i < valid.size(); ++i) {
        labels[i] = static_cast<double>(valid[i].label);
      }
      metrics::MetricsReport report;
      report.n = valid.size();
      try {
        report.auc = metrics::auc(scores, labels);
      } catch (const std::invalid_argument&) {
        log::warn("lm validation split has a single class; AUC left at 0");
      }
      metrics::AccuracyResult acc = metrics::accuracy_maximized(scores, labels);
      report.accuracy = acc.accuracy;
      report.threshold = acc.threshold;
      try {
        report.bias = metrics::prediction_bias(scores, labels);
      } catch (const std::invalid_argument&) {
      }
      result.history.validations.push_back(report);
      if (report.auc > best_auc) {
        best_auc = report.auc;
        result.best_epoch = epoch;
        best = model;
        have_best = true;
      }
    }
  }

  if (have_best) {
    result.model = best;
    result.best_auc = best_auc;
  }
  return result;
}

double lm_predict(LmModel& model, const text::EncodedPair& pair) {
  ad::Tape tape;
  return tape.value(lm_forward(tape, model, pair)).values[0];
}

std::vector<double> lm_predict_batch(LmModel& model,
                                     const std::vector<text::EncodedPair>& pairs) {
  std::vector<double> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = lm_predict(model, pairs[i]);
  return out;
}

void lm_save(const std::string& path, const LmModel& model, const text::Vocab& vocab,
             const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["lm"] = {{"dim", model.dim}, {"l_q", model.l_q}, {"l_a", model.l_a}};
  meta["vocab"] = {{"tokens", vocab.id_to_token}, {"min_count", vocab.min_count}};
  ckpt::save(path, model.named(), meta, ckpt::kLmMagic);
}

LoadedLm lm_load(const std::string& path) {
  ckpt::Loaded raw = ckpt::load(path, ckpt::kLmMagic);
  if (!raw.meta.contains("lm") || !raw.meta.contains("vocab")) {
    throw ckpt::CheckpointError(ckpt::ErrorKind::manifest_error,
                                "lm metadata lacks lm or vocab section");
  }
  LoadedLm out;
  try {
    out.model.dim = raw.meta.at("lm").at("dim").get<std::size_t>();
    out.model.l_q = raw.meta.at("lm").at("l_q").get<std::size_t>();
    out.model.l_a = raw.meta.at("lm").at("l_a").get<std::size_t>();
    out.vocab = text::vocab_from_tokens(
        raw.meta.at("vocab").at("tokens").get<std::vector<std::string>>(),
        raw.meta.at("vocab").at("min_count").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw ckpt::CheckpointError(ckpt::ErrorKind::manifest_error,
                                std::string("lm metadata: ") + e.what());
  }
  out.model.embedding = ad::Tensor::zeros({out.vocab.size(), out.model.dim}, true);
  out.model.out_w = ad::Tensor::zeros({2 * out.model.dim}, true);
  out.model.out_b = ad::Tensor::zeros({1}, true);
  ckpt::load_into(raw, out.model.named());
  out.meta = raw.meta;
  return out;
}

Bm25Stats bm25_build(const std::vector<std::vector<std::string>>& docs) {
  if (docs.empty()) throw DataError("bm25 corpus is empty");
  Bm25Stats stats;
  stats.n_docs = docs.size();
  std::size_t total_len = 0;
  for (const auto& doc : docs) {
    total_len += doc.size();
    std::unordered_set<std::string> seen;
    for (const auto& token : doc) {
      if (seen.insert(token).second) ++stats.df[token];
    }
  }
  stats.avg_len = total_len == 0 ? 1.0
                                 : static_cast<double>(total_len) /
                                       static_cast<double>(stats.n_docs);
  return stats;
}

double bm25_score(const std::vector<std::string>& query_tokens,
                  const std::vector<std::string>& doc_tokens, const Bm25Stats& stats) {
  if (stats.n_docs == 0) throw DataError("bm25 statistics are empty");
  std::unordered_map<std::string, std::size_t> tf;
  for (const auto& token : doc_tokens) ++tf[token];
  const double len_norm =
      stats.k1 * (1.0 - stats.b + stats.b * static_cast<double>(doc_tokens.size()) /
                                      stats.avg_len);
  const double n = static_cast<double>(stats.n_docs);
  double score = 0.0;
  for (const auto& token : query_tokens) {  // duplicates accumulate
    const auto tf_it = tf.find(token);
    if (tf_it == tf.end()) continue;
    const auto df_it = stats.df.find(token);
    const double df = df_it == stats.df.end() ? 0.0 : static_cast<double>(df_it->second);
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    const double term_tf = static_cast<double>(tf_it->second);
    score += idf * term_tf * (stats.k1 + 1.0) / (term_tf + len_norm);
  }
  return score;
}

std::vector<std::string> bm25_document(const text::AdImpression& ad) {
  std::vector<std::string> doc = text::normalize_text(ad.title);
  for (auto& t : text::normalize_text(ad.description)) doc.push_back(std::move(t));
  for (auto& t : text::normalize_text(ad.display_url)) doc.push_back(std::move(t));
  return doc;
}

std::vector<metrics::QueryRanking> bm25_rank(const std::vector<synth::GradedQuery>& graded) {
  std::vector<std::vector<std::string>> docs;
  std::unordered_set<std::string> seen_ads;
  for (const auto& gq : graded) {
    for (const auto& c : gq.candidates) {
      if (seen_ads.insert(c.ad_id).second) docs.push_back(bm25_document(c.ad));
    }
  }
  Bm25Stats stats = bm25_build(docs);
  std::vector<metrics::QueryRanking> out;
  out.reserve(graded.size());
  for (const auto& gq : graded) {
    metrics::QueryRanking ranking;
    ranking.query = gq.query;
    std::vector<std::string> q_tokens = text::normalize_text(gq.query);
    for (const auto& c : gq.candidates) {
      ranking.candidates.push_back({bm25_score(q_tokens, bm25_document(c.ad), stats), c.grade});
    }
    out.push_back(std::move(ranking));
  }
  return out;
}

std::vector<metrics::QueryRanking> lm_rank(LmModel& model, const text::Vocab& vocab,
                                           const std::vector<synth::GradedQuery>& graded) {
  std::vector<metrics::QueryRanking> out;
  out.reserve(graded.size());
  for (const auto& gq : graded) {
    metrics::QueryRanking ranking;
    ranking.query = gq.query;
    for (const auto& c : gq.candidates) {
      text::EncodedPair pair = text::encode_pair(gq.query, c.ad, vocab, model.l_q, model.l_a);
      ranking.candidates.push_back({lm_predict(model, pair), c.grade});
    }
    out.push_back(std::move(ranking));
  }
  return out;
}

}  // namespace dsm::base
