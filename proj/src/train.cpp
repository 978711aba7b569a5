#include "dsm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

#include "dsm/checkpoint.hpp"
#include "dsm/errors.hpp"
#include "dsm/log.hpp"
#include "dsm/rng.hpp"

namespace dsm::train {
namespace {

// Stream tags keep the RNG consumers independent of each other.
constexpr std::uint64_t kInitStream = 0x1217;
constexpr std::uint64_t kShuffleStream = 0xe5000000;
constexpr std::uint64_t kStepStream = 0xc0000000;

constexpr ad::NodeId kNoNode = std::numeric_limits<ad::NodeId>::max();

bool any_set(const ad::Mask& mask) {
  for (auto m : mask) {
    if (m) return true;
  }
  return false;
}

}  // namespace

const char* schedule_name(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::inverse_sqrt: return "inverse_sqrt";
    case Schedule::step_decay: return "step_decay";
  }
  return "constant";
}

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_matching_loss: return "no_matching_loss";
    case Ablation::loss_normalized: return "loss_normalized";
  }
  return "full";
}

Schedule schedule_from_name(const std::string& name) {
  if (name == "constant") return Schedule::constant;
  if (name == "inverse_sqrt") return Schedule::inverse_sqrt;
  if (name == "step_decay") return Schedule::step_decay;
  throw ConfigError("unknown schedule: " + name);
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "full") return Ablation::full;
  if (name == "no_matching_loss") return Ablation::no_matching_loss;
  if (name == "loss_normalized") return Ablation::loss_normalized;
  throw ConfigError("unknown ablation: " + name);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_cohorts < 1) throw ConfigError("batch_cohorts must be >= 1");
  if (!(init_stddev > 0.0)) throw ConfigError("init_stddev must be positive");
  if (!(step_decay_factor > 0.0) || step_decay_factor > 1.0) {
    throw ConfigError("step_decay_factor must be in (0, 1]");
  }
  if (step_decay_every < 1) throw ConfigError("step_decay_every must be >= 1");
  if (!(divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be positive");
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  if (pretrained && pretrained_path.empty()) {
    throw ConfigError("pretrained embeddings require a path");
  }
}

void adam_init(AdamState& state,
               const std::vector<std::pair<std::string, ad::Tensor*>>& params) {
  state.slots.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.slots[i].m.assign(params[i].second->size(), 0.0);
    state.slots[i].v.assign(params[i].second->size(), 0.0);
  }
  state.t = 0;
}

double schedule_lr(const TrainConfig& config, std::size_t t) {
  switch (config.schedule) {
    case Schedule::constant: return config.learning_rate;
    case Schedule::inverse_sqrt:
      return config.learning_rate / std::sqrt(static_cast<double>(t));
    case Schedule::step_decay:
      return config.learning_rate *
             std::pow(config.step_decay_factor,
                      static_cast<double>((t - 1) / config.step_decay_every));
  }
  return config.learning_rate;
}

void adam_step(const std::vector<std::pair<std::string, ad::Tensor*>>& params,
               AdamState& state, const TrainConfig& config) {
  if (state.slots.size() != params.size()) {
    throw std::logic_error("optimizer state does not match the parameter list");
  }
  ++state.t;
  const double lr = schedule_lr(config, state.t);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor* tensor = params[i].second;
    tensor->ensure_grad();
    AdamState::Slot& slot = state.slots[i];
    for (std::size_t j = 0; j < tensor->size(); ++j) {
      const double g = tensor->grad[j];
      if (!std::isfinite(g)) {
        throw std::runtime_error("non-finite gradient in " + params[i].first);
      }
      slot.m[j] = state.beta1 * slot.m[j] + (1.0 - state.beta1) * g;
      slot.v[j] = state.beta2 * slot.v[j] + (1.0 - state.beta2) * g * g;
      const double m_hat = slot.m[j] / bc1;
      const double v_hat = slot.v[j] / bc2;
      tensor->values[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

net::ModelParams init_params(const net::NetworkConfig& config, std::size_t vocab_size,
                             std::uint64_t seed, double init_stddev,
                             const ad::Tensor* pretrained_embedding) {
  net::ModelParams params = net::make_params(config, vocab_size);
  Rng rng(mix_seed(seed, kInitStream));
  for (auto& [name, tensor] : params.named()) {
    (void)name;
    for (double& v : tensor->values) v = rng.truncated_normal(init_stddev);
  }
  if (pretrained_embedding != nullptr) {
    if (pretrained_embedding->shape != params.embedding.shape) {
      throw ConfigError("pretrained embedding shape " +
                        ad::shape_str(pretrained_embedding->shape) + " does not match model " +
                        ad::shape_str(params.embedding.shape));
    }
    params.embedding.values = pretrained_embedding->values;
  }
  std::fill_n(params.embedding.values.begin(), config.d1, 0.0);  // PAD row
  return params;
}

nlohmann::json TrainHistory::to_json() const {
  nlohmann::json step_array = nlohmann::json::array();
  for (const StepRecord& s : steps) {
    step_array.push_back({{"p", s.p}, {"q", s.q}, {"l", s.l}, {"grad_norm_sq", s.grad_norm_sq}});
  }
  nlohmann::json val_array = nlohmann::json::array();
  for (const auto& report : validations) val_array.push_back(report.to_json());
  return {{"steps", step_array}, {"validations", val_array}};
}

EncodedDataset encode_dataset(const std::vector<text::CohortRecord>& cohorts,
                              const text::Vocab& vocab, std::size_t l_q, std::size_t l_a) {
  EncodedDataset out;
  for (const auto& rec : cohorts) {
    for (const auto& ad : rec.ads) {
      text::EncodedPair pair = text::encode_pair(rec.query_text, ad, vocab, l_q, l_a);
      if (any_set(pair.query_mask) && any_set(pair.ad_mask)) {
        out.pairs.push_back(std::move(pair));
      } else {
        ++out.skipped;
      }
    }
  }
  return out;
}

namespace {

// Per-search encodings computed once up front; an ad is usable when both
// sides keep at least one real token after truncation.
struct EncodedSearch {
  std::vector<int> query_ids;
  ad::Mask query_mask;
  bool query_usable = false;
  std::vector<text::EncodedPair> ads;
  std::vector<bool> usable;
};

EncodedSearch encode_search(const text::CohortRecord& rec, const text::Vocab& vocab,
                            const net::NetworkConfig& config) {
  EncodedSearch enc;
  enc.ads.reserve(rec.ads.size());
  enc.usable.reserve(rec.ads.size());
  for (const auto& ad : rec.ads) {
    text::EncodedPair pair = text::encode_pair(rec.query_text, ad, vocab, config.l_q, config.l_a);
    if (enc.ads.empty()) {
      enc.query_ids = pair.query_ids;
      enc.query_mask = pair.query_mask;
      enc.query_usable = any_set(pair.query_mask);
    }
    enc.usable.push_back(enc.query_usable && any_set(pair.ad_mask));
    enc.ads.push_back(std::move(pair));
  }
  return enc;
}

metrics::MetricsReport validate_epoch(const std::vector<text::EncodedPair>& pairs,
                                      net::ModelParams& params,
                                      const net::NetworkConfig& config) {
  metrics::MetricsReport report;
  report.n = pairs.size();
  if (pairs.empty()) return report;
  std::vector<net::ForwardOutput> outputs = net::dsm_forward(pairs, params, config);
  std::vector<double> scores(outputs.size()), labels(pairs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    scores[i] = outputs[i].y_hat;
    labels[i] = static_cast<double>(pairs[i].label);
  }
  try {
    report.auc = metrics::auc(scores, labels);
  } catch (const std::invalid_argument&) {
    log::warn("validation split has a single class; AUC left at 0");
  }
  metrics::AccuracyResult acc = metrics::accuracy_maximized(scores, labels);
  report.accuracy = acc.accuracy;
  report.threshold = acc.threshold;
  try {
    report.bias = metrics::prediction_bias(scores, labels);
  } catch (const std::invalid_argument&) {
    report.bias = 0.0;
  }
  return report;
}

}  // namespace

TrainResult train(const net::NetworkConfig& net_config, const TrainConfig& config,
                  const std::vector<text::CohortRecord>& train_cohorts,
                  const std::vector<text::CohortRecord>& valid_cohorts,
                  const text::Vocab& vocab,
                  const ad::Tensor* pretrained_embedding) {
  net_config.validate();
  config.validate();
  if (train_cohorts.empty()) throw DataError("no training searches");

  TrainResult result;
  result.params = init_params(net_config, vocab.size(), config.seed, config.init_stddev,
                              pretrained_embedding);
  net::ModelParams& params = result.params;
  auto named = params.named();
  AdamState adam;
  adam_init(adam, named);
  loss::LossNormalizer normalizer;

  std::vector<EncodedSearch> encoded;
  encoded.reserve(train_cohorts.size());
  for (const auto& rec : train_cohorts) {
    encoded.push_back(encode_search(rec, vocab, net_config));
    for (bool u : encoded.back().usable) {
      if (!u) ++result.pairs_skipped;
    }
  }
  if (result.pairs_skipped > 0) {
    log::warn("skipping " + std::to_string(result.pairs_skipped) +
              " training pairs with an empty side after tokenization");
  }
  EncodedDataset valid = encode_dataset(valid_cohorts, vocab, net_config.l_q, net_config.l_a);

  net::ModelParams best;
  bool have_best = false;
  double best_auc = -1.0;
  std::size_t best_epoch = 0;

  std::vector<std::size_t> order(train_cohorts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs && !result.diverged; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, kShuffleStream + epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = shuffle_rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }

    for (std::size_t start = 0; start < order.size(); start += config.batch_cohorts) {
      const std::size_t stop = std::min(order.size(), start + config.batch_cohorts);
      ++global_step;

      ad::Tape tape;
      std::vector<ad::NodeId> y_hats;
      std::vector<double> labels;
      std::vector<ad::NodeId> h_q(stop - start, kNoNode);
      std::vector<std::vector<ad::NodeId>> h_a(stop - start);
      std::vector<text::CohortRecord> batch;
      batch.reserve(stop - start);
      for (std::size_t bi = start; bi < stop; ++bi) batch.push_back(train_cohorts[order[bi]]);

      for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        const EncodedSearch& enc = encoded[order[start + bi]];
        h_a[bi].assign(enc.ads.size(), kNoNode);
        if (!enc.query_usable) continue;
        net::SideNodes query_side =
            net::encode_side(tape, enc.query_ids, enc.query_mask, params, net_config, true);
        h_q[bi] = query_side.h;
        for (std::size_t k = 0; k < enc.ads.size(); ++k) {
          if (!enc.usable[k]) continue;
          const text::EncodedPair& pair = enc.ads[k];
          net::SideNodes ad_side =
              net::encode_side(tape, pair.ad_ids, pair.ad_mask, params, net_config, false);
          h_a[bi][k] = ad_side.h;
          net::PairNodes nodes = net::forward_with_sides(tape, query_side, ad_side,
                                                         pair.exact_match, params, net_config);
          y_hats.push_back(nodes.y_hat);
          labels.push_back(static_cast<double>(pair.label));
        }
      }
      if (y_hats.empty()) continue;

      ad::NodeId p_node = tape.bce_mean(tape.stack_scalars(y_hats), labels);
      ad::NodeId q_node = kNoNode;
      if (config.ablation != Ablation::no_matching_loss) {
        Rng step_rng(mix_seed(config.seed, kStepStream + global_step));
        loss::CohortPairs cohort = loss::build_cohort_pairs(batch, config.synthesis, step_rng);
        auto score_of = [&](const loss::PairRef& ref) -> std::optional<ad::NodeId> {
          if (h_q[ref.search] == kNoNode) return std::nullopt;
          ad::NodeId ha = h_a[ref.ad_search][ref.ad_index];
          if (ha == kNoNode) return std::nullopt;
          return tape.dot(h_q[ref.search], ha);
        };
        std::vector<ad::NodeId> pos, neg;
        for (const auto& ref : cohort.positives) {
          if (auto s = score_of(ref)) pos.push_back(*s);
        }
        for (const auto& ref : cohort.observed_negatives) {
          if (auto s = score_of(ref)) neg.push_back(*s);
        }
        for (const auto& ref : cohort.synthesized_negatives) {
          if (auto s = score_of(ref)) neg.push_back(*s);
        }
        if (!pos.empty() || !neg.empty()) q_node = loss::matching_loss_node(tape, pos, neg);
      }

      const double p_val = tape.value(p_node).values[0];
      const double q_val = q_node == kNoNode ? 0.0 : tape.value(q_node).values[0];
      ad::NodeId l_node = p_node;
      if (config.ablation == Ablation::loss_normalized) {
        auto [mp, mq] = normalizer.step(p_val, q_val);
        l_node = tape.scale(p_node, mp);
        if (q_node != kNoNode) l_node = tape.add(l_node, tape.scale(q_node, mq));
      } else if (q_node != kNoNode) {
        l_node = tape.add(p_node, q_node);
      }
      const double l_val = tape.value(l_node).values[0];

      StepRecord record{p_val, q_val, l_val, 0.0};
      if (!std::isfinite(l_val) || l_val > config.divergence_threshold) {
        result.history.steps.push_back(record);
        result.diverged = true;
        log::error("training diverged at step " + std::to_string(global_step) + " (loss " +
                   std::to_string(l_val) + ")");
        break;
      }

      tape.backward(l_node);
      double grad_norm_sq = 0.0;
      for (auto& [name, tensor] : named) {
        (void)name;
        for (double g : tensor->grad) grad_norm_sq += g * g;
      }
      record.grad_norm_sq = grad_norm_sq;
      result.history.steps.push_back(record);
      adam_step(named, adam, config);
    }

    if (!valid.pairs.empty() && !result.diverged) {
      metrics::MetricsReport report = validate_epoch(valid.pairs, params, net_config);
      log::info("epoch " + std::to_string(epoch) + ": validation auc " +
                std::to_string(report.auc));
      result.history.validations.push_back(report);
      if (report.auc > best_auc) {
        best_auc = report.auc;
        best_epoch = epoch;
        best = params;
        have_best = true;
      }
    }
  }

  if (have_best) {
    result.params = best;
    result.best_auc = best_auc;
    result.best_epoch = best_epoch;
  }
  return result;
}

ConvergenceDiagnostic convergence_diagnostic(const std::vector<double>& grad_norm_sq) {
  if (grad_norm_sq.size() < 100) {
    throw std::invalid_argument("convergence diagnostic needs at least 100 steps");
  }
  ConvergenceDiagnostic diag;
  diag.running_min.resize(grad_norm_sq.size());
  double current = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grad_norm_sq.size(); ++i) {
    current = std::min(current, grad_norm_sq[i]);
    diag.running_min[i] = current;
  }
  const std::size_t begin = grad_norm_sq.size() / 2;
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double n = static_cast<double>(grad_norm_sq.size() - begin);
  for (std::size_t i = begin; i < grad_norm_sq.size(); ++i) {
    const double x = std::log(static_cast<double>(i + 1));
    const double y = std::log(std::max(diag.running_min[i], 1e-300));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = n * sxx - sx * sx;
  diag.slope = denom == 0.0 ? 0.0 : (n * sxy - sx * sy) / denom;
  return diag;
}

void save_model(const std::string& path, const net::ModelParams& params,
                const net::NetworkConfig& config, const text::Vocab& vocab,
                const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["network"] = net::config_to_json(config);
  meta["vocab"] = {{"tokens", vocab.id_to_token}, {"min_count", vocab.min_count}};
  ckpt::save(path, params.named(), meta, ckpt::kDsmMagic);
}

LoadedModel load_model(const std::string& path) {
  ckpt::Loaded raw = ckpt::load(path, ckpt::kDsmMagic);
  if (!raw.meta.contains("network") || !raw.meta.contains("vocab")) {
    throw ckpt::CheckpointError(ckpt::ErrorKind::manifest_error,
                                "model metadata lacks network or vocab section");
  }
  LoadedModel model;
  try {
    model.config = net::config_from_json(raw.meta.at("network"));
    model.vocab = text::vocab_from_tokens(
        raw.meta.at("vocab").at("tokens").get<std::vector<std::string>>(),
        raw.meta.at("vocab").at("min_count").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw ckpt::CheckpointError(ckpt::ErrorKind::manifest_error,
                                std::string("model metadata: ") + e.what());
  }
  model.params = net::make_params(model.config, model.vocab.size());
  ckpt::load_into(raw, model.params.named());
  model.meta = raw.meta;
  return model;
}

MicroGradCheck micro_gradcheck(std::uint64_t seed) {
  return micro_gradcheck(net::NetworkConfig::micro(), seed);
}

MicroGradCheck micro_gradcheck(const net::NetworkConfig& config, std::uint64_t seed,
                               double init_stddev, double epsilon) {
  const auto t0 = std::chrono::steady_clock::now();
  const text::Vocab vocab = text::vocab_from_tokens(
      {"<pad>", "<oov>", "q0", "q1", "q2", "a0", "a1", "a2", "a3", "a4", "rare", "<sep>"}, 1);

  // Fixed batch covering every code path: exact matches ("q0" inside an ad),
  // an out-of-vocabulary word ("zz"), truncation past l_a, and more clicks
  // than unclicked pairs so one negative gets synthesized.
  std::vector<text::CohortRecord> batch(3);
  batch[0].search_id = "g0";
  batch[0].query_text = "q0 q1";
  batch[0].ads = {{1, "a0 q0", "a1 a2", "a3.com", true}, {2, "a4 a1", "a2 zz", "a0.com", false}};
  batch[1].search_id = "g1";
  batch[1].query_text = "q2 q0 q1";
  batch[1].ads = {{1, "a2 a3", "q2 a0 a1", "a4.com", false},
                  {2, "q1 a4", "rare a2 a0 a1 a2", "q0.com", true}};
  batch[2].search_id = "g2";
  batch[2].query_text = "rare q2";
  batch[2].ads = {{1, "a1 a0", "a3 a4 q2", "rare.com", true}};

  std::vector<EncodedSearch> encoded;
  for (const auto& rec : batch) encoded.push_back(encode_search(rec, vocab, config));

  MicroGradCheck out;
  net::ModelParams params = init_params(config, vocab.size(), seed, init_stddev);
  auto named = params.named();
  auto eval = [&](bool with_grad) -> double {
    ad::Tape tape;
    std::vector<ad::NodeId> y_hats;
    std::vector<double> labels;
    std::vector<ad::NodeId> h_q(batch.size(), kNoNode);
    std::vector<std::vector<ad::NodeId>> h_a(batch.size());
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      const EncodedSearch& enc = encoded[bi];
      h_a[bi].assign(enc.ads.size(), kNoNode);
      net::SideNodes query_side =
          net::encode_side(tape, enc.query_ids, enc.query_mask, params, config, true);
      h_q[bi] = query_side.h;
      for (std::size_t k = 0; k < enc.ads.size(); ++k) {
        const text::EncodedPair& pair = enc.ads[k];
        net::SideNodes ad_side =
            net::encode_side(tape, pair.ad_ids, pair.ad_mask, params, config, false);
        h_a[bi][k] = ad_side.h;
        net::PairNodes nodes =
            net::forward_with_sides(tape, query_side, ad_side, pair.exact_match, params, config);
        y_hats.push_back(nodes.y_hat);
        labels.push_back(static_cast<double>(pair.label));
      }
    }
    ad::NodeId p_node = tape.bce_mean(tape.stack_scalars(y_hats), labels);
    Rng step_rng(mix_seed(seed, 0x6c7d));  // reseeded per call: same pairs every time
    loss::CohortPairs cohort = loss::build_cohort_pairs(batch, loss::SynthesisPolicy{}, step_rng);
    std::vector<ad::NodeId> pos, neg;
    for (const auto& ref : cohort.positives) {
      pos.push_back(tape.dot(h_q[ref.search], h_a[ref.ad_search][ref.ad_index]));
    }
    for (const auto& ref : cohort.observed_negatives) {
      neg.push_back(tape.dot(h_q[ref.search], h_a[ref.ad_search][ref.ad_index]));
    }
    for (const auto& ref : cohort.synthesized_negatives) {
      neg.push_back(tape.dot(h_q[ref.search], h_a[ref.ad_search][ref.ad_index]));
    }
    ad::NodeId l_node = tape.add(p_node, loss::matching_loss_node(tape, pos, neg));
    const double l_val = tape.value(l_node).values[0];
    if (with_grad) tape.backward(l_node);
    return l_val;
  };
  out.report = gradient_check(named, eval, epsilon);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::vector<metrics::QueryRanking> dsm_rank(net::ModelParams& params,
                                            const net::NetworkConfig& config,
                                            const text::Vocab& vocab,
                                            const std::vector<synth::GradedQuery>& graded) {
  std::vector<metrics::QueryRanking> out;
  out.reserve(graded.size());
  for (const auto& gq : graded) {
    metrics::QueryRanking ranking;
    ranking.query = gq.query;
    for (const auto& c : gq.candidates) {
      text::EncodedPair pair = text::encode_pair(gq.query, c.ad, vocab, config.l_q, config.l_a);
      double score = -1e300;
      if (any_set(pair.query_mask) && any_set(pair.ad_mask)) {
        std::vector<net::ForwardOutput> fwd = net::dsm_forward({pair}, params, config);
        score = fwd[0].logit;
      }
      ranking.candidates.push_back({score, c.grade});
    }
    out.push_back(std::move(ranking));
  }
  return out;
}

}  // namespace dsm::train
