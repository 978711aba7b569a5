#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsm/gradcheck.hpp"
#include "dsm/losses.hpp"
#include "dsm/metrics.hpp"
#include "dsm/network.hpp"
#include "dsm/synth.hpp"
#include "dsm/text.hpp"
#include "json.hpp"

namespace dsm::train {

enum class Schedule { constant, inverse_sqrt, step_decay };
enum class Ablation { full, no_matching_loss, loss_normalized };

const char* schedule_name(Schedule s);
const char* ablation_name(Ablation a);
Schedule schedule_from_name(const std::string& name);  // throws ConfigError
Ablation ablation_from_name(const std::string& name);  // throws ConfigError

struct TrainConfig {
  double learning_rate = 0.0001;
  std::size_t batch_cohorts = 24;  // searches per step, roughly 64 pairs at 2.7 ads/search
  std::size_t epochs = 5;
  std::uint64_t seed = 1;
  Schedule schedule = Schedule::inverse_sqrt;
  double step_decay_factor = 0.5;
  std::size_t step_decay_every = 1000;
  Ablation ablation = Ablation::full;
  double init_stddev = 0.1;
  int min_count = 1;  // vocabulary cutoff
  bool pretrained = false;
  std::string pretrained_path;
  loss::SynthesisPolicy synthesis;
  double divergence_threshold = 1e6;

  void validate() const;  // throws ConfigError
};

struct AdamState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;  // parallel to the named-parameter list
  std::size_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_init(AdamState& state,
               const std::vector<std::pair<std::string, ad::Tensor*>>& params);
double schedule_lr(const TrainConfig& config, std::size_t t);  // t counts from 1

// One bias-corrected Adam update from each tensor's .grad. Throws on a
// non-finite gradient, naming the tensor.
void adam_step(const std::vector<std::pair<std::string, ad::Tensor*>>& params,
               AdamState& state, const TrainConfig& config);

// Truncated-normal initialization (+/- 2 stddev) for every parameter, PAD
// embedding row zeroed. When a pretrained table is supplied it replaces the
// embedding init.
net::ModelParams init_params(const net::NetworkConfig& config, std::size_t vocab_size,
                             std::uint64_t seed, double init_stddev,
                             const ad::Tensor* pretrained_embedding = nullptr);

// Flattens cohorts to encoded pairs, dropping any pair whose query or ad side
// is empty after tokenization and truncation.
struct EncodedDataset {
  std::vector<text::EncodedPair> pairs;
  std::size_t skipped = 0;
};

EncodedDataset encode_dataset(const std::vector<text::CohortRecord>& cohorts,
                              const text::Vocab& vocab, std::size_t l_q, std::size_t l_a);

struct StepRecord {
  double p = 0.0;
  double q = 0.0;
  double l = 0.0;
  double grad_norm_sq = 0.0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<metrics::MetricsReport> validations;  // one per epoch
  nlohmann::json to_json() const;
};

struct TrainResult {
  net::ModelParams params;  // best validation AUC
  TrainHistory history;
  double best_auc = 0.0;
  std::size_t best_epoch = 0;  // 1-based
  bool diverged = false;
  std::size_t pairs_skipped = 0;  // pairs with an empty side after encoding
};

// Deterministic given (config, seed, data). Per step: sample a cohort batch,
// forward every served pair, P over served pairs, Q over cohort pairs unless
// ablated, backward, Adam. Per epoch: validation metrics; the parameters with
// the best validation AUC are returned. Training aborts (diverged=true,
// history preserved) when the combined loss exceeds the divergence threshold.
TrainResult train(const net::NetworkConfig& net_config, const TrainConfig& config,
                  const std::vector<text::CohortRecord>& train_cohorts,
                  const std::vector<text::CohortRecord>& valid_cohorts,
                  const text::Vocab& vocab,
                  const ad::Tensor* pretrained_embedding = nullptr);

struct ConvergenceDiagnostic {
  std::vector<double> running_min;  // of the squared gradient norm
  double slope = 0.0;               // log-log least squares over the second half
};

// Requires at least 100 recorded values.
ConvergenceDiagnostic convergence_diagnostic(const std::vector<double>& grad_norm_sq);

// Checkpoint helpers bundling network config + vocab into the metadata block.
void save_model(const std::string& path, const net::ModelParams& params,
                const net::NetworkConfig& config, const text::Vocab& vocab,
                const nlohmann::json& extra_meta);

struct LoadedModel {
  net::NetworkConfig config;
  net::ModelParams params;
  text::Vocab vocab;
  nlohmann::json meta;
};

LoadedModel load_model(const std::string& path);

// Full-model finite-difference audit: a 12-token vocabulary, the micro
// network preset and a fixed three-search batch whose combined loss covers
// every operation, checked coordinate by coordinate.
struct MicroGradCheck {
  GradCheckReport report;
  double seconds = 0.0;
};

MicroGradCheck micro_gradcheck(std::uint64_t seed);
// Same fixture under a caller-chosen network size. epsilon trades finite-
// difference truncation error against rounding noise: the attention score
// bias cancels through the softmax, so its numeric derivative is pure
// rounding noise of order ulp/epsilon and needs epsilon large enough to stay
// under the 1e-8 relative-error floor, while init_stddev keeps activations
// away from relu and max-pool kinks that a large epsilon could cross.
MicroGradCheck micro_gradcheck(const net::NetworkConfig& config, std::uint64_t seed,
                               double init_stddev = 0.5, double epsilon = 5e-4);

// Scores every graded candidate with the final-layer logit (the matching
// score); pairs with an empty side rank last.
std::vector<metrics::QueryRanking> dsm_rank(net::ModelParams& params,
                                            const net::NetworkConfig& config,
                                            const text::Vocab& vocab,
                                            const std::vector<synth::GradedQuery>& graded);

}  // namespace dsm::train
