#include "dsm/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "dsm/errors.hpp"

namespace dsm::cfg {
namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key in " + where + ": " + it.key());
  }
}

template <typename T>
void field(const nlohmann::json& j, const char* key, T& into, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void parse_train(const nlohmann::json& j, train::TrainConfig& c) {
  check_keys(j,
             {"learning_rate", "batch_cohorts", "epochs", "seed", "schedule",
              "step_decay_factor", "step_decay_every", "ablation", "init_stddev", "min_count",
              "pretrained", "pretrained_path", "synthesis", "divergence_threshold"},
             "train");
  field(j, "learning_rate", c.learning_rate, "train");
  field(j, "batch_cohorts", c.batch_cohorts, "train");
  field(j, "epochs", c.epochs, "train");
  field(j, "seed", c.seed, "train");
  field(j, "step_decay_factor", c.step_decay_factor, "train");
  field(j, "step_decay_every", c.step_decay_every, "train");
  field(j, "init_stddev", c.init_stddev, "train");
  field(j, "min_count", c.min_count, "train");
  field(j, "pretrained", c.pretrained, "train");
  field(j, "pretrained_path", c.pretrained_path, "train");
  field(j, "synthesis", c.synthesis.enabled, "train");
  field(j, "divergence_threshold", c.divergence_threshold, "train");
  if (j.contains("schedule")) {
    c.schedule = train::schedule_from_name(j.at("schedule").get<std::string>());
  }
  if (j.contains("ablation")) {
    c.ablation = train::ablation_from_name(j.at("ablation").get<std::string>());
  }
  c.validate();
}

void parse_generator(const nlohmann::json& j, synth::GeneratorConfig& c) {
  check_keys(j,
             {"n_topics", "vocab_size", "n_queries", "ads_per_query", "n_searches", "seed",
              "position_ctrs", "relevance_weight", "head_frac", "torso_frac", "head_weight",
              "torso_weight", "tail_weight", "train_frac", "valid_frac"},
             "generator");
  field(j, "n_topics", c.n_topics, "generator");
  field(j, "vocab_size", c.vocab_size, "generator");
  field(j, "n_queries", c.n_queries, "generator");
  field(j, "ads_per_query", c.ads_per_query, "generator");
  field(j, "n_searches", c.n_searches, "generator");
  field(j, "seed", c.seed, "generator");
  field(j, "relevance_weight", c.relevance_weight, "generator");
  field(j, "head_frac", c.head_frac, "generator");
  field(j, "torso_frac", c.torso_frac, "generator");
  field(j, "head_weight", c.head_weight, "generator");
  field(j, "torso_weight", c.torso_weight, "generator");
  field(j, "tail_weight", c.tail_weight, "generator");
  field(j, "train_frac", c.train_frac, "generator");
  field(j, "valid_frac", c.valid_frac, "generator");
  if (j.contains("position_ctrs")) {
    const auto& arr = j.at("position_ctrs");
    if (!arr.is_array() || arr.size() != 5) {
      throw ConfigError("generator.position_ctrs must list exactly five values");
    }
    for (std::size_t i = 0; i < 5; ++i) c.position_ctrs[i] = arr[i].get<double>();
  }
  c.validate();
}

void parse_lm(const nlohmann::json& j, base::LmConfig& c) {
  check_keys(j,
             {"dim", "l_q", "l_a", "learning_rate", "batch_pairs", "epochs", "seed", "schedule",
              "init_stddev"},
             "lm");
  field(j, "dim", c.dim, "lm");
  field(j, "l_q", c.l_q, "lm");
  field(j, "l_a", c.l_a, "lm");
  field(j, "learning_rate", c.learning_rate, "lm");
  field(j, "batch_pairs", c.batch_pairs, "lm");
  field(j, "epochs", c.epochs, "lm");
  field(j, "seed", c.seed, "lm");
  field(j, "init_stddev", c.init_stddev, "lm");
  if (j.contains("schedule")) {
    c.schedule = train::schedule_from_name(j.at("schedule").get<std::string>());
  }
  c.validate();
}

void parse_metrics(const nlohmann::json& j, MetricsOptions& c) {
  check_keys(j, {"threshold", "k_values"}, "metrics");
  // null round-trips the NaN default: maximize accuracy on the data itself
  if (j.contains("threshold") && j.at("threshold").is_null()) {
    c.threshold = std::numeric_limits<double>::quiet_NaN();
  } else {
    field(j, "threshold", c.threshold, "metrics");
  }
  if (j.contains("k_values")) {
    c.k_values = j.at("k_values").get<std::vector<std::size_t>>();
    if (c.k_values.empty()) throw ConfigError("metrics.k_values must not be empty");
    for (std::size_t k : c.k_values) {
      if (k < 1) throw ConfigError("metrics.k_values entries must be >= 1");
    }
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"network", "train", "generator", "lm", "metrics"}, "config");
  RunConfig config;
  try {
    if (j.contains("network")) config.network = net::config_from_json(j.at("network"));
    if (j.contains("train")) parse_train(j.at("train"), config.train);
    if (j.contains("generator")) parse_generator(j.at("generator"), config.generator);
    if (j.contains("lm")) parse_lm(j.at("lm"), config.lm);
    if (j.contains("metrics")) parse_metrics(j.at("metrics"), config.metrics);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& config) {
  nlohmann::json train = {
      {"learning_rate", config.train.learning_rate},
      {"batch_cohorts", config.train.batch_cohorts},
      {"epochs", config.train.epochs},
      {"seed", config.train.seed},
      {"schedule", train::schedule_name(config.train.schedule)},
      {"step_decay_factor", config.train.step_decay_factor},
      {"step_decay_every", config.train.step_decay_every},
      {"ablation", train::ablation_name(config.train.ablation)},
      {"init_stddev", config.train.init_stddev},
      {"min_count", config.train.min_count},
      {"pretrained", config.train.pretrained},
      {"pretrained_path", config.train.pretrained_path},
      {"synthesis", config.train.synthesis.enabled},
      {"divergence_threshold", config.train.divergence_threshold},
  };
  nlohmann::json generator = {
      {"n_topics", config.generator.n_topics},
      {"vocab_size", config.generator.vocab_size},
      {"n_queries", config.generator.n_queries},
      {"ads_per_query", config.generator.ads_per_query},
      {"n_searches", config.generator.n_searches},
      {"seed", config.generator.seed},
      {"position_ctrs", config.generator.position_ctrs},
      {"relevance_weight", config.generator.relevance_weight},
      {"head_frac", config.generator.head_frac},
      {"torso_frac", config.generator.torso_frac},
      {"head_weight", config.generator.head_weight},
      {"torso_weight", config.generator.torso_weight},
      {"tail_weight", config.generator.tail_weight},
      {"train_frac", config.generator.train_frac},
      {"valid_frac", config.generator.valid_frac},
  };
  nlohmann::json lm = {
      {"dim", config.lm.dim},
      {"l_q", config.lm.l_q},
      {"l_a", config.lm.l_a},
      {"learning_rate", config.lm.learning_rate},
      {"batch_pairs", config.lm.batch_pairs},
      {"epochs", config.lm.epochs},
      {"seed", config.lm.seed},
      {"schedule", train::schedule_name(config.lm.schedule)},
      {"init_stddev", config.lm.init_stddev},
  };
  nlohmann::json metrics = {{"k_values", config.metrics.k_values}};
  metrics["threshold"] = std::isnan(config.metrics.threshold)
                             ? nlohmann::json()
                             : nlohmann::json(config.metrics.threshold);
  return {{"network", net::config_to_json(config.network)},
          {"train", train},
          {"generator", generator},
          {"lm", lm},
          {"metrics", metrics}};
}

}  // namespace dsm::cfg
