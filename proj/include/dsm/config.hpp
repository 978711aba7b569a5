#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dsm/baselines.hpp"
#include "dsm/network.hpp"
#include "dsm/synth.hpp"
#include "dsm/train.hpp"
#include "json.hpp"

namespace dsm::cfg {

struct MetricsOptions {
  // NaN means: maximize accuracy on the evaluated data itself.
  double threshold = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> k_values{1, 3, 5, 10};
};

// One JSON document with optional sections "network", "train", "generator",
// "lm" and "metrics"; unknown keys anywhere are rejected.
struct RunConfig {
  net::NetworkConfig network;
  train::TrainConfig train;
  synth::GeneratorConfig generator;
  base::LmConfig lm;
  MetricsOptions metrics;
};

RunConfig run_config_from_json(const nlohmann::json& j);  // throws ConfigError
RunConfig load_run_config(const std::string& path);       // DataError if unreadable
nlohmann::json run_config_to_json(const RunConfig& config);

}  // namespace dsm::cfg
