// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: JSON documents with a fixed key set, dotted-path
// overrides and a derived JSON Schema.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pamoe/environment.hpp"
#include "pamoe/policy.hpp"
#include "pamoe/router.hpp"

namespace pamoe {

enum class Algorithm { PPO, RLOO, GRPO, GiGPO };
enum class RoutingMode { Phase, Token, TokenTop2, Trajectory, None };
enum class SurgeryMode { Off, PCGrad, GradNorm, CAGrad };

std::string_view to_string(Algorithm a);
std::string_view to_string(RoutingMode r);
std::string_view to_string(SurgeryMode s);
Algorithm parse_algorithm(std::string_view s);
RoutingMode parse_routing(std::string_view s);
SurgeryMode parse_surgery(std::string_view s);

struct AlgorithmConfig {
  Algorithm tag = Algorithm::GiGPO;
  int n_group = 8;
  double epsilon = 0.2;
  double alpha = 0.01;
  double beta = 0.001;
  double gamma_coeff = 1.0;
  double tau_div = 0.1;
  int div_interval = 100;
  int div_sample = 64;
  int buffer_cap = 1000;
  bool standardize = true;
  double gae_gamma = 0.99;
  double gae_lambda = 0.95;
  double value_coeff = 0.5;
};

struct BaselineConfig {
  int micro_tokens = 8;
  int token_router_hidden = 32;
  double cagrad_c = 0.5;
  double gradnorm_asymmetry = 1.5;
  double gradnorm_lr = 0.025;
  bool trajectory_reroute_on_fault = false;  // trajectory arm routes again when a fault starts
};

struct TrainingConfig {
  long total_steps = 20000;
  int groups_per_batch = 2;
  int minibatches = 8;
  double lr = 1e-3;
  double max_grad_norm = 1.0;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int eval_episodes = 30;  // per task category
  int conflict_interval = 10;
  int conflict_probe_steps = 512;
  int kl_probe_states = 64;
  WarmupConfig warmup;
};

struct ExperimentConfig {
  GridWorldConfig environment;
  int experts = 4;  // K; 0 selects the single unrouted adapter
  PolicyConfig policy;
  RouterConfig router;
  AlgorithmConfig algorithm;
  RoutingMode routing = RoutingMode::Phase;
  SurgeryMode surgery = SurgeryMode::Off;
  BaselineConfig baselines;
  TrainingConfig training;
  std::string output_dir = "runs/default";

  /// Adapters actually instantiated: max(K, 1).
  int adapters() const { return experts > 0 ? experts : 1; }
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict parse: unknown keys, wrong types and invalid values throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);
/// Applies "a.b.c=value" overrides. Values parse as JSON when possible,
/// otherwise as strings.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);
/// Cross-field checks; throws ConfigError.
void validate(const ExperimentConfig& config);
/// JSON Schema (draft-07) of the configuration document.
nlohmann::json config_schema();

}  // namespace pamoe
