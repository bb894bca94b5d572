// SPDX-License-Identifier: Apache-2.0
//
// Frozen transformer backbone with K low-rank expert adapters on the query
// and value projections of every block.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/environment.hpp"
#include "pamoe/rng.hpp"

namespace pamoe {

struct PolicyConfig {
  int d_model = 64;
  int ffn_width = 128;
  int blocks = 2;
  int rank = 8;
  int num_experts = 4;
  double lora_init_std = 0.02;
  int value_hidden = 64;
};

struct TransformerBlock {
  ad::Tensor q_proj, k_proj, v_proj, o_proj;
  ad::Tensor ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
};

struct Backbone {
  ad::Tensor embedding;  // vocab x d
  ad::Tensor slot;       // tokens-per-sample x d
  std::vector<TransformerBlock> blocks;
  ad::Tensor head;       // d x |A|
  ad::Tensor head_bias;  // 1 x |A|

  std::vector<ad::Tensor*> parameters();
  void set_trainable(bool trainable);
};

/// delta = b * a is added to the adapted projection (no scaling factor).
struct LoraPair {
  ad::Tensor b;  // d x r, zero at init
  ad::Tensor a;  // r x d, small gaussian at init
};

struct LoraExpert {
  std::vector<LoraPair> q;  // one per block
  std::vector<LoraPair> v;

  std::vector<ad::Tensor*> parameters();
};

/// Critic on detached backbone features, shared across experts.
struct ValueHead {
  ad::Tensor w1, b1, w2, b2;

  std::vector<ad::Tensor*> parameters();
};

/// Token codes for a batch; sample i owns tokens [i*T, (i+1)*T).
struct TokenBatch {
  std::vector<TokenCodes> tokens;
  int tokens_per_sample = 0;

  int size() const {
    return tokens_per_sample == 0 ? 0 : static_cast<int>(tokens.size()) / tokens_per_sample;
  }
  void append(const Observation& obs, const Goal& goal);
  void append_sample(const TokenBatch& other, int sample);
  TokenBatch select(const std::vector<ad::Index>& samples) const;
};

struct BackboneOutput {
  ad::Var hidden;  // (n*T) x d final hidden states
  ad::Var pooled;  // n x d
  ad::Var logits;  // n x |A|
};

/// Constant per-sample features from the unadapted backbone.
struct BaseFeatures {
  ad::Matrix pooled;                 // n x d, critic input
  ad::Matrix obs_encoding;           // n x d, mean final hidden over observation tokens
  std::vector<ad::Matrix> goal_encodings;  // one n x d matrix per goal token
  ad::Matrix obs_embedding;          // n x d, mean input embedding over observation tokens
};

struct ActionDistribution {
  ad::Vector probs;
};

struct SampledAction {
  int action = 0;
  double log_prob = 0.0;
};

SampledAction sample_action(const ActionDistribution& dist, Rng& rng);
/// -sum p log2 p.
double policy_entropy(const ActionDistribution& dist);
double policy_entropy(const ad::Vector& probs);

class MoEPolicy {
 public:
  MoEPolicy(const EnvSpec& spec, PolicyConfig config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  const EnvSpec& spec() const { return spec_; }
  int num_experts() const { return static_cast<int>(experts_.size()); }
  int num_actions() const { return spec_.num_actions; }

  Backbone& backbone() { return backbone_; }
  LoraExpert& expert(int k);
  ValueHead& value_head() { return value_head_; }

  /// adapter == nullptr runs the bare backbone.
  BackboneOutput forward(ad::Graph& graph, const TokenBatch& batch, LoraExpert* adapter);
  /// Logits of expert k; only that expert's adapter enters the graph.
  ad::Var expert_logits(ad::Graph& graph, const TokenBatch& batch, int k);
  ActionDistribution expert_forward(int k, const Observation& obs, const Goal& goal);
  /// Per-row action probabilities of expert k (no gradient).
  ad::Matrix expert_probs(const TokenBatch& batch, int k);
  BaseFeatures base_features(const TokenBatch& batch);

  ad::Var value(ad::Graph& graph, const ad::Matrix& features);

  std::vector<ad::Tensor*> adapter_parameters();
  std::vector<ad::Tensor*> named_tensors();

 private:
  EnvSpec spec_;
  PolicyConfig config_;
  Backbone backbone_;
  std::vector<LoraExpert> experts_;
  ValueHead value_head_;
};

struct WarmupConfig {
  int episodes = 240;
  int epochs = 3;
  int batch_size = 64;
  double lr = 2e-3;
  ScriptedPolicyConfig teacher;
};

struct WarmupReport {
  int samples = 0;
  double final_loss = 0.0;
};

/// Behavior cloning of the scripted teacher into the backbone (soft
/// cross-entropy), then freezes it.
WarmupReport warmup_backbone(MoEPolicy& policy, const GridWorldConfig& env_config,
                             const WarmupConfig& config, std::uint64_t seed);

}  // namespace pamoe
