// SPDX-License-Identifier: Apache-2.0
//
// Phase-aware router: goal cross-attention over the pooled observation, an
// LSTM over the recent (action, observation) history, and an MLP producing a
// temperature-scaled distribution over experts with hard argmax selection.
#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/rng.hpp"

namespace pamoe {

struct AnnealSchedule {
  double tau0 = 2.0;
  double tauf = 0.5;
  double anneal_steps = 3000.0;
};

/// max(tauf, tau0 - (tau0 - tauf) * t / anneal_steps).
double anneal_temperature(const AnnealSchedule& schedule, double t);

struct RouterConfig {
  int num_experts = 4;
  int history = 5;
  int hidden = 64;
  int lstm_layers = 3;
  int mlp_hidden = 64;
  int action_embedding = 16;
  double lambda_s = 0.05;
  AnnealSchedule schedule;
  bool use_history = true;
  bool use_goal_attention = true;
};

class RouterParams {
 public:
  RouterParams(RouterConfig config, int d_model, int num_actions, std::uint64_t seed);

  const RouterConfig& config() const { return config_; }
  int d_model() const { return d_model_; }
  int num_actions() const { return num_actions_; }
  std::vector<ad::Tensor*> parameters();
  /// Sets the frozen per-feature standardization of the router inputs from
  /// sample rows of observation encodings, goal encodings and history
  /// observation embeddings.
  void fit_input_statistics(const ad::Matrix& obs, const ad::Matrix& goals, const ad::Matrix& history);

  // Frozen 1 x d shift/scale pairs applied to constant inputs.
  ad::Tensor obs_shift, obs_scale, goal_shift, goal_scale, hist_shift, hist_scale;
  ad::Tensor attn_q, attn_k, attn_v;  // d_model x hidden
  ad::Tensor action_table;            // |A| x action_embedding
  ad::Tensor null_entry;              // 1 x (action_embedding + d_model)
  std::vector<ad::Tensor> lstm_weight, lstm_bias;
  ad::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

 private:
  RouterConfig config_;
  int d_model_;
  int num_actions_;
};

/// Router inputs for a batch of n decision points.
struct RouterBatch {
  ad::Matrix obs_encoding;                 // n x d
  std::vector<ad::Matrix> goal_encodings;  // one n x d matrix per goal token
  // history_actions(i, l) for slot l (oldest first); -1 marks a null pad.
  Eigen::MatrixXi history_actions;
  std::vector<ad::Matrix> history_obs;  // one n x d matrix per slot
};

/// Router logits (n x K) for a batch.
ad::Var router_logits(ad::Graph& graph, RouterParams& params, const RouterBatch& batch);

/// Lowest index among maximal entries.
ad::Index argmax_lowest(const Eigen::Ref<const ad::RowVector>& p);

/// Per-episode history of (a_{t-1}, o_{t-1}) pairs, at most L entries.
class RouterState {
 public:
  RouterState() = default;
  explicit RouterState(int window) { reset(window); }

  void reset(int window);
  bool initialized() const { return window_ > 0; }
  int window() const { return window_; }
  void push(int action, const ad::Vector& obs_embedding);
  std::size_t size() const { return entries_.size(); }

  /// Writes this state into row i of a batch (left-padded with nulls).
  void fill(RouterBatch& batch, ad::Index row) const;

 private:
  struct Entry {
    int action;
    ad::Vector obs_embedding;
  };
  int window_ = 0;
  std::deque<Entry> entries_;
};

struct RouterOutput {
  ad::Vector p;
  int z = 0;
  double tau_used = 1.0;
};

/// Allocates an n-row batch for the given params.
RouterBatch make_router_batch(const RouterParams& params, ad::Index rows, int goal_tokens);

/// Single-step routing; throws UsageError when the state was never reset.
RouterOutput route(RouterParams& params, const RouterState& state,
                   const ad::Vector& obs_encoding, const std::vector<ad::Vector>& goal_encodings,
                   double tau);

/// Batched routing without gradients.
std::vector<RouterOutput> route_batch(RouterParams& params, const RouterBatch& batch, double tau);

/// Hard forward (lambda_s / (T-1)) * #switches of z; the backward pass uses
/// the soft disagreement sum_t (1 - p_t . stopgrad(p_{t+1})), so
/// d/dp_t = -(lambda_s / (T-1)) p_{t+1}. `p` is T x K.
ad::Var switching_penalty(const ad::Var& p, std::span<const ad::Index> z, double lambda_s);
double switching_penalty_value(std::span<const int> z, double lambda_s);

struct Selection {
  ad::Index z = 0;
  ad::Vector grad_path;  // d(selection weight)/dp: one-hot at z
};
Selection straight_through_select(const ad::Vector& p);

int count_switches(std::span<const int> z);

}  // namespace pamoe
