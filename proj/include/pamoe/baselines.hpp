// SPDX-License-Identifier: Apache-2.0
//
// Comparison arms: token-level and trajectory-level routing, plus gradient
// surgery over per-phase gradients of a single adapter.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/router.hpp"

namespace pamoe {

/// Routes each of m micro-tokens of an action independently. Token i's hidden
/// state is the pooled backbone feature plus a fixed position embedding.
class TokenRouterParams {
 public:
  TokenRouterParams(int d_model, int num_experts, int micro_tokens, int hidden, std::uint64_t seed);

  int num_experts() const { return num_experts_; }
  int micro_tokens() const { return micro_tokens_; }
  std::vector<ad::Tensor*> parameters();

  ad::Tensor position;  // m x d, frozen
  ad::Tensor input_shift, input_scale;  // 1 x d, frozen feature standardization
  ad::Tensor w1, b1, w2, b2;

 private:
  int num_experts_;
  int micro_tokens_;
};

/// Router logits for every micro-token: row i*m + j is token j of sample i.
ad::Var token_router_logits(ad::Graph& graph, TokenRouterParams& params, const ad::Matrix& pooled);

/// Independent argmax per micro-token; `p` is m x K.
std::vector<int> route_token_level(const ad::Matrix& p);
/// Indices of the two largest entries of each row (ties to the lower index).
std::vector<std::array<int, 2>> route_token_level_top2(const ad::Matrix& p);

/// Expert changes between consecutive micro-tokens of one action.
int intra_action_switches(std::span<const int> token_experts);
/// Number of actions with at least one intra-action expert change.
int token_to_step_switches(const std::vector<std::vector<int>>& tokens_per_step);

/// Single routing decision from the initial observation (empty history).
RouterOutput route_trajectory_level(RouterParams& params, const ad::Vector& obs_encoding,
                                    const std::vector<ad::Vector>& goal_encodings, double tau);

/// PCGrad: each g_i is projected off every g_j (ascending j) it conflicts
/// with; the projected gradients are summed. Zero-norm g_j are skipped.
ad::Vector pcgrad_combine(const std::vector<ad::Vector>& grads);

/// One GradNorm weight update. G_i = w_i |g_i| is pulled toward
/// mean(G) * r_i^asymmetry, r_i the relative inverse training rate
/// (L_i / L0_i) / mean(L / L0). Each weight moves by lr against the sign of
/// d|G_i - target|/dw_i, is floored at 1e-3, and the weights are renormalized
/// to sum to the number of phases.
ad::Vector gradnorm_weights(const ad::Vector& weights, const ad::Vector& losses,
                            const ad::Vector& initial_losses, const ad::Vector& norms,
                            double asymmetry, double lr);

/// CAGrad: w* = argmin over the simplex of g_w.g0 + c|g0||g_w|, with g0 the
/// mean gradient; returns (g0 + c|g0|/|g_w*| g_w*) / (1 + c).
ad::Vector cagrad_combine(const std::vector<ad::Vector>& grads, double c);
/// Simplex weights solving the CAGrad subproblem.
ad::Vector cagrad_weights(const std::vector<ad::Vector>& grads, double c);

}  // namespace pamoe
