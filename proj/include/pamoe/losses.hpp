// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/environment.hpp"
#include "pamoe/rng.hpp"

namespace pamoe {

/// Per-step negated clipped objective, -min(rho A, clip(rho, 1-eps, 1+eps) A)
/// with rho = exp(logp_new - logp_old). Inputs and output are n x 1.
ad::Var clipped_surrogate_terms(const ad::Var& logp_new, const ad::Matrix& logp_old,
                                const ad::Matrix& advantages, double epsilon);
/// Mean of clipped_surrogate_terms, returned as a loss.
ad::Var clipped_surrogate(const ad::Var& logp_new, const ad::Matrix& logp_old,
                          const ad::Matrix& advantages, double epsilon);

/// sum_k (f_k - 1/K)^2 for a 1 x K frequency row. DomainError unless f sums
/// to 1 within 1e-6.
ad::Var balance_loss(const ad::Var& frequencies);
double balance_loss(const ad::Vector& frequencies);

/// Mean over states of sum over ordered pairs i != j of
/// max(0, tau_div - KL(pi_i || pi_j)). expert_probs[k] is S x |A|.
ad::Var diversity_loss(const std::vector<ad::Var>& expert_probs, double tau_div);

/// Recent (state, cached logits) pairs per expert, FIFO at `capacity`.
class ExpertBuffer {
 public:
  struct Entry {
    std::vector<TokenCodes> tokens;
    ad::Vector logits;
  };

  ExpertBuffer(int num_experts, int capacity);

  void push(int expert, std::vector<TokenCodes> tokens, ad::Vector logits);
  const std::deque<Entry>& entries(int expert) const;
  std::size_t total() const;
  int capacity() const { return capacity_; }
  /// Up to `count` distinct entries drawn uniformly from all experts' buffers.
  std::vector<const Entry*> sample(std::size_t count, Rng& rng) const;

 private:
  int capacity_;
  std::vector<std::deque<Entry>> buffers_;
};

struct LossBreakdown {
  double l_rl = 0.0;
  double l_div = 0.0;
  double l_bal = 0.0;
  double l_switch = 0.0;
  double total = 0.0;
  double alpha = 0.01;
  double beta = 0.001;
  double gamma = 1.0;

  double recompose() const { return l_rl + alpha * l_div + beta * l_bal + gamma * l_switch; }
};

}  // namespace pamoe
