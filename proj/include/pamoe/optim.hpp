// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <unordered_map>

#include "pamoe/autodiff.hpp"

namespace pamoe::ad {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam that only steps tensors touched by the last backward pass. Moment
/// state and the bias-correction counter are kept per tensor, so a tensor
/// that receives no gradient is left bitwise unchanged.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::span<Tensor* const> params);
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    long steps = 0;
  };
  AdamConfig config_;
  std::unordered_map<const Tensor*, Moments> state_;
};

/// Global L2 norm over the gradients of touched tensors.
double grad_norm(std::span<Tensor* const> params);

/// Rescales touched gradients so their global norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

void zero_grad(std::span<Tensor* const> params);

}  // namespace pamoe::ad
