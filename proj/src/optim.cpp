// SPDX-License-Identifier: Apache-2.0
#include "pamoe/optim.hpp"

#include <cmath>

namespace pamoe::ad {

void Adam::step(std::span<Tensor* const> params) {
  for (Tensor* t : params) {
    if (!t->requires_grad || !t->touched) continue;
    Moments& s = state_[t];
    if (s.steps == 0) {
      s.m = Matrix::Zero(t->rows(), t->cols());
      s.v = Matrix::Zero(t->rows(), t->cols());
    }
    ++s.steps;
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * t->grad;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * t->grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.steps));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.steps));
    t->value.array() -= config_.lr * (s.m.array() / bc1) /
                        ((s.v.array() / bc2).sqrt() + config_.eps);
  }
}

double grad_norm(std::span<Tensor* const> params) {
  double sq = 0.0;
  for (const Tensor* t : params) {
    if (t->requires_grad && t->touched) sq += t->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (Tensor* t : params) {
      if (t->requires_grad && t->touched) t->grad *= factor;
    }
  }
  return norm;
}

void zero_grad(std::span<Tensor* const> params) {
  for (Tensor* t : params) t->zero_grad();
}

}  // namespace pamoe::ad
