// SPDX-License-Identifier: Apache-2.0
//
// Advantage estimators. Group estimators take one return per trajectory of a
// group sharing an initial state and return one advantage per trajectory.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

#include "pamoe/errors.hpp"

namespace pamoe {

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kStdEpsilon = 1e-8;

/// A_t = sum_l (gamma lambda)^l delta_{t+l}; `values` carries the bootstrap
/// value as its last entry.
template <class Scalar>
VectorX<Scalar> gae_advantages(const VectorX<Scalar>& rewards, const VectorX<Scalar>& values,
                               Scalar gamma, Scalar lambda) {
  const Eigen::Index T = rewards.size();
  if (values.size() != T + 1) throw ShapeError("gae_advantages: values must have length T+1");
  VectorX<Scalar> adv(T);
  Scalar running = Scalar(0);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const Scalar delta = rewards(t) + gamma * values(t + 1) - values(t);
    running = delta + gamma * lambda * running;
    adv(t) = running;
  }
  return adv;
}

/// R_i - mean_{j != i} R_j.
template <class Scalar>
VectorX<Scalar> rloo_advantages(const VectorX<Scalar>& returns) {
  const Eigen::Index n = returns.size();
  if (n < 2) throw DomainError("rloo_advantages: need at least two trajectories");
  const Scalar total = returns.sum();
  VectorX<Scalar> adv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    adv(i) = returns(i) - (total - returns(i)) / Scalar(n - 1);
  }
  return adv;
}

/// (R_i - mean R) / (std_pop R + 1e-8), or mean-subtraction only.
template <class Scalar>
VectorX<Scalar> grpo_advantages(const VectorX<Scalar>& returns, bool standardize = true) {
  const Eigen::Index n = returns.size();
  if (n < 2) throw DomainError("grpo_advantages: need at least two trajectories");
  const Scalar mean = returns.mean();
  VectorX<Scalar> centered = returns.array() - mean;
  if (!standardize) return centered;
  using std::sqrt;
  const Scalar std_pop = sqrt(centered.squaredNorm() / Scalar(n));
  return centered / (std_pop + Scalar(kStdEpsilon));
}

/// One trajectory of a group: per-step rewards and anchor-state fingerprints.
struct GroupTrajectory {
  std::vector<double> rewards;
  std::vector<std::uint64_t> anchors;
};

/// Two-level group advantage. Episode level: grpo_advantages of the returns.
/// Step level: within each cluster of steps (across the group) sharing an
/// anchor fingerprint, the group-relative return-to-go, computed only for
/// clusters with at least two members. A step gets the mean of both levels
/// when a step-level value exists, otherwise the episode level.
std::vector<std::vector<double>> gigpo_group_advantages(const std::vector<GroupTrajectory>& group,
                                                        bool standardize = true);

}  // namespace pamoe
