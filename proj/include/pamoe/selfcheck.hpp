// SPDX-License-Identifier: Apache-2.0
//
// Gradient and isolation checks runnable from the command line.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/rng.hpp"
#include "pamoe/trainer.hpp"

namespace pamoe {

using DiffFn = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

/// Norm-wise relative error between the backward-pass gradient of
/// sum(f(x) .* R) (R a fixed random projection) and its central finite
/// difference with the given step, over all inputs.
double finite_difference_error(const DiffFn& f, const std::vector<ad::Matrix>& inputs, Rng& rng,
                               double step = 1e-5);

/// A differentiable op with a random-input generator.
struct OpCase {
  std::string name;
  std::function<std::vector<ad::Matrix>(Rng&)> inputs;
  DiffFn fn;
};

/// Every differentiable op, with inputs kept away from kinks and floors.
std::vector<OpCase> op_catalog();

struct IsolationReport {
  bool gradients_isolated = true;  // cross-expert gradients exactly zero
  bool parameters_isolated = true; // unselected experts bitwise unchanged
  int experts_selected = 0;
  std::string detail;
};

/// Audits one minibatch: gradients of expert j's assigned-step losses with
/// respect to every other expert, then one update without the diversity
/// term, after which experts that served no step must be unchanged.
IsolationReport isolation_audit(Trainer& trainer, const Minibatch& mb);

/// Small dimensions and budgets for fast end-to-end checks.
ExperimentConfig tiny_config();

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<CheckResult> run_selfcheck(int cases_per_op, std::uint64_t seed);

}  // namespace pamoe
