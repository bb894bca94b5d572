// SPDX-License-Identifier: Apache-2.0
#include "pamoe/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pamoe/ops.hpp"

namespace pamoe {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Var;

Var clipped_surrogate_terms(const Var& logp_new, const Matrix& logp_old, const Matrix& advantages,
                            double epsilon) {
  const Index n = logp_new.rows();
  if (logp_new.cols() != 1 || logp_old.rows() != n || logp_old.cols() != 1 ||
      advantages.rows() != n || advantages.cols() != 1) {
    throw ShapeError("clipped_surrogate: inputs must be equal-length columns");
  }
  Matrix out(n, 1);
  Matrix slope(n, 1);  // d(loss)/d(logp_new)
  for (Index i = 0; i < n; ++i) {
    const double rho = std::exp(logp_new.value()(i, 0) - logp_old(i, 0));
    const double a = advantages(i, 0);
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, 1.0 - epsilon, 1.0 + epsilon) * a;
    if (unclipped <= clipped) {
      out(i, 0) = -unclipped;
      slope(i, 0) = -unclipped;
    } else {
      out(i, 0) = -clipped;
      slope(i, 0) = 0.0;
    }
  }
  return logp_new.graph()->emit(std::move(out), {logp_new},
                                [logp_new, slope](Graph& g, const Matrix&, const Matrix& up) {
                                  g.accumulate(logp_new, up.cwiseProduct(slope));
                                });
}

Var clipped_surrogate(const Var& logp_new, const Matrix& logp_old, const Matrix& advantages,
                      double epsilon) {
  return ad::mean(clipped_surrogate_terms(logp_new, logp_old, advantages, epsilon));
}

namespace {
void check_frequencies(const Matrix& f) {
  if (f.rows() != 1) throw ShapeError("balance_loss: expected a 1 x K row");
  if (std::abs(f.sum() - 1.0) > 1e-6) throw DomainError("balance_loss: frequencies must sum to 1");
}
}  // namespace

Var balance_loss(const Var& frequencies) {
  check_frequencies(frequencies.value());
  const double uniform = 1.0 / static_cast<double>(frequencies.cols());
  return ad::sum(ad::square(ad::add_scalar(frequencies, -uniform)));
}

double balance_loss(const ad::Vector& frequencies) {
  check_frequencies(frequencies.transpose());
  const double uniform = 1.0 / static_cast<double>(frequencies.size());
  return (frequencies.array() - uniform).square().sum();
}

Var diversity_loss(const std::vector<Var>& expert_probs, double tau_div) {
  if (expert_probs.size() < 2) throw DomainError("diversity_loss: need at least two experts");
  Var total;
  for (std::size_t i = 0; i < expert_probs.size(); ++i) {
    for (std::size_t j = 0; j < expert_probs.size(); ++j) {
      if (i == j) continue;
      Var kl = ad::kl_divergence_rows(expert_probs[i], expert_probs[j]);
      Var hinge = ad::relu(ad::add_scalar(ad::scale(kl, -1.0), tau_div));
      total = total.valid() ? ad::add(total, hinge) : hinge;
    }
  }
  return ad::mean(total);
}

ExpertBuffer::ExpertBuffer(int num_experts, int capacity)
    : capacity_(capacity), buffers_(static_cast<std::size_t>(std::max(num_experts, 0))) {
  if (capacity < 1) throw ConfigError("buffer capacity must be >= 1");
}

void ExpertBuffer::push(int expert, std::vector<TokenCodes> tokens, ad::Vector logits) {
  auto& buf = buffers_.at(static_cast<std::size_t>(expert));
  buf.push_back({std::move(tokens), std::move(logits)});
  while (static_cast<int>(buf.size()) > capacity_) buf.pop_front();
}

const std::deque<ExpertBuffer::Entry>& ExpertBuffer::entries(int expert) const {
  return buffers_.at(static_cast<std::size_t>(expert));
}

std::size_t ExpertBuffer::total() const {
  std::size_t n = 0;
  for (const auto& b : buffers_) n += b.size();
  return n;
}

std::vector<const ExpertBuffer::Entry*> ExpertBuffer::sample(std::size_t count, Rng& rng) const {
  std::vector<const Entry*> all;
  all.reserve(total());
  for (const auto& b : buffers_) {
    for (const auto& e : b) all.push_back(&e);
  }
  if (all.size() <= count) return all;
  // Partial Fisher-Yates keeps the draw deterministic for a given rng.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (all.size() - i));
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  return all;
}

}  // namespace pamoe
