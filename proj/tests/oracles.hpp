// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used as test oracles. Written
// directly from the definitions with plain loops, sharing no code with the
// library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

// A_t = sum_{l >= 0} (gamma lambda)^l delta_{t+l}, expanded term by term.
inline Vec gae(const Vec& rewards, const Vec& values_with_bootstrap, double gamma, double lambda) {
  const std::size_t T = rewards.size();
  Vec out(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double acc = 0.0;
    for (std::size_t l = 0; t + l < T; ++l) {
      const std::size_t s = t + l;
      const double delta = rewards[s] + gamma * values_with_bootstrap[s + 1] - values_with_bootstrap[s];
      acc += std::pow(gamma * lambda, static_cast<double>(l)) * delta;
    }
    out[t] = acc;
  }
  return out;
}

inline Vec rloo(const Vec& returns) {
  const std::size_t n = returns.size();
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double others = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others += returns[j];
    }
    out[i] = returns[i] - others / static_cast<double>(n - 1);
  }
  return out;
}

inline Vec grpo(const Vec& returns, bool standardize) {
  const std::size_t n = returns.size();
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = standardize ? (returns[i] - mean) / (sd + 1e-8) : returns[i] - mean;
  return out;
}

struct Surrogate {
  double loss = 0.0;  // mean over steps of -min(rho A, clip(rho) A)
  Vec grad;           // d loss / d logp_new
};

inline Surrogate clipped_surrogate(const Vec& logp_new, const Vec& logp_old, const Vec& adv, double eps) {
  Surrogate s;
  const std::size_t n = logp_new.size();
  s.grad.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = std::exp(logp_new[i] - logp_old[i]);
    const double clipped = std::min(std::max(rho, 1.0 - eps), 1.0 + eps);
    const double unclipped_obj = rho * adv[i];
    const double clipped_obj = clipped * adv[i];
    if (unclipped_obj <= clipped_obj) {
      s.loss -= unclipped_obj;
      s.grad[i] = -rho * adv[i] / static_cast<double>(n);
    } else {
      s.loss -= clipped_obj;
    }
  }
  s.loss /= static_cast<double>(n);
  return s;
}

inline double balance(const Vec& f) {
  double acc = 0.0;
  for (double v : f) acc += (v - 1.0 / static_cast<double>(f.size())) * (v - 1.0 / static_cast<double>(f.size()));
  return acc;
}

inline double kl(const Vec& p, const Vec& q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

// Closed-form switching-penalty gradient: -(lambda/(T-1)) p_{t+1} for t < T-1.
inline std::vector<Vec> switching_gradient(const std::vector<Vec>& p, double lambda) {
  const std::size_t T = p.size();
  std::vector<Vec> g(T, Vec(p.front().size(), 0.0));
  for (std::size_t t = 0; t + 1 < T; ++t) {
    for (std::size_t k = 0; k < p[t].size(); ++k) g[t][k] = -(lambda / static_cast<double>(T - 1)) * p[t + 1][k];
  }
  return g;
}

inline int switches(const std::vector<int>& z) {
  int n = 0;
  for (std::size_t t = 1; t < z.size(); ++t) n += z[t] != z[t - 1] ? 1 : 0;
  return n;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace oracle
