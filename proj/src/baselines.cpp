// SPDX-License-Identifier: Apache-2.0
#include "pamoe/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pamoe/ops.hpp"

namespace pamoe {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Tensor;
using ad::Var;
using ad::Vector;

namespace {

Matrix gaussian(Index rows, Index cols, double std_dev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std_dev);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  }
  return m;
}

// Euclidean projection onto the probability simplex.
Vector project_simplex(const Vector& v) {
  Vector u = v;
  std::sort(u.data(), u.data() + u.size(), std::greater<>());
  double cum = 0.0;
  double theta = 0.0;
  for (Index i = 0; i < u.size(); ++i) {
    cum += u(i);
    const double t = (cum - 1.0) / static_cast<double>(i + 1);
    if (u(i) - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0).matrix();
}

}  // namespace

TokenRouterParams::TokenRouterParams(int d_model, int num_experts, int micro_tokens, int hidden,
                                     std::uint64_t seed)
    : num_experts_(num_experts), micro_tokens_(micro_tokens) {
  if (num_experts < 1) throw ConfigError("token router needs K >= 1");
  if (micro_tokens < 1) throw ConfigError("micro_tokens must be >= 1");
  Rng rng = make_rng(seed, "token-router-init");
  const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
  position = Tensor("token_router.position", gaussian(micro_tokens, d_model, 1.0, rng), false);
  input_shift = Tensor("token_router.input_shift", Matrix::Zero(1, d_model), false);
  input_scale = Tensor("token_router.input_scale", Matrix::Ones(1, d_model), false);
  w1 = Tensor("token_router.w1", gaussian(d_model, hidden, s, rng), true);
  b1 = Tensor("token_router.b1", Matrix::Zero(1, hidden), true);
  w2 = Tensor("token_router.w2", gaussian(hidden, num_experts, 1.0 / std::sqrt(static_cast<double>(hidden)), rng), true);
  b2 = Tensor("token_router.b2", Matrix::Zero(1, num_experts), true);
}

std::vector<Tensor*> TokenRouterParams::parameters() { return {&w1, &b1, &w2, &b2}; }

Var token_router_logits(Graph& g, TokenRouterParams& params, const Matrix& pooled) {
  const Index n = pooled.rows();
  const Index m = params.micro_tokens();
  Matrix h(n * m, pooled.cols());
  const Matrix standardized =
      ((pooled.rowwise() - params.input_shift.value.row(0)).array().rowwise() /
       params.input_scale.value.row(0).array())
          .matrix();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      h.row(i * m + j) = standardized.row(i) + params.position.value.row(j);
    }
  }
  Var hidden = ad::relu(ad::add_row(ad::matmul(g.constant(std::move(h)), g.param(params.w1)),
                                    g.param(params.b1)));
  return ad::add_row(ad::matmul(hidden, g.param(params.w2)), g.param(params.b2));
}

std::vector<int> route_token_level(const Matrix& p) {
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(argmax_lowest(p.row(i)));
  return out;
}

std::vector<std::array<int, 2>> route_token_level_top2(const Matrix& p) {
  if (p.cols() < 2) throw DomainError("top-2 routing needs K >= 2");
  std::vector<std::array<int, 2>> out(static_cast<std::size_t>(p.rows()));
  for (Index i = 0; i < p.rows(); ++i) {
    const Index first = argmax_lowest(p.row(i));
    Index second = first == 0 ? 1 : 0;
    for (Index k = 0; k < p.cols(); ++k) {
      if (k != first && p(i, k) > p(i, second)) second = k;
    }
    out[static_cast<std::size_t>(i)] = {static_cast<int>(first), static_cast<int>(second)};
  }
  return out;
}

int intra_action_switches(std::span<const int> token_experts) {
  return count_switches(token_experts);
}

int token_to_step_switches(const std::vector<std::vector<int>>& tokens_per_step) {
  int n = 0;
  for (const auto& tokens : tokens_per_step) {
    n += std::any_of(tokens.begin(), tokens.end(), [&](int k) { return k != tokens.front(); });
  }
  return n;
}

RouterOutput route_trajectory_level(RouterParams& params, const Vector& obs_encoding,
                                    const std::vector<Vector>& goal_encodings, double tau) {
  RouterState fresh(params.config().history);
  return route(params, fresh, obs_encoding, goal_encodings, tau);
}

Vector pcgrad_combine(const std::vector<Vector>& grads) {
  if (grads.empty()) throw DomainError("pcgrad_combine: no gradients");
  if (grads.size() == 1) return grads.front();
  Vector total = Vector::Zero(grads.front().size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Vector gi = grads[i];
    for (std::size_t j = 0; j < grads.size(); ++j) {
      if (j == i) continue;
      const double nj = grads[j].squaredNorm();
      if (nj == 0.0) continue;
      const double dot = gi.dot(grads[j]);
      if (dot < 0.0) gi -= (dot / nj) * grads[j];
    }
    total += gi;
  }
  return total;
}

Vector gradnorm_weights(const Vector& weights, const Vector& losses, const Vector& initial_losses,
                        const Vector& norms, double asymmetry, double lr) {
  const Index P = weights.size();
  if (losses.size() != P || initial_losses.size() != P || norms.size() != P) {
    throw ShapeError("gradnorm_weights: length mismatch");
  }
  if (P == 1) return Vector::Ones(1);
  const Vector ratio = losses.cwiseQuotient(initial_losses);
  const Vector inverse_rate = ratio / ratio.mean();
  const Vector g = weights.cwiseProduct(norms);
  const double g_mean = g.mean();
  Vector out(P);
  for (Index i = 0; i < P; ++i) {
    const double target = g_mean * std::pow(inverse_rate(i), asymmetry);
    const double diff = g(i) - target;
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    out(i) = std::max(weights(i) - lr * sign, 1e-3);
  }
  return out * (static_cast<double>(P) / out.sum());
}

Vector cagrad_weights(const std::vector<Vector>& grads, double c) {
  const Index P = static_cast<Index>(grads.size());
  if (P == 0) throw DomainError("cagrad: no gradients");
  Matrix gram(P, P);
  for (Index i = 0; i < P; ++i) {
    for (Index j = 0; j < P; ++j) gram(i, j) = grads[static_cast<std::size_t>(i)].dot(grads[static_cast<std::size_t>(j)]);
  }
  const double scale = std::max(gram.diagonal().maxCoeff(), 1e-300);
  gram /= scale;
  const Vector b = gram.rowwise().mean();  // G * (1/P)
  const double g0_norm = std::sqrt(std::max(b.mean(), 0.0));
  Vector w = Vector::Constant(P, 1.0 / static_cast<double>(P));
  if (P == 1) return w;
  auto objective_grad = [&](const Vector& x) {
    const double q = std::sqrt(std::max(x.dot(gram * x), 1e-18));
    return Vector(b + c * g0_norm * (gram * x) / q);
  };
  // Projected gradient with a decaying step; the problem is tiny and convex.
  const double lipschitz = gram.norm() * (1.0 + c) + 1e-12;
  Vector y = w;
  double t = 1.0;
  for (int it = 0; it < 3000; ++it) {
    Vector w_next = project_simplex(y - objective_grad(y) / lipschitz);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = w_next + ((t - 1.0) / t_next) * (w_next - w);
    w = w_next;
    t = t_next;
  }
  return w;
}

Vector cagrad_combine(const std::vector<Vector>& grads, double c) {
  if (grads.empty()) throw DomainError("cagrad_combine: no gradients");
  if (grads.size() == 1) return grads.front();
  Vector g0 = Vector::Zero(grads.front().size());
  for (const Vector& g : grads) g0 += g;
  g0 /= static_cast<double>(grads.size());
  if (c == 0.0) return g0;
  const Vector w = cagrad_weights(grads, c);
  Vector gw = Vector::Zero(g0.size());
  for (std::size_t i = 0; i < grads.size(); ++i) gw += w(static_cast<Index>(i)) * grads[i];
  const double gw_norm = gw.norm();
  if (gw_norm == 0.0) return g0 / (1.0 + c);
  return (g0 + (c * g0.norm() / gw_norm) * gw) / (1.0 + c);
}

}  // namespace pamoe
