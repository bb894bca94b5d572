// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "pamoe/baselines.hpp"
#include "pamoe/ops.hpp"

using namespace pamoe;
using Vec = Eigen::VectorXd;

namespace {

Vec random_vec(std::mt19937_64& rng, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = oracle::uniform(rng, -1, 1);
  return v;
}

// GradNorm update written out per phase from the L1 objective
// sum_i |w_i n_i - mean_j(w_j n_j) r_i^a| with the target held fixed.
Vec gradnorm_reference(const Vec& w, const Vec& l, const Vec& l0, const Vec& n, double a, double lr) {
  const int P = static_cast<int>(w.size());
  std::vector<double> ratio(static_cast<std::size_t>(P));
  double ratio_sum = 0.0;
  for (int i = 0; i < P; ++i) {
    ratio[static_cast<std::size_t>(i)] = l(i) / l0(i);
    ratio_sum += ratio[static_cast<std::size_t>(i)];
  }
  double g_sum = 0.0;
  for (int i = 0; i < P; ++i) g_sum += w(i) * n(i);
  Vec out(P);
  double total = 0.0;
  for (int i = 0; i < P; ++i) {
    const double r = ratio[static_cast<std::size_t>(i)] / (ratio_sum / P);
    const double target = g_sum / P * std::pow(r, a);
    const double d = w(i) * n(i) - target;
    double step = 0.0;
    if (d > 0) step = lr;
    if (d < 0) step = -lr;
    out(i) = std::max(w(i) - step, 1e-3);
    total += out(i);
  }
  for (int i = 0; i < P; ++i) out(i) *= P / total;
  return out;
}

}  // namespace

TEST_CASE("token-level routing") {
  SUBCASE("constant hidden states route every token to one expert") {
    TokenRouterParams params(6, 4, 8, 8, 1);
    params.position.value.setZero();
    ad::Graph g(false);
    const ad::Matrix pooled = ad::Matrix::Constant(3, 6, 0.4);
    const ad::Matrix p = ad::softmax_rows(token_router_logits(g, params, pooled).value());
    for (int s = 0; s < 3; ++s) {
      const std::vector<int> z = route_token_level(p.middleRows(s * 8, 8));
      CHECK(intra_action_switches(z) == 0);
    }
  }
  SUBCASE("alternating states give at most m - 1 changes") {
    ad::Matrix p(8, 2);
    for (int i = 0; i < 8; ++i) {
      p(i, 0) = i % 2 ? 0.2 : 0.8;
      p(i, 1) = 1.0 - p(i, 0);
    }
    const std::vector<int> z = route_token_level(p);
    CHECK(intra_action_switches(z) == 7);
  }
  SUBCASE("top-2 picks the two largest with low-index ties") {
    ad::Matrix p(2, 4);
    p << 0.1, 0.4, 0.4, 0.1, 0.25, 0.25, 0.25, 0.25;
    const auto top = route_token_level_top2(p);
    CHECK(top[0] == std::array<int, 2>{1, 2});
    CHECK(top[1] == std::array<int, 2>{0, 1});
  }
}

TEST_CASE("token to step switch conversion") {
  CHECK(token_to_step_switches({{1, 1, 1}, {2, 2, 2}}) == 0);
  CHECK(token_to_step_switches({{1, 1, 1}, {2, 0, 2}, {3, 3, 3}}) == 1);
  CHECK(token_to_step_switches({{0, 1, 0, 1}, {2, 2}, {1, 3}, {0}}) == 2);
  std::mt19937_64 rng(3);
  for (int c = 0; c < 200; ++c) {
    std::vector<std::vector<int>> steps(1 + rng() % 20);
    int want = 0;
    for (auto& s : steps) {
      s.resize(1 + rng() % 8);
      for (int& k : s) k = static_cast<int>(rng() % 3);
      bool mixed = false;
      for (int k : s) mixed = mixed || k != s.front();
      want += mixed ? 1 : 0;
    }
    CHECK(token_to_step_switches(steps) == want);
  }
}

TEST_CASE("trajectory-level routing") {
  RouterConfig rc;
  rc.num_experts = 4;
  rc.hidden = 8;
  rc.mlp_hidden = 8;
  rc.action_embedding = 4;
  rc.lstm_layers = 1;
  RouterParams params(rc, 6, 9, 7);
  Rng rng = make_rng(7, "traj");
  std::set<int> chosen;
  for (int e = 0; e < 100; ++e) {
    ad::Vector obs = ad::Vector::NullaryExpr(6, [&] { return 4 * (uniform01(rng) - 0.5); });
    std::vector<ad::Vector> goals(3, ad::Vector::NullaryExpr(6, [&] { return 4 * (uniform01(rng) - 0.5); }));
    const RouterOutput o = route_trajectory_level(params, obs, goals, 1.0);
    CHECK(std::abs(o.p.sum() - 1.0) < 1e-12);
    chosen.insert(o.z);
  }
  CHECK(chosen.size() >= 2u);
}

TEST_CASE("pcgrad") {
  Vec a(2), b(2);
  a << 1, 0;
  b << 0, 2;
  CHECK(pcgrad_combine({a, b}) == a + b);
  CHECK(pcgrad_combine({a, -a}).isZero(0.0));
  CHECK(pcgrad_combine({a, Vec::Zero(2)}) == a);
  CHECK(pcgrad_combine({a}) == a);
  std::mt19937_64 rng(4);
  for (int c = 0; c < 500; ++c) {
    const Vec g1 = random_vec(rng, 5), g2 = random_vec(rng, 5);
    const Vec out = pcgrad_combine({g1, g2});
    CHECK(out.dot(g1) >= -1e-12);
    CHECK(out.dot(g2) >= -1e-12);
    if (g1.dot(g2) >= 0) CHECK((out - g1 - g2).norm() < 1e-14);
  }
}

TEST_CASE("gradnorm") {
  const Vec ones = Vec::Ones(4);
  SUBCASE("equal losses and norms keep uniform weights") {
    const Vec w = gradnorm_weights(ones, ones * 0.7, ones * 0.7, ones * 2.0, 1.5, 0.025);
    for (int i = 0; i < 4; ++i) CHECK(w(i) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("the phase with double norm loses weight") {
    Vec n = ones;
    n(2) = 2.0;
    const Vec w = gradnorm_weights(ones, ones, ones, n, 1.5, 0.025);
    CHECK(w(2) < 1.0);
    CHECK(w.sum() == doctest::Approx(4.0).epsilon(1e-14));
  }
  SUBCASE("random cases match the per-phase re-derivation") {
    std::mt19937_64 rng(5);
    for (int c = 0; c < 300; ++c) {
      const int P = 2 + static_cast<int>(rng() % 3);
      Vec w(P), l(P), l0(P), n(P);
      for (int i = 0; i < P; ++i) {
        w(i) = oracle::uniform(rng, 0.01, 2);
        l(i) = oracle::uniform(rng, 0.1, 2);
        l0(i) = oracle::uniform(rng, 0.1, 2);
        n(i) = oracle::uniform(rng, 0.01, 3);
      }
      w *= P / w.sum();
      const double a = oracle::uniform(rng, 0, 3), lr = oracle::uniform(rng, 0.001, 0.5);
      const Vec got = gradnorm_weights(w, l, l0, n, a, lr);
      const Vec want = gradnorm_reference(w, l, l0, n, a, lr);
      CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((got.array() > 0).all());
    }
  }
  SUBCASE("a single phase keeps weight one") {
    CHECK(gradnorm_weights(Vec::Ones(1), Vec::Ones(1), Vec::Ones(1), Vec::Ones(1), 1.5, 0.1)(0) == 1.0);
  }
}

TEST_CASE("cagrad") {
  std::mt19937_64 rng(6);
  SUBCASE("identical gradients") {
    const Vec g = random_vec(rng, 6);
    CHECK((cagrad_combine({g, g, g}, 0.5) - g).norm() < 1e-9);
  }
  SUBCASE("c = 0 is the plain average") {
    const Vec a = random_vec(rng, 6), b = random_vec(rng, 6);
    CHECK((cagrad_combine({a, b}, 0.0) - (a + b) / 2).norm() < 1e-15);
  }
  SUBCASE("single gradient passes through") {
    const Vec a = random_vec(rng, 6);
    CHECK(cagrad_combine({a}, 0.5) == a);
    CHECK(pcgrad_combine({a}) == a);
  }
  SUBCASE("two gradients match a simplex grid search") {
    for (int c = 0; c < 50; ++c) {
      const Vec a = random_vec(rng, 4), b = random_vec(rng, 4);
      const double cc = oracle::uniform(rng, 0.1, 0.9);
      const Vec g0 = (a + b) / 2;
      double best = 1e300, best_w = 0;
      for (int k = 0; k <= 1000; ++k) {
        const double w = k / 1000.0;
        const Vec gw = w * a + (1 - w) * b;
        const double obj = gw.dot(g0) + cc * g0.norm() * gw.norm();
        if (obj < best) {
          best = obj;
          best_w = w;
        }
      }
      const Vec w = cagrad_weights({a, b}, cc);
      const Vec gw_got = w(0) * a + w(1) * b;
      const double got = gw_got.dot(g0) + cc * g0.norm() * gw_got.norm();
      CHECK(got <= best + 1e-9);
      CHECK(best - got < 1e-3);
      if (best_w > 0.0 && best_w < 1.0 && best - got < 1e-9) CHECK(std::abs(w(0) - best_w) <= 1e-3 + 1e-9);
      CHECK(std::abs(w.sum() - 1.0) < 1e-12);
    }
  }
}
