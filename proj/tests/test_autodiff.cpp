// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pamoe/errors.hpp"
#include "pamoe/ops.hpp"
#include "pamoe/optim.hpp"
#include "pamoe/selfcheck.hpp"

using namespace pamoe;
using namespace pamoe::ad;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = oracle::uniform(rng, -1, 1);
  return m;
}

}  // namespace

TEST_CASE("matmul values and shape errors") {
  Graph g;
  Matrix a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 3, 4, 5, 6;
  CHECK(matmul(g.constant(a), g.constant(b)).value() == b);
  CHECK(matmul(g.constant(Matrix::Constant(1, 1, 2.0)), g.constant(Matrix::Constant(1, 1, 3.0))).scalar() == 6.0);
  CHECK_THROWS_AS(matmul(g.constant(Matrix::Ones(2, 3)), g.constant(Matrix::Ones(2, 3))), ShapeError);
}

TEST_CASE("matmul gradient of sum equals ones times b transpose") {
  std::mt19937_64 rng(3);
  Tensor a("a", random_matrix(rng, 3, 4), true);
  const Matrix b = random_matrix(rng, 4, 2);
  Graph g;
  g.backward(sum(matmul(g.param(a), g.constant(b))));
  const Matrix expected = Matrix::Ones(3, 2) * b.transpose();
  CHECK((a.grad - expected).cwiseAbs().maxCoeff() < 1e-15);
  Rng r = make_rng(1, "fd");
  const double err = finite_difference_error(
      [&](Graph& gg, const std::vector<Var>& x) { return matmul(x[0], gg.constant(b)); }, {a.value}, r);
  CHECK(err < 1e-6);
}

TEST_CASE("softmax_temperature") {
  Graph g;
  CHECK((softmax_temperature(g.constant(Matrix::Zero(1, 4)), 1.0).value().array() - 0.25).abs().maxCoeff() < 1e-15);
  Matrix two(1, 2);
  two << 1, 0;
  const Matrix flat = softmax_temperature(g.constant(two), 1e6).value();
  CHECK(std::abs(flat(0, 0) - 0.5) < 1e-5);
  Matrix l(1, 3);
  l << 2, 1, 0;
  const Matrix p = softmax_temperature(g.constant(l), 0.5).value();
  const double z = std::exp(4.0) + std::exp(2.0) + 1.0;
  CHECK(p(0, 0) == doctest::Approx(std::exp(4.0) / z).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
  CHECK(p(0, 2) == doctest::Approx(1.0 / z).epsilon(1e-14));
  // frozen from the hand evaluation above
  CHECK(p(0, 0) == doctest::Approx(0.866813332197).epsilon(1e-11));
  CHECK_THROWS_AS(softmax_temperature(g.constant(l), 0.0), DomainError);
  CHECK_THROWS_AS(softmax_temperature(g.constant(l), -1.0), DomainError);
}

TEST_CASE("softmax sums to one across temperatures") {
  std::mt19937_64 rng(5);
  Graph g;
  for (double tau : {1e-3, 0.1, 1.0, 37.0, 1e6}) {
    for (int c = 0; c < 50; ++c) {
      Matrix l = random_matrix(rng, 3, 6) * 50.0;
      const Matrix p = softmax_temperature(g.constant(l), tau).value();
      for (Index i = 0; i < 3; ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("cross_attention") {
  Graph g;
  Matrix q(1, 2), k1(1, 2), k2(1, 2), v1(1, 2), v2(1, 2);
  q << 1, 0;
  k1 << 1, 0;
  k2 << 0, 1;
  v1 << 1, 1;
  v2 << 2, 2;
  SUBCASE("single key returns its value") {
    CHECK(cross_attention(g.constant(q), g.constant(k1), g.constant(v2)).value() == v2);
  }
  SUBCASE("identical keys average the values") {
    const Matrix out = cross_attention(g.constant(q), {g.constant(k1), g.constant(k1)}, {g.constant(v1), g.constant(v2)}).value();
    CHECK(out(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
  }
  SUBCASE("hand-computed two-key mix") {
    const Matrix out = cross_attention(g.constant(q), {g.constant(k1), g.constant(k2)}, {g.constant(v1), g.constant(v2)}).value();
    const double s1 = 1.0 / std::sqrt(2.0);
    const double w1 = std::exp(s1) / (std::exp(s1) + 1.0);
    CHECK(out(0, 0) == doctest::Approx(w1 * 1 + (1 - w1) * 2).epsilon(1e-14));
    CHECK(out(0, 0) == doctest::Approx(1.330238450673).epsilon(1e-11));
  }
  CHECK_THROWS_AS(cross_attention(g.constant(q), g.constant(Matrix::Ones(1, 3)), g.constant(v1)), ShapeError);
}

TEST_CASE("lstm_step") {
  Graph g;
  SUBCASE("all zeros stay zero") {
    LstmParams p{g.constant(Matrix::Zero(5, 8)), g.constant(Matrix::Zero(1, 8))};
    LstmState s = lstm_step(g.constant(Matrix::Zero(1, 3)), {g.constant(Matrix::Zero(1, 2)), g.constant(Matrix::Zero(1, 2))}, p);
    CHECK(s.h.value().isZero(0.0));
    CHECK(s.c.value().isZero(0.0));
  }
  SUBCASE("saturated forget and closed input keep the cell") {
    Matrix bias = Matrix::Zero(1, 8);
    bias.block(0, 0, 1, 2).setConstant(-1e3);  // input gate
    bias.block(0, 2, 1, 2).setConstant(1e3);   // forget gate
    LstmParams p{g.constant(Matrix::Zero(5, 8)), g.constant(bias)};
    Matrix c(1, 2);
    c << 0.3, -0.7;
    LstmState s = lstm_step(g.constant(Matrix::Ones(1, 3)), {g.constant(Matrix::Zero(1, 2)), g.constant(c)}, p);
    CHECK(s.c.value() == c);
  }
  SUBCASE("matches a scalar implementation") {
    std::mt19937_64 rng(8);
    const int in = 3, h = 2;
    Matrix x = random_matrix(rng, 1, in), h0 = random_matrix(rng, 1, h), c0 = random_matrix(rng, 1, h);
    Matrix w = random_matrix(rng, in + h, 4 * h), b = random_matrix(rng, 1, 4 * h);
    LstmState s = lstm_step(g.constant(x), {g.constant(h0), g.constant(c0)}, {g.constant(w), g.constant(b)});
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int j = 0; j < h; ++j) {
      double gate[4];
      for (int k = 0; k < 4; ++k) {
        double acc = b(0, k * h + j);
        for (int i = 0; i < in; ++i) acc += x(0, i) * w(i, k * h + j);
        for (int i = 0; i < h; ++i) acc += h0(0, i) * w(in + i, k * h + j);
        gate[k] = acc;
      }
      const double c1 = sig(gate[1]) * c0(0, j) + sig(gate[0]) * std::tanh(gate[2]);
      const double h1 = sig(gate[3]) * std::tanh(c1);
      CHECK(s.c.value()(0, j) == doctest::Approx(c1).epsilon(1e-14));
      CHECK(s.h.value()(0, j) == doctest::Approx(h1).epsilon(1e-14));
    }
  }
}

TEST_CASE("mean_pool") {
  Graph g;
  Matrix one(1, 2);
  one << 1, 3;
  CHECK(mean_pool(g.constant(one)).value() == one);
  Matrix two(2, 2);
  two << 0, 0, 2, 4;
  Matrix want(1, 2);
  want << 1, 2;
  CHECK(mean_pool(g.constant(two)).value() == want);
  std::mt19937_64 rng(2);
  const Matrix five = random_matrix(rng, 5, 3);
  const Matrix got = mean_pool(g.constant(five)).value();
  for (Index j = 0; j < 3; ++j) {
    double s = 0.0;
    for (Index i = 0; i < 5; ++i) s += five(i, j);
    CHECK(got(0, j) == doctest::Approx(s / 5.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(mean_pool(g.constant(Matrix(0, 3))), DomainError);
}

TEST_CASE("kl_divergence") {
  Vector h(2);
  h << 0.5, 0.5;
  CHECK(kl_divergence(h, h) == 0.0);
  Vector one_hot(2);
  one_hot << 1.0, 0.0;
  CHECK(kl_divergence(one_hot, h) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  std::mt19937_64 rng(4);
  for (int c = 0; c < 20; ++c) {
    Vector p(5), q(5);
    for (Index i = 0; i < 5; ++i) {
      p(i) = oracle::uniform(rng, 0.01, 1);
      q(i) = oracle::uniform(rng, 0.01, 1);
    }
    p /= p.sum();
    q /= q.sum();
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(p, q) == doctest::Approx(oracle::kl({p.data(), p.data() + 5}, {q.data(), q.data() + 5})).epsilon(1e-12));
  }
  Vector bad(2);
  bad << 0.6, 0.6;
  CHECK_THROWS_AS(kl_divergence(bad, h), DomainError);
}

TEST_CASE("backward semantics") {
  Tensor w("w", Matrix::Constant(2, 3, 0.5), true);
  Tensor unused("u", Matrix::Ones(2, 2), true);
  unused.zero_grad();
  Graph g;
  Var wv = g.param(w);
  CHECK(g.param(w).id() == wv.id());
  g.param(unused);
  g.backward(sum(wv));
  CHECK(w.grad == Matrix::Ones(2, 3));
  CHECK(w.touched);
  CHECK(!unused.touched);
  CHECK((unused.grad.array() == 0.0).all());
  CHECK_THROWS_AS(g.backward(wv), ShapeError);
}

TEST_CASE("straight_through and detach") {
  Tensor p("p", Matrix::Zero(2, 3), true);
  p.value << 0.7, 0.2, 0.1, 0.3, 0.3, 0.4;
  Graph g;
  const std::vector<Index> sel{0, 2};
  Var st = straight_through(g.param(p), sel);
  CHECK(st.value() == Matrix::Ones(2, 1));
  Matrix up(2, 1);
  up << 2.0, -3.0;
  g.backward(sum(mul(st, g.constant(up))));
  Matrix want = Matrix::Zero(2, 3);
  want(0, 0) = 2.0;
  want(1, 2) = -3.0;
  CHECK(p.grad == want);

  Tensor x("x", Matrix::Ones(1, 2), true);
  x.zero_grad();
  Graph g2;
  g2.backward(sum(add(detach(g2.param(x)), g2.constant(Matrix::Ones(1, 2)))));
  CHECK((x.grad.array() == 0.0).all());
}

TEST_CASE("finite differences for every op") {
  Rng rng = make_rng(77, "unit-fd");
  for (const OpCase& op : op_catalog()) {
    CAPTURE(op.name);
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) worst = std::max(worst, finite_difference_error(op.fn, op.inputs(rng), rng, 1e-5));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("forward ops keep finite inputs finite") {
  std::mt19937_64 rng(12);
  Rng r = make_rng(12, "finite");
  for (const OpCase& op : op_catalog()) {
    CAPTURE(op.name);
    Graph g(false);
    std::vector<Tensor> ts;
    for (const Matrix& m : op.inputs(r)) ts.emplace_back("x", m * 20.0, false);
    std::vector<Var> vs;
    for (Tensor& t : ts) vs.push_back(g.param(t));
    // scaled inputs can leave an op's domain (log of negatives is floored)
    try {
      CHECK(op.fn(g, vs).value().allFinite());
    } catch (const DomainError&) {
    }
  }
}

TEST_CASE("adam steps only touched tensors and clipping reports the pre-clip norm") {
  Tensor a("a", Matrix::Ones(1, 2), true), b("b", Matrix::Ones(1, 2), true);
  std::vector<Tensor*> ps{&a, &b};
  zero_grad(ps);
  Graph g;
  g.backward(sum(scale(g.param(a), 3.0)));
  const double norm = clip_grad_norm(ps, 1.0);
  CHECK(norm == doctest::Approx(std::sqrt(18.0)).epsilon(1e-15));
  CHECK(grad_norm(ps) == doctest::Approx(1.0).epsilon(1e-15));
  Adam adam({0.1, 0.9, 0.999, 1e-8});
  adam.step(ps);
  CHECK(b.value == Matrix::Ones(1, 2));
  CHECK(a.value(0, 0) == doctest::Approx(0.9).epsilon(1e-9));
}
