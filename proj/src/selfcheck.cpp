// SPDX-License-Identifier: Apache-2.0
#include "pamoe/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "pamoe/losses.hpp"
#include "pamoe/ops.hpp"
#include "pamoe/router.hpp"

namespace pamoe {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Tensor;
using ad::Var;
using ad::Vector;

namespace {

Matrix uniform(Rng& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = lo + (hi - lo) * uniform01(rng);
  }
  return m;
}

// Entries with |x| in [0.05, 1]; keeps kinks at zero out of reach of the step.
Matrix away_from_zero(Rng& rng, Index rows, Index cols) {
  Matrix m = uniform(rng, rows, cols, 0.05, 1.0);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) {
      if (uniform01(rng) < 0.5) m(i, j) = -m(i, j);
    }
  }
  return m;
}

Index dim(Rng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

std::vector<Index> random_indices(Rng& rng, Index count, Index bound) {
  std::vector<Index> out(static_cast<std::size_t>(count));
  for (Index& v : out) v = static_cast<Index>(rng() % static_cast<std::uint64_t>(bound));
  return out;
}

double projected(const Matrix& out, const Matrix& r) { return out.cwiseProduct(r).sum(); }

}  // namespace

double finite_difference_error(const DiffFn& f, const std::vector<Matrix>& inputs, Rng& rng,
                               double step) {
  std::vector<Tensor> tensors;
  tensors.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    tensors.emplace_back("x" + std::to_string(i), inputs[i], true);
  }

  Matrix r;
  {
    Graph g;
    std::vector<Var> vars;
    for (Tensor& t : tensors) vars.push_back(g.param(t));
    Var out = f(g, vars);
    r = uniform(rng, out.rows(), out.cols());
    g.backward(ad::sum(ad::mul(out, g.constant(r))));
  }

  auto evaluate = [&]() {
    Graph g(false);
    std::vector<Var> vars;
    for (Tensor& t : tensors) vars.push_back(g.param(t));
    return projected(f(g, vars).value(), r);
  };

  double diff2 = 0.0, analytic2 = 0.0, numeric2 = 0.0;
  for (Tensor& t : tensors) {
    for (Index k = 0; k < t.value.size(); ++k) {
      double& x = t.value.data()[k];
      const double saved = x;
      x = saved + step;
      const double up = evaluate();
      x = saved - step;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = t.grad.data()[k];
      diff2 += (analytic - numeric) * (analytic - numeric);
      analytic2 += analytic * analytic;
      numeric2 += numeric * numeric;
    }
  }
  const double denom = std::max({std::sqrt(analytic2), std::sqrt(numeric2), 1e-8});
  return std::sqrt(diff2) / denom;
}

std::vector<OpCase> op_catalog() {
  std::vector<OpCase> ops;
  auto same2 = [](Rng& rng) {
    const Index n = dim(rng, 1, 5), m = dim(rng, 1, 5);
    return std::vector<Matrix>{uniform(rng, n, m), uniform(rng, n, m)};
  };
  auto one = [](Rng& rng) { return std::vector<Matrix>{uniform(rng, dim(rng, 1, 5), dim(rng, 1, 5), -2.0, 2.0)}; };

  ops.push_back({"add", same2, [](Graph&, const std::vector<Var>& x) { return ad::add(x[0], x[1]); }});
  ops.push_back({"sub", same2, [](Graph&, const std::vector<Var>& x) { return ad::sub(x[0], x[1]); }});
  ops.push_back({"mul", same2, [](Graph&, const std::vector<Var>& x) { return ad::mul(x[0], x[1]); }});
  ops.push_back({"scale", one, [](Graph&, const std::vector<Var>& x) { return ad::scale(x[0], -1.7); }});
  ops.push_back({"add_scalar", one, [](Graph&, const std::vector<Var>& x) { return ad::add_scalar(x[0], 0.3); }});
  ops.push_back({"add_row",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 5), m = dim(rng, 1, 5);
                   return std::vector<Matrix>{uniform(rng, n, m), uniform(rng, 1, m)};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::add_row(x[0], x[1]); }});
  ops.push_back({"mul_col",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 5), m = dim(rng, 1, 5);
                   return std::vector<Matrix>{uniform(rng, n, m), uniform(rng, n, 1)};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::mul_col(x[0], x[1]); }});
  ops.push_back({"matmul",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 5), k = dim(rng, 1, 5), m = dim(rng, 1, 5);
                   return std::vector<Matrix>{uniform(rng, n, k), uniform(rng, k, m)};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::matmul(x[0], x[1]); }});
  ops.push_back({"sigmoid", one, [](Graph&, const std::vector<Var>& x) { return ad::sigmoid(x[0]); }});
  ops.push_back({"tanh", one, [](Graph&, const std::vector<Var>& x) { return ad::tanh(x[0]); }});
  ops.push_back({"relu",
                 [](Rng& rng) { return std::vector<Matrix>{away_from_zero(rng, dim(rng, 1, 5), dim(rng, 1, 5))}; },
                 [](Graph&, const std::vector<Var>& x) { return ad::relu(x[0]); }});
  ops.push_back({"exp", one, [](Graph&, const std::vector<Var>& x) { return ad::exp(x[0]); }});
  ops.push_back({"log",
                 [](Rng& rng) {
                   return std::vector<Matrix>{uniform(rng, dim(rng, 1, 5), dim(rng, 1, 5), 0.1, 3.0)};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::log(x[0]); }});
  ops.push_back({"square", one, [](Graph&, const std::vector<Var>& x) { return ad::square(x[0]); }});
  ops.push_back({"sum", one, [](Graph&, const std::vector<Var>& x) { return ad::sum(x[0]); }});
  ops.push_back({"mean", one, [](Graph&, const std::vector<Var>& x) { return ad::mean(x[0]); }});
  ops.push_back({"sum_cols", one, [](Graph&, const std::vector<Var>& x) { return ad::sum_cols(x[0]); }});
  ops.push_back({"softmax_temperature", one,
                 [](Graph&, const std::vector<Var>& x) { return ad::softmax_temperature(x[0], 0.7); }});
  ops.push_back({"log_softmax", one, [](Graph&, const std::vector<Var>& x) { return ad::log_softmax(x[0]); }});
  ops.push_back({"concat_cols",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 4);
                   return std::vector<Matrix>{uniform(rng, n, dim(rng, 1, 4)), uniform(rng, n, dim(rng, 1, 4))};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::concat_cols({x[0], x[1]}); }});
  ops.push_back({"concat_rows",
                 [](Rng& rng) {
                   const Index m = dim(rng, 1, 4);
                   return std::vector<Matrix>{uniform(rng, dim(rng, 1, 4), m), uniform(rng, dim(rng, 1, 4), m)};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::concat_rows({x[0], x[1]}); }});
  ops.push_back({"slice_cols",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, dim(rng, 1, 4), dim(rng, 3, 6))}; },
                 [](Graph&, const std::vector<Var>& x) { return ad::slice_cols(x[0], 1, 2); }});
  ops.push_back({"gather_rows",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 4, dim(rng, 1, 4))}; },
                 [](Graph&, const std::vector<Var>& x) {
                   static const std::vector<Index> rows{3, 0, 0, 2, 3};
                   return ad::gather_rows(x[0], rows);
                 }});
  ops.push_back({"scatter_rows",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 3, dim(rng, 1, 4))}; },
                 [](Graph&, const std::vector<Var>& x) {
                   static const std::vector<Index> rows{4, 1, 4};
                   return ad::scatter_rows(x[0], rows, 6);
                 }});
  ops.push_back({"pick",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 4, 5)}; },
                 [](Graph&, const std::vector<Var>& x) {
                   static const std::vector<Index> cols{4, 0, 2, 2};
                   return ad::pick(x[0], cols);
                 }});
  ops.push_back({"embed_sum",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 6, dim(rng, 1, 4))}; },
                 [](Graph&, const std::vector<Var>& x) {
                   static const std::vector<std::vector<int>> codes{{0, 5}, {2, 2, 3}, {1}};
                   return ad::embed_sum(x[0], codes);
                 }});
  ops.push_back({"mean_pool", one, [](Graph&, const std::vector<Var>& x) { return ad::mean_pool(x[0]); }});
  ops.push_back({"segment_mean",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 6, dim(rng, 1, 4))}; },
                 [](Graph&, const std::vector<Var>& x) { return ad::segment_mean(x[0], 3); }});
  ops.push_back({"layer_norm",
                 [](Rng& rng) { return std::vector<Matrix>{uniform(rng, dim(rng, 1, 4), dim(rng, 2, 6), -2.0, 2.0)}; },
                 [](Graph&, const std::vector<Var>& x) { return ad::layer_norm(x[0]); }});
  ops.push_back({"block_attention",
                 [](Rng& rng) {
                   const Index d = dim(rng, 1, 4);
                   return std::vector<Matrix>{uniform(rng, 6, d), uniform(rng, 6, d), uniform(rng, 6, dim(rng, 1, 4))};
                 },
                 [](Graph&, const std::vector<Var>& x) { return ad::block_attention(x[0], x[1], x[2], 3); }});
  ops.push_back({"cross_attention",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 4), d = dim(rng, 1, 4), dv = dim(rng, 1, 4);
                   std::vector<Matrix> in{uniform(rng, n, d)};
                   for (int j = 0; j < 3; ++j) in.push_back(uniform(rng, n, d));
                   for (int j = 0; j < 3; ++j) in.push_back(uniform(rng, n, dv));
                   return in;
                 },
                 [](Graph&, const std::vector<Var>& x) {
                   return ad::cross_attention(x[0], {x[1], x[2], x[3]}, {x[4], x[5], x[6]});
                 }});
  ops.push_back({"lstm_step",
                 [](Rng& rng) {
                   const Index n = dim(rng, 1, 3), in = dim(rng, 1, 4), h = dim(rng, 1, 3);
                   return std::vector<Matrix>{uniform(rng, n, in), uniform(rng, n, h), uniform(rng, n, h),
                                              uniform(rng, in + h, 4 * h), uniform(rng, 1, 4 * h)};
                 },
                 [](Graph&, const std::vector<Var>& x) {
                   ad::LstmState s = ad::lstm_step(x[0], {x[1], x[2]}, {x[3], x[4]});
                   return ad::concat_cols({s.h, s.c});
                 }});
  ops.push_back({"kl_divergence_rows", same2, [](Graph&, const std::vector<Var>& x) {
                   return ad::kl_divergence_rows(ad::softmax_temperature(x[0], 1.0),
                                                 ad::softmax_temperature(x[1], 1.0));
                 }});
  ops.push_back({"clipped_surrogate",
                 [](Rng& rng) {
                   // ratios kept off the clip boundaries 0.8 and 1.2
                   const Index n = dim(rng, 1, 6);
                   Matrix delta(n, 1);
                   for (Index i = 0; i < n; ++i) {
                     const double bands[3][2] = {{-0.5, -0.3}, {-0.15, 0.15}, {0.25, 0.5}};
                     const auto& b = bands[rng() % 3];
                     delta(i, 0) = b[0] + (b[1] - b[0]) * uniform01(rng);
                   }
                   return std::vector<Matrix>{delta};
                 },
                 [](Graph&, const std::vector<Var>& x) {
                   Matrix adv(x[0].rows(), 1);
                   for (Index i = 0; i < adv.rows(); ++i) adv(i, 0) = (i % 2 == 0) ? 1.3 : -0.7;
                   Var logp = ad::add_scalar(x[0], -1.0);
                   return clipped_surrogate_terms(logp, Matrix::Constant(adv.rows(), 1, -1.0), adv, 0.2);
                 }});
  ops.push_back({"balance_loss", one, [](Graph&, const std::vector<Var>& x) {
                   return balance_loss(ad::mean_pool(ad::softmax_temperature(x[0], 1.0)));
                 }});
  ops.push_back({"diversity_loss",
                 [](Rng& rng) {
                   const Index s = dim(rng, 1, 4), a = dim(rng, 2, 5);
                   return std::vector<Matrix>{uniform(rng, s, a, -3.0, 3.0), uniform(rng, s, a, -3.0, 3.0),
                                              uniform(rng, s, a, -3.0, 3.0)};
                 },
                 [](Graph&, const std::vector<Var>& x) {
                   std::vector<Var> probs;
                   for (const Var& v : x) probs.push_back(ad::softmax_temperature(v, 1.0));
                   return diversity_loss(probs, 0.5);
                 }});
  return ops;
}

IsolationReport isolation_audit(Trainer& trainer, const Minibatch& mb) {
  IsolationReport report;
  MoEPolicy& policy = trainer.policy();
  const int k_count = policy.num_experts();
  std::set<int> selected;
  for (Index z : mb.z) selected.insert(static_cast<int>(z));
  for (Index z : mb.token_z) selected.insert(static_cast<int>(z));
  for (Index z : mb.token_z2) selected.insert(static_cast<int>(z));
  report.experts_selected = static_cast<int>(selected.size());
  std::ostringstream detail;

  std::vector<Tensor*> params = trainer.trainable();
  const bool per_row = mb.token_z.empty() && !mb.z.empty();
  if (per_row) {
    for (int j : selected) {
      std::vector<Index> rows;
      for (Index i = 0; i < mb.rows(); ++i) {
        if (mb.z[static_cast<std::size_t>(i)] == j) rows.push_back(i);
      }
      ad::zero_grad(params);
      Graph g;
      Var terms = trainer.weighted_terms(g, mb, trainer.temperature());
      g.backward(ad::sum(ad::gather_rows(terms, rows)));
      for (int k = 0; k < k_count; ++k) {
        if (k == j) continue;
        for (Tensor* t : policy.expert(k).parameters()) {
          if (!(t->grad.array() == 0.0).all()) {
            report.gradients_isolated = false;
            detail << "expert " << k << " received gradient from expert " << j << " rows; ";
          }
        }
      }
    }
    ad::zero_grad(params);
  }

  std::vector<std::vector<Matrix>> before(static_cast<std::size_t>(k_count));
  for (int k = 0; k < k_count; ++k) {
    for (Tensor* t : policy.expert(k).parameters()) before[static_cast<std::size_t>(k)].push_back(t->value);
  }
  trainer.train_step(mb, false);
  for (int k = 0; k < k_count; ++k) {
    if (selected.count(k) != 0) continue;
    const auto ps = policy.expert(k).parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Matrix& old = before[static_cast<std::size_t>(k)][i];
      if (std::memcmp(old.data(), ps[i]->value.data(), sizeof(double) * static_cast<std::size_t>(old.size())) != 0) {
        report.parameters_isolated = false;
        detail << "unselected expert " << k << " changed; ";
      }
    }
  }
  report.detail = detail.str();
  return report;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.environment.grid_size = 6;
  c.environment.max_steps = 20;
  c.policy.d_model = 16;
  c.policy.ffn_width = 32;
  c.policy.rank = 2;
  c.policy.value_hidden = 16;
  c.router.hidden = 16;
  c.router.mlp_hidden = 16;
  c.router.action_embedding = 4;
  c.router.lstm_layers = 1;
  c.router.history = 3;
  c.algorithm.n_group = 4;
  c.algorithm.div_interval = 2;
  c.algorithm.div_sample = 8;
  c.training.total_steps = 200;
  c.training.groups_per_batch = 1;
  c.training.minibatches = 2;
  c.training.eval_episodes = 2;
  c.training.conflict_interval = 2;
  c.training.conflict_probe_steps = 64;
  c.training.kl_probe_states = 8;
  c.training.seeds = {0};
  c.training.warmup.episodes = 12;
  c.training.warmup.epochs = 1;
  c.training.warmup.batch_size = 32;
  c.policy.num_experts = c.adapters();
  c.router.num_experts = c.adapters();
  return c;
}

std::vector<CheckResult> run_selfcheck(int cases_per_op, std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng = make_rng(seed, "selfcheck");

  for (const OpCase& op : op_catalog()) {
    double worst = 0.0;
    for (int c = 0; c < cases_per_op; ++c) {
      worst = std::max(worst, finite_difference_error(op.fn, op.inputs(rng), rng));
    }
    std::ostringstream d;
    d << "max relative error " << worst << " over " << cases_per_op << " cases";
    results.push_back({"gradient/" + op.name, worst < 1e-4, d.str()});
  }

  {
    double worst = 0.0;
    for (int c = 0; c < cases_per_op; ++c) {
      const Index t_len = dim(rng, 2, 8), k = dim(rng, 2, 5);
      Tensor logits("p", uniform(rng, t_len, k, -2.0, 2.0), true);
      std::vector<Index> z = random_indices(rng, t_len, k);
      const double lambda = 0.01 + uniform01(rng);
      Graph g;
      Var p = ad::softmax_temperature(g.param(logits), 1.0);
      Tensor p_leaf("pv", p.value(), true);
      Graph g2;
      Var pv = g2.param(p_leaf);
      Var pen = switching_penalty(pv, z, lambda);
      g2.backward(pen);
      const double c_scale = lambda / static_cast<double>(t_len - 1);
      int switches = 0;
      for (Index t = 1; t < t_len; ++t) switches += z[static_cast<std::size_t>(t)] != z[static_cast<std::size_t>(t - 1)];
      worst = std::max(worst, std::abs(pen.scalar() - c_scale * switches));
      Matrix expected = Matrix::Zero(t_len, k);
      for (Index t = 0; t + 1 < t_len; ++t) expected.row(t) = -c_scale * p.value().row(t + 1);
      worst = std::max(worst, (p_leaf.grad - expected).cwiseAbs().maxCoeff());
    }
    std::ostringstream d;
    d << "max deviation from closed form " << worst;
    results.push_back({"switching_penalty", worst < 1e-10, d.str()});
  }

  {
    const AnnealSchedule s{2.0, 0.5, 3000.0};
    const bool ok = anneal_temperature(s, 0.0) == 2.0 && std::abs(anneal_temperature(s, 1500.0) - 1.25) < 1e-12 &&
                    anneal_temperature(s, 3000.0) == 0.5 && anneal_temperature(s, 9000.0) == 0.5;
    results.push_back({"temperature_anneal", ok, "endpoints and midpoint of the linear schedule"});
  }

  {
    ExperimentConfig c = tiny_config();
    c.experts = 6;
    c.policy.num_experts = c.router.num_experts = 6;
    bool ok = true;
    std::ostringstream d;
    for (RoutingMode mode : {RoutingMode::Phase, RoutingMode::Trajectory}) {
      c.routing = mode;
      Trainer trainer(c, seed);
      std::vector<TrajectoryRecord> batch = trainer.collect_batch();
      trainer.compute_advantages(batch);
      // one trajectory leaves some experts unselected
      const Minibatch mb = trainer.make_minibatch({&batch.front()});
      const IsolationReport rep = isolation_audit(trainer, mb);
      ok = ok && rep.gradients_isolated && rep.parameters_isolated;
      d << to_string(mode) << ": " << rep.experts_selected << " of 6 experts selected; " << rep.detail;
    }
    results.push_back({"expert_isolation", ok, d.str()});
  }
  return results;
}

}  // namespace pamoe
