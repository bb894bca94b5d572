// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: exact property checks (1-7) and directional end-to-end
// reproductions over three seeds of the default configuration (8-14).
// Prints one PASS/FAIL line per criterion; exits nonzero if any fails.
//
//   acceptance [--exact-only | --directional-only] [--out DIR] [--verbose]
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "pamoe/advantages.hpp"
#include "pamoe/baselines.hpp"
#include "pamoe/config.hpp"
#include "pamoe/experiment.hpp"
#include "pamoe/losses.hpp"
#include "pamoe/metrics.hpp"
#include "pamoe/ops.hpp"
#include "pamoe/router.hpp"
#include "pamoe/selfcheck.hpp"
#include "pamoe/trainer.hpp"

namespace fs = std::filesystem;
using namespace pamoe;
using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Tensor;
using ad::Var;
using ad::Vector;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o << std::setprecision(precision) << v;
  return o.str();
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------- exact

Outcome gradient_isolation() {
  std::ostringstream d;
  bool ok = true;
  int audited = 0;
  int unselected = 0;
  for (RoutingMode mode : {RoutingMode::Phase, RoutingMode::Trajectory}) {
    ExperimentConfig c = tiny_config();
    c.experts = 6;
    c.policy.num_experts = c.router.num_experts = 6;
    c.routing = mode;
    Trainer trainer(c, 11);
    for (int b = 0; b < 3; ++b) {
      std::vector<TrajectoryRecord> batch = trainer.collect_batch();
      trainer.compute_advantages(batch);
      for (std::size_t i = 0; i < batch.size(); i += 2) {
        std::vector<const TrajectoryRecord*> part{&batch[i]};
        if (i + 1 < batch.size() && b % 2 == 1) part.push_back(&batch[i + 1]);
        const IsolationReport r = isolation_audit(trainer, trainer.make_minibatch(part));
        ok = ok && r.gradients_isolated && r.parameters_isolated;
        unselected += 6 - r.experts_selected;
        ++audited;
        if (!r.detail.empty()) d << r.detail;
      }
    }
  }
  d << audited << " minibatches audited, " << unselected << " unselected expert slots unchanged";
  return {ok && unselected > 0, d.str()};
}

Outcome autodiff_fd() {
  Rng rng = make_rng(2024, "acceptance-fd");
  double worst = 0.0;
  std::string worst_op;
  int ops = 0;
  for (const OpCase& op : op_catalog()) {
    ++ops;
    for (int c = 0; c < 100; ++c) {
      const double e = finite_difference_error(op.fn, op.inputs(rng), rng, 1e-5);
      if (e > worst) {
        worst = e;
        worst_op = op.name;
      }
    }
  }
  return {worst < 1e-4, std::to_string(ops) + " ops x 100 cases, max relative error " + fmt(worst) + " (" + worst_op + ")"};
}

Outcome switching_closed_form() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const int T = 2 + static_cast<int>(rng() % 12);
    const int K = 2 + static_cast<int>(rng() % 5);
    const double lambda = oracle::uniform(rng, 0.001, 2.0);
    std::vector<oracle::Vec> p(static_cast<std::size_t>(T), oracle::Vec(static_cast<std::size_t>(K)));
    Matrix pm(T, K);
    std::vector<Index> z(static_cast<std::size_t>(T));
    std::vector<int> zi(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      double s = 0.0;
      for (int k = 0; k < K; ++k) s += p[t][k] = oracle::uniform(rng, 0.01, 1.0);
      for (int k = 0; k < K; ++k) pm(t, k) = p[t][k] /= s;
      zi[static_cast<std::size_t>(t)] = static_cast<int>(rng() % static_cast<unsigned>(K));
      z[static_cast<std::size_t>(t)] = zi[static_cast<std::size_t>(t)];
    }
    Tensor leaf("p", pm, true);
    Graph g;
    Var pen = switching_penalty(g.param(leaf), z, lambda);
    g.backward(pen);
    const auto expected = oracle::switching_gradient(p, lambda);
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) worst = std::max(worst, std::abs(leaf.grad(t, k) - expected[t][k]));
    }
    worst = std::max(worst, std::abs(pen.scalar() - lambda / (T - 1) * oracle::switches(zi)));
  }
  return {worst <= 1e-10, "1000 random trajectories, max deviation " + fmt(worst)};
}

Outcome temperature_schedule() {
  const AnnealSchedule s = ExperimentConfig{}.router.schedule;
  const double t0 = anneal_temperature(s, 0.0);
  const double t1 = anneal_temperature(s, 3000.0);
  const double t2 = anneal_temperature(s, 10000.0);
  const double mid = anneal_temperature(s, 1500.0);
  const bool ok = t0 == 2.0 && t1 == 0.5 && t2 == 0.5 && std::abs(mid - 1.25) < 1e-12;
  return {ok, "tau(0)=" + fmt(t0) + " tau(1500)=" + fmt(mid) + " tau(3000)=" + fmt(t1) + " tau(1e4)=" + fmt(t2)};
}

// Reference single-policy PPO update built directly from the policy, the
// surrogate and the critic, applied to a second trainer with identical state.
double ppo_equivalence() {
  ExperimentConfig c = tiny_config();
  c.algorithm.tag = Algorithm::PPO;
  c.experts = 1;
  c.policy.num_experts = c.router.num_experts = 1;
  c.routing = RoutingMode::Phase;
  Trainer a(c, 5);
  Trainer b(c, 5);
  double worst = 0.0;
  for (int round = 0; round < 2; ++round) {
    std::vector<TrajectoryRecord> batch = a.collect_batch();
    std::vector<TrajectoryRecord> batch_b = b.collect_batch();
    a.compute_advantages(batch);
    // independent advantages for the reference path
    for (TrajectoryRecord& r : batch_b) {
      oracle::Vec values(r.values.begin(), r.values.end());
      values.push_back(0.0);
      r.advantages = oracle::gae(r.rewards, values, c.algorithm.gae_gamma, c.algorithm.gae_lambda);
      r.value_targets.resize(r.advantages.size());
      for (std::size_t t = 0; t < r.advantages.size(); ++t) r.value_targets[t] = r.advantages[t] + r.values[t];
    }
    for (std::size_t i = 0; i < batch.size(); i += 4) {
      std::vector<const TrajectoryRecord*> pa, pb;
      for (std::size_t j = i; j < std::min(batch.size(), i + 4); ++j) {
        pa.push_back(&batch[j]);
        pb.push_back(&batch_b[j]);
      }
      a.train_step(a.make_minibatch(pa), false);

      std::vector<Index> actions;
      Matrix old_logp, adv, targets;
      TokenBatch inputs;
      Matrix pooled;
      {
        Index n = 0;
        for (const TrajectoryRecord* r : pb) n += r->length();
        old_logp.resize(n, 1);
        adv.resize(n, 1);
        targets.resize(n, 1);
        pooled.resize(n, c.policy.d_model);
        Index row = 0;
        inputs.tokens_per_sample = pb.front()->inputs.tokens_per_sample;
        for (const TrajectoryRecord* r : pb) {
          inputs.tokens.insert(inputs.tokens.end(), r->inputs.tokens.begin(), r->inputs.tokens.end());
          for (int t = 0; t < r->length(); ++t, ++row) {
            actions.push_back(r->actions[static_cast<std::size_t>(t)]);
            old_logp(row, 0) = r->old_logp[static_cast<std::size_t>(t)];
            adv(row, 0) = r->advantages[static_cast<std::size_t>(t)];
            targets(row, 0) = r->value_targets[static_cast<std::size_t>(t)];
            pooled.row(row) = r->pooled.row(t);
          }
        }
      }
      std::vector<Tensor*> params = b.policy().adapter_parameters();
      for (Tensor* t : b.policy().value_head().parameters()) params.push_back(t);
      ad::zero_grad(params);
      Graph g;
      Var logp = ad::pick(ad::log_softmax(b.policy().expert_logits(g, inputs, 0)), actions);
      Var policy_loss = clipped_surrogate(logp, old_logp, adv, c.algorithm.epsilon);
      Var v = b.policy().value(g, pooled);
      Var critic = ad::mean(ad::square(ad::sub(v, g.constant(targets))));
      g.backward(ad::add(policy_loss, ad::scale(critic, c.algorithm.value_coeff)));
      ad::clip_grad_norm(params, c.training.max_grad_norm);
      b.optimizer().step(params);
    }
    const auto ta = a.policy().named_tensors();
    const auto tb = b.policy().named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, max_abs(ta[i]->value, tb[i]->value));
  }
  return worst;
}

Outcome estimator_oracles() {
  std::mt19937_64 rng(99);
  double worst_gae = 0, worst_rloo = 0, worst_grpo = 0, worst_clip = 0;
  for (int c = 0; c < 1000; ++c) {
    const int T = 1 + static_cast<int>(rng() % 12);
    oracle::Vec r(static_cast<std::size_t>(T)), v(static_cast<std::size_t>(T + 1));
    for (double& x : r) x = oracle::uniform(rng, -1, 1);
    for (double& x : v) x = oracle::uniform(rng, -1, 1);
    const double gamma = oracle::uniform(rng, 0.8, 1.0), lambda = oracle::uniform(rng, 0.5, 1.0);
    const Vector got = gae_advantages<double>(Eigen::Map<Vector>(r.data(), T), Eigen::Map<Vector>(v.data(), T + 1),
                                              gamma, lambda);
    const oracle::Vec want = oracle::gae(r, v, gamma, lambda);
    for (int t = 0; t < T; ++t) worst_gae = std::max(worst_gae, std::abs(got(t) - want[static_cast<std::size_t>(t)]));

    const int n = 2 + static_cast<int>(rng() % 8);
    oracle::Vec ret(static_cast<std::size_t>(n));
    for (double& x : ret) x = rng() % 3 == 0 ? 0.0 : oracle::uniform(rng, -2, 2);
    const Vector rv = Eigen::Map<Vector>(ret.data(), n);
    const Vector lo = rloo_advantages<double>(rv);
    const oracle::Vec lo_w = oracle::rloo(ret);
    const bool standardize = c % 2 == 0;
    const Vector gr = grpo_advantages<double>(rv, standardize);
    const oracle::Vec gr_w = oracle::grpo(ret, standardize);
    for (int i = 0; i < n; ++i) {
      worst_rloo = std::max(worst_rloo, std::abs(lo(i) - lo_w[static_cast<std::size_t>(i)]));
      worst_grpo = std::max(worst_grpo, std::abs(gr(i) - gr_w[static_cast<std::size_t>(i)]));
    }

    oracle::Vec lp(static_cast<std::size_t>(T)), lq(static_cast<std::size_t>(T)), a(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
      lp[static_cast<std::size_t>(i)] = oracle::uniform(rng, -3, 0);
      lq[static_cast<std::size_t>(i)] = lp[static_cast<std::size_t>(i)] + oracle::uniform(rng, -0.5, 0.5);
      a[static_cast<std::size_t>(i)] = oracle::uniform(rng, -2, 2);
    }
    const double eps = oracle::uniform(rng, 0.05, 0.3);
    const oracle::Surrogate want_s = oracle::clipped_surrogate(lq, lp, a, eps);
    Tensor leaf("logp", Eigen::Map<Matrix>(lq.data(), T, 1), true);
    Graph g;
    Var loss = clipped_surrogate(g.param(leaf), Eigen::Map<Matrix>(lp.data(), T, 1), Eigen::Map<Matrix>(a.data(), T, 1), eps);
    g.backward(loss);
    worst_clip = std::max(worst_clip, std::abs(loss.scalar() - want_s.loss));
    for (int i = 0; i < T; ++i) worst_clip = std::max(worst_clip, std::abs(leaf.grad(i, 0) - want_s.grad[static_cast<std::size_t>(i)]));
  }
  const double ppo = ppo_equivalence();
  const bool ok = worst_gae <= 1e-10 && worst_rloo <= 1e-10 && worst_grpo <= 1e-10 && worst_clip <= 1e-10 && ppo <= 1e-12;
  return {ok, "max deviation over 1000 instances: gae " + fmt(worst_gae) + ", rloo " + fmt(worst_rloo) + ", grpo " +
                  fmt(worst_grpo) + ", clipped surrogate " + fmt(worst_clip) + "; K=1 vs reference ppo update " +
                  fmt(ppo)};
}

Outcome regularizer_closed_forms() {
  const double uniform_bal = balance_loss(Vector::Constant(4, 0.25));
  Vector one_hot = Vector::Zero(4);
  one_hot(0) = 1.0;
  const double peaked = balance_loss(one_hot);
  Graph g;
  Matrix pi(3, 5);
  pi << 0.1, 0.2, 0.3, 0.2, 0.2, 0.5, 0.1, 0.1, 0.1, 0.2, 0.96, 0.01, 0.01, 0.01, 0.01;
  Var p = g.constant(pi);
  const double div = diversity_loss({p, p}, 0.1).scalar();
  Vector q(5);
  q << 0.1, 0.2, 0.3, 0.2, 0.2;
  const double self_kl = ad::kl_divergence(q, q);
  const bool ok = std::abs(uniform_bal) < 1e-15 && std::abs(peaked - 0.75) < 1e-15 && std::abs(div - 0.2) < 1e-15 &&
                  self_kl == 0.0;
  return {ok, "balance(uniform)=" + fmt(uniform_bal) + " balance(one-hot)=" + fmt(peaked) + " diversity(identical)=" +
                  fmt(div) + " KL(p,p)=" + fmt(self_kl)};
}

Outcome metric_oracles() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  check(count_switches(std::vector<int>{0, 0, 1, 1, 2, 0}) == 3, "switch count");
  check(count_switches(std::vector<int>{2}) == 0, "switch count single step");
  check(intra_action_switches(std::vector<int>{1, 1, 1, 1}) == 0, "uniform tokens");
  check(intra_action_switches(std::vector<int>{1, 2, 1, 2}) == 3, "intra-action changes");
  check(token_to_step_switches({{0, 0, 0}, {0, 1, 0}, {2, 2, 2}, {3, 2, 2}}) == 2, "token-to-step");
  const OccupancyResult occ = parameter_occupancy({{3, 1}, {1, 1}, {0, 5}, {0, 0}, {2, 1}});
  check(occ.excluded == 1 && std::abs(occ.occupancy[0] - 0.5) < 1e-15 && std::abs(occ.occupancy[1] - 0.25) < 1e-15,
        "occupancy threshold");
  Vector g1(3), g2(3);
  g1 << 1, -2, 0.5;
  g2 = -g1;
  check(std::abs(gradient_conflict_score({g1, g2}) - 1.0) < 1e-15, "anti-parallel conflict");
  check(std::abs(gradient_conflict_score({g1, g1})) < 1e-15, "parallel conflict");
  const std::vector<PhaseSegment> segs = extract_phases(std::vector<int>{1, 1, 0, 0, 0, 1});
  check(segs == std::vector<PhaseSegment>{{1, 0, 1}, {0, 2, 4}, {1, 5, 5}}, "phase extraction");
  std::string detail = failed.empty() ? "all fixtures match" : "mismatch:";
  for (const auto& f : failed) detail += " " + f + ";";
  return {failed.empty(), detail};
}

// ----------------------------------------------------------- directional

struct ArmRuns {
  std::vector<const RunResult*> seeds;
  double mean(double (*f)(const RunResult&)) const {
    double s = 0.0;
    for (const RunResult* r : seeds) s += f(*r);
    return s / static_cast<double>(seeds.size());
  }
};

double success(const RunResult& r) { return r.eval.overall_success; }
double step_switches(const RunResult& r) { return r.mean_step_switches; }

std::string per_seed(const ArmRuns& arm, double (*f)(const RunResult&)) {
  std::string s = "[";
  for (std::size_t i = 0; i < arm.seeds.size(); ++i) s += (i ? " " : "") + fmt(f(*arm.seeds[i]), 3);
  return s + "]";
}

std::vector<Arm> directional_arms(const ExperimentConfig& base) {
  std::vector<Arm> arms;
  for (Arm& a : routing_arms(base)) arms.push_back(a);  // token, trajectory, phase
  for (Arm& a : ablation_arms(base, "surgery")) {
    if (a.name != "pamoe") arms.push_back(a);  // K0 and the three surgery arms
  }
  for (Arm& a : ablation_arms(base, "regularizers")) {
    if (a.name == "no_div" || a.name == "no_bal") arms.push_back(a);
  }
  return arms;
}

std::optional<double> dominant_entropy(const RunResult& r, Phase phase) {
  const auto dom = dominant_expert(r.eval.episodes, phase);
  if (!dom) return std::nullopt;
  return expert_phase_entropy(r.eval.episodes, *dom, phase);
}

void directional(const fs::path& out, bool verbose, std::vector<std::pair<std::string, Outcome>>& results) {
  const ExperimentConfig base{};
  BackboneCache cache;
  const std::vector<RunResult> runs = run_arms(out, directional_arms(base), base.training.seeds, cache, verbose);
  std::map<std::string, ArmRuns> by;
  for (const RunResult& r : runs) by[r.arm].seeds.push_back(&r);
  const ArmRuns& token = by["token"];
  const ArmRuns& traj = by["trajectory"];
  const ArmRuns& phase = by["phase"];
  const ArmRuns& k0 = by["K0"];

  {
    const double t = token.mean(step_switches), p = phase.mean(step_switches), j = traj.mean(step_switches);
    results.push_back({"8 switch ordering",
                       {t > p && p > j && t >= 3.0 * p,
                        "token " + fmt(t) + " > phase " + fmt(p) + " > trajectory " + fmt(j) + ", token/phase " +
                            fmt(t / std::max(p, 1e-12))}});
  }
  {
    double simple = 0.0, complex = 0.0;
    for (const RunResult* r : k0.seeds) {
      simple += r->group_occupancy.occupancy.at(0) / k0.seeds.size();
      complex += r->group_occupancy.occupancy.at(1) / k0.seeds.size();
    }
    Vector freq = Vector::Zero(base.adapters());
    std::string per;
    for (const RunResult* r : phase.seeds) {
      freq += r->hard_frequencies / static_cast<double>(phase.seeds.size());
      per += " " + fmt(r->hard_frequencies.maxCoeff() / std::max(r->hard_frequencies.minCoeff(), 1e-12), 3);
    }
    const double ratio = freq.maxCoeff() / std::max(freq.minCoeff(), 1e-12);
    const bool ok = simple >= 2.0 * complex && simple > 0.0 && ratio <= 2.0;
    std::ostringstream f;
    f << freq.transpose();
    results.push_back({"9 simplicity bias and balance",
                       {ok, "K0 occupancy simple " + fmt(simple) + " vs complex " + fmt(complex) +
                                "; pamoe activation " + f.str() + " max/min " + fmt(ratio) + " (per seed" + per + ")"}});
  }
  {
    bool ok = true;
    std::string d;
    for (std::size_t i = 0; i < phase.seeds.size(); ++i) {
      const auto a = phase.seeds[i]->final_third_conflict();
      const auto b = k0.seeds[i]->final_third_conflict();
      ok = ok && a && b && *a < *b;
      d += "seed " + std::to_string(phase.seeds[i]->seed) + ": pamoe " + (a ? fmt(*a) : "n/a") + " vs K0 " +
           (b ? fmt(*b) : "n/a") + "; ";
    }
    results.push_back({"10 conflict reduction", {ok, d}});
  }
  {
    const double p = phase.mean(success), z = k0.mean(success), t = token.mean(success);
    results.push_back({"11 method benefit",
                       {p > z && p > t, "success pamoe " + fmt(p) + " " + per_seed(phase, success) + ", K0 " + fmt(z) +
                                            " " + per_seed(k0, success) + ", token " + fmt(t) + " " +
                                            per_seed(token, success)}});
  }
  {
    const ArmRuns& nd = by["no_div"];
    const ArmRuns& nb = by["no_bal"];
    auto collapse = [](const RunResult& r) { return r.eval.kl_collapse_fraction; };
    const double nd_c = nd.mean(collapse), full_c = phase.mean(collapse);
    int peaked = 0;
    std::string maxf;
    for (const RunResult* r : nb.seeds) {
      const double m = r->hard_frequencies.maxCoeff();
      peaked += m > 0.6 ? 1 : 0;
      maxf += " " + fmt(m, 3);
    }
    const bool ok = nd_c > 0.5 && nd_c > full_c && peaked >= 2;
    results.push_back({"12 regularizer necessity",
                       {ok, "no_div KL collapse " + fmt(nd_c) + " vs full " + fmt(full_c) + "; no_bal max frequency" +
                                maxf + " (" + std::to_string(peaked) + " seeds > 0.6)"}});
  }
  {
    bool ok = true;
    std::string d;
    for (const RunResult* r : phase.seeds) {
      const auto m = dominant_entropy(*r, Phase::Manipulate);
      const auto e = dominant_entropy(*r, Phase::Explore);
      ok = ok && m && e && *m < *e;
      const auto dm = dominant_expert(r->eval.episodes, Phase::Manipulate);
      const auto de = dominant_expert(r->eval.episodes, Phase::Explore);
      d += "seed " + std::to_string(r->seed) + ": manipulate expert " + (dm ? std::to_string(*dm) : "-") + " " +
           (m ? fmt(*m) : "n/a") + " bits vs explore expert " + (de ? std::to_string(*de) : "-") + " " +
           (e ? fmt(*e) : "n/a") + " bits; ";
      for (const PhaseEntropy& s : phase_entropy_stats(r->eval.episodes, PhaseSource::Oracle)) {
        if (s.phase == static_cast<int>(Phase::Manipulate) || s.phase == static_cast<int>(Phase::Explore)) {
          d += std::string(phase_name(static_cast<Phase>(s.phase))) + " variance " + fmt(s.variance, 3) +
               (s.variance < 0.18 ? " (<0.18) " : " (>=0.18) ");
        }
      }
    }
    results.push_back({"13 entropy specialization", {ok, d}});
  }
  {
    const double z = k0.mean(success);
    const double gain = phase.mean(success) - z;
    double best = -1e9;
    std::string d;
    for (const char* name : {"K0_pcgrad", "K0_gradnorm", "K0_cagrad"}) {
      const double g = by[name].mean(success) - z;
      best = std::max(best, g);
      d += std::string(name) + " " + fmt(g) + " " + per_seed(by[name], success) + "; ";
    }
    results.push_back({"14 surgery comparison", {gain > best, "pamoe gain " + fmt(gain) + " vs " + d}});
  }
  if (verbose) {
    for (const auto& [name, arm] : by) {
      std::cerr << std::left << std::setw(14) << name << " success " << per_seed(arm, success) << " switches "
                << per_seed(arm, step_switches) << '\n';
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  bool exact = true, dir = true, verbose = false;
  fs::path out = fs::temp_directory_path() / "pamoe-acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--exact-only") dir = false;
    else if (a == "--directional-only") exact = false;
    else if (a == "--verbose") verbose = true;
    else if (a == "--out" && i + 1 < argc) out = argv[++i];
    else {
      std::cerr << "usage: acceptance [--exact-only | --directional-only] [--out DIR] [--verbose]\n";
      return 2;
    }
  }
  std::vector<std::pair<std::string, Outcome>> results;
  if (exact) {
    results.push_back({"1 gradient isolation", gradient_isolation()});
    results.push_back({"2 autodiff finite differences", autodiff_fd()});
    results.push_back({"3 switching penalty closed form", switching_closed_form()});
    results.push_back({"4 temperature schedule", temperature_schedule()});
    results.push_back({"5 estimator oracles", estimator_oracles()});
    results.push_back({"6 regularizer closed forms", regularizer_closed_forms()});
    results.push_back({"7 metric oracles", metric_oracles()});
    for (const auto& [name, o] : results) {
      std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    }
  }
  if (dir) {
    const std::size_t before = results.size();
    directional(out, verbose, results);
    for (std::size_t i = before; i < results.size(); ++i) {
      std::cout << (results[i].second.pass ? "PASS " : "FAIL ") << results[i].first << ": " << results[i].second.detail
                << std::endl;
    }
  }
  const bool all = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  return all ? 0 : 1;
}
