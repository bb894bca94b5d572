// SPDX-License-Identifier: Apache-2.0
#include "pamoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "pamoe/advantages.hpp"
#include "pamoe/ops.hpp"

namespace pamoe {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Tensor;
using ad::Var;
using ad::Vector;

double TrajectoryRecord::episode_return() const {
  return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

namespace {

bool uses_router(RoutingMode m) { return m == RoutingMode::Phase || m == RoutingMode::Trajectory; }
bool uses_token_router(RoutingMode m) { return m == RoutingMode::Token || m == RoutingMode::TokenTop2; }

// Most frequent entry (ties to the lower index).
int majority(const std::vector<int>& xs, int k) {
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int x : xs) ++counts[static_cast<std::size_t>(x)];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::array<int, 2> top2(const Eigen::Ref<const ad::RowVector>& p) {
  const int first = static_cast<int>(argmax_lowest(p));
  int second = first == 0 ? 1 : 0;
  for (Index k = 0; k < p.size(); ++k) {
    if (k != first && p(k) > p(second)) second = static_cast<int>(k);
  }
  return {first, second};
}

// Router input rows for step t of a trajectory, history rebuilt from the
// record exactly as RouterState would hold it.
void fill_router_row(const TrajectoryRecord& r, int t, int window, RouterBatch& b, Index row) {
  b.obs_encoding.row(row) = r.obs_encoding.row(t);
  for (std::size_t j = 0; j < b.goal_encodings.size(); ++j) b.goal_encodings[j].row(row) = r.goal_encodings[j].row(t);
  for (int s = 0; s < window; ++s) {
    const int src = t - window + s;
    if (src < 0) {
      b.history_actions(row, s) = -1;
      b.history_obs[static_cast<std::size_t>(s)].row(row).setZero();
    } else {
      b.history_actions(row, s) = r.actions[static_cast<std::size_t>(src)];
      b.history_obs[static_cast<std::size_t>(s)].row(row) = r.obs_embedding.row(src);
    }
  }
}

Vector flatten_grads(const std::vector<Tensor*>& params) {
  Index n = 0;
  for (const Tensor* t : params) n += t->size();
  Vector out(n);
  Index at = 0;
  for (const Tensor* t : params) {
    out.segment(at, t->size()) = Eigen::Map<const Vector>(t->grad.data(), t->size());
    at += t->size();
  }
  return out;
}

void write_grads(const std::vector<Tensor*>& params, const Vector& flat) {
  Index at = 0;
  for (Tensor* t : params) {
    t->grad = Eigen::Map<const Matrix>(flat.data() + at, t->rows(), t->cols());
    t->touched = true;
    at += t->size();
  }
}

}  // namespace

std::vector<Matrix> warm_backbone(const ExperimentConfig& config, std::uint64_t seed) {
  PolicyConfig pc = config.policy;
  pc.num_experts = 1;
  MoEPolicy policy(PhasedGridWorld(config.environment).spec(), pc, seed);
  warmup_backbone(policy, config.environment, config.training.warmup, seed);
  std::vector<Matrix> out;
  for (Tensor* t : policy.backbone().parameters()) out.push_back(t->value);
  return out;
}

Trainer::Trainer(const ExperimentConfig& config, std::uint64_t seed, const std::vector<Matrix>* backbone_values)
    : config_(config),
      seed_(seed),
      buffer_(config.adapters(), config.algorithm.buffer_cap),
      adam_({config.training.lr, 0.9, 0.999, 1e-8}),
      rollout_rng_(make_rng(seed, "rollout")),
      update_rng_(make_rng(seed, "update")) {
  config_.policy.num_experts = config_.adapters();
  config_.router.num_experts = config_.adapters();
  validate(config_);
  const EnvSpec spec = PhasedGridWorld(config_.environment).spec();
  policy_ = std::make_unique<MoEPolicy>(spec, config_.policy, seed);
  std::vector<Tensor*> bb = policy_->backbone().parameters();
  if (backbone_values != nullptr) {
    if (backbone_values->size() != bb.size()) throw ShapeError("Trainer: backbone cache does not match");
    for (std::size_t i = 0; i < bb.size(); ++i) {
      if ((*backbone_values)[i].rows() != bb[i]->rows() || (*backbone_values)[i].cols() != bb[i]->cols()) {
        throw ShapeError("Trainer: backbone cache shape mismatch");
      }
      bb[i]->value = (*backbone_values)[i];
    }
  } else {
    warmup_backbone(*policy_, config_.environment, config_.training.warmup, seed);
  }
  if (uses_router(config_.routing)) {
    router_ = std::make_unique<RouterParams>(config_.router, config_.policy.d_model, spec.num_actions, seed);
  }
  if (uses_token_router(config_.routing)) {
    token_router_ = std::make_unique<TokenRouterParams>(config_.policy.d_model, config_.experts,
                                                        config_.baselines.micro_tokens,
                                                        config_.baselines.token_router_hidden, seed);
  }
  calibrate_router_inputs();
}

double Trainer::temperature() const {
  return anneal_temperature(config_.router.schedule, static_cast<double>(env_steps_));
}

std::vector<Tensor*> Trainer::trainable() {
  std::vector<Tensor*> out = policy_->adapter_parameters();
  if (router_) {
    for (Tensor* t : router_->parameters()) out.push_back(t);
  }
  if (token_router_) {
    for (Tensor* t : token_router_->parameters()) out.push_back(t);
  }
  if (config_.algorithm.tag == Algorithm::PPO) {
    for (Tensor* t : policy_->value_head().parameters()) out.push_back(t);
  }
  return out;
}

void Trainer::calibrate_router_inputs() {
  if (!router_ && !token_router_) return;
  constexpr int kEpisodes = 8;
  PhasedGridWorld env(config_.environment);
  Rng rng = make_rng(seed_, "calibration");
  std::vector<Vector> obs, goals, hist, pooled;
  for (int e = 0; e < kEpisodes; ++e) {
    env.reset(derive_seed(seed_, "calibration-env", static_cast<std::uint64_t>(e)),
              derive_seed(seed_, "calibration-fault", static_cast<std::uint64_t>(e)));
    while (!env.done()) {
      TokenBatch tb;
      tb.append(env.observation(), env.goal());
      BaseFeatures f = policy_->base_features(tb);
      obs.push_back(f.obs_encoding.row(0).transpose());
      for (const Matrix& g : f.goal_encodings) goals.push_back(g.row(0).transpose());
      hist.push_back(f.obs_embedding.row(0).transpose());
      pooled.push_back(f.pooled.row(0).transpose());
      Graph g(false);
      const Vector probs = ad::softmax_rows(policy_->forward(g, tb, nullptr).logits.value()).row(0).transpose();
      env.step(sample_action({probs}, rng).action);
    }
  }
  auto stack = [](const std::vector<Vector>& rows) {
    Matrix m(static_cast<Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
    return m;
  };
  if (router_) router_->fit_input_statistics(stack(obs), stack(goals), stack(hist));
  if (token_router_) {
    const Matrix p = stack(pooled);
    const ad::RowVector mean = p.colwise().mean();
    const ad::RowVector var = (p.rowwise() - mean).array().square().colwise().mean();
    token_router_->input_shift.value = mean;
    token_router_->input_scale.value = (var.array() + 1e-6).sqrt().matrix();
  }
}

Trainer::Decision Trainer::decide(std::vector<LiveEpisode*>& live, double tau) {
  Decision d;
  const Index n = static_cast<Index>(live.size());
  const int K = config_.adapters();
  const int m = config_.baselines.micro_tokens;
  for (LiveEpisode* e : live) d.inputs.append(e->env->observation(), e->env->goal());
  d.features = policy_->base_features(d.inputs);
  d.z.assign(static_cast<std::size_t>(n), 0);
  d.p = Matrix::Ones(n, K) / static_cast<double>(K);

  switch (config_.routing) {
    case RoutingMode::Phase: {
      RouterBatch rb = make_router_batch(*router_, n, static_cast<int>(d.features.goal_encodings.size()));
      rb.obs_encoding = d.features.obs_encoding;
      rb.goal_encodings = d.features.goal_encodings;
      for (Index i = 0; i < n; ++i) live[static_cast<std::size_t>(i)]->state.fill(rb, i);
      const auto outs = route_batch(*router_, rb, tau);
      for (Index i = 0; i < n; ++i) {
        d.z[static_cast<std::size_t>(i)] = outs[static_cast<std::size_t>(i)].z;
        d.p.row(i) = outs[static_cast<std::size_t>(i)].p.transpose();
      }
      break;
    }
    case RoutingMode::Trajectory: {
      for (Index i = 0; i < n; ++i) {
        LiveEpisode* e = live[static_cast<std::size_t>(i)];
        const bool fault = e->env->fault_active();
        if (config_.baselines.trajectory_reroute_on_fault && fault && !e->faulted) e->fixed_z = -1;
        e->faulted = fault;
        if (e->fixed_z < 0) {
          std::vector<Vector> goals;
          for (const Matrix& g : d.features.goal_encodings) goals.push_back(g.row(i).transpose());
          const RouterOutput out =
              route_trajectory_level(*router_, d.features.obs_encoding.row(i).transpose(), goals, tau);
          e->fixed_z = out.z;
          e->fixed_p = out.p;
        }
        d.z[static_cast<std::size_t>(i)] = e->fixed_z;
        d.p.row(i) = e->fixed_p.transpose();
      }
      break;
    }
    case RoutingMode::Token:
    case RoutingMode::TokenTop2: {
      Graph g(false);
      const Matrix pt = ad::softmax_rows(token_router_logits(g, *token_router_, d.features.pooled).value(), tau);
      d.token_z.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(m)));
      d.token_z2 = d.token_z;
      for (Index i = 0; i < n; ++i) {
        ad::RowVector mean_p = ad::RowVector::Zero(K);
        for (int j = 0; j < m; ++j) {
          const auto best = top2(pt.row(i * m + j));
          d.token_z[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = best[0];
          d.token_z2[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = best[1];
          mean_p += pt.row(i * m + j);
        }
        d.p.row(i) = mean_p / static_cast<double>(m);
        d.z[static_cast<std::size_t>(i)] = majority(d.token_z[static_cast<std::size_t>(i)], K);
      }
      break;
    }
    case RoutingMode::None:
      break;
  }

  const int A = policy_->num_actions();
  if (uses_token_router(config_.routing)) {
    const bool pair = config_.routing == RoutingMode::TokenTop2;
    Matrix coef = Matrix::Zero(n, K);
    for (Index i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        if (pair) {
          coef(i, d.token_z[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) += 0.5 / m;
          coef(i, d.token_z2[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) += 0.5 / m;
        } else {
          coef(i, d.token_z[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) += 1.0 / m;
        }
      }
    }
    Matrix mixed = Matrix::Zero(n, A);
    for (int k = 0; k < K; ++k) {
      std::vector<Index> rows;
      for (Index i = 0; i < n; ++i) {
        if (coef(i, k) > 0.0) rows.push_back(i);
      }
      if (rows.empty()) continue;
      Graph g(false);
      const Matrix lg = policy_->expert_logits(g, d.inputs.select(rows), k).value();
      for (std::size_t r = 0; r < rows.size(); ++r) mixed.row(rows[r]) += coef(rows[r], k) * lg.row(static_cast<Index>(r));
    }
    d.probs = ad::softmax_rows(mixed);
  } else {
    d.probs.resize(n, A);
    for (int k = 0; k < K; ++k) {
      std::vector<Index> rows;
      for (Index i = 0; i < n; ++i) {
        if (d.z[static_cast<std::size_t>(i)] == k) rows.push_back(i);
      }
      if (rows.empty()) continue;
      const Matrix probs = policy_->expert_probs(d.inputs.select(rows), k);
      for (std::size_t r = 0; r < rows.size(); ++r) d.probs.row(rows[r]) = probs.row(static_cast<Index>(r));
    }
  }
  return d;
}

std::vector<TrajectoryRecord> Trainer::collect_batch() {
  const int G = config_.training.groups_per_batch;
  const int n = config_.algorithm.n_group;
  const int K = config_.adapters();
  const double tau = temperature();
  std::vector<LiveEpisode> live(static_cast<std::size_t>(G * n));
  std::vector<TrajectoryRecord> records(live.size());
  for (int g = 0; g < G; ++g) {
    const std::uint64_t group_index = static_cast<std::uint64_t>(batches_) * static_cast<std::uint64_t>(G) +
                                      static_cast<std::uint64_t>(g);
    const std::uint64_t reset_seed = derive_seed(seed_, "env", group_index);
    for (int i = 0; i < n; ++i) {
      const std::size_t idx = static_cast<std::size_t>(g * n + i);
      live[idx].env = std::make_unique<PhasedGridWorld>(config_.environment);
      live[idx].env->reset(reset_seed, derive_seed(seed_, "fault", group_index * static_cast<std::uint64_t>(n) +
                                                                      static_cast<std::uint64_t>(i)));
      live[idx].state.reset(config_.router.history);
      records[idx].group = g;
      records[idx].reset_seed = reset_seed;
      records[idx].category = live[idx].env->goal().category;
    }
  }

  std::vector<std::vector<Vector>> pooled(live.size()), obs_enc(live.size()), obs_emb(live.size());
  std::vector<std::vector<std::vector<Vector>>> goal_enc(live.size());
  std::vector<std::vector<Vector>> route_p(live.size());
  for (;;) {
    std::vector<LiveEpisode*> active;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < live.size(); ++i) {
      if (!live[i].env->done()) {
        active.push_back(&live[i]);
        ids.push_back(i);
      }
    }
    if (active.empty()) break;
    Decision d = decide(active, tau);
    Matrix values;
    if (config_.algorithm.tag == Algorithm::PPO) {
      Graph g(false);
      values = policy_->value(g, d.features.pooled).value();
    }
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Index row = static_cast<Index>(a);
      TrajectoryRecord& r = records[ids[a]];
      PhasedGridWorld& env = *active[a]->env;
      const Vector probs = d.probs.row(row).transpose();
      const SampledAction s = sample_action({probs}, rollout_rng_);
      r.inputs.append_sample(d.inputs, static_cast<int>(a));
      r.phases.push_back(static_cast<int>(env.oracle_phase()));
      r.fingerprints.push_back(env.fingerprint());
      r.actions.push_back(s.action);
      r.old_logp.push_back(s.log_prob);
      r.entropy.push_back(policy_entropy(probs));
      r.z.push_back(d.z[a]);
      route_p[ids[a]].push_back(d.p.row(row).transpose());
      if (!d.token_z.empty()) {
        r.token_experts.push_back(d.token_z[a]);
        if (config_.routing == RoutingMode::TokenTop2) {
          auto both = d.token_z[a];
          both.insert(both.end(), d.token_z2[a].begin(), d.token_z2[a].end());
          r.token_experts.back() = both;
        }
      }
      if (values.size() > 0) r.values.push_back(values(row, 0));
      pooled[ids[a]].push_back(d.features.pooled.row(row).transpose());
      obs_enc[ids[a]].push_back(d.features.obs_encoding.row(row).transpose());
      obs_emb[ids[a]].push_back(d.features.obs_embedding.row(row).transpose());
      std::vector<Vector> goals;
      for (const Matrix& gm : d.features.goal_encodings) goals.push_back(gm.row(row).transpose());
      goal_enc[ids[a]].push_back(std::move(goals));

      std::vector<TokenCodes> tokens(d.inputs.tokens.begin() + static_cast<std::ptrdiff_t>(a) * d.inputs.tokens_per_sample,
                                     d.inputs.tokens.begin() + static_cast<std::ptrdiff_t>(a + 1) * d.inputs.tokens_per_sample);
      buffer_.push(d.z[a], std::move(tokens), probs.array().max(1e-12).log().matrix());

      const StepResult res = env.step(s.action);
      r.rewards.push_back(res.reward);
      if (res.done) r.success = res.success;
      active[a]->state.push(s.action, d.features.obs_embedding.row(row).transpose());
      ++env_steps_;
    }
  }

  const int d_model = config_.policy.d_model;
  auto stack = [d_model](const std::vector<Vector>& rows) {
    Matrix m(static_cast<Index>(rows.size()), d_model);
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
    return m;
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    TrajectoryRecord& r = records[i];
    r.pooled = stack(pooled[i]);
    r.obs_encoding = stack(obs_enc[i]);
    r.obs_embedding = stack(obs_emb[i]);
    r.p.resize(r.length(), K);
    for (int t = 0; t < r.length(); ++t) r.p.row(t) = route_p[i][static_cast<std::size_t>(t)].transpose();
    const std::size_t goals = goal_enc[i].empty() ? 0 : goal_enc[i].front().size();
    r.goal_encodings.assign(goals, Matrix(r.length(), d_model));
    for (int t = 0; t < r.length(); ++t) {
      for (std::size_t j = 0; j < goals; ++j) r.goal_encodings[j].row(t) = goal_enc[i][static_cast<std::size_t>(t)][j].transpose();
    }
  }
  ++batches_;
  return records;
}

void Trainer::compute_advantages(std::vector<TrajectoryRecord>& batch) const {
  const AlgorithmConfig& a = config_.algorithm;
  if (a.tag == Algorithm::PPO) {
    for (TrajectoryRecord& r : batch) {
      const Index T = r.length();
      Vector rewards = Eigen::Map<const Vector>(r.rewards.data(), T);
      Vector values(T + 1);
      values.head(T) = Eigen::Map<const Vector>(r.values.data(), T);
      values(T) = 0.0;
      const Vector adv = gae_advantages<double>(rewards, values, a.gae_gamma, a.gae_lambda);
      r.advantages.assign(adv.data(), adv.data() + T);
      r.value_targets.resize(static_cast<std::size_t>(T));
      for (Index t = 0; t < T; ++t) r.value_targets[static_cast<std::size_t>(t)] = adv(t) + values(t);
    }
    return;
  }
  std::map<int, std::vector<TrajectoryRecord*>> groups;
  for (TrajectoryRecord& r : batch) groups[r.group].push_back(&r);
  for (auto& [id, members] : groups) {
    if (a.tag == Algorithm::GiGPO) {
      std::vector<GroupTrajectory> gt;
      for (const TrajectoryRecord* r : members) gt.push_back({r->rewards, r->fingerprints});
      const auto adv = gigpo_group_advantages(gt, a.standardize);
      for (std::size_t i = 0; i < members.size(); ++i) members[i]->advantages = adv[i];
      continue;
    }
    Vector returns(static_cast<Index>(members.size()));
    for (std::size_t i = 0; i < members.size(); ++i) returns(static_cast<Index>(i)) = members[i]->episode_return();
    const Vector adv = a.tag == Algorithm::RLOO ? rloo_advantages<double>(returns)
                                                : grpo_advantages<double>(returns, a.standardize);
    for (std::size_t i = 0; i < members.size(); ++i) {
      members[i]->advantages.assign(static_cast<std::size_t>(members[i]->length()), adv(static_cast<Index>(i)));
    }
  }
}

Minibatch Trainer::make_minibatch(const std::vector<const TrajectoryRecord*>& trajectories) const {
  Minibatch mb;
  mb.trajectories = trajectories;
  Index N = 0;
  for (const TrajectoryRecord* r : trajectories) {
    mb.offsets.push_back(N);
    N += r->length();
  }
  const int d = config_.policy.d_model;
  const int m = config_.baselines.micro_tokens;
  mb.old_logp.resize(N, 1);
  mb.advantages.resize(N, 1);
  mb.value_targets = Matrix::Zero(N, 1);
  mb.pooled.resize(N, d);
  mb.inputs.tokens_per_sample = trajectories.empty() ? 0 : trajectories.front()->inputs.tokens_per_sample;
  if (router_) {
    const int goals = trajectories.empty() ? 0 : static_cast<int>(trajectories.front()->goal_encodings.size());
    const Index rows = config_.routing == RoutingMode::Trajectory ? static_cast<Index>(trajectories.size()) : N;
    mb.router = make_router_batch(*router_, rows, goals);
  }
  Index row = 0;
  for (std::size_t ti = 0; ti < trajectories.size(); ++ti) {
    const TrajectoryRecord& r = *trajectories[ti];
    if (static_cast<int>(r.advantages.size()) != r.length()) throw UsageError("make_minibatch: advantages missing");
    mb.inputs.tokens.insert(mb.inputs.tokens.end(), r.inputs.tokens.begin(), r.inputs.tokens.end());
    if (mb.router && config_.routing == RoutingMode::Trajectory) {
      fill_router_row(r, 0, config_.router.history, *mb.router, static_cast<Index>(ti));
    }
    for (int t = 0; t < r.length(); ++t, ++row) {
      const std::size_t st = static_cast<std::size_t>(t);
      mb.actions.push_back(r.actions[st]);
      mb.old_logp(row, 0) = r.old_logp[st];
      mb.advantages(row, 0) = r.advantages[st];
      if (!r.value_targets.empty()) mb.value_targets(row, 0) = r.value_targets[st];
      mb.pooled.row(row) = r.pooled.row(t);
      mb.z.push_back(r.z[st]);
      mb.phases.push_back(r.phases[st]);
      mb.categories.push_back(static_cast<int>(r.category));
      mb.trajectory_of_row.push_back(static_cast<Index>(ti));
      if (!r.token_experts.empty()) {
        for (int j = 0; j < m; ++j) mb.token_z.push_back(r.token_experts[st][static_cast<std::size_t>(j)]);
        if (config_.routing == RoutingMode::TokenTop2) {
          for (int j = 0; j < m; ++j) mb.token_z2.push_back(r.token_experts[st][static_cast<std::size_t>(m + j)]);
        }
      }
      if (mb.router && config_.routing == RoutingMode::Phase) {
        fill_router_row(r, t, config_.router.history, *mb.router, row);
      }
    }
  }
  return mb;
}

Var Trainer::weighted_terms(Graph& g, const Minibatch& mb, double tau, Var* p_out, Var* token_p_out) {
  const Index N = mb.rows();
  const int K = config_.adapters();
  const int A = policy_->num_actions();

  if (uses_token_router(config_.routing)) {
    const int m = config_.baselines.micro_tokens;
    Var pt = ad::softmax_temperature(token_router_logits(g, *token_router_, mb.pooled), tau);
    if (token_p_out != nullptr) *token_p_out = pt;
    const bool pair = config_.routing == RoutingMode::TokenTop2;
    Var st1 = ad::straight_through(pt, mb.token_z);
    Var st2 = pair ? ad::straight_through(pt, mb.token_z2) : Var{};
    Var mixed;
    for (int k = 0; k < K; ++k) {
      Matrix mask1 = Matrix::Zero(N * m, 1);
      Matrix mask2 = Matrix::Zero(N * m, 1);
      for (Index i = 0; i < N * m; ++i) {
        mask1(i, 0) = mb.token_z[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0;
        if (pair) mask2(i, 0) = mb.token_z2[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0;
      }
      if (!mask1.any() && !mask2.any()) continue;
      Var coef = ad::segment_mean(ad::mul(st1, g.constant(mask1)), m);
      if (pair) {
        coef = ad::scale(ad::add(coef, ad::segment_mean(ad::mul(st2, g.constant(mask2)), m)), 0.5);
      }
      std::vector<Index> rows;
      for (Index i = 0; i < N; ++i) {
        if (coef.value()(i, 0) > 0.0) rows.push_back(i);
      }
      Var logits = ad::scatter_rows(policy_->expert_logits(g, mb.inputs.select(rows), k), rows, N);
      Var part = ad::mul_col(logits, coef);
      mixed = mixed.valid() ? ad::add(mixed, part) : part;
    }
    Var logp = ad::pick(ad::log_softmax(mixed), mb.actions);
    return clipped_surrogate_terms(logp, mb.old_logp, mb.advantages, config_.algorithm.epsilon);
  }

  Var logp;
  for (int k = 0; k < K; ++k) {
    std::vector<Index> rows;
    for (Index i = 0; i < N; ++i) {
      if (mb.z[static_cast<std::size_t>(i)] == k) rows.push_back(i);
    }
    if (rows.empty()) continue;
    std::vector<Index> acts;
    for (Index i : rows) acts.push_back(mb.actions[static_cast<std::size_t>(i)]);
    Var lp = ad::pick(ad::log_softmax(policy_->expert_logits(g, mb.inputs.select(rows), k)), acts);
    Var placed = ad::scatter_rows(lp, rows, N);
    logp = logp.valid() ? ad::add(logp, placed) : placed;
  }
  (void)A;
  Var terms = clipped_surrogate_terms(logp, mb.old_logp, mb.advantages, config_.algorithm.epsilon);
  if (!router_) return terms;

  Var p = ad::softmax_temperature(router_logits(g, *router_, *mb.router), tau);
  if (p_out != nullptr) *p_out = p;
  Var w;
  if (config_.routing == RoutingMode::Phase) {
    w = ad::straight_through(p, mb.z);
  } else {
    std::vector<Index> first;
    for (const TrajectoryRecord* r : mb.trajectories) first.push_back(r->z.front());
    w = ad::gather_rows(ad::straight_through(p, first), mb.trajectory_of_row);
  }
  return ad::mul(terms, w);
}

Var Trainer::value_loss(Graph& g, const Minibatch& mb) {
  Var v = policy_->value(g, mb.pooled);
  return ad::mean(ad::square(ad::sub(v, g.constant(mb.value_targets))));
}

Var Trainer::diversity_term(Graph& g) {
  const std::size_t want = static_cast<std::size_t>(config_.algorithm.div_sample);
  const auto sample = buffer_.sample(want, update_rng_);
  if (sample.empty()) return {};
  if (sample.size() < want) {
    std::cerr << "warning: diversity loss on " << sample.size() << " buffered states (wanted " << want << ")\n";
  }
  TokenBatch tb;
  for (const ExpertBuffer::Entry* e : sample) {
    if (tb.tokens_per_sample == 0) tb.tokens_per_sample = static_cast<int>(e->tokens.size());
    tb.tokens.insert(tb.tokens.end(), e->tokens.begin(), e->tokens.end());
  }
  std::vector<Var> probs;
  for (int k = 0; k < config_.adapters(); ++k) {
    probs.push_back(ad::softmax_temperature(policy_->expert_logits(g, tb, k), 1.0));
  }
  return diversity_loss(probs, config_.algorithm.tau_div);
}

double Trainer::diversity_value(std::size_t states) {
  if (config_.adapters() < 2) return 0.0;
  Graph g(false);
  const int saved = config_.algorithm.div_sample;
  config_.algorithm.div_sample = static_cast<int>(states);
  Var v = diversity_term(g);
  config_.algorithm.div_sample = saved;
  return v.valid() ? v.scalar() : 0.0;
}

Var Trainer::compose_loss(Graph& g, const Minibatch& mb, bool diversity_step, LossBreakdown& parts, Var& terms) {
  const AlgorithmConfig& a = config_.algorithm;
  const double tau = temperature();
  Var p;
  Var token_p;
  terms = weighted_terms(g, mb, tau, &p, &token_p);
  Var total = ad::mean(terms);
  if (a.tag == Algorithm::PPO) total = ad::add(total, ad::scale(value_loss(g, mb), a.value_coeff));
  parts.l_rl = total.scalar();

  Var routing_p = p.valid() ? p : token_p;
  if (routing_p.valid()) {
    Var bal = balance_loss(ad::mean_pool(routing_p));
    parts.l_bal = bal.scalar();
    total = ad::add(total, ad::scale(bal, a.beta));
  }
  if (config_.routing == RoutingMode::Phase) {
    Var sw;
    for (std::size_t ti = 0; ti < mb.trajectories.size(); ++ti) {
      const Index start = mb.offsets[ti];
      const Index len = mb.trajectories[ti]->length();
      std::vector<Index> rows(static_cast<std::size_t>(len));
      std::iota(rows.begin(), rows.end(), start);
      std::vector<Index> z(mb.z.begin() + start, mb.z.begin() + start + len);
      Var s = switching_penalty(ad::gather_rows(p, rows), z, config_.router.lambda_s);
      sw = sw.valid() ? ad::add(sw, s) : s;
    }
    sw = ad::scale(sw, 1.0 / static_cast<double>(mb.trajectories.size()));
    parts.l_switch = sw.scalar();
    total = ad::add(total, ad::scale(sw, a.gamma_coeff));
  }
  if (diversity_step && config_.adapters() >= 2 && a.alpha != 0.0) {
    Var div = diversity_term(g);
    if (div.valid()) {
      parts.l_div = div.scalar();
      total = ad::add(total, ad::scale(div, a.alpha));
    }
  }
  parts.total = total.scalar();
  return total;
}

void Trainer::surgery_gradients(const Minibatch& mb, double tau, LossBreakdown& parts, Var& terms_out,
                                std::unique_ptr<Graph>& keep) {
  std::vector<Tensor*> adapters = policy_->adapter_parameters();
  std::vector<Tensor*> params = trainable();
  const Index N = mb.rows();
  std::vector<int> present;
  for (int ph = 0; ph < kNumPhases; ++ph) {
    if (std::find(mb.phases.begin(), mb.phases.end(), ph) != mb.phases.end()) present.push_back(ph);
  }
  std::vector<Vector> grads;
  std::vector<double> losses;
  for (int ph : present) {
    ad::zero_grad(params);
    Graph g;
    Var terms = weighted_terms(g, mb, tau);
    std::vector<Index> rows;
    for (Index i = 0; i < N; ++i) {
      if (mb.phases[static_cast<std::size_t>(i)] == ph) rows.push_back(i);
    }
    Var loss = ad::scale(ad::sum(ad::gather_rows(terms, rows)), 1.0 / static_cast<double>(N));
    g.backward(loss);
    grads.push_back(flatten_grads(adapters));
    losses.push_back(loss.scalar());
  }
  Vector combined;
  const std::size_t P = grads.size();
  switch (config_.surgery) {
    case SurgeryMode::PCGrad:
      combined = pcgrad_combine(grads);
      break;
    case SurgeryMode::CAGrad:
      // Rescaled to the summed-loss convention of the other arms.
      combined = cagrad_combine(grads, config_.baselines.cagrad_c) * static_cast<double>(P);
      break;
    case SurgeryMode::GradNorm: {
      Vector w(static_cast<Index>(P)), l(static_cast<Index>(P)), l0(static_cast<Index>(P)), norms(static_cast<Index>(P));
      combined = Vector::Zero(grads.front().size());
      for (std::size_t i = 0; i < P; ++i) {
        const auto ph = static_cast<std::size_t>(present[i]);
        const double magnitude = std::max(std::abs(losses[i]), 1e-8);
        if (!gradnorm_.seen[ph]) {
          gradnorm_.seen[ph] = true;
          gradnorm_.initial[ph] = magnitude;
        }
        w(static_cast<Index>(i)) = gradnorm_.weights[ph];
        l(static_cast<Index>(i)) = magnitude;
        l0(static_cast<Index>(i)) = gradnorm_.initial[ph];
        norms(static_cast<Index>(i)) = std::max(grads[i].norm(), 1e-12);
        combined += gradnorm_.weights[ph] * grads[i];
      }
      if (P >= 2) {
        const Vector updated = gradnorm_weights(w, l, l0, norms, config_.baselines.gradnorm_asymmetry,
                                                config_.baselines.gradnorm_lr);
        for (std::size_t i = 0; i < P; ++i) gradnorm_.weights[static_cast<std::size_t>(present[i])] = updated(static_cast<Index>(i));
      }
      break;
    }
    case SurgeryMode::Off:
      throw UsageError("surgery_gradients called with surgery off");
  }
  ad::zero_grad(params);
  write_grads(adapters, combined);
  parts.l_rl = std::accumulate(losses.begin(), losses.end(), 0.0);

  keep = std::make_unique<Graph>();
  terms_out = weighted_terms(*keep, mb, tau);
  if (config_.algorithm.tag == Algorithm::PPO) {
    Var v = ad::scale(value_loss(*keep, mb), config_.algorithm.value_coeff);
    keep->backward(v);
    parts.l_rl += v.scalar();
  }
  parts.total = parts.l_rl;
}

void Trainer::check_finite(const LossBreakdown& parts, double norm) const {
  if (std::isfinite(parts.total) && std::isfinite(norm)) return;
  std::ostringstream dump;
  dump << "seed=" << seed_ << "\nenv_steps=" << env_steps_ << "\nupdate=" << updates_ << "\nl_rl=" << parts.l_rl
       << "\nl_div=" << parts.l_div << "\nl_bal=" << parts.l_bal << "\nl_switch=" << parts.l_switch
       << "\ntotal=" << parts.total << "\ngrad_norm=" << norm << "\n";
  throw NumericalAbort("non-finite loss or gradient at update " + std::to_string(updates_), dump.str());
}

UpdateStats Trainer::train_step(const Minibatch& mb, bool diversity_step) {
  UpdateStats s;
  s.env_steps = env_steps_;
  s.tau = temperature();
  s.diversity_step = diversity_step;
  s.loss.alpha = config_.algorithm.alpha;
  s.loss.beta = config_.algorithm.beta;
  s.loss.gamma = config_.algorithm.gamma_coeff;
  std::vector<Tensor*> params = trainable();
  Var terms;
  std::unique_ptr<Graph> keep;
  if (config_.surgery != SurgeryMode::Off) {
    surgery_gradients(mb, s.tau, s.loss, terms, keep);
  } else {
    ad::zero_grad(params);
    keep = std::make_unique<Graph>();
    Var total = compose_loss(*keep, mb, diversity_step, s.loss, terms);
    if (std::isfinite(s.loss.total)) keep->backward(total);
  }
  for (Index i = 0; i < mb.rows(); ++i) {
    s.category_loss[static_cast<std::size_t>(mb.categories[static_cast<std::size_t>(i)])] += std::abs(terms.value()(i, 0));
  }
  s.grad_norm = ad::grad_norm(params);
  check_finite(s.loss, s.grad_norm);
  ad::clip_grad_norm(params, config_.training.max_grad_norm);
  adam_.step(params);
  s.update = ++updates_;
  return s;
}

std::optional<double> Trainer::conflict_score(const std::vector<const TrajectoryRecord*>& probe) {
  if (probe.empty()) return std::nullopt;
  const Minibatch mb = make_minibatch(probe);
  std::vector<Tensor*> adapters = policy_->adapter_parameters();
  std::vector<Tensor*> params = trainable();
  const double tau = temperature();
  std::vector<Vector> grads;
  for (int ph = 0; ph < kNumPhases; ++ph) {
    std::vector<Index> rows;
    for (Index i = 0; i < mb.rows(); ++i) {
      if (mb.phases[static_cast<std::size_t>(i)] == ph) rows.push_back(i);
    }
    if (rows.empty()) continue;
    ad::zero_grad(params);
    Graph g;
    Var terms = weighted_terms(g, mb, tau);
    g.backward(ad::scale(ad::sum(ad::gather_rows(terms, rows)), 1.0 / static_cast<double>(mb.rows())));
    Vector flat = flatten_grads(adapters);
    if (flat.norm() > 0.0) grads.push_back(std::move(flat));
  }
  ad::zero_grad(params);
  if (grads.size() < 2) return std::nullopt;
  return gradient_conflict_score(grads);
}

BatchStats Trainer::iterate() {
  BatchStats stats;
  stats.batch = batches_;
  std::vector<TrajectoryRecord> batch = collect_batch();
  compute_advantages(batch);
  stats.env_steps = env_steps_;
  stats.episodes = static_cast<int>(batch.size());
  double switches = 0.0;
  for (const TrajectoryRecord& r : batch) {
    stats.success_rate += r.success ? 1.0 : 0.0;
    stats.mean_length += r.length();
    if (!r.token_experts.empty()) {
      std::vector<std::vector<int>> primary;
      const int m = config_.baselines.micro_tokens;
      for (const auto& te : r.token_experts) primary.emplace_back(te.begin(), te.begin() + m);
      switches += token_to_step_switches(primary);
    } else {
      switches += count_switches(r.z);
    }
  }
  stats.success_rate /= static_cast<double>(batch.size());
  stats.mean_length /= static_cast<double>(batch.size());
  stats.mean_switches = switches / static_cast<double>(batch.size());

  std::vector<const TrajectoryRecord*> order;
  for (const TrajectoryRecord& r : batch) order.push_back(&r);
  std::shuffle(order.begin(), order.end(), update_rng_);
  const int M = std::min<int>(config_.training.minibatches, static_cast<int>(order.size()));
  const int interval = config_.training.conflict_interval;
  const bool probe_now = (updates_ + interval - 1) / interval * interval < updates_ + M;
  if (probe_now) {
    std::vector<const TrajectoryRecord*> probe;
    int steps = 0;
    for (const TrajectoryRecord& r : batch) {
      if (steps >= config_.training.conflict_probe_steps) break;
      probe.push_back(&r);
      steps += r.length();
    }
    stats.conflict = conflict_score(probe);
  }
  for (int mbi = 0; mbi < M; ++mbi) {
    std::vector<const TrajectoryRecord*> part;
    for (std::size_t i = static_cast<std::size_t>(mbi); i < order.size(); i += static_cast<std::size_t>(M)) {
      part.push_back(order[i]);
    }
    const bool div = (updates_ + 1) % config_.algorithm.div_interval == 0;
    stats.updates.push_back(train_step(make_minibatch(part), div));
  }
  return stats;
}

EvaluationResult Trainer::evaluate(int episodes_per_category) {
  EvaluationResult result;
  const double tau = temperature();
  const int K = config_.adapters();
  std::vector<LiveEpisode> live;
  std::vector<EpisodeTrace> traces;
  for (int c = 0; c < kNumCategories; ++c) {
    GridWorldConfig ec = config_.environment;
    ec.category_mix = CategoryMix::only(static_cast<TaskCategory>(c));
    for (int e = 0; e < episodes_per_category; ++e) {
      const std::uint64_t idx = static_cast<std::uint64_t>(c * episodes_per_category + e);
      LiveEpisode le;
      le.env = std::make_unique<PhasedGridWorld>(ec);
      le.env->reset(derive_seed(seed_, "eval", idx), derive_seed(seed_, "eval-fault", idx));
      le.state.reset(config_.router.history);
      live.push_back(std::move(le));
      EpisodeTrace tr;
      tr.episode = static_cast<int>(idx);
      tr.category = static_cast<TaskCategory>(c);
      traces.push_back(tr);
    }
  }
  Rng rng = make_rng(seed_, "eval-actions");
  TokenBatch visited;
  for (;;) {
    std::vector<LiveEpisode*> active;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < live.size(); ++i) {
      if (!live[i].env->done()) {
        active.push_back(&live[i]);
        ids.push_back(i);
      }
    }
    if (active.empty()) break;
    Decision d = decide(active, tau);
    for (std::size_t a = 0; a < active.size(); ++a) {
      EpisodeTrace& tr = traces[ids[a]];
      PhasedGridWorld& env = *active[a]->env;
      const Vector probs = d.probs.row(static_cast<Index>(a)).transpose();
      const SampledAction s = sample_action({probs}, rng);
      visited.append_sample(d.inputs, static_cast<int>(a));
      tr.z.push_back(d.z[a]);
      tr.phase.push_back(static_cast<int>(env.oracle_phase()));
      tr.entropy.push_back(policy_entropy(probs));
      if (!d.token_z.empty()) {
        const auto& tz = d.token_z[a];
        if (std::adjacent_find(tz.begin(), tz.end(), std::not_equal_to<>()) != tz.end()) ++tr.token_switches;
      }
      const StepResult res = env.step(s.action);
      if (res.done) tr.success = res.success;
      active[a]->state.push(s.action, d.features.obs_embedding.row(static_cast<Index>(a)).transpose());
    }
  }
  for (const EpisodeTrace& tr : traces) {
    result.success[static_cast<std::size_t>(tr.category)] += tr.success ? 1.0 : 0.0;
    result.overall_success += tr.success ? 1.0 : 0.0;
  }
  for (double& s : result.success) s /= static_cast<double>(episodes_per_category);
  result.overall_success /= static_cast<double>(traces.size());

  // Inter-expert KL on evenly spaced visited states.
  if (K >= 2 && visited.size() > 0) {
    const int S = std::min(config_.training.kl_probe_states, visited.size());
    std::vector<Index> rows;
    for (int i = 0; i < S; ++i) rows.push_back(static_cast<Index>(static_cast<long>(i) * visited.size() / S));
    const TokenBatch states = visited.select(rows);
    std::vector<Matrix> probs;
    for (int k = 0; k < K; ++k) probs.push_back(policy_->expert_probs(states, k));
    int collapsed = 0;
    double total = 0.0;
    for (int s = 0; s < S; ++s) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) {
        for (int j = 0; j < K; ++j) {
          if (i == j) continue;
          const Vector pi = probs[static_cast<std::size_t>(i)].row(s).transpose();
          const Vector pj = probs[static_cast<std::size_t>(j)].row(s).transpose();
          acc += ad::kl_divergence(pi / pi.sum(), pj / pj.sum());
        }
      }
      acc /= static_cast<double>(K * (K - 1));
      total += acc;
      if (acc < config_.algorithm.tau_div) ++collapsed;
    }
    result.kl_mean = total / S;
    result.kl_collapse_fraction = static_cast<double>(collapsed) / S;
  }
  result.episodes = std::move(traces);
  return result;
}

}  // namespace pamoe
