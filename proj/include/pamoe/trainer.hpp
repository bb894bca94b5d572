// SPDX-License-Identifier: Apache-2.0
//
// Rollout collection, advantage estimation and the combined update for every
// routing arm (phase, token, token_top2, trajectory, none).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/baselines.hpp"
#include "pamoe/config.hpp"
#include "pamoe/losses.hpp"
#include "pamoe/metrics.hpp"
#include "pamoe/optim.hpp"
#include "pamoe/policy.hpp"
#include "pamoe/router.hpp"

namespace pamoe {

/// One rollout trajectory with everything the update needs.
struct TrajectoryRecord {
  int group = 0;
  std::uint64_t reset_seed = 0;
  TaskCategory category = TaskCategory::PickPlace;
  bool success = false;

  TokenBatch inputs;  // one sample per step
  std::vector<int> actions;
  std::vector<double> old_logp;
  std::vector<double> rewards;
  std::vector<double> values;   // critic estimates (ppo only)
  std::vector<double> entropy;  // bits
  std::vector<int> phases;      // oracle labels
  std::vector<std::uint64_t> fingerprints;
  std::vector<int> z;                         // routed expert per step
  ad::Matrix p;                               // T x K routing probabilities at rollout
  std::vector<std::vector<int>> token_experts;  // per step, per micro-token (token arms)
  ad::Matrix pooled, obs_encoding, obs_embedding;  // T x d
  std::vector<ad::Matrix> goal_encodings;          // per goal token, T x d

  std::vector<double> advantages;
  std::vector<double> value_targets;

  int length() const { return static_cast<int>(actions.size()); }
  double episode_return() const;
};

/// Rows of several trajectories laid out back to back.
struct Minibatch {
  std::vector<const TrajectoryRecord*> trajectories;
  std::vector<ad::Index> offsets;  // first row of each trajectory
  TokenBatch inputs;
  std::vector<ad::Index> actions;
  ad::Matrix old_logp, advantages, value_targets;  // N x 1
  ad::Matrix pooled;                               // N x d
  std::vector<ad::Index> z;
  std::vector<ad::Index> token_z;  // N*m primary micro-token experts
  std::vector<ad::Index> token_z2; // N*m secondary experts (top-2 arm)
  std::vector<int> phases;
  std::vector<int> categories;
  std::vector<ad::Index> trajectory_of_row;
  std::optional<RouterBatch> router;  // phase arm: per-row inputs; trajectory arm: first rows

  ad::Index rows() const { return static_cast<ad::Index>(actions.size()); }
};

struct UpdateStats {
  long env_steps = 0;
  int update = 0;
  double tau = 0.0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  bool diversity_step = false;
  std::array<double, kNumCategories> category_loss{};  // sum |w * l| per category
};

struct BatchStats {
  long env_steps = 0;
  int batch = 0;
  int episodes = 0;
  double success_rate = 0.0;
  double mean_length = 0.0;
  double mean_switches = 0.0;
  std::vector<UpdateStats> updates;
  std::optional<double> conflict;
};

struct EvaluationResult {
  std::vector<EpisodeTrace> episodes;
  std::array<double, kNumCategories> success{};  // per category
  double overall_success = 0.0;
  double kl_mean = 0.0;            // mean pairwise inter-expert KL on probe states
  double kl_collapse_fraction = 0.0;  // probe states whose mean pairwise KL < tau_div
};

class NumericalAbort : public NumericalError {
 public:
  NumericalAbort(const std::string& message, std::string dump)
      : NumericalError(message), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

class Trainer {
 public:
  /// `backbone_values`, when given, replaces the backbone weights in
  /// named-tensor order (a cached warm-up); otherwise the backbone is warmed
  /// up here.
  Trainer(const ExperimentConfig& config, std::uint64_t seed,
          const std::vector<ad::Matrix>* backbone_values = nullptr);

  const ExperimentConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  MoEPolicy& policy() { return *policy_; }
  RouterParams* router() { return router_.get(); }
  TokenRouterParams* token_router() { return token_router_.get(); }
  ExpertBuffer& buffer() { return buffer_; }
  ad::Adam& optimizer() { return adam_; }
  long env_steps() const { return env_steps_; }
  int updates() const { return updates_; }
  double temperature() const;

  /// Adapters, then router parameters, then the value head (ppo only).
  std::vector<ad::Tensor*> trainable();

  /// G groups of n trajectories; the groups of batch b reset from
  /// derive_seed(seed, "env", b*G + g).
  std::vector<TrajectoryRecord> collect_batch();
  void compute_advantages(std::vector<TrajectoryRecord>& batch) const;
  Minibatch make_minibatch(const std::vector<const TrajectoryRecord*>& trajectories) const;

  /// Per-row RL terms weighted by the routing path (N x 1); `p` and `token_p`
  /// receive the router distributions when present.
  ad::Var weighted_terms(ad::Graph& graph, const Minibatch& mb, double tau, ad::Var* p = nullptr,
                         ad::Var* token_p = nullptr);

  /// One optimizer update on a minibatch.
  UpdateStats train_step(const Minibatch& mb, bool diversity_step);

  /// Collect, estimate advantages and update; also probes gradient conflict
  /// every conflict_interval updates.
  BatchStats iterate();

  /// Conflict score between oracle-phase gradients over adapter parameters
  /// on the given trajectories; nullopt with fewer than two phases.
  std::optional<double> conflict_score(const std::vector<const TrajectoryRecord*>& probe);

  EvaluationResult evaluate(int episodes_per_category);

  /// Diversity loss on a buffer sample with current parameters (no update).
  double diversity_value(std::size_t states);

 private:
  struct GradNormState {
    std::array<double, kNumPhases> weights{1.0, 1.0, 1.0, 1.0};
    std::array<double, kNumPhases> initial{};
    std::array<bool, kNumPhases> seen{};
  };

  // Routing and action distributions for a set of live environments.
  struct Decision {
    TokenBatch inputs;
    BaseFeatures features;
    std::vector<int> z;
    ad::Matrix p;
    std::vector<std::vector<int>> token_z;
    std::vector<std::vector<int>> token_z2;
    ad::Matrix probs;
  };
  struct LiveEpisode {
    std::unique_ptr<PhasedGridWorld> env;
    RouterState state;
    int fixed_z = -1;  // trajectory arm
    ad::Vector fixed_p;
    bool faulted = false;
  };
  Decision decide(std::vector<LiveEpisode*>& live, double tau);

  void calibrate_router_inputs();
  ad::Var compose_loss(ad::Graph& graph, const Minibatch& mb, bool diversity_step, LossBreakdown& parts,
                       ad::Var& terms);
  ad::Var value_loss(ad::Graph& graph, const Minibatch& mb);
  void surgery_gradients(const Minibatch& mb, double tau, LossBreakdown& parts, ad::Var& terms_out,
                         std::unique_ptr<ad::Graph>& keep);
  void check_finite(const LossBreakdown& parts, double norm) const;
  ad::Var diversity_term(ad::Graph& graph);

  ExperimentConfig config_;
  std::uint64_t seed_;
  std::unique_ptr<MoEPolicy> policy_;
  std::unique_ptr<RouterParams> router_;
  std::unique_ptr<TokenRouterParams> token_router_;
  ExpertBuffer buffer_;
  ad::Adam adam_;
  Rng rollout_rng_;
  Rng update_rng_;
  long env_steps_ = 0;
  int updates_ = 0;
  int batches_ = 0;
  GradNormState gradnorm_;
};

/// Cached backbone weights after warm-up for (config, seed), in named-tensor
/// order of Backbone::parameters().
std::vector<ad::Matrix> warm_backbone(const ExperimentConfig& config, std::uint64_t seed);

}  // namespace pamoe
