// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-phase environments with exact oracle phase labels.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/rng.hpp"

namespace pamoe {

enum class Phase : int { Explore = 0, Navigate = 1, Manipulate = 2, Recover = 3 };
inline constexpr int kNumPhases = 4;
std::string_view phase_name(Phase phase);

enum class TaskCategory : int { PickPlace = 0, Look = 1, Clean = 2, Heat = 3, Cool = 4, Pick2 = 5 };
inline constexpr int kNumCategories = 6;
std::string_view category_name(TaskCategory category);
TaskCategory parse_category(std::string_view name);
/// PickPlace and Look need a single manipulation action.
bool is_simple(TaskCategory category);

enum class GridAction : int {
  Up = 0, Down, Left, Right, Look, Pick, Place, ToolUse, Retry
};
inline constexpr int kNumGridActions = 9;
std::string_view action_name(GridAction action);

/// Embedding-table row ids making up one backbone token (summed embeddings).
using TokenCodes = std::vector<int>;

struct Observation {
  std::vector<TokenCodes> tokens;
  ad::Vector features;  // multi-hot over the vocabulary; fixed width per env
};

struct Goal {
  TaskCategory category = TaskCategory::PickPlace;
  std::vector<int> target_objects;
  std::vector<TokenCodes> tokens;
  ad::Vector embedding;  // category one-hot followed by hashed object features
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  Phase oracle_phase = Phase::Explore;
  TaskCategory category = TaskCategory::PickPlace;
  bool success = false;
};

/// Shape information the policy and router need to size themselves.
struct EnvSpec {
  int vocab_size = 0;
  int obs_tokens = 0;
  int goal_tokens = 0;
  int num_actions = 0;
};

/// Distribution over task categories, indexed by TaskCategory.
struct CategoryMix {
  std::array<double, kNumCategories> weights{};

  /// 60% simple (PickPlace, Look), 40% complex (Clean, Heat, Cool, Pick2).
  static CategoryMix default_mix();
  static CategoryMix only(TaskCategory category);
  /// Throws ConfigError unless weights are finite, nonnegative and sum to 1.
  void validate() const;
  TaskCategory sample(Rng& rng) const;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvSpec spec() const = 0;
  /// Deterministic layout from `seed`; fault events drawn from `fault_seed`.
  virtual Observation reset(std::uint64_t seed, std::uint64_t fault_seed) = 0;
  /// Throws UsageError once the episode is done.
  virtual StepResult step(int action) = 0;
  virtual const Observation& observation() const = 0;
  virtual const Goal& goal() const = 0;
  virtual Phase oracle_phase() const = 0;
  /// Hash of the discrete state tuple; equal states give equal fingerprints.
  virtual std::uint64_t fingerprint() const = 0;
  virtual bool done() const = 0;
  virtual int steps_taken() const = 0;
  virtual std::unique_ptr<Environment> clone_fresh() const = 0;
};

struct GridWorldConfig {
  int grid_size = 7;
  int max_steps = 50;
  double p_fault = 0.1;
  CategoryMix category_mix = CategoryMix::default_mix();
  int interior_walls = 3;
  int distractors = 2;
  bool shaped_rewards = false;  // debugging only
};

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Grid world whose episodes pass through Explore (target not yet located),
/// Navigate (located, not on target), Manipulate (on target, executing the
/// category's action sequence) and Recover (fault active, needs Retry).
class PhasedGridWorld final : public Environment {
 public:
  static constexpr int kObjectKinds = 8;
  static constexpr int kFaultRetries = 2;

  explicit PhasedGridWorld(GridWorldConfig config = {});

  EnvSpec spec() const override;
  Observation reset(std::uint64_t seed, std::uint64_t fault_seed) override;
  Observation reset(std::uint64_t seed, const CategoryMix& mix);
  StepResult step(int action) override;
  const Observation& observation() const override { return observation_; }
  const Goal& goal() const override { return goal_; }
  Phase oracle_phase() const override;
  std::uint64_t fingerprint() const override;
  bool done() const override { return done_; }
  int steps_taken() const override { return steps_; }
  std::unique_ptr<Environment> clone_fresh() const override;

  const GridWorldConfig& config() const { return config_; }
  Cell agent() const { return agent_; }
  Cell target_cell() const { return objects_[static_cast<std::size_t>(target_slot())]; }
  const std::vector<Cell>& objects() const { return objects_; }
  bool is_wall(Cell c) const;
  bool located() const { return located_[static_cast<std::size_t>(target_index_)]; }
  bool reached() const { return agent_ == target_cell(); }
  int manipulated_steps_done() const { return progress_; }
  bool fault_active() const { return fault_counter_ > 0; }
  int target_index() const { return target_index_; }
  bool success() const { return success_; }
  /// Action the category's manipulation sequence expects next.
  GridAction required_action() const;
  static const std::vector<GridAction>& manipulation_sequence(TaskCategory category);
  /// Sum of manipulation-sequence lengths over all targets of a category.
  static int required_manipulations(TaskCategory category);

 private:
  int target_slot() const { return target_index_; }
  int num_targets() const;
  void refresh_located(int radius);
  void rebuild_observation();
  void build_goal(Rng& rng);

  GridWorldConfig config_;
  std::vector<std::uint8_t> walls_;
  std::vector<Cell> objects_;  // targets first, then distractors
  std::vector<int> object_kinds_;
  Cell agent_;
  Goal goal_;
  Observation observation_;
  std::array<bool, 2> located_{};
  int target_index_ = 0;
  int progress_ = 0;
  int fault_counter_ = 0;
  int steps_ = 0;
  int last_action_ = -1;
  bool done_ = true;
  bool success_ = false;
  Rng fault_rng_;
};

/// Competence knobs of the scripted teacher used to warm up the backbone.
struct ScriptedPolicyConfig {
  double explore_look = 0.2;
  double navigate_greedy = 0.8;
  double manipulate_simple = 0.9;
  double manipulate_complex = 0.4;
  double recover_retry = 0.9;
};

/// Action distribution of the scripted teacher in the world's current state.
ad::Vector scripted_action_distribution(const PhasedGridWorld& world,
                                        const ScriptedPolicyConfig& config = {});

/// First move of a shortest wall-avoiding path from the agent to the current
/// target, or -1 when already there.
int greedy_move(const PhasedGridWorld& world);

/// Two-phase chain: emit A for the first `switch_point` steps, then B until
/// `length`. Each correct emission pays 1/length, so the optimal return is 1.
class LinearChainEnv final : public Environment {
 public:
  explicit LinearChainEnv(int length = 6);

  EnvSpec spec() const override;
  Observation reset(std::uint64_t seed, std::uint64_t fault_seed) override;
  StepResult step(int action) override;
  const Observation& observation() const override { return observation_; }
  const Goal& goal() const override { return goal_; }
  Phase oracle_phase() const override;
  std::uint64_t fingerprint() const override;
  bool done() const override { return position_ >= length_; }
  int steps_taken() const override { return position_; }
  std::unique_ptr<Environment> clone_fresh() const override;

  int length() const { return length_; }
  int switch_point() const { return switch_point_; }
  /// Return of an action sequence from the current reset state.
  double evaluate(const std::vector<int>& actions) const;

 private:
  void rebuild_observation();

  int length_;
  int switch_point_ = 1;
  int position_ = 0;
  int last_action_ = -1;
  Goal goal_;
  Observation observation_;
};

}  // namespace pamoe
