// SPDX-License-Identifier: Apache-2.0
#include "pamoe/environment.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "pamoe/errors.hpp"

namespace pamoe {
namespace {

constexpr int kCellTypes = 4;  // empty, wall, current target, other object
constexpr int kMaxProgress = 5;

// Row-id layout of the grid world's embedding table.
struct GridVocab {
  int g;
  int view() const { return 0; }
  int pos_x() const { return view() + 9 * kCellTypes; }
  int pos_y() const { return pos_x() + g; }
  int located() const { return pos_y() + g; }
  int reached() const { return located() + 2; }
  int progress() const { return reached() + 2; }
  int fault() const { return progress() + kMaxProgress; }
  int target_idx() const { return fault() + PhasedGridWorld::kFaultRetries + 1; }
  int offset_unknown() const { return target_idx() + 2; }
  int offset_dx() const { return offset_unknown() + 1; }
  int offset_dy() const { return offset_dx() + 2 * g - 1; }
  int last_action() const { return offset_dy() + 2 * g - 1; }
  int category() const { return last_action() + kNumGridActions + 1; }
  int target1() const { return category() + kNumCategories; }
  int target2() const { return target1() + PhasedGridWorld::kObjectKinds; }
  int size() const { return target2() + PhasedGridWorld::kObjectKinds + 1; }
};

ad::Vector multi_hot(const std::vector<TokenCodes>& tokens, int vocab) {
  ad::Vector v = ad::Vector::Zero(vocab);
  for (const auto& t : tokens) {
    for (int code : t) v(code) += 1.0;
  }
  return v;
}

ad::Vector goal_embedding(TaskCategory category, const std::vector<int>& objects) {
  constexpr int kHashBuckets = 8;
  ad::Vector e = ad::Vector::Zero(kNumCategories + kHashBuckets);
  e(static_cast<int>(category)) = 1.0;
  for (int obj : objects) {
    const auto h = static_cast<std::uint32_t>(obj + 1) * 2654435761u;
    e(kNumCategories + static_cast<int>(h % kHashBuckets)) += 1.0;
  }
  return e;
}

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

std::string_view phase_name(Phase phase) {
  switch (phase) {
    case Phase::Explore: return "Explore";
    case Phase::Navigate: return "Navigate";
    case Phase::Manipulate: return "Manipulate";
    case Phase::Recover: return "Recover";
  }
  return "?";
}

std::string_view category_name(TaskCategory category) {
  switch (category) {
    case TaskCategory::PickPlace: return "PickPlace";
    case TaskCategory::Look: return "Look";
    case TaskCategory::Clean: return "Clean";
    case TaskCategory::Heat: return "Heat";
    case TaskCategory::Cool: return "Cool";
    case TaskCategory::Pick2: return "Pick2";
  }
  return "?";
}

TaskCategory parse_category(std::string_view name) {
  for (int c = 0; c < kNumCategories; ++c) {
    if (category_name(static_cast<TaskCategory>(c)) == name) return static_cast<TaskCategory>(c);
  }
  throw ConfigError("unknown task category '" + std::string(name) + "'");
}

bool is_simple(TaskCategory category) {
  return category == TaskCategory::PickPlace || category == TaskCategory::Look;
}

std::string_view action_name(GridAction action) {
  static constexpr std::array<std::string_view, kNumGridActions> kNames = {
      "up", "down", "left", "right", "look", "pick", "place", "tool_use", "retry"};
  return kNames[static_cast<std::size_t>(action)];
}

CategoryMix CategoryMix::default_mix() {
  CategoryMix mix;
  mix.weights = {0.3, 0.3, 0.1, 0.1, 0.1, 0.1};
  return mix;
}

CategoryMix CategoryMix::only(TaskCategory category) {
  CategoryMix mix;
  mix.weights.fill(0.0);
  mix.weights[static_cast<std::size_t>(category)] = 1.0;
  return mix;
}

void CategoryMix::validate() const {
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("category_mix: weights must be >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("category_mix: weights must sum to 1");
}

TaskCategory CategoryMix::sample(Rng& rng) const {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last_positive = 0;
  for (int c = 0; c < kNumCategories; ++c) {
    const double w = weights[static_cast<std::size_t>(c)];
    if (w <= 0.0) continue;
    last_positive = c;
    acc += w;
    if (u < acc) return static_cast<TaskCategory>(c);
  }
  return static_cast<TaskCategory>(last_positive);
}

// ---------------------------------------------------------------------------
// PhasedGridWorld

PhasedGridWorld::PhasedGridWorld(GridWorldConfig config) : config_(std::move(config)) {
  if (config_.grid_size < 4) throw ConfigError("grid_size must be >= 4");
  if (config_.max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (config_.p_fault < 0.0 || config_.p_fault > 1.0) throw ConfigError("p_fault must be in [0,1]");
  config_.category_mix.validate();
}

EnvSpec PhasedGridWorld::spec() const {
  return EnvSpec{GridVocab{config_.grid_size}.size(), 5, 3, kNumGridActions};
}

const std::vector<GridAction>& PhasedGridWorld::manipulation_sequence(TaskCategory category) {
  static const std::vector<GridAction> kPick{GridAction::Pick};
  static const std::vector<GridAction> kLook{GridAction::Look};
  static const std::vector<GridAction> kClean{GridAction::ToolUse, GridAction::Pick,
                                              GridAction::Place};
  static const std::vector<GridAction> kHeat{GridAction::Pick, GridAction::ToolUse,
                                             GridAction::Place};
  static const std::vector<GridAction> kCool{GridAction::Pick, GridAction::Place,
                                             GridAction::ToolUse};
  static const std::vector<GridAction> kPickPlace{GridAction::Pick, GridAction::Place};
  switch (category) {
    case TaskCategory::PickPlace: return kPick;
    case TaskCategory::Look: return kLook;
    case TaskCategory::Clean: return kClean;
    case TaskCategory::Heat: return kHeat;
    case TaskCategory::Cool: return kCool;
    case TaskCategory::Pick2: return kPickPlace;
  }
  return kPick;
}

int PhasedGridWorld::required_manipulations(TaskCategory category) {
  const int per_target = static_cast<int>(manipulation_sequence(category).size());
  return category == TaskCategory::Pick2 ? 2 * per_target : per_target;
}

int PhasedGridWorld::num_targets() const {
  return goal_.category == TaskCategory::Pick2 ? 2 : 1;
}

GridAction PhasedGridWorld::required_action() const {
  const auto& seq = manipulation_sequence(goal_.category);
  return seq[static_cast<std::size_t>(std::min<int>(progress_, static_cast<int>(seq.size()) - 1))];
}

bool PhasedGridWorld::is_wall(Cell c) const {
  const int g = config_.grid_size;
  if (c.x < 0 || c.y < 0 || c.x >= g || c.y >= g) return true;
  return walls_[static_cast<std::size_t>(c.y * g + c.x)] != 0;
}

Observation PhasedGridWorld::reset(std::uint64_t seed, const CategoryMix& mix) {
  mix.validate();
  config_.category_mix = mix;
  return reset(seed, derive_seed(seed, "fault"));
}

Observation PhasedGridWorld::reset(std::uint64_t seed, std::uint64_t fault_seed) {
  const int g = config_.grid_size;
  Rng rng = make_rng(seed, "env");
  fault_rng_ = Rng(fault_seed);
  goal_ = Goal{};
  goal_.category = config_.category_mix.sample(rng);

  auto random_cell = [&] {
    return Cell{static_cast<int>(rng() % static_cast<std::uint64_t>(g)),
                static_cast<int>(rng() % static_cast<std::uint64_t>(g))};
  };

  // Resample until every object is reachable from the start cell.
  for (;;) {
    walls_.assign(static_cast<std::size_t>(g * g), 0);
    for (int w = 0; w < config_.interior_walls; ++w) {
      const Cell c = random_cell();
      walls_[static_cast<std::size_t>(c.y * g + c.x)] = 1;
    }
    do {
      agent_ = random_cell();
    } while (is_wall(agent_));

    const int targets = goal_.category == TaskCategory::Pick2 ? 2 : 1;
    const int total = targets + config_.distractors;
    objects_.clear();
    int guard = 0;
    while (static_cast<int>(objects_.size()) < total && guard++ < 10000) {
      const Cell c = random_cell();
      if (is_wall(c) || c == agent_) continue;
      if (std::find(objects_.begin(), objects_.end(), c) != objects_.end()) continue;
      // Targets start outside the widest reveal radius, so every episode
      // opens with an Explore phase.
      const bool is_target = static_cast<int>(objects_.size()) < targets;
      const int cheb = std::max(std::abs(c.x - agent_.x), std::abs(c.y - agent_.y));
      if (is_target && cheb <= 2) continue;
      objects_.push_back(c);
    }
    if (static_cast<int>(objects_.size()) < total) continue;

    std::vector<int> dist(static_cast<std::size_t>(g * g), -1);
    std::deque<Cell> frontier{agent_};
    dist[static_cast<std::size_t>(agent_.y * g + agent_.x)] = 0;
    while (!frontier.empty()) {
      const Cell c = frontier.front();
      frontier.pop_front();
      for (const Cell d : {Cell{0, -1}, Cell{0, 1}, Cell{-1, 0}, Cell{1, 0}}) {
        const Cell n{c.x + d.x, c.y + d.y};
        if (is_wall(n) || dist[static_cast<std::size_t>(n.y * g + n.x)] >= 0) continue;
        dist[static_cast<std::size_t>(n.y * g + n.x)] = 1;
        frontier.push_back(n);
      }
    }
    const bool reachable = std::all_of(objects_.begin(), objects_.end(), [&](Cell c) {
      return dist[static_cast<std::size_t>(c.y * g + c.x)] >= 0;
    });
    if (reachable) break;
  }

  object_kinds_.clear();
  std::vector<int> kinds(kObjectKinds);
  std::iota(kinds.begin(), kinds.end(), 0);
  for (int i = kObjectKinds - 1; i > 0; --i) {
    std::swap(kinds[static_cast<std::size_t>(i)],
              kinds[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(i + 1))]);
  }
  for (std::size_t i = 0; i < objects_.size(); ++i) object_kinds_.push_back(kinds[i % kinds.size()]);
  build_goal(rng);

  located_ = {false, false};
  target_index_ = 0;
  progress_ = 0;
  fault_counter_ = 0;
  steps_ = 0;
  last_action_ = -1;
  done_ = false;
  success_ = false;
  refresh_located(1);
  rebuild_observation();
  return observation_;
}

void PhasedGridWorld::build_goal(Rng&) {
  const GridVocab v{config_.grid_size};
  goal_.target_objects.assign(object_kinds_.begin(), object_kinds_.begin() + num_targets());
  const int t1 = goal_.target_objects[0];
  const int t2 = goal_.target_objects.size() > 1 ? goal_.target_objects[1] : kObjectKinds;
  goal_.tokens = {{v.category() + static_cast<int>(goal_.category)},
                  {v.target1() + t1},
                  {v.target2() + t2}};
  goal_.embedding = goal_embedding(goal_.category, goal_.target_objects);
}

void PhasedGridWorld::refresh_located(int radius) {
  for (int t = 0; t < num_targets(); ++t) {
    const Cell c = objects_[static_cast<std::size_t>(t)];
    if (std::max(std::abs(c.x - agent_.x), std::abs(c.y - agent_.y)) <= radius) {
      located_[static_cast<std::size_t>(t)] = true;
    }
  }
}

Phase PhasedGridWorld::oracle_phase() const {
  if (fault_active()) return Phase::Recover;
  if (!located()) return Phase::Explore;
  if (!reached()) return Phase::Navigate;
  return Phase::Manipulate;
}

StepResult PhasedGridWorld::step(int action) {
  if (done_) throw UsageError("step() called on a finished episode");
  if (action < 0 || action >= kNumGridActions) throw UsageError("action out of range");
  const auto act = static_cast<GridAction>(action);
  double reward = 0.0;
  ++steps_;

  if (fault_active()) {
    if (act == GridAction::Retry) --fault_counter_;
  } else {
    switch (act) {
      case GridAction::Up:
      case GridAction::Down:
      case GridAction::Left:
      case GridAction::Right: {
        Cell next = agent_;
        if (act == GridAction::Up) --next.y;
        if (act == GridAction::Down) ++next.y;
        if (act == GridAction::Left) --next.x;
        if (act == GridAction::Right) ++next.x;
        if (!is_wall(next)) {
          if (!(next == agent_)) progress_ = 0;
          agent_ = next;
        }
        break;
      }
      case GridAction::Look:
      case GridAction::Pick:
      case GridAction::Place:
      case GridAction::ToolUse: {
        if (act == GridAction::Look) {
          const bool was_located = located();
          refresh_located(2);
          if (config_.shaped_rewards && !was_located && located()) reward += 0.1;
        }
        if (!reached()) break;
        if (act != required_action()) {
          progress_ = 0;
          break;
        }
        if (uniform01(fault_rng_) < config_.p_fault) {
          fault_counter_ = kFaultRetries;
          break;
        }
        ++progress_;
        if (config_.shaped_rewards) reward += 0.1;
        const int seq_len = static_cast<int>(manipulation_sequence(goal_.category).size());
        if (progress_ >= seq_len) {
          progress_ = 0;
          if (target_index_ + 1 < num_targets()) {
            ++target_index_;
          } else {
            success_ = true;
          }
        }
        break;
      }
      case GridAction::Retry:
        break;
    }
  }

  const bool was_located = located();
  refresh_located(1);
  if (config_.shaped_rewards && !was_located && located()) reward += 0.1;
  last_action_ = action;
  if (success_) reward += 1.0;
  done_ = success_ || steps_ >= config_.max_steps;
  rebuild_observation();

  StepResult result;
  result.observation = observation_;
  result.reward = reward;
  result.done = done_;
  result.oracle_phase = oracle_phase();
  result.category = goal_.category;
  result.success = success_;
  return result;
}

std::uint64_t PhasedGridWorld::fingerprint() const {
  std::uint64_t h = 0x51ed270b27a3b1f3ULL;
  h = hash_combine(h, static_cast<std::uint64_t>(agent_.x));
  h = hash_combine(h, static_cast<std::uint64_t>(agent_.y));
  h = hash_combine(h, static_cast<std::uint64_t>(target_index_));
  h = hash_combine(h, static_cast<std::uint64_t>(located_[0]) | (static_cast<std::uint64_t>(located_[1]) << 1));
  h = hash_combine(h, static_cast<std::uint64_t>(progress_));
  h = hash_combine(h, static_cast<std::uint64_t>(fault_counter_));
  return h;
}

void PhasedGridWorld::rebuild_observation() {
  const GridVocab v{config_.grid_size};
  const int g = config_.grid_size;
  Observation obs;
  obs.tokens.resize(5);

  TokenCodes& view = obs.tokens[0];
  int cell = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx, ++cell) {
      const Cell c{agent_.x + dx, agent_.y + dy};
      int type = 0;
      if (is_wall(c)) {
        type = 1;
      } else {
        for (std::size_t o = 0; o < objects_.size(); ++o) {
          if (objects_[o] == c) type = static_cast<int>(o) == target_index_ ? 2 : 3;
        }
      }
      view.push_back(v.view() + cell * kCellTypes + type);
    }
  }

  obs.tokens[1] = {v.pos_x() + agent_.x, v.pos_y() + agent_.y};
  obs.tokens[2] = {v.located() + static_cast<int>(located()),
                   v.reached() + static_cast<int>(located() && reached()),
                   v.progress() + std::min(progress_, kMaxProgress - 1),
                   v.fault() + fault_counter_,
                   v.target_idx() + target_index_};
  if (located()) {
    const Cell t = target_cell();
    obs.tokens[3] = {v.offset_dx() + (t.x - agent_.x) + g - 1,
                     v.offset_dy() + (t.y - agent_.y) + g - 1};
  } else {
    obs.tokens[3] = {v.offset_unknown()};
  }
  obs.tokens[4] = {v.last_action() + (last_action_ < 0 ? kNumGridActions : last_action_)};
  obs.features = multi_hot(obs.tokens, v.size());
  observation_ = std::move(obs);
}

std::unique_ptr<Environment> PhasedGridWorld::clone_fresh() const {
  return std::make_unique<PhasedGridWorld>(config_);
}

// ---------------------------------------------------------------------------
// LinearChainEnv

LinearChainEnv::LinearChainEnv(int length) : length_(length) {
  if (length < 2) throw ConfigError("LinearChainEnv length must be >= 2");
}

EnvSpec LinearChainEnv::spec() const {
  // position codes, last-action codes (A, B, none), switch-point codes
  return EnvSpec{length_ + 3 + length_, 2, 1, 2};
}

Observation LinearChainEnv::reset(std::uint64_t seed, std::uint64_t) {
  Rng rng = make_rng(seed, "env");
  switch_point_ = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(length_ - 1));
  position_ = 0;
  last_action_ = -1;
  goal_ = Goal{};
  goal_.category = TaskCategory::PickPlace;
  goal_.tokens = {{length_ + 3 + switch_point_}};
  goal_.embedding = ad::Vector::Zero(length_);
  goal_.embedding(switch_point_) = 1.0;
  rebuild_observation();
  return observation_;
}

Phase LinearChainEnv::oracle_phase() const {
  return position_ < switch_point_ ? Phase::Navigate : Phase::Manipulate;
}

StepResult LinearChainEnv::step(int action) {
  if (done()) throw UsageError("step() called on a finished episode");
  if (action < 0 || action > 1) throw UsageError("action out of range");
  const int wanted = position_ < switch_point_ ? 0 : 1;
  StepResult r;
  r.reward = action == wanted ? 1.0 / length_ : 0.0;
  ++position_;
  last_action_ = action;
  rebuild_observation();
  r.observation = observation_;
  r.done = done();
  r.oracle_phase = oracle_phase();
  r.category = goal_.category;
  r.success = r.done;
  return r;
}

std::uint64_t LinearChainEnv::fingerprint() const {
  return hash_combine(static_cast<std::uint64_t>(position_), static_cast<std::uint64_t>(switch_point_));
}

void LinearChainEnv::rebuild_observation() {
  Observation obs;
  obs.tokens = {{std::min(position_, length_ - 1)},
                {length_ + (last_action_ < 0 ? 2 : last_action_)}};
  obs.features = multi_hot(obs.tokens, spec().vocab_size);
  observation_ = std::move(obs);
}

double LinearChainEnv::evaluate(const std::vector<int>& actions) const {
  double ret = 0.0;
  for (std::size_t t = 0; t < actions.size() && static_cast<int>(t) < length_; ++t) {
    const int wanted = static_cast<int>(t) < switch_point_ ? 0 : 1;
    if (actions[t] == wanted) ret += 1.0 / length_;
  }
  return ret;
}

std::unique_ptr<Environment> LinearChainEnv::clone_fresh() const {
  return std::make_unique<LinearChainEnv>(length_);
}

}  // namespace pamoe

namespace pamoe {

int greedy_move(const PhasedGridWorld& world) {
  const int g = world.config().grid_size;
  const Cell goal = world.target_cell();
  const Cell start = world.agent();
  if (start == goal) return -1;
  // BFS backwards from the target so the first step is read off directly.
  std::vector<int> dist(static_cast<std::size_t>(g * g), -1);
  std::deque<Cell> frontier{goal};
  dist[static_cast<std::size_t>(goal.y * g + goal.x)] = 0;
  const std::array<Cell, 4> deltas{Cell{0, -1}, Cell{0, 1}, Cell{-1, 0}, Cell{1, 0}};
  while (!frontier.empty()) {
    const Cell c = frontier.front();
    frontier.pop_front();
    for (const Cell d : deltas) {
      const Cell n{c.x + d.x, c.y + d.y};
      if (world.is_wall(n) || dist[static_cast<std::size_t>(n.y * g + n.x)] >= 0) continue;
      dist[static_cast<std::size_t>(n.y * g + n.x)] = dist[static_cast<std::size_t>(c.y * g + c.x)] + 1;
      frontier.push_back(n);
    }
  }
  int best = -1;
  int best_dist = 1 << 30;
  for (int a = 0; a < 4; ++a) {
    const Cell n{start.x + deltas[static_cast<std::size_t>(a)].x,
                 start.y + deltas[static_cast<std::size_t>(a)].y};
    if (world.is_wall(n)) continue;
    const int d = dist[static_cast<std::size_t>(n.y * g + n.x)];
    if (d >= 0 && d < best_dist) {
      best_dist = d;
      best = a;
    }
  }
  return best;
}

ad::Vector scripted_action_distribution(const PhasedGridWorld& world,
                                        const ScriptedPolicyConfig& config) {
  ad::Vector p = ad::Vector::Zero(kNumGridActions);
  auto put_mass = [&](int action, double mass) {
    p.array() += (1.0 - mass) / (kNumGridActions - 1);
    p(action) = mass;
  };
  switch (world.oracle_phase()) {
    case Phase::Recover:
      put_mass(static_cast<int>(GridAction::Retry), config.recover_retry);
      break;
    case Phase::Explore:
      p.head(4).setConstant((1.0 - config.explore_look) / 4.0);
      p(static_cast<int>(GridAction::Look)) = config.explore_look;
      break;
    case Phase::Navigate: {
      const int move = greedy_move(world);
      put_mass(move < 0 ? static_cast<int>(GridAction::Look) : move, config.navigate_greedy);
      break;
    }
    case Phase::Manipulate:
      put_mass(static_cast<int>(world.required_action()),
               is_simple(world.goal().category) ? config.manipulate_simple
                                                : config.manipulate_complex);
      break;
  }
  return p;
}

}  // namespace pamoe
