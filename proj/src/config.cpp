// SPDX-License-Identifier: Apache-2.0
#include "pamoe/config.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "pamoe/errors.hpp"

namespace pamoe {

using nlohmann::json;

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table,
             const char* what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  std::string allowed;
  for (const auto& [name, value] : table) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(std::string(what) + ": unknown value '" + std::string(s) + "' (allowed: " +
                    allowed + ")");
}

constexpr std::array<std::pair<std::string_view, Algorithm>, 4> kAlgorithms{{
    {"ppo", Algorithm::PPO}, {"rloo", Algorithm::RLOO}, {"grpo", Algorithm::GRPO},
    {"gigpo", Algorithm::GiGPO}}};
constexpr std::array<std::pair<std::string_view, RoutingMode>, 5> kRouting{{
    {"phase", RoutingMode::Phase}, {"token", RoutingMode::Token},
    {"token_top2", RoutingMode::TokenTop2}, {"trajectory", RoutingMode::Trajectory},
    {"none", RoutingMode::None}}};
constexpr std::array<std::pair<std::string_view, SurgeryMode>, 4> kSurgery{{
    {"off", SurgeryMode::Off}, {"pcgrad", SurgeryMode::PCGrad},
    {"gradnorm", SurgeryMode::GradNorm}, {"cagrad", SurgeryMode::CAGrad}}};

template <class E, std::size_t N>
std::string_view enum_name(E value, const std::array<std::pair<std::string_view, E>, N>& table) {
  for (const auto& [name, v] : table) {
    if (v == value) return name;
  }
  return "?";
}

// Every key of `doc` must exist in `reference` with a compatible JSON type.
void check_keys(const json& doc, const json& reference, const std::string& path) {
  if (!doc.is_object()) throw ConfigError(path.empty() ? "config must be an object" : path + ": expected an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const json& ref = reference.at(it.key());
    const json& val = it.value();
    if (ref.is_object()) {
      check_keys(val, ref, key);
    } else if (ref.is_boolean() != val.is_boolean() || ref.is_string() != val.is_string() ||
               ref.is_array() != val.is_array() || ref.is_number() != val.is_number()) {
      throw ConfigError("config key '" + key + "' has the wrong type (expected " +
                        std::string(ref.type_name()) + ")");
    }
  }
}

void merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + path + "." + key + "': " + e.what());
  }
}

int get_int(const json& j, const char* key, const std::string& path) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigError("config key '" + path + "." + key + "' must be an integer");
  return v.get<int>();
}

}  // namespace

std::string_view to_string(Algorithm a) { return enum_name(a, kAlgorithms); }
std::string_view to_string(RoutingMode r) { return enum_name(r, kRouting); }
std::string_view to_string(SurgeryMode s) { return enum_name(s, kSurgery); }
Algorithm parse_algorithm(std::string_view s) { return parse_enum(s, kAlgorithms, "algorithm.tag"); }
RoutingMode parse_routing(std::string_view s) { return parse_enum(s, kRouting, "routing"); }
SurgeryMode parse_surgery(std::string_view s) { return parse_enum(s, kSurgery, "surgery"); }

json to_json(const ExperimentConfig& c) {
  json mix = json::object();
  for (int k = 0; k < kNumCategories; ++k) {
    mix[std::string(category_name(static_cast<TaskCategory>(k)))] =
        c.environment.category_mix.weights[static_cast<std::size_t>(k)];
  }
  const auto& t = c.training.warmup.teacher;
  return json{
      {"environment",
       {{"grid_size", c.environment.grid_size},
        {"max_steps", c.environment.max_steps},
        {"p_fault", c.environment.p_fault},
        {"interior_walls", c.environment.interior_walls},
        {"distractors", c.environment.distractors},
        {"shaped_rewards", c.environment.shaped_rewards},
        {"category_mix", mix}}},
      {"policy",
       {{"K", c.experts},
        {"rank", c.policy.rank},
        {"d_model", c.policy.d_model},
        {"ffn_width", c.policy.ffn_width},
        {"lora_init_std", c.policy.lora_init_std},
        {"value_hidden", c.policy.value_hidden}}},
      {"router",
       {{"L", c.router.history},
        {"d", c.router.hidden},
        {"lstm_layers", c.router.lstm_layers},
        {"mlp_hidden", c.router.mlp_hidden},
        {"action_embedding", c.router.action_embedding},
        {"tau0", c.router.schedule.tau0},
        {"tauf", c.router.schedule.tauf},
        {"T_anneal", c.router.schedule.anneal_steps},
        {"lambda_s", c.router.lambda_s},
        {"use_history", c.router.use_history},
        {"use_goal_attention", c.router.use_goal_attention}}},
      {"algorithm",
       {{"tag", std::string(to_string(c.algorithm.tag))},
        {"n_group", c.algorithm.n_group},
        {"epsilon", c.algorithm.epsilon},
        {"alpha", c.algorithm.alpha},
        {"beta", c.algorithm.beta},
        {"gamma_coeff", c.algorithm.gamma_coeff},
        {"tau_div", c.algorithm.tau_div},
        {"div_interval", c.algorithm.div_interval},
        {"div_sample", c.algorithm.div_sample},
        {"buffer_cap", c.algorithm.buffer_cap},
        {"standardize", c.algorithm.standardize},
        {"gae_gamma", c.algorithm.gae_gamma},
        {"gae_lambda", c.algorithm.gae_lambda},
        {"value_coeff", c.algorithm.value_coeff}}},
      {"routing", std::string(to_string(c.routing))},
      {"surgery", std::string(to_string(c.surgery))},
      {"baselines",
       {{"micro_tokens", c.baselines.micro_tokens},
        {"token_router_hidden", c.baselines.token_router_hidden},
        {"cagrad_c", c.baselines.cagrad_c},
        {"gradnorm_asymmetry", c.baselines.gradnorm_asymmetry},
        {"gradnorm_lr", c.baselines.gradnorm_lr},
        {"trajectory_reroute_on_fault", c.baselines.trajectory_reroute_on_fault}}},
      {"training",
       {{"total_steps", c.training.total_steps},
        {"groups_per_batch", c.training.groups_per_batch},
        {"minibatches", c.training.minibatches},
        {"lr", c.training.lr},
        {"max_grad_norm", c.training.max_grad_norm},
        {"seeds", c.training.seeds},
        {"eval_episodes", c.training.eval_episodes},
        {"conflict_interval", c.training.conflict_interval},
        {"conflict_probe_steps", c.training.conflict_probe_steps},
        {"kl_probe_states", c.training.kl_probe_states},
        {"warmup",
         {{"episodes", c.training.warmup.episodes},
          {"epochs", c.training.warmup.epochs},
          {"batch_size", c.training.warmup.batch_size},
          {"lr", c.training.warmup.lr},
          {"teacher",
           {{"explore_look", t.explore_look},
            {"navigate_greedy", t.navigate_greedy},
            {"manipulate_simple", t.manipulate_simple},
            {"manipulate_complex", t.manipulate_complex},
            {"recover_retry", t.recover_retry}}}}}}},
      {"output_dir", c.output_dir}};
}

ExperimentConfig config_from_json(const json& doc) {
  const json defaults = to_json(ExperimentConfig{});
  check_keys(doc, defaults, "");
  json j = defaults;
  merge(j, doc);

  ExperimentConfig c;
  const json& env = j["environment"];
  c.environment.grid_size = get_int(env, "grid_size", "environment");
  c.environment.max_steps = get_int(env, "max_steps", "environment");
  c.environment.p_fault = get<double>(env, "p_fault", "environment");
  c.environment.interior_walls = get_int(env, "interior_walls", "environment");
  c.environment.distractors = get_int(env, "distractors", "environment");
  c.environment.shaped_rewards = get<bool>(env, "shaped_rewards", "environment");
  for (int k = 0; k < kNumCategories; ++k) {
    c.environment.category_mix.weights[static_cast<std::size_t>(k)] =
        get<double>(env["category_mix"], std::string(category_name(static_cast<TaskCategory>(k))).c_str(),
                    "environment.category_mix");
  }

  const json& pol = j["policy"];
  c.experts = get_int(pol, "K", "policy");
  c.policy.rank = get_int(pol, "rank", "policy");
  c.policy.d_model = get_int(pol, "d_model", "policy");
  c.policy.ffn_width = get_int(pol, "ffn_width", "policy");
  c.policy.lora_init_std = get<double>(pol, "lora_init_std", "policy");
  c.policy.value_hidden = get_int(pol, "value_hidden", "policy");

  const json& r = j["router"];
  c.router.history = get_int(r, "L", "router");
  c.router.hidden = get_int(r, "d", "router");
  c.router.lstm_layers = get_int(r, "lstm_layers", "router");
  c.router.mlp_hidden = get_int(r, "mlp_hidden", "router");
  c.router.action_embedding = get_int(r, "action_embedding", "router");
  c.router.schedule.tau0 = get<double>(r, "tau0", "router");
  c.router.schedule.tauf = get<double>(r, "tauf", "router");
  c.router.schedule.anneal_steps = get<double>(r, "T_anneal", "router");
  c.router.lambda_s = get<double>(r, "lambda_s", "router");
  c.router.use_history = get<bool>(r, "use_history", "router");
  c.router.use_goal_attention = get<bool>(r, "use_goal_attention", "router");

  const json& a = j["algorithm"];
  c.algorithm.tag = parse_algorithm(get<std::string>(a, "tag", "algorithm"));
  c.algorithm.n_group = get_int(a, "n_group", "algorithm");
  c.algorithm.epsilon = get<double>(a, "epsilon", "algorithm");
  c.algorithm.alpha = get<double>(a, "alpha", "algorithm");
  c.algorithm.beta = get<double>(a, "beta", "algorithm");
  c.algorithm.gamma_coeff = get<double>(a, "gamma_coeff", "algorithm");
  c.algorithm.tau_div = get<double>(a, "tau_div", "algorithm");
  c.algorithm.div_interval = get_int(a, "div_interval", "algorithm");
  c.algorithm.div_sample = get_int(a, "div_sample", "algorithm");
  c.algorithm.buffer_cap = get_int(a, "buffer_cap", "algorithm");
  c.algorithm.standardize = get<bool>(a, "standardize", "algorithm");
  c.algorithm.gae_gamma = get<double>(a, "gae_gamma", "algorithm");
  c.algorithm.gae_lambda = get<double>(a, "gae_lambda", "algorithm");
  c.algorithm.value_coeff = get<double>(a, "value_coeff", "algorithm");

  c.routing = parse_routing(j["routing"].get<std::string>());
  c.surgery = parse_surgery(j["surgery"].get<std::string>());

  const json& b = j["baselines"];
  c.baselines.micro_tokens = get_int(b, "micro_tokens", "baselines");
  c.baselines.token_router_hidden = get_int(b, "token_router_hidden", "baselines");
  c.baselines.cagrad_c = get<double>(b, "cagrad_c", "baselines");
  c.baselines.gradnorm_asymmetry = get<double>(b, "gradnorm_asymmetry", "baselines");
  c.baselines.gradnorm_lr = get<double>(b, "gradnorm_lr", "baselines");
  c.baselines.trajectory_reroute_on_fault = get<bool>(b, "trajectory_reroute_on_fault", "baselines");

  const json& t = j["training"];
  if (!t["total_steps"].is_number_integer()) throw ConfigError("config key 'training.total_steps' must be an integer");
  c.training.total_steps = t["total_steps"].get<long>();
  c.training.groups_per_batch = get_int(t, "groups_per_batch", "training");
  c.training.minibatches = get_int(t, "minibatches", "training");
  c.training.lr = get<double>(t, "lr", "training");
  c.training.max_grad_norm = get<double>(t, "max_grad_norm", "training");
  c.training.seeds.clear();
  for (const json& s : t["seeds"]) {
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0)) {
      throw ConfigError("config key 'training.seeds' must hold nonnegative integers");
    }
    c.training.seeds.push_back(s.get<std::uint64_t>());
  }
  c.training.eval_episodes = get_int(t, "eval_episodes", "training");
  c.training.conflict_interval = get_int(t, "conflict_interval", "training");
  c.training.conflict_probe_steps = get_int(t, "conflict_probe_steps", "training");
  c.training.kl_probe_states = get_int(t, "kl_probe_states", "training");
  const json& w = t["warmup"];
  c.training.warmup.episodes = get_int(w, "episodes", "training.warmup");
  c.training.warmup.epochs = get_int(w, "epochs", "training.warmup");
  c.training.warmup.batch_size = get_int(w, "batch_size", "training.warmup");
  c.training.warmup.lr = get<double>(w, "lr", "training.warmup");
  const json& th = w["teacher"];
  auto& teacher = c.training.warmup.teacher;
  teacher.explore_look = get<double>(th, "explore_look", "training.warmup.teacher");
  teacher.navigate_greedy = get<double>(th, "navigate_greedy", "training.warmup.teacher");
  teacher.manipulate_simple = get<double>(th, "manipulate_simple", "training.warmup.teacher");
  teacher.manipulate_complex = get<double>(th, "manipulate_complex", "training.warmup.teacher");
  teacher.recover_retry = get<double>(th, "recover_retry", "training.warmup.teacher");

  c.output_dir = j["output_dir"].get<std::string>();

  c.policy.num_experts = c.adapters();
  c.router.num_experts = c.adapters();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string path = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->is_object()) throw ConfigError("override path '" + path + "' is not an object path");
      node = &(*node)[parts[i]];
      if (node->is_null()) *node = json::object();
    }
    (*node)[parts.back()] = value;
  }
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  c.environment.category_mix.validate();
  require(c.environment.grid_size >= 4, "environment.grid_size must be >= 4");
  require(c.environment.max_steps >= 1, "environment.max_steps must be >= 1");
  require(c.environment.p_fault >= 0.0 && c.environment.p_fault <= 1.0, "environment.p_fault must be in [0,1]");
  require(c.environment.interior_walls >= 0 && c.environment.distractors >= 0,
          "environment wall/distractor counts must be >= 0");
  require(c.experts >= 0, "policy.K must be >= 0");
  require(c.policy.rank >= 1, "policy.rank must be >= 1");
  require(c.policy.d_model >= 2 && c.policy.ffn_width >= 1, "policy widths must be positive");
  require(c.router.history >= 1, "router.L must be >= 1");
  require(c.router.hidden >= 1 && c.router.mlp_hidden >= 1 && c.router.lstm_layers >= 1,
          "router widths must be positive");
  require(c.router.schedule.tauf > 0.0 && c.router.schedule.tau0 >= c.router.schedule.tauf,
          "router temperatures need tau0 >= tauf > 0");
  require(c.router.schedule.anneal_steps >= 0.0, "router.T_anneal must be >= 0");
  require(c.algorithm.epsilon > 0.0, "algorithm.epsilon must be positive");
  require(c.algorithm.n_group >= (c.algorithm.tag == Algorithm::PPO ? 1 : 2),
          "algorithm.n_group must be >= 2 for group estimators");
  require(c.algorithm.div_interval >= 1 && c.algorithm.div_sample >= 1 && c.algorithm.buffer_cap >= 1,
          "diversity schedule values must be >= 1");
  require(c.algorithm.gae_gamma >= 0.0 && c.algorithm.gae_gamma <= 1.0 && c.algorithm.gae_lambda >= 0.0 &&
              c.algorithm.gae_lambda <= 1.0,
          "algorithm.gae_gamma and gae_lambda must be in [0,1]");
  require((c.experts == 0) == (c.routing == RoutingMode::None),
          "routing 'none' is the K=0 single-adapter arm; set policy.K=0 with it and only with it");
  require(c.routing != RoutingMode::TokenTop2 || c.experts >= 2, "token_top2 routing needs K >= 2");
  require(c.surgery == SurgeryMode::Off || c.routing == RoutingMode::None,
          "gradient surgery applies to the single-adapter arm (policy.K=0)");
  require(c.baselines.micro_tokens >= 1, "baselines.micro_tokens must be >= 1");
  require(c.baselines.cagrad_c >= 0.0, "baselines.cagrad_c must be >= 0");
  require(c.training.total_steps >= 1, "training.total_steps must be >= 1");
  require(c.training.groups_per_batch >= 1 && c.training.minibatches >= 1,
          "training batch structure values must be >= 1");
  require(c.training.lr > 0.0 && c.training.max_grad_norm > 0.0, "training.lr and max_grad_norm must be positive");
  require(!c.training.seeds.empty(), "training.seeds must not be empty");
  require(c.training.eval_episodes >= 1, "training.eval_episodes must be >= 1");
  require(c.training.conflict_interval >= 1 && c.training.conflict_probe_steps >= 1,
          "conflict probe settings must be >= 1");
  require(c.training.kl_probe_states >= 1, "training.kl_probe_states must be >= 1");
  require(c.training.warmup.episodes >= 1 && c.training.warmup.epochs >= 0 && c.training.warmup.batch_size >= 1,
          "training.warmup values out of range");
  require(!c.output_dir.empty(), "output_dir must not be empty");
}

namespace {

json schema_of(const json& value, const std::string& key) {
  if (key == "tag") return {{"enum", {"ppo", "rloo", "grpo", "gigpo"}}};
  if (key == "routing") return {{"enum", {"phase", "token", "token_top2", "trajectory", "none"}}};
  if (key == "surgery") return {{"enum", {"off", "pcgrad", "gradnorm", "cagrad"}}};
  if (value.is_object()) {
    json props = json::object();
    for (auto it = value.begin(); it != value.end(); ++it) props[it.key()] = schema_of(it.value(), it.key());
    return {{"type", "object"}, {"properties", props}, {"additionalProperties", false}};
  }
  if (value.is_boolean()) return {{"type", "boolean"}};
  if (value.is_number_integer()) return {{"type", "integer"}};
  if (value.is_number()) return {{"type", "number"}};
  if (value.is_string()) return {{"type", "string"}};
  if (value.is_array()) return {{"type", "array"}, {"items", {{"type", "integer"}, {"minimum", 0}}}};
  return json::object();
}

}  // namespace

json config_schema() {
  json s = schema_of(to_json(ExperimentConfig{}), "");
  s["$schema"] = "http://json-schema.org/draft-07/schema#";
  s["title"] = "pamoe experiment configuration";
  return s;
}

}  // namespace pamoe
