// SPDX-License-Identifier: Apache-2.0
#include "pamoe/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "pamoe/checkpoint.hpp"

namespace pamoe {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<ad::Matrix>& BackboneCache::get(const ExperimentConfig& config, std::uint64_t seed) {
  const json j = to_json(config);
  const json key_doc = {{"seed", seed},
                        {"environment", j["environment"]},
                        {"d_model", config.policy.d_model},
                        {"ffn_width", config.policy.ffn_width},
                        {"blocks", config.policy.blocks},
                        {"warmup", j["training"]["warmup"]}};
  const std::string key = key_doc.dump();
  auto it = entries_.find(key);
  if (it == entries_.end()) it = entries_.emplace(key, warm_backbone(config, seed)).first;
  return it->second;
}

std::optional<double> RunResult::final_third_conflict() const {
  if (conflict_trace.empty()) return std::nullopt;
  const std::size_t start = conflict_trace.size() - std::max<std::size_t>(1, conflict_trace.size() / 3);
  double sum = 0.0;
  for (std::size_t i = start; i < conflict_trace.size(); ++i) sum += conflict_trace[i].second;
  return sum / static_cast<double>(conflict_trace.size() - start);
}

RunResult run_training(const ExperimentConfig& config, std::uint64_t seed, const std::string& arm,
                       BackboneCache* cache, const fs::path* out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r;
  r.arm = arm;
  r.seed = seed;
  r.run_id = arm + "-seed" + std::to_string(seed);
  r.config = config;
  const std::vector<ad::Matrix>* warm = cache != nullptr ? &cache->get(config, seed) : nullptr;
  Trainer trainer(config, seed, warm);
  std::vector<std::vector<double>> ledger;
  std::vector<std::vector<double>> group_ledger;
  while (trainer.env_steps() < config.training.total_steps) {
    BatchStats b = trainer.iterate();
    if (b.conflict) r.conflict_trace.emplace_back(b.updates.empty() ? trainer.updates() : b.updates.front().update, *b.conflict);
    for (const UpdateStats& u : b.updates) {
      ledger.emplace_back(u.category_loss.begin(), u.category_loss.end());
      double simple = 0.0;
      double complex = 0.0;
      for (int c = 0; c < kNumCategories; ++c) {
        (is_simple(static_cast<TaskCategory>(c)) ? simple : complex) += u.category_loss[static_cast<std::size_t>(c)];
      }
      group_ledger.push_back({simple, complex});
    }
    r.batches.push_back(std::move(b));
  }
  r.occupancy = parameter_occupancy(ledger);
  r.group_occupancy = parameter_occupancy(group_ledger);
  r.eval = trainer.evaluate(config.training.eval_episodes);
  r.hard_frequencies = hard_expert_frequencies(r.eval.episodes, config.adapters());
  for (const EpisodeTrace& e : r.eval.episodes) {
    r.mean_step_switches += config.routing == RoutingMode::Token || config.routing == RoutingMode::TokenTop2
                                ? e.token_switches
                                : count_switches(e.z);
    r.mean_token_switches += e.token_switches;
  }
  r.mean_step_switches /= static_cast<double>(r.eval.episodes.size());
  r.mean_token_switches /= static_cast<double>(r.eval.episodes.size());
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out_dir != nullptr) write_run_outputs(*out_dir, r, &trainer);
  return r;
}

std::vector<MetricRow> RunResult::metric_rows() const {
  std::vector<MetricRow> rows;
  auto add = [&](long step, const std::string& name, double value, std::string category = "",
                 std::string expert = "", std::string phase = "") {
    rows.push_back({run_id, seed, step, name, value, std::move(category), std::move(expert), std::move(phase)});
  };
  for (const BatchStats& b : batches) {
    add(b.env_steps, "rollout_success", b.success_rate);
    add(b.env_steps, "rollout_episode_length", b.mean_length);
    add(b.env_steps, "rollout_step_switches", b.mean_switches);
    if (b.conflict) add(b.env_steps, "conflict_score", *b.conflict);
    for (const UpdateStats& u : b.updates) {
      add(u.env_steps, "tau", u.tau);
      add(u.env_steps, "l_rl", u.loss.l_rl);
      add(u.env_steps, "l_div", u.loss.l_div);
      add(u.env_steps, "l_bal", u.loss.l_bal);
      add(u.env_steps, "l_switch", u.loss.l_switch);
      add(u.env_steps, "loss_total", u.loss.total);
      add(u.env_steps, "grad_norm", u.grad_norm);
      for (int c = 0; c < kNumCategories; ++c) {
        add(u.env_steps, "category_loss", u.category_loss[static_cast<std::size_t>(c)],
            std::string(category_name(static_cast<TaskCategory>(c))));
      }
    }
  }
  const long end = batches.empty() ? 0 : batches.back().env_steps;
  add(end, "eval_success", eval.overall_success);
  for (int c = 0; c < kNumCategories; ++c) {
    add(end, "eval_success", eval.success[static_cast<std::size_t>(c)],
        std::string(category_name(static_cast<TaskCategory>(c))));
  }
  add(end, "eval_step_switches", mean_step_switches);
  add(end, "eval_token_switches", mean_token_switches);
  add(end, "kl_mean", eval.kl_mean);
  add(end, "kl_collapse_fraction", eval.kl_collapse_fraction);
  add(end, "phase_alignment_overlap", phase_alignment_overlap(eval.episodes));
  const int K = config.adapters();
  for (int k = 0; k < K; ++k) add(end, "expert_frequency", hard_frequencies(k), "", std::to_string(k));
  const ad::Matrix act = expert_activation_frequency(eval.episodes, PhaseSource::Oracle, K);
  for (int p = 0; p < kNumPhases; ++p) {
    for (int k = 0; k < K; ++k) {
      add(end, "activation_frequency", act(p, k), "", std::to_string(k), std::string(phase_name(static_cast<Phase>(p))));
    }
  }
  for (const PhaseEntropy& s : phase_entropy_stats(eval.episodes, PhaseSource::Oracle)) {
    const std::string ph(phase_name(static_cast<Phase>(s.phase)));
    add(end, "entropy_mean", s.mean, "", "", ph);
    add(end, "entropy_variance", s.variance, "", "", ph);
    add(end, "entropy_abs_deviation", s.mean_abs_deviation, "", "", ph);
  }
  for (const PhaseEntropy& s : phase_entropy_stats(eval.episodes, PhaseSource::Router)) {
    add(end, "entropy_mean", s.mean, "", std::to_string(s.phase));
    add(end, "entropy_variance", s.variance, "", std::to_string(s.phase));
  }
  for (int p = 0; p < kNumPhases; ++p) {
    const auto dom = dominant_expert(eval.episodes, static_cast<Phase>(p));
    if (!dom) continue;
    const std::string ph(phase_name(static_cast<Phase>(p)));
    add(end, "dominant_expert", *dom, "", "", ph);
    if (auto h = expert_phase_entropy(eval.episodes, *dom, static_cast<Phase>(p))) {
      add(end, "dominant_expert_entropy", *h, "", std::to_string(*dom), ph);
    }
  }
  if (auto c = final_third_conflict()) add(end, "conflict_final_third", *c);
  for (int c = 0; c < kNumCategories; ++c) {
    if (!occupancy.occupancy.empty()) {
      add(end, "occupancy", occupancy.occupancy[static_cast<std::size_t>(c)],
          std::string(category_name(static_cast<TaskCategory>(c))));
    }
  }
  if (group_occupancy.occupancy.size() == 2) {
    add(end, "occupancy", group_occupancy.occupancy[0], "simple");
    add(end, "occupancy", group_occupancy.occupancy[1], "complex");
  }
  return rows;
}

std::vector<SwitchRow> RunResult::switch_rows() const {
  std::vector<SwitchRow> rows;
  const std::string mode(to_string(config.routing));
  const bool token = config.routing == RoutingMode::Token || config.routing == RoutingMode::TokenTop2;
  for (const EpisodeTrace& e : eval.episodes) {
    rows.push_back({run_id, e.episode, mode, token ? e.token_switches : count_switches(e.z), e.token_switches});
  }
  return rows;
}

std::vector<OccupancyRow> RunResult::occupancy_rows() const {
  std::vector<OccupancyRow> rows;
  for (int c = 0; c < kNumCategories && c < static_cast<int>(occupancy.occupancy.size()); ++c) {
    rows.push_back({run_id, std::string(category_name(static_cast<TaskCategory>(c))),
                    occupancy.occupancy[static_cast<std::size_t>(c)]});
  }
  if (group_occupancy.occupancy.size() == 2) {
    rows.push_back({run_id, "simple", group_occupancy.occupancy[0]});
    rows.push_back({run_id, "complex", group_occupancy.occupancy[1]});
  }
  return rows;
}

namespace {

json summary_json(const RunResult& r) {
  json success = json::object();
  for (int c = 0; c < kNumCategories; ++c) {
    success[std::string(category_name(static_cast<TaskCategory>(c)))] = r.eval.success[static_cast<std::size_t>(c)];
  }
  json j = {{"run_id", r.run_id},
            {"arm", r.arm},
            {"seed", r.seed},
            {"overall_success", r.eval.overall_success},
            {"success", success},
            {"step_switches", r.mean_step_switches},
            {"token_switches", r.mean_token_switches},
            {"kl_mean", r.eval.kl_mean},
            {"kl_collapse_fraction", r.eval.kl_collapse_fraction},
            {"phase_alignment_overlap", phase_alignment_overlap(r.eval.episodes)},
            {"expert_frequency", std::vector<double>(r.hard_frequencies.data(),
                                                     r.hard_frequencies.data() + r.hard_frequencies.size())}};
  if (auto c = r.final_third_conflict()) j["conflict_final_third"] = *c;
  if (r.group_occupancy.occupancy.size() == 2) {
    j["occupancy_simple"] = r.group_occupancy.occupancy[0];
    j["occupancy_complex"] = r.group_occupancy.occupancy[1];
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

void write_run_outputs(const fs::path& dir, const RunResult& run, Trainer* trainer) {
  fs::create_directories(dir);
  {
    std::ostringstream s;
    write_metrics_csv(s, run.metric_rows());
    write_text(dir / "metrics.csv", s.str());
  }
  {
    std::ostringstream s;
    write_switches_csv(s, run.switch_rows());
    write_text(dir / "switches.csv", s.str());
  }
  {
    std::ostringstream s;
    write_occupancy_csv(s, run.occupancy_rows());
    write_text(dir / "occupancy.csv", s.str());
  }
  write_text(dir / "summary.json", summary_json(run).dump(2) + "\n");
  if (trainer != nullptr) {
    std::vector<ad::Tensor*> tensors = trainer->policy().named_tensors();
    for (ad::Tensor* t : trainer->trainable()) {
      if (std::find(tensors.begin(), tensors.end(), t) == tensors.end()) tensors.push_back(t);
    }
    save_checkpoint((dir / "checkpoint.bin").string(), tensors);
  }
}

std::vector<Arm> routing_arms(const ExperimentConfig& base) {
  std::vector<Arm> arms;
  for (RoutingMode m : {RoutingMode::Token, RoutingMode::Trajectory, RoutingMode::Phase}) {
    ExperimentConfig c = base;
    if (c.experts == 0) c.experts = 4;
    c.routing = m;
    c.surgery = SurgeryMode::Off;
    arms.push_back({std::string(to_string(m)), c});
  }
  return arms;
}

std::vector<Arm> ablation_arms(const ExperimentConfig& base, const std::string& axis) {
  std::vector<Arm> arms;
  ExperimentConfig phase = base;
  if (phase.experts == 0) phase.experts = 4;
  phase.routing = RoutingMode::Phase;
  phase.surgery = SurgeryMode::Off;
  if (axis == "K") {
    for (int k : {0, 2, 3, 4, 5, 6}) {
      ExperimentConfig c = phase;
      c.experts = k;
      if (k == 0) c.routing = RoutingMode::None;
      arms.push_back({"K" + std::to_string(k), c});
    }
  } else if (axis == "router_components") {
    for (auto [name, hist, goal] : {std::tuple{"full", true, true}, {"no_history", false, true},
                                    {"no_goal_attention", true, false}, {"neither", false, false}}) {
      ExperimentConfig c = phase;
      c.router.use_history = hist;
      c.router.use_goal_attention = goal;
      arms.push_back({name, c});
    }
  } else if (axis == "regularizers") {
    for (auto [name, div, bal] : {std::tuple{"both", true, true}, {"no_div", false, true},
                                  {"no_bal", true, false}, {"neither", false, false}}) {
      ExperimentConfig c = phase;
      if (!div) c.algorithm.alpha = 0.0;
      if (!bal) c.algorithm.beta = 0.0;
      arms.push_back({name, c});
    }
  } else if (axis == "surgery") {
    arms.push_back({"pamoe", phase});
    for (SurgeryMode s : {SurgeryMode::Off, SurgeryMode::PCGrad, SurgeryMode::GradNorm, SurgeryMode::CAGrad}) {
      ExperimentConfig c = base;
      c.experts = 0;
      c.routing = RoutingMode::None;
      c.surgery = s;
      arms.push_back({s == SurgeryMode::Off ? "K0" : "K0_" + std::string(to_string(s)), c});
    }
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "' (K, router_components, regularizers, surgery)");
  }
  for (const Arm& a : arms) validate(a.config);
  return arms;
}

fs::path output_root() {
  const char* env = std::getenv("PAMOE_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::current_path();
}

namespace {

std::string code_version() {
#ifdef PAMOE_VERSION
  return PAMOE_VERSION;
#else
  return "unknown";
#endif
}

}  // namespace

void write_manifest(const fs::path& dir, const ExperimentConfig& config, const std::vector<std::string>& arms,
                    const std::vector<std::uint64_t>& seeds) {
  fs::create_directories(dir);
  json paths = json::object();
  for (const std::string& a : arms) {
    for (std::uint64_t s : seeds) paths[a + "/seed" + std::to_string(s)] = (dir / a / ("seed" + std::to_string(s))).string();
  }
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  const json manifest = {{"config", to_json(config)},
                         {"code_version", code_version()},
                         {"arms", arms},
                         {"seeds", seeds},
                         {"outputs", paths},
                         {"started_unix_seconds", std::chrono::duration_cast<std::chrono::seconds>(now).count()}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<RunResult> run_arms(const fs::path& dir, const std::vector<Arm>& arms,
                                const std::vector<std::uint64_t>& seeds, BackboneCache& cache, bool verbose) {
  std::vector<RunResult> out;
  for (const Arm& arm : arms) {
    for (std::uint64_t seed : seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      const fs::path run_dir = dir / arm.name / ("seed" + std::to_string(seed));
      RunResult r = run_training(arm.config, seed, arm.name, &cache, &run_dir);
      if (verbose) {
        std::cerr << arm.name << " seed " << seed << ": success " << r.eval.overall_success << ", switches "
                  << r.mean_step_switches << " ("
                  << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s)\n";
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd m;
  m.n = static_cast<int>(values.size());
  if (values.empty()) return m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  for (double v : values) m.std += (v - m.mean) * (v - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(values.size()));
  return m;
}

std::vector<ReportRow> build_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw UsageError("report: no run directories given");
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::set<std::string> seen;
  for (const fs::path& root : run_dirs) {
    if (!fs::exists(root)) {
      std::cerr << "warning: missing run directory '" << root.string() << "'\n";
      continue;
    }
    std::vector<fs::path> files;
    if (fs::is_regular_file(root)) {
      files.push_back(root);
    } else {
      for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file() && entry.path().filename() == "summary.json") files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      if (!seen.insert(fs::weakly_canonical(f).string()).second) continue;
      std::ifstream in(f);
      const json j = json::parse(in);
      const std::string arm = j.at("arm").get<std::string>();
      auto& m = values[arm];
      m["overall_success"].push_back(j.at("overall_success").get<double>());
      for (auto it = j.at("success").begin(); it != j.at("success").end(); ++it) {
        m["success_" + it.key()].push_back(it.value().get<double>());
      }
      for (const char* key : {"step_switches", "token_switches", "kl_mean", "kl_collapse_fraction",
                              "phase_alignment_overlap", "conflict_final_third", "occupancy_simple",
                              "occupancy_complex"}) {
        if (j.contains(key)) m[key].push_back(j.at(key).get<double>());
      }
    }
  }
  if (values.empty()) throw UsageError("report: no summary.json found");
  std::vector<ReportRow> rows;
  for (const auto& [arm, metrics] : values) {
    for (const auto& [metric, vs] : metrics) rows.push_back({arm, metric, mean_std(vs)});
  }
  return rows;
}

void write_report(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "arm,metric,mean,std,n\n";
  for (const ReportRow& r : rows) {
    out << r.arm << ',' << r.metric << ',' << format_number(r.value.mean) << ',' << format_number(r.value.std) << ','
        << r.value.n << '\n';
  }
}

namespace {

std::vector<fs::path> find_files(const std::vector<fs::path>& run_dirs, const std::string& name) {
  std::vector<fs::path> files;
  std::set<std::string> seen;
  for (const fs::path& root : run_dirs) {
    if (!fs::is_directory(root)) continue;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().filename() == name &&
          seen.insert(fs::weakly_canonical(entry.path()).string()).second) {
        files.push_back(entry.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string csv_field(const std::string& line, int index) {
  std::size_t start = 0;
  for (int i = 0; i < index; ++i) {
    start = line.find(',', start);
    if (start == std::string::npos) return {};
    ++start;
  }
  return line.substr(start, line.find(',', start) - start);
}

void concat_csv(const fs::path& out_path, const std::vector<fs::path>& files,
                const std::function<bool(const std::string&)>& keep) {
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + out_path.string() + "'");
  bool header_written = false;
  for (const fs::path& f : files) {
    std::ifstream in(f);
    std::string line;
    if (!std::getline(in, line)) continue;
    if (!header_written) {
      out << line << '\n';
      header_written = true;
    }
    while (std::getline(in, line)) {
      if (keep(line)) out << line << '\n';
    }
  }
}

}  // namespace

void write_figure_data(const fs::path& out_dir, const std::vector<fs::path>& run_dirs) {
  fs::create_directories(out_dir);
  concat_csv(out_dir / "occupancy.csv", find_files(run_dirs, "occupancy.csv"), [](const std::string&) { return true; });
  const std::vector<fs::path> metrics = find_files(run_dirs, "metrics.csv");
  concat_csv(out_dir / "conflict_trace.csv", metrics,
             [](const std::string& line) { return csv_field(line, 3) == "conflict_score"; });
  concat_csv(out_dir / "entropy_profile.csv", metrics, [](const std::string& line) {
    return csv_field(line, 3).find("entropy") != std::string::npos;
  });
}

}  // namespace pamoe
