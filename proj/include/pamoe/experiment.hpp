// SPDX-License-Identifier: Apache-2.0
//
// Seeded runs, sweep arms, on-disk outputs and seed aggregation.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pamoe/config.hpp"
#include "pamoe/metrics.hpp"
#include "pamoe/trainer.hpp"

namespace pamoe {

/// Warm-up results shared by every arm with the same backbone settings.
class BackboneCache {
 public:
  const std::vector<ad::Matrix>& get(const ExperimentConfig& config, std::uint64_t seed);

 private:
  std::map<std::string, std::vector<ad::Matrix>> entries_;
};

struct RunResult {
  std::string run_id;
  std::string arm;
  std::uint64_t seed = 0;
  ExperimentConfig config;
  EvaluationResult eval;
  std::vector<BatchStats> batches;
  std::vector<std::pair<int, double>> conflict_trace;  // (update, score)
  OccupancyResult occupancy;        // per task category
  OccupancyResult group_occupancy;  // simple vs complex
  ad::Vector hard_frequencies;      // over evaluation steps
  double mean_step_switches = 0.0;  // per evaluation episode
  double mean_token_switches = 0.0;
  double wall_seconds = 0.0;

  /// Mean conflict score over the last third of the probes; nullopt if none.
  std::optional<double> final_third_conflict() const;
  std::vector<MetricRow> metric_rows() const;
  std::vector<SwitchRow> switch_rows() const;
  std::vector<OccupancyRow> occupancy_rows() const;
};

/// Trains one seed and evaluates the final policy. With `out_dir`, writes
/// the run outputs and a checkpoint there.
RunResult run_training(const ExperimentConfig& config, std::uint64_t seed, const std::string& arm,
                       BackboneCache* cache = nullptr, const std::filesystem::path* out_dir = nullptr);

/// Writes metrics.csv, switches.csv, occupancy.csv, summary.json and
/// checkpoint.bin for one run into `dir`.
void write_run_outputs(const std::filesystem::path& dir, const RunResult& run, Trainer* trainer = nullptr);

struct Arm {
  std::string name;
  ExperimentConfig config;
};

/// Sweep axes: "K", "router_components", "regularizers", "surgery".
std::vector<Arm> ablation_arms(const ExperimentConfig& base, const std::string& axis);
/// token, trajectory and phase arms.
std::vector<Arm> routing_arms(const ExperimentConfig& base);

/// Output root: $PAMOE_OUTPUT_ROOT when set, else the current directory.
std::filesystem::path output_root();

/// Written before training starts.
void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& config,
                    const std::vector<std::string>& arms, const std::vector<std::uint64_t>& seeds);

/// Runs every arm for every configured seed under `dir`/<arm>/seed<k>;
/// returns results in (arm, seed) order.
std::vector<RunResult> run_arms(const std::filesystem::path& dir, const std::vector<Arm>& arms,
                                const std::vector<std::uint64_t>& seeds, BackboneCache& cache,
                                bool verbose = false);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population over seeds
  int n = 0;
};
MeanStd mean_std(const std::vector<double>& values);

/// Per-arm seed aggregation of summary.json files found under the given run
/// directories. Throws UsageError on empty input.
struct ReportRow {
  std::string arm;
  std::string metric;
  MeanStd value;
};
std::vector<ReportRow> build_report(const std::vector<std::filesystem::path>& run_dirs);
void write_report(std::ostream& out, const std::vector<ReportRow>& rows);

/// Collects figure data from the runs under `run_dirs` into `out_dir`:
/// occupancy.csv, conflict_trace.csv and entropy_profile.csv.
void write_figure_data(const std::filesystem::path& out_dir, const std::vector<std::filesystem::path>& run_dirs);

}  // namespace pamoe
