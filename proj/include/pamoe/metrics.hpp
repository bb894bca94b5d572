// SPDX-License-Identifier: Apache-2.0
//
// Analyses over recorded episodes and training ledgers, plus tidy CSV output.
#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pamoe/autodiff.hpp"
#include "pamoe/environment.hpp"

namespace pamoe {

/// Maximal run of one expert index, [start, end] inclusive.
struct PhaseSegment {
  int expert = 0;
  int start = 0;
  int end = 0;
  friend bool operator==(const PhaseSegment&, const PhaseSegment&) = default;
};

/// DomainError on an empty sequence.
std::vector<PhaseSegment> extract_phases(std::span<const int> z);

/// One evaluated (or rolled-out) episode.
struct EpisodeTrace {
  int episode = 0;
  TaskCategory category = TaskCategory::PickPlace;
  bool success = false;
  std::vector<int> z;          // routed expert per step
  std::vector<int> phase;      // oracle phase per step
  std::vector<double> entropy; // policy entropy (bits) per step
  int token_switches = 0;      // steps with an intra-action expert change
};

struct OccupancyResult {
  std::vector<double> occupancy;  // per ledger column
  int excluded = 0;               // batches with zero total loss
};

/// Fraction of batches in which column c holds strictly more than half of
/// the batch loss. Rows must be nonnegative.
OccupancyResult parameter_occupancy(const std::vector<std::vector<double>>& ledger);

/// Mean over ordered pairs i != j of max(0, -cos(g_i, g_j)). Pairs with a
/// zero gradient contribute 0. DomainError for fewer than two gradients.
double gradient_conflict_score(const std::vector<ad::Vector>& grads);

enum class PhaseSource { Router, Oracle };

struct PhaseEntropy {
  int phase = 0;
  long count = 0;
  double mean = 0.0;
  double variance = 0.0;           // population, bits^2
  double mean_abs_deviation = 0.0; // mean |H_t - mean|
};

/// Entropy statistics per phase label (expert index or oracle phase);
/// labels with no steps are omitted.
std::vector<PhaseEntropy> phase_entropy_stats(const std::vector<EpisodeTrace>& episodes,
                                              PhaseSource source);

/// Row p, column k: fraction of steps with phase label p routed to expert k.
/// Rows without steps are all zero.
ad::Matrix expert_activation_frequency(const std::vector<EpisodeTrace>& episodes, PhaseSource source,
                                       int num_experts);

/// Hard routing frequencies over all steps, length num_experts.
ad::Vector hard_expert_frequencies(const std::vector<EpisodeTrace>& episodes, int num_experts);

/// Each expert is mapped to the oracle phase it serves most often (ties to
/// the lower phase); returns the fraction of steps whose mapped phase equals
/// the oracle phase.
double phase_alignment_overlap(const std::vector<EpisodeTrace>& episodes);

/// Expert whose steps most often carry oracle phase `phase` (ties to the
/// lower index); nullopt when the phase never occurs.
std::optional<int> dominant_expert(const std::vector<EpisodeTrace>& episodes, Phase phase);

/// Mean entropy of steps with oracle phase `phase` routed to `expert`.
std::optional<double> expert_phase_entropy(const std::vector<EpisodeTrace>& episodes, int expert,
                                           Phase phase);

// Tidy CSV rows.

struct MetricRow {
  std::string run_id;
  std::uint64_t seed = 0;
  long step = 0;
  std::string name;
  double value = 0.0;
  std::string category;  // empty when untagged
  std::string expert;
  std::string phase;
};

struct SwitchRow {
  std::string run_id;
  int episode = 0;
  std::string routing_mode;
  int step_switches = 0;
  int token_switches = 0;
};

struct OccupancyRow {
  std::string run_id;
  std::string category;
  double occupancy = 0.0;
};

/// Shortest round-trip decimal representation.
std::string format_number(double value);

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows, bool header = true);
void write_switches_csv(std::ostream& out, const std::vector<SwitchRow>& rows, bool header = true);
void write_occupancy_csv(std::ostream& out, const std::vector<OccupancyRow>& rows, bool header = true);

}  // namespace pamoe
