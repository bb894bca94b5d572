// SPDX-License-Identifier: Apache-2.0
#include "pamoe/metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <iostream>
#include <map>

namespace pamoe {

std::vector<PhaseSegment> extract_phases(std::span<const int> z) {
  if (z.empty()) throw DomainError("extract_phases: empty sequence");
  std::vector<PhaseSegment> out;
  int start = 0;
  for (int t = 1; t <= static_cast<int>(z.size()); ++t) {
    if (t == static_cast<int>(z.size()) || z[static_cast<std::size_t>(t)] != z[static_cast<std::size_t>(start)]) {
      out.push_back({z[static_cast<std::size_t>(start)], start, t - 1});
      start = t;
    }
  }
  return out;
}

OccupancyResult parameter_occupancy(const std::vector<std::vector<double>>& ledger) {
  OccupancyResult r;
  if (ledger.empty()) return r;
  const std::size_t cols = ledger.front().size();
  r.occupancy.assign(cols, 0.0);
  int counted = 0;
  for (const auto& row : ledger) {
    if (row.size() != cols) throw ShapeError("parameter_occupancy: ragged ledger");
    double total = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw DomainError("parameter_occupancy: negative or NaN loss");
      total += v;
    }
    if (total <= 0.0) {
      ++r.excluded;
      continue;
    }
    ++counted;
    for (std::size_t c = 0; c < cols; ++c) {
      if (row[c] / total > 0.5) r.occupancy[c] += 1.0;
    }
  }
  if (r.excluded > 0) {
    std::cerr << "warning: parameter_occupancy excluded " << r.excluded << " zero-loss batches\n";
  }
  if (counted > 0) {
    for (double& v : r.occupancy) v /= counted;
  }
  return r;
}

double gradient_conflict_score(const std::vector<ad::Vector>& grads) {
  const std::size_t n = grads.size();
  if (n < 2) throw DomainError("gradient_conflict_score: need at least two gradients");
  double total = 0.0;
  bool warned = false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (grads[i].size() != grads[j].size()) throw ShapeError("gradient_conflict_score: size mismatch");
      const double ni = grads[i].norm();
      const double nj = grads[j].norm();
      if (ni == 0.0 || nj == 0.0) {
        warned = true;
        continue;
      }
      total += std::max(0.0, -grads[i].dot(grads[j]) / (ni * nj));
    }
  }
  if (warned) std::cerr << "warning: gradient_conflict_score saw a zero gradient\n";
  return std::clamp(total / static_cast<double>(n * n - n), 0.0, 1.0);
}

namespace {

const std::vector<int>& labels(const EpisodeTrace& e, PhaseSource source) {
  return source == PhaseSource::Router ? e.z : e.phase;
}

}  // namespace

std::vector<PhaseEntropy> phase_entropy_stats(const std::vector<EpisodeTrace>& episodes,
                                              PhaseSource source) {
  std::map<int, std::vector<double>> by_phase;
  for (const EpisodeTrace& e : episodes) {
    const auto& lab = labels(e, source);
    if (lab.size() != e.entropy.size()) throw ShapeError("phase_entropy_stats: label/entropy length mismatch");
    for (std::size_t t = 0; t < lab.size(); ++t) by_phase[lab[t]].push_back(e.entropy[t]);
  }
  std::vector<PhaseEntropy> out;
  for (const auto& [phase, hs] : by_phase) {
    PhaseEntropy s;
    s.phase = phase;
    s.count = static_cast<long>(hs.size());
    for (double h : hs) s.mean += h;
    s.mean /= static_cast<double>(hs.size());
    for (double h : hs) {
      s.variance += (h - s.mean) * (h - s.mean);
      s.mean_abs_deviation += std::abs(h - s.mean);
    }
    s.variance /= static_cast<double>(hs.size());
    s.mean_abs_deviation /= static_cast<double>(hs.size());
    out.push_back(s);
  }
  return out;
}

ad::Matrix expert_activation_frequency(const std::vector<EpisodeTrace>& episodes, PhaseSource source,
                                       int num_experts) {
  const int phases = source == PhaseSource::Oracle ? kNumPhases : num_experts;
  ad::Matrix m = ad::Matrix::Zero(phases, num_experts);
  for (const EpisodeTrace& e : episodes) {
    const auto& lab = labels(e, source);
    if (lab.size() != e.z.size()) throw ShapeError("expert_activation_frequency: length mismatch");
    for (std::size_t t = 0; t < lab.size(); ++t) {
      if (lab[t] < 0 || lab[t] >= phases || e.z[t] < 0 || e.z[t] >= num_experts) {
        throw DomainError("expert_activation_frequency: label out of range");
      }
      m(lab[t], e.z[t]) += 1.0;
    }
  }
  for (int p = 0; p < phases; ++p) {
    const double total = m.row(p).sum();
    if (total > 0.0) m.row(p) /= total;
  }
  return m;
}

ad::Vector hard_expert_frequencies(const std::vector<EpisodeTrace>& episodes, int num_experts) {
  ad::Vector f = ad::Vector::Zero(num_experts);
  double total = 0.0;
  for (const EpisodeTrace& e : episodes) {
    for (int z : e.z) {
      if (z < 0 || z >= num_experts) throw DomainError("hard_expert_frequencies: expert out of range");
      f(z) += 1.0;
      total += 1.0;
    }
  }
  if (total > 0.0) f /= total;
  return f;
}

double phase_alignment_overlap(const std::vector<EpisodeTrace>& episodes) {
  std::map<int, std::array<long, kNumPhases>> votes;
  long steps = 0;
  for (const EpisodeTrace& e : episodes) {
    if (e.z.size() != e.phase.size()) throw ShapeError("phase_alignment_overlap: length mismatch");
    for (std::size_t t = 0; t < e.z.size(); ++t) {
      auto& v = votes.try_emplace(e.z[t], std::array<long, kNumPhases>{}).first->second;
      ++v[static_cast<std::size_t>(e.phase[t])];
      ++steps;
    }
  }
  if (steps == 0) return 0.0;
  long matched = 0;
  for (const auto& [expert, v] : votes) matched += *std::max_element(v.begin(), v.end());
  return static_cast<double>(matched) / static_cast<double>(steps);
}

std::optional<int> dominant_expert(const std::vector<EpisodeTrace>& episodes, Phase phase) {
  std::map<int, long> counts;
  for (const EpisodeTrace& e : episodes) {
    for (std::size_t t = 0; t < e.z.size(); ++t) {
      if (e.phase[t] == static_cast<int>(phase)) ++counts[e.z[t]];
    }
  }
  if (counts.empty()) return std::nullopt;
  int best = counts.begin()->first;
  for (const auto& [k, c] : counts) {
    if (c > counts[best]) best = k;
  }
  return best;
}

std::optional<double> expert_phase_entropy(const std::vector<EpisodeTrace>& episodes, int expert,
                                           Phase phase) {
  double sum = 0.0;
  long n = 0;
  for (const EpisodeTrace& e : episodes) {
    for (std::size_t t = 0; t < e.z.size(); ++t) {
      if (e.z[t] == expert && e.phase[t] == static_cast<int>(phase)) {
        sum += e.entropy[t];
        ++n;
      }
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::string format_number(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::string field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows, bool header) {
  if (header) out << "run_id,seed,step,name,value,tag_category,tag_expert,tag_phase\n";
  for (const MetricRow& r : rows) {
    out << field(r.run_id) << ',' << r.seed << ',' << r.step << ',' << field(r.name) << ','
        << format_number(r.value) << ',' << field(r.category) << ',' << field(r.expert) << ','
        << field(r.phase) << '\n';
  }
}

void write_switches_csv(std::ostream& out, const std::vector<SwitchRow>& rows, bool header) {
  if (header) out << "run_id,episode,routing_mode,step_switches,token_switches\n";
  for (const SwitchRow& r : rows) {
    out << field(r.run_id) << ',' << r.episode << ',' << field(r.routing_mode) << ',' << r.step_switches
        << ',' << r.token_switches << '\n';
  }
}

void write_occupancy_csv(std::ostream& out, const std::vector<OccupancyRow>& rows, bool header) {
  if (header) out << "run_id,category,occupancy\n";
  for (const OccupancyRow& r : rows) {
    out << field(r.run_id) << ',' << field(r.category) << ',' << format_number(r.occupancy) << '\n';
  }
}

}  // namespace pamoe
