// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "pamoe/errors.hpp"
#include "pamoe/metrics.hpp"
#include "pamoe/policy.hpp"
#include "pamoe/router.hpp"

using namespace pamoe;
using Vec = Eigen::VectorXd;

namespace {

EpisodeTrace trace(std::vector<int> z, std::vector<int> phase, std::vector<double> entropy = {}) {
  EpisodeTrace t;
  t.z = std::move(z);
  t.phase = std::move(phase);
  t.entropy = entropy.empty() ? std::vector<double>(t.z.size(), 1.0) : std::move(entropy);
  return t;
}

double cosine_oracle(const std::vector<Vec>& g) {
  double acc = 0.0;
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0, a = 0.0, b = 0.0;
      for (Eigen::Index k = 0; k < g[i].size(); ++k) {
        dot += g[i](k) * g[j](k);
        a += g[i](k) * g[i](k);
        b += g[j](k) * g[j](k);
      }
      acc += std::max(0.0, -dot / std::sqrt(a * b));
    }
  }
  return acc / static_cast<double>(n * n - n);
}

}  // namespace

TEST_CASE("extract_phases") {
  const std::vector<int> z{1, 1, 2, 2, 2, 1};
  const std::vector<PhaseSegment> want{{1, 0, 1}, {2, 2, 4}, {1, 5, 5}};
  CHECK(extract_phases(z) == want);
  CHECK(extract_phases(std::vector<int>{3, 3, 3}).size() == 1u);
  CHECK_THROWS_AS(extract_phases(std::vector<int>{}), DomainError);
  std::mt19937_64 rng(1);
  for (int c = 0; c < 300; ++c) {
    std::vector<int> seq(1 + rng() % 40);
    for (int& v : seq) v = static_cast<int>(rng() % 3);
    const auto segs = extract_phases(seq);
    CHECK(static_cast<int>(segs.size()) - 1 == oracle::switches(seq));
    std::vector<int> rebuilt;
    for (std::size_t s = 0; s < segs.size(); ++s) {
      if (s > 0) CHECK(segs[s].expert != segs[s - 1].expert);
      if (s > 0) CHECK(segs[s].start == segs[s - 1].end + 1);
      for (int t = segs[s].start; t <= segs[s].end; ++t) rebuilt.push_back(segs[s].expert);
    }
    CHECK(rebuilt == seq);
  }
}

TEST_CASE("parameter_occupancy") {
  SUBCASE("one dominant category") {
    const auto r = parameter_occupancy({{3, 1, 0}, {5, 0, 1}});
    CHECK(r.occupancy == std::vector<double>{1.0, 0.0, 0.0});
  }
  SUBCASE("exact halves count for nobody") {
    const auto r = parameter_occupancy({{1, 1}, {2, 2}});
    CHECK(r.occupancy == std::vector<double>{0.0, 0.0});
  }
  SUBCASE("zero-loss batches are excluded") {
    const auto r = parameter_occupancy({{0, 0}, {1, 0}});
    CHECK(r.excluded == 1);
    CHECK(r.occupancy[0] == 1.0);
  }
  SUBCASE("planted pattern over 100 batches") {
    std::vector<std::vector<double>> ledger;
    for (int b = 0; b < 100; ++b) {
      if (b % 4 == 0) ledger.push_back({0.2, 0.7, 0.1});       // column 1 dominates
      else if (b % 4 == 1) ledger.push_back({0.5, 0.25, 0.25}); // tie at one half
      else ledger.push_back({0.9, 0.05, 0.05});                 // column 0 dominates
    }
    const auto r = parameter_occupancy(ledger);
    CHECK(r.occupancy[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r.occupancy[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(r.occupancy[2] == 0.0);
  }
  SUBCASE("fractions stay in [0,1] and sum to at most 1") {
    std::mt19937_64 rng(2);
    std::vector<std::vector<double>> ledger(50, std::vector<double>(4));
    for (auto& row : ledger) {
      for (double& v : row) v = oracle::uniform(rng, 0, 1) * (rng() % 3 == 0 ? 5 : 1);
    }
    const auto r = parameter_occupancy(ledger);
    double total = 0.0;
    for (double o : r.occupancy) {
      CHECK(o >= 0.0);
      CHECK(o <= 1.0);
      total += o;
    }
    CHECK(total <= 1.0 + 1e-12);
  }
}

TEST_CASE("gradient_conflict_score") {
  Vec a(3);
  a << 1, 2, -1;
  CHECK(gradient_conflict_score({a, a}) == 0.0);
  CHECK(gradient_conflict_score({a, -a}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gradient_conflict_score({a, Vec::Zero(3)}) == 0.0);
  CHECK_THROWS_AS(gradient_conflict_score({a}), DomainError);
  std::mt19937_64 rng(3);
  for (int c = 0; c < 200; ++c) {
    std::vector<Vec> g(4, Vec(6));
    for (auto& v : g) {
      for (int i = 0; i < 6; ++i) v(i) = oracle::uniform(rng, -1, 1);
    }
    const double s = gradient_conflict_score(g);
    CHECK(std::abs(s - cosine_oracle(g)) <= 1e-12);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    std::vector<Vec> perm{g[2], g[0], g[3], g[1]};
    CHECK(std::abs(gradient_conflict_score(perm) - s) <= 1e-12);
  }
}

TEST_CASE("phase_entropy_stats") {
  const double uniform8 = policy_entropy(ad::Vector::Constant(8, 0.125));
  SUBCASE("uniform distributions") {
    std::vector<EpisodeTrace> eps{trace({0, 0, 1, 1}, {0, 1, 2, 3}, std::vector<double>(4, uniform8))};
    for (auto source : {PhaseSource::Router, PhaseSource::Oracle}) {
      for (const auto& s : phase_entropy_stats(eps, source)) {
        CHECK(s.mean == doctest::Approx(3.0).epsilon(1e-15));
        CHECK(s.variance == doctest::Approx(0.0));
      }
    }
  }
  SUBCASE("one-hot distributions") {
    std::vector<EpisodeTrace> eps{trace({0, 1}, {0, 1}, {0.0, 0.0})};
    for (const auto& s : phase_entropy_stats(eps, PhaseSource::Oracle)) {
      CHECK(s.mean == 0.0);
      CHECK(s.variance == 0.0);
    }
  }
  SUBCASE("mixed episode matches per-step recomputation") {
    std::mt19937_64 rng(4);
    std::vector<EpisodeTrace> eps;
    for (int e = 0; e < 5; ++e) {
      EpisodeTrace t;
      const int len = 3 + static_cast<int>(rng() % 10);
      for (int s = 0; s < len; ++s) {
        ad::Vector p(9);
        for (int i = 0; i < 9; ++i) p(i) = oracle::uniform(rng, 0.01, 1.0);
        p /= p.sum();
        double h = 0.0;
        for (int i = 0; i < 9; ++i) h -= p(i) * std::log2(p(i));
        t.entropy.push_back(h);
        t.phase.push_back(static_cast<int>(rng() % 4));
        t.z.push_back(static_cast<int>(rng() % 2));
      }
      eps.push_back(t);
    }
    for (const auto& s : phase_entropy_stats(eps, PhaseSource::Oracle)) {
      std::vector<double> hs;
      for (const auto& t : eps) {
        for (std::size_t i = 0; i < t.phase.size(); ++i) {
          if (t.phase[i] == s.phase) hs.push_back(t.entropy[i]);
        }
      }
      double mean = 0.0;
      for (double h : hs) mean += h;
      mean /= static_cast<double>(hs.size());
      double var = 0.0, mad = 0.0;
      for (double h : hs) {
        var += (h - mean) * (h - mean);
        mad += std::abs(h - mean);
      }
      CHECK(s.count == static_cast<long>(hs.size()));
      CHECK(std::abs(s.mean - mean) <= 1e-12);
      CHECK(std::abs(s.variance - var / static_cast<double>(hs.size())) <= 1e-12);
      CHECK(std::abs(s.mean_abs_deviation - mad / static_cast<double>(hs.size())) <= 1e-12);
    }
  }
  SUBCASE("empty phases are omitted") {
    std::vector<EpisodeTrace> eps{trace({0, 0}, {2, 2})};
    const auto stats = phase_entropy_stats(eps, PhaseSource::Oracle);
    REQUIRE(stats.size() == 1u);
    CHECK(stats[0].phase == 2);
  }
}

TEST_CASE("expert_activation_frequency") {
  SUBCASE("single expert") {
    std::vector<EpisodeTrace> eps{trace({0, 0, 0, 0}, {0, 1, 2, 3})};
    const ad::Matrix f = expert_activation_frequency(eps, PhaseSource::Oracle, 1);
    CHECK((f.array() == 1.0).all());
  }
  SUBCASE("uniform random routing") {
    Rng rng(5);
    EpisodeTrace t;
    for (int i = 0; i < 40000; ++i) {
      t.z.push_back(static_cast<int>(rng() % 4));
      t.phase.push_back(static_cast<int>(rng() % 4));
      t.entropy.push_back(0.0);
    }
    const ad::Matrix f = expert_activation_frequency({t}, PhaseSource::Oracle, 4);
    CHECK((f.array() - 0.25).abs().maxCoeff() < 0.02);
    for (int p = 0; p < 4; ++p) CHECK(f.row(p).sum() == doctest::Approx(1.0).epsilon(1e-12));
    const ad::Vector hard = hard_expert_frequencies({t}, 4);
    CHECK(hard.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("perfect specialization") {
    std::vector<EpisodeTrace> eps{trace({0, 1, 2, 3, 3, 2}, {0, 1, 2, 3, 3, 2})};
    const ad::Matrix f = expert_activation_frequency(eps, PhaseSource::Oracle, 4);
    CHECK(f == ad::Matrix::Identity(4, 4));
    CHECK(dominant_expert(eps, Phase::Manipulate) == 2);
    CHECK_FALSE(dominant_expert({trace({0}, {0})}, Phase::Recover).has_value());
  }
}

TEST_CASE("phase_alignment_overlap") {
  CHECK(phase_alignment_overlap({trace({3, 3, 1, 1, 0, 2}, {0, 0, 1, 1, 2, 3})}) == 1.0);
  CHECK(phase_alignment_overlap({trace({0, 0, 0, 0, 0, 0, 0, 0}, {0, 0, 1, 1, 2, 2, 3, 3})}) == doctest::Approx(0.25).epsilon(1e-15));
  Rng rng(6);
  EpisodeTrace t;
  for (int i = 0; i < 40000; ++i) {
    t.z.push_back(static_cast<int>(rng() % 4));
    t.phase.push_back(static_cast<int>(rng() % 4));
    t.entropy.push_back(0.0);
  }
  CHECK(std::abs(phase_alignment_overlap({t}) - 0.25) < 0.02);
}

TEST_CASE("expert_phase_entropy") {
  std::vector<EpisodeTrace> eps{trace({0, 0, 1, 1}, {2, 2, 0, 2}, {1.0, 2.0, 3.0, 5.0})};
  CHECK(expert_phase_entropy(eps, 0, Phase::Manipulate) == 1.5);
  CHECK(expert_phase_entropy(eps, 1, Phase::Manipulate) == 5.0);
  CHECK_FALSE(expert_phase_entropy(eps, 0, Phase::Recover).has_value());
}

TEST_CASE("csv writers") {
  std::ostringstream m;
  write_metrics_csv(m, {{"r", 1, 10, "x", 0.1, "Heat", "2", "Explore"}, {"r", 1, 11, "y", 3.0, "", "", ""}});
  CHECK(m.str() ==
        "run_id,seed,step,name,value,tag_category,tag_expert,tag_phase\n"
        "r,1,10,x,0.1,Heat,2,Explore\n"
        "r,1,11,y,3,,,\n");
  std::ostringstream s;
  write_switches_csv(s, {{"r", 0, "phase", 4, 0}});
  CHECK(s.str() == "run_id,episode,routing_mode,step_switches,token_switches\nr,0,phase,4,0\n");
  std::ostringstream o;
  write_occupancy_csv(o, {{"r", "Look", 0.25}}, false);
  CHECK(o.str() == "r,Look,0.25\n");
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 12345.678, -0.0}) CHECK(std::stod(format_number(v)) == v);
}
