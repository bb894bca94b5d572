// SPDX-License-Identifier: Apache-2.0
#include "pamoe/advantages.hpp"

#include <map>
#include <numeric>
#include <utility>

namespace pamoe {

std::vector<std::vector<double>> gigpo_group_advantages(const std::vector<GroupTrajectory>& group,
                                                        bool standardize) {
  const std::size_t n = group.size();
  VectorX<double> returns(static_cast<Eigen::Index>(n));
  std::vector<std::vector<double>> to_go(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tr = group[i];
    if (tr.anchors.size() != tr.rewards.size()) {
      throw ShapeError("gigpo_group_advantages: anchors and rewards differ in length");
    }
    to_go[i].resize(tr.rewards.size());
    double acc = 0.0;
    for (std::size_t t = tr.rewards.size(); t-- > 0;) {
      acc += tr.rewards[t];
      to_go[i][t] = acc;
    }
    returns(static_cast<Eigen::Index>(i)) = acc;
  }
  const VectorX<double> episode = grpo_advantages<double>(returns, standardize);

  // std::map keeps cluster iteration order independent of hashing.
  std::map<std::uint64_t, std::vector<std::pair<std::size_t, std::size_t>>> clusters;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < group[i].anchors.size(); ++t) {
      clusters[group[i].anchors[t]].emplace_back(i, t);
    }
  }

  std::vector<std::vector<double>> adv(n);
  for (std::size_t i = 0; i < n; ++i) {
    adv[i].assign(group[i].rewards.size(), episode(static_cast<Eigen::Index>(i)));
  }
  for (const auto& [anchor, members] : clusters) {
    if (members.size() < 2) continue;
    VectorX<double> g(static_cast<Eigen::Index>(members.size()));
    for (std::size_t m = 0; m < members.size(); ++m) {
      g(static_cast<Eigen::Index>(m)) = to_go[members[m].first][members[m].second];
    }
    const VectorX<double> step = grpo_advantages<double>(g, standardize);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto [i, t] = members[m];
      adv[i][t] = 0.5 * (episode(static_cast<Eigen::Index>(i)) + step(static_cast<Eigen::Index>(m)));
    }
  }
  return adv;
}

}  // namespace pamoe
