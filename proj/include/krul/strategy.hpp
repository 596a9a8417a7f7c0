// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <vector>

#include "krul/analysis.hpp"

namespace krul::strategy {

struct StrategyConfig {
  double r_l = 0.5;  // target shared-layer fraction of all layers

  void validate() const;  // throws ConfigError
};

struct StrategyPair {
  int shallow = 0;  // i
  int deep = 0;     // j, i < j
  double distance = 0.0;

  bool operator==(const StrategyPair&) const = default;
};

struct CompressionStrategy {
  std::vector<StrategyPair> pairs;  // selection order, distances non-decreasing
  std::set<int> shared;             // every layer that appears in a pair
  // Set when the candidate pool ran out (or had fewer than two layers)
  // before the shared-layer quota was met.
  bool exhausted_before_quota = false;

  bool is_paired(int layer) const { return shared.count(layer) > 0; }
  bool operator==(const CompressionStrategy&) const = default;
};

int shared_layer_quota(int n_layers, double r_l);

// Greedy ascending-distance pairing over the classifier's compressible
// layers: walk candidate pairs by (distance, i, j), accept a pair when
// neither member is taken yet, stop once the quota is met.
CompressionStrategy select_strategy(const analysis::DistanceMatrix& distances,
                                    const std::vector<int>& ir_layers,
                                    const StrategyConfig& cfg, int n_layers);

struct StrategyViolation {
  std::string kind;  // "layer reuse", "non-I-R member", ...
  std::string detail;
};

std::vector<StrategyViolation> validate_strategy(
    const CompressionStrategy& strategy, const std::vector<int>& ir_layers,
    int n_layers, double r_l);

}  // namespace krul::strategy
