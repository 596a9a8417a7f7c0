// SPDX-License-Identifier: Apache-2.0
#include "krul/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace krul::strategy {

void StrategyConfig::validate() const {
  if (r_l < 0.0 || r_l > 1.0) {
    throw ConfigError("r_l must lie in [0, 1]");
  }
}

int shared_layer_quota(int n_layers, double r_l) {
  if (r_l < 0.0 || r_l > 1.0) {
    throw ConfigError("r_l must lie in [0, 1]");
  }
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  // The epsilon keeps exact products (e.g. 32 * 0.5) from ceiling upward on
  // floating-point fuzz.
  const double quota = std::ceil(static_cast<double>(n_layers) * r_l - 1e-9);
  return quota < 0.0 ? 0 : static_cast<int>(quota);
}

CompressionStrategy select_strategy(const analysis::DistanceMatrix& distances,
                                    const std::vector<int>& ir_layers,
                                    const StrategyConfig& cfg, int n_layers) {
  cfg.validate();
  const int quota = shared_layer_quota(n_layers, cfg.r_l);

  CompressionStrategy strategy;
  if (quota == 0) return strategy;

  std::vector<int> layers = ir_layers;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.size() < 2) {
    strategy.exhausted_before_quota = true;
    return strategy;
  }

  struct Candidate {
    double distance;
    int i;
    int j;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(layers.size() * (layers.size() - 1) / 2);
  for (size_t a = 0; a < layers.size(); ++a) {
    for (size_t b = a + 1; b < layers.size(); ++b) {
      candidates.push_back(
          {distances.at(layers[a], layers[b]), layers[a], layers[b]});
    }
  }
  std::sort(candidates.begin(), candidates.end(),
            [](const Candidate& x, const Candidate& y) {
              return std::tie(x.distance, x.i, x.j) <
                     std::tie(y.distance, y.i, y.j);
            });

  for (const auto& c : candidates) {
    if (static_cast<int>(strategy.shared.size()) >= quota) break;
    if (strategy.shared.count(c.i) || strategy.shared.count(c.j)) continue;
    strategy.pairs.push_back({c.i, c.j, c.distance});
    strategy.shared.insert(c.i);
    strategy.shared.insert(c.j);
  }
  if (static_cast<int>(strategy.shared.size()) < quota) {
    strategy.exhausted_before_quota = true;
  }
  return strategy;
}

std::vector<StrategyViolation> validate_strategy(
    const CompressionStrategy& strategy, const std::vector<int>& ir_layers,
    int n_layers, double r_l) {
  std::vector<StrategyViolation> violations;
  const auto note = [&violations](std::string kind, std::string detail) {
    violations.push_back({std::move(kind), std::move(detail)});
  };

  std::set<int> ir(ir_layers.begin(), ir_layers.end());
  std::set<int> seen;
  double last_distance = -1.0;
  for (const auto& pair : strategy.pairs) {
    const std::string tag =
        "(" + std::to_string(pair.shallow) + "," + std::to_string(pair.deep) +
        ")";
    if (pair.shallow >= pair.deep) {
      note("pair orientation", "pair " + tag + " is not ordered shallow<deep");
    }
    for (const int member : {pair.shallow, pair.deep}) {
      if (member < 0 || member >= n_layers) {
        note("layer range", "layer " + std::to_string(member) +
                                " outside [0, " + std::to_string(n_layers) +
                                ")");
      }
      if (!ir.count(member)) {
        note("non-I-R member",
             "layer " + std::to_string(member) + " in pair " + tag);
      }
      if (!seen.insert(member).second) {
        note("layer reuse",
             "layer " + std::to_string(member) + " appears in two pairs");
      }
    }
    if (pair.distance < last_distance) {
      note("distance order",
           "pair " + tag + " breaks the non-decreasing selection order");
    }
    last_distance = pair.distance;
  }

  if (strategy.shared != seen) {
    note("shared size", "shared set does not equal the union of pair members");
  } else if (strategy.shared.size() != 2 * strategy.pairs.size()) {
    note("shared size", "|shared| != 2 * |pairs|");
  }

  const int quota = shared_layer_quota(n_layers, r_l);
  if (static_cast<int>(strategy.shared.size()) < quota &&
      !strategy.exhausted_before_quota) {
    note("quota shortfall",
         "|shared| = " + std::to_string(strategy.shared.size()) +
             " below quota " + std::to_string(quota) +
             " without the exhaustion flag");
  }
  return violations;
}

}  // namespace krul::strategy
