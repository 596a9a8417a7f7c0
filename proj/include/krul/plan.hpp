// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "krul/common.hpp"

namespace krul {

// Per-layer split of a conversation's history into a recomputed prefix and a
// loaded suffix. recompute_len must be non-increasing with depth: layer l+1
// can only recompute positions whose hidden states layer l also recomputed.
struct RestorationPlan {
  std::vector<int64_t> recompute_len;  // per layer, prefix [0, recompute_len[l])
  int64_t history_len = 0;             // L; loaded suffix is [recompute_len[l], L)

  int n_layers() const { return static_cast<int>(recompute_len.size()); }

  int64_t load_len(int layer) const {
    return history_len - recompute_len.at(static_cast<size_t>(layer));
  }

  TokenSpan recompute_span(int layer) const {
    return {0, recompute_len.at(static_cast<size_t>(layer))};
  }

  TokenSpan load_span(int layer) const {
    return {recompute_len.at(static_cast<size_t>(layer)), history_len};
  }

  int64_t total_recompute_tokens() const {
    return std::accumulate(recompute_len.begin(), recompute_len.end(),
                           int64_t{0});
  }

  double rc_effective() const {
    if (recompute_len.empty() || history_len == 0) return 0.0;
    return static_cast<double>(total_recompute_tokens()) /
           (static_cast<double>(recompute_len.size()) *
            static_cast<double>(history_len));
  }

  bool operator==(const RestorationPlan&) const = default;
};

}  // namespace krul
