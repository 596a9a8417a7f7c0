// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "krul/kvstore.hpp"

namespace krul::scheduler {

// Analytic cost model for the two restoration streams. Stated once here so
// every simulated number can be audited against the same two formulas.
struct CostModel {
  double f_peak = 312e12;   // compute throughput, flop/s
  double b_peak = 139e9;    // host-to-device load bandwidth, bytes/s
  double ffn_mult = 4.0;

  // Flops to recompute a prefix of p tokens in one layer of width d:
  // p * (8*d^2 + 4*d*ffn_mult*d) for projections + FFN, plus 4*d per
  // attended position, summed over each token's causal span.
  double layer_recompute_flops(int64_t p, int64_t d) const {
    const double pd = static_cast<double>(p);
    const double dd = static_cast<double>(d);
    const double span_sum = 0.5 * pd * (pd + 1.0);
    return pd * (8.0 * dd * dd + 4.0 * dd * ffn_mult * dd) +
           4.0 * dd * span_sum;
  }

  // Flops to prefill new_len fresh tokens on top of history_len cached ones,
  // across all layers.
  double prefill_flops(int64_t new_len, int64_t history_len, int64_t d,
                       int n_layers) const;

  // 2 tensors * span * d floats * 4 bytes.
  double blob_bytes(int64_t span_len, int64_t d) const {
    return 2.0 * static_cast<double>(span_len) * static_cast<double>(d) * 4.0;
  }
};

// Pyramid split: shallow layers recompute more, deep layers load more. The
// ramp runs from min(2*r_c, 1)*L at layer 0 down to max(2*r_c - 1, 0)*L at
// the deepest layer, then a running minimum and a +-1 end adjustment keep it
// monotone with the total within n_layers tokens of r_c*L*n_layers.
RestorationPlan build_plan(int64_t history_len, int n_layers, double r_c,
                           const strategy::CompressionStrategy& strategy);

// Same recompute length on every layer (the fixed-ratio baselines).
RestorationPlan uniform_plan(int64_t history_len, int n_layers, double r_c);

// Grid search for the recompute ratio that best balances total recompute
// time against total load time under `strategy`'s deduplicated blobs.
// Returns the argmin of |T_C - T_L|; ties go to the smaller ratio.
double calibrate_rc(const CostModel& cost, int n_layers, int64_t history_len,
                    int64_t d, const strategy::CompressionStrategy& strategy,
                    const std::vector<double>& grid);

std::vector<double> default_rc_grid(double step = 0.05);

struct PlanViolation {
  std::string kind;  // "monotonicity", "bounds", "totals", "coverage"
  std::string detail;
};

std::vector<PlanViolation> validate_plan(
    const RestorationPlan& plan,
    const strategy::CompressionStrategy& strategy);
std::vector<PlanViolation> validate_plan(const RestorationPlan& plan,
                                         const kvstore::KVSnapshot& snapshot);

struct PipelineTask {
  int layer = 0;  // owning layer (shallowest owner for pair blobs)
  double start = 0.0;
  double end = 0.0;
};

struct PipelineTrace {
  std::vector<PipelineTask> compute_tasks;
  std::vector<PipelineTask> load_tasks;
  double makespan = 0.0;
  double compute_finish = 0.0;
  double load_finish = 0.0;
  // Share of the makespan a stream sits idle while restoration work remains
  // elsewhere. A stream with no tasks reports 0.
  double bubble_compute = 0.0;
  double bubble_load = 0.0;

  // One JSON object per line: {"stream":..,"layer":..,"start":..,"end":..}.
  std::string event_log() const;
};

// Discrete-event simulation of the two streams. Compute runs one task per
// layer in depth order with a chain dependency; load runs one task per
// stored blob in shallowest-owner order with no dependency on compute.
PipelineTrace simulate_pipeline(const RestorationPlan& plan,
                                const strategy::CompressionStrategy& strategy,
                                const CostModel& cost, int64_t d);

// Restores full-span KV for the history: the calling thread recomputes the
// per-layer prefixes in depth order while one loader thread expands blobs in
// service order, meeting at a per-layer handoff slot before concatenation.
std::vector<engine::KVCacheLayer> execute_restore(
    const engine::Model& model, const engine::TokenSeq& history,
    const kvstore::KVSnapshot& snapshot);

// Wall-clock calibration: times real partial prefix recomputes and snapshot
// expansions for each grid ratio instead of using the analytic model.
// Non-deterministic; intended for console reporting only.
double calibrate_rc_measured(const engine::Model& model,
                             const engine::TokenSeq& history,
                             const strategy::CompressionStrategy& strategy,
                             const std::vector<double>& grid);

}  // namespace krul::scheduler
