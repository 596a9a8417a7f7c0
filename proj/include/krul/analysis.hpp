// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "krul/engine.hpp"

namespace krul::analysis {

struct ClassifierConfig {
  double gamma = 0.5;         // avg_weight_sum threshold
  double initial_frac = 0.10; // leading share of the sequence
  double recent_frac = 0.10;  // trailing share of the sequence

  void validate() const;  // throws ConfigError
};

struct LayerClassReport {
  std::vector<int> ir_layers;      // avg_weight_sum >= gamma
  std::vector<int> non_ir_layers;  // input-sensitive, never compressed
  std::vector<double> avg_weight_sum;  // per layer
};

// Splits layers by how much attention mass lands on the initial and recent
// token regions. A layer whose average mass inside those regions stays below
// gamma reacts to the middle of the input and is kept uncompressed.
LayerClassReport classify_layers(const engine::AttentionRecord& record,
                                 const ClassifierConfig& cfg);

// sum((a - b)^2) computed as sum(a^2) + sum(b^2) - 2*sum(a*b) in double,
// clamped at zero. One pass over each operand, no temporary difference.
template <typename DA, typename DB>
double stable_squared_distance(const Eigen::MatrixBase<DA>& a,
                               const Eigen::MatrixBase<DB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("stable_squared_distance: shape mismatch");
  }
  const auto ad = a.template cast<double>();
  const auto bd = b.template cast<double>();
  const double aa = ad.cwiseProduct(ad).sum();
  const double bb = bd.cwiseProduct(bd).sum();
  const double ab = ad.cwiseProduct(bd).sum();
  const double d = aa + bb - 2.0 * ab;
  return d > 0.0 ? d : 0.0;
}

// Pairwise distances over a fixed layer subset. values(a, b) indexes by
// position within `layers` (sorted ascending); symmetric, zero diagonal.
struct DistanceMatrix {
  std::vector<int> layers;
  Eigen::MatrixXd values;

  double at(int layer_i, int layer_j) const;
  bool has_layer(int layer) const;
};

// Streaming sum of squared attention differences for every layer pair within
// the tracked subset, kept per head. Folds from the inline decode path and
// from one background prefill worker are serialized internally, so any
// interleaving that covers the record exactly once yields the same sums.
class SimilarityAccumulator {
 public:
  SimilarityAccumulator(std::vector<int> ir_layers, int n_heads);

  // Folds the whole prefill part. Exactly one call is allowed.
  void fold_prefill(const engine::AttentionRecord& record);

  // Folds one decode step's rows (vector indexed by absolute layer, each
  // [n_heads x width]). All layers must share one width.
  void fold_decode_step(const std::vector<Eigen::MatrixXf>& rows_per_layer);

  // Mean over heads of the per-head root of the accumulated squared sums.
  // Requires the prefill part to have been folded.
  DistanceMatrix finalize() const;

  int n_pairs() const { return static_cast<int>(pairs_.size()); }
  int64_t prefill_rows_folded() const;
  int64_t decode_steps_folded() const;

 private:
  std::vector<int> layers_;
  int n_heads_;
  std::vector<std::pair<int, int>> pairs_;  // absolute layer indices, i < j
  mutable std::mutex mu_;
  std::vector<double> sums_;  // [pair * n_heads_ + head]
  bool prefill_folded_ = false;
  int64_t prefill_rows_ = 0;
  int64_t decode_steps_ = 0;
};

// Conversation-scoped driver for the accumulator. The prefill part is folded
// by one background worker while decode rows are folded inline and released
// before the next step, so at most one decode step's rows are ever retained.
class StreamingEstimator {
 public:
  StreamingEstimator(std::vector<int> ir_layers, int n_heads);
  ~StreamingEstimator();

  StreamingEstimator(const StreamingEstimator&) = delete;
  StreamingEstimator& operator=(const StreamingEstimator&) = delete;

  // Takes ownership of the prefill capture and folds it on the worker.
  void start_prefill_fold(engine::AttentionRecord record);

  // Folds one step's rows inline; the rows die when the call returns.
  void fold_decode_rows(std::vector<Eigen::MatrixXf> rows_per_layer);

  // Joins the worker (completion barrier), then finalizes.
  DistanceMatrix finish();

  int64_t peak_retained_decode_steps() const { return peak_retained_; }
  const SimilarityAccumulator& accumulator() const { return acc_; }

 private:
  SimilarityAccumulator acc_;
  std::unique_ptr<engine::AttentionRecord> prefill_owned_;
  std::thread worker_;
  std::exception_ptr worker_error_;
  std::atomic<int64_t> live_retained_{0};
  int64_t peak_retained_ = 0;
};

}  // namespace krul::analysis
