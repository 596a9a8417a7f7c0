// SPDX-License-Identifier: Apache-2.0
#include "krul/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace krul::analysis {

void ClassifierConfig::validate() const {
  if (!(gamma > 0.0) || gamma > 1.0) {
    throw ConfigError("gamma must lie in (0, 1]");
  }
  if (!(initial_frac > 0.0) || !(recent_frac > 0.0) ||
      initial_frac + recent_frac >= 1.0) {
    throw ConfigError("region fractions must be positive and sum below 1");
  }
}

LayerClassReport classify_layers(const engine::AttentionRecord& record,
                                 const ClassifierConfig& cfg) {
  cfg.validate();
  const int64_t width = record.prefill_width();
  const int64_t rows = record.prefill_rows();
  if (rows == 0) {
    throw ClassificationError("classification requires prefill attention");
  }
  const auto initial_len =
      static_cast<int64_t>(cfg.initial_frac * static_cast<double>(width));
  const auto recent_len =
      static_cast<int64_t>(cfg.recent_frac * static_cast<double>(width));
  if (initial_len < 1 || recent_len < 1) {
    throw ClassificationError(
        "sequence too short to form both attention regions");
  }

  LayerClassReport report;
  report.avg_weight_sum.resize(record.layers.size());
  for (size_t l = 0; l < record.layers.size(); ++l) {
    const auto& heads = record.layers[l].prefill;
    double mass = 0.0;
    for (const auto& head : heads) {
      if (head.rows() != rows || head.cols() != width) {
        throw StateCorruptionError("ragged prefill attention across heads");
      }
      // Region columns are fixed over the full width; causal zeros make the
      // recent region invisible to early rows.
      mass += head.leftCols(initial_len).cast<double>().sum();
      const int64_t recent_start = std::max(initial_len, width - recent_len);
      mass += head.rightCols(width - recent_start).cast<double>().sum();
    }
    const double denom =
        static_cast<double>(heads.size()) * static_cast<double>(rows);
    const double avg = denom > 0.0 ? mass / denom : 0.0;
    report.avg_weight_sum[l] = avg;
    if (avg < cfg.gamma) {
      report.non_ir_layers.push_back(static_cast<int>(l));
    } else {
      report.ir_layers.push_back(static_cast<int>(l));
    }
  }
  return report;
}

double DistanceMatrix::at(int layer_i, int layer_j) const {
  const auto pos = [this](int layer) {
    const auto it = std::lower_bound(layers.begin(), layers.end(), layer);
    if (it == layers.end() || *it != layer) {
      throw ConfigError("layer not tracked by the distance matrix");
    }
    return static_cast<Eigen::Index>(it - layers.begin());
  };
  return values(pos(layer_i), pos(layer_j));
}

bool DistanceMatrix::has_layer(int layer) const {
  return std::binary_search(layers.begin(), layers.end(), layer);
}

SimilarityAccumulator::SimilarityAccumulator(std::vector<int> ir_layers,
                                             int n_heads)
    : layers_(std::move(ir_layers)), n_heads_(n_heads) {
  if (n_heads_ < 1) throw ConfigError("n_heads must be >= 1");
  std::sort(layers_.begin(), layers_.end());
  layers_.erase(std::unique(layers_.begin(), layers_.end()), layers_.end());
  if (!layers_.empty() && layers_.front() < 0) {
    throw ConfigError("layer indices must be non-negative");
  }
  for (size_t a = 0; a < layers_.size(); ++a) {
    for (size_t b = a + 1; b < layers_.size(); ++b) {
      pairs_.emplace_back(layers_[a], layers_[b]);
    }
  }
  sums_.assign(pairs_.size() * static_cast<size_t>(n_heads_), 0.0);
}

void SimilarityAccumulator::fold_prefill(
    const engine::AttentionRecord& record) {
  std::lock_guard<std::mutex> lock(mu_);
  if (prefill_folded_) {
    throw AccountingError("prefill attention folded twice");
  }
  if (!layers_.empty() &&
      layers_.back() >= static_cast<int>(record.layers.size())) {
    throw ConfigError("record does not cover all tracked layers");
  }
  for (size_t p = 0; p < pairs_.size(); ++p) {
    const auto& a = record.layers[static_cast<size_t>(pairs_[p].first)];
    const auto& b = record.layers[static_cast<size_t>(pairs_[p].second)];
    if (static_cast<int>(a.prefill.size()) != n_heads_ ||
        static_cast<int>(b.prefill.size()) != n_heads_) {
      throw StateCorruptionError("prefill head count mismatch");
    }
    for (int h = 0; h < n_heads_; ++h) {
      sums_[p * static_cast<size_t>(n_heads_) + static_cast<size_t>(h)] +=
          stable_squared_distance(a.prefill[static_cast<size_t>(h)],
                                  b.prefill[static_cast<size_t>(h)]);
    }
  }
  prefill_folded_ = true;
  prefill_rows_ = record.prefill_rows();
}

void SimilarityAccumulator::fold_decode_step(
    const std::vector<Eigen::MatrixXf>& rows_per_layer) {
  std::lock_guard<std::mutex> lock(mu_);
  if (!layers_.empty() &&
      layers_.back() >= static_cast<int>(rows_per_layer.size())) {
    throw StateCorruptionError("decode rows do not cover all tracked layers");
  }
  int64_t width = -1;
  for (const auto& rows : rows_per_layer) {
    if (rows.size() == 0) continue;
    if (width == -1) width = rows.cols();
    if (rows.cols() != width) {
      throw StateCorruptionError("decode row width mismatch across layers");
    }
  }
  for (size_t p = 0; p < pairs_.size(); ++p) {
    const auto& a = rows_per_layer[static_cast<size_t>(pairs_[p].first)];
    const auto& b = rows_per_layer[static_cast<size_t>(pairs_[p].second)];
    if (a.rows() != n_heads_ || b.rows() != n_heads_) {
      throw StateCorruptionError("decode head count mismatch");
    }
    for (int h = 0; h < n_heads_; ++h) {
      sums_[p * static_cast<size_t>(n_heads_) + static_cast<size_t>(h)] +=
          (a.row(h) - b.row(h)).cast<double>().squaredNorm();
    }
  }
  ++decode_steps_;
}

DistanceMatrix SimilarityAccumulator::finalize() const {
  std::lock_guard<std::mutex> lock(mu_);
  if (!prefill_folded_) {
    throw AccountingError("finalize requires the prefill part to be folded");
  }
  DistanceMatrix out;
  out.layers = layers_;
  const auto n = static_cast<Eigen::Index>(layers_.size());
  out.values = Eigen::MatrixXd::Zero(n, n);
  for (size_t p = 0; p < pairs_.size(); ++p) {
    double mean = 0.0;
    for (int h = 0; h < n_heads_; ++h) {
      mean += std::sqrt(
          sums_[p * static_cast<size_t>(n_heads_) + static_cast<size_t>(h)]);
    }
    mean /= static_cast<double>(n_heads_);
    const auto i = static_cast<Eigen::Index>(
        std::lower_bound(layers_.begin(), layers_.end(), pairs_[p].first) -
        layers_.begin());
    const auto j = static_cast<Eigen::Index>(
        std::lower_bound(layers_.begin(), layers_.end(), pairs_[p].second) -
        layers_.begin());
    out.values(i, j) = mean;
    out.values(j, i) = mean;
  }
  return out;
}

int64_t SimilarityAccumulator::prefill_rows_folded() const {
  std::lock_guard<std::mutex> lock(mu_);
  return prefill_folded_ ? prefill_rows_ : 0;
}

int64_t SimilarityAccumulator::decode_steps_folded() const {
  std::lock_guard<std::mutex> lock(mu_);
  return decode_steps_;
}

StreamingEstimator::StreamingEstimator(std::vector<int> ir_layers, int n_heads)
    : acc_(std::move(ir_layers), n_heads) {}

StreamingEstimator::~StreamingEstimator() {
  if (worker_.joinable()) worker_.join();
}

void StreamingEstimator::start_prefill_fold(engine::AttentionRecord record) {
  if (worker_.joinable() || prefill_owned_) {
    throw AccountingError("prefill fold already started");
  }
  prefill_owned_ =
      std::make_unique<engine::AttentionRecord>(std::move(record));
  worker_ = std::thread([this] {
    try {
      acc_.fold_prefill(*prefill_owned_);
    } catch (...) {
      worker_error_ = std::current_exception();
    }
  });
}

void StreamingEstimator::fold_decode_rows(
    std::vector<Eigen::MatrixXf> rows_per_layer) {
  const int64_t live = live_retained_.fetch_add(1) + 1;
  peak_retained_ = std::max(peak_retained_, live);
  acc_.fold_decode_step(rows_per_layer);
  live_retained_.fetch_sub(1);
  // rows_per_layer dies here; nothing beyond the running sums is kept.
}

DistanceMatrix StreamingEstimator::finish() {
  if (worker_.joinable()) worker_.join();
  if (worker_error_) {
    auto err = worker_error_;
    worker_error_ = nullptr;
    std::rethrow_exception(err);
  }
  return acc_.finalize();
}

}  // namespace krul::analysis
