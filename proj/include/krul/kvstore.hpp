// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "krul/engine.hpp"
#include "krul/plan.hpp"
#include "krul/strategy.hpp"

namespace krul::kvstore {

enum class MergeMode {
  kMean,        // elementwise average where both pair members are stored
  kKeepDeeper,  // deeper member's tensors verbatim (lossless for it)
};

const char* merge_mode_name(MergeMode mode);
std::optional<MergeMode> merge_mode_from_name(const std::string& name);

// Storage layout of one blob: which layers read it and which positions it
// holds. A pair (i, j) is stored once over the deeper member's larger span
// [recompute_len[j], L); the shallower member reads the suffix view
// [recompute_len[i], L) of the same blob.
struct BlobSpec {
  std::vector<int> owners;  // {l} or {i, j} with i < j
  TokenSpan span;

  bool operator==(const BlobSpec&) const = default;
};

// Derives the blob layout from strategy + plan alone. Blobs are ordered by
// their shallowest owner, which is also the load-stream service order.
std::vector<BlobSpec> plan_blob_specs(
    const strategy::CompressionStrategy& strategy, const RestorationPlan& plan);

struct SnapshotBlob {
  std::vector<int> owners;
  TokenSpan span;
  std::vector<Eigen::MatrixXf> keys;    // per head: [span.length() x head_dim]
  std::vector<Eigen::MatrixXf> values;
};

struct KVSnapshot {
  uint32_t version = 1;
  std::string conversation_id;
  uint64_t config_hash = 0;
  int n_layers = 0;
  int n_heads = 0;
  int head_dim = 0;
  int64_t history_len = 0;
  MergeMode mode = MergeMode::kMean;
  strategy::CompressionStrategy strategy;
  RestorationPlan plan;
  analysis::LayerClassReport classifier;
  std::vector<SnapshotBlob> blobs;
};

bool operator==(const KVSnapshot& a, const KVSnapshot& b);

// Builds the end-of-turn snapshot from full-span per-layer KV. Every layer
// lands in exactly one blob; pair blobs are merged per `mode` over the
// overlap [recompute_len[i], L) and taken from the deeper member alone over
// [recompute_len[j], recompute_len[i]).
KVSnapshot compress_and_snapshot(const std::vector<engine::KVCacheLayer>& kv,
                                 const strategy::CompressionStrategy& strategy,
                                 const RestorationPlan& plan, MergeMode mode,
                                 std::string conversation_id,
                                 const engine::ModelConfig& cfg);

// Materializes layer l's loadable suffix, spanning exactly the plan's load
// span [recompute_len[l], history_len).
engine::KVCacheLayer expand(const KVSnapshot& snapshot, int layer);

struct StorageReport {
  uint64_t full_bytes = 0;    // uncompressed full-history KV across all layers
  uint64_t stored_bytes = 0;  // sum of blob payloads

  double reduction() const {
    return stored_bytes == 0 ? 0.0
                             : static_cast<double>(full_bytes) /
                                   static_cast<double>(stored_bytes);
  }
};

StorageReport storage_report(const KVSnapshot& snapshot);

// Container layout (all integers little-endian):
//   "KRUL" | u32 version | u64 config_hash | u64 metadata_len | metadata
//   | u32 blob_count | blobs | u32 crc32 over all preceding bytes
// Metadata is key-sorted JSON text; each blob is owner list, span, and a
// length-prefixed f32 payload (keys then values, head-major, row-major).
void save(const KVSnapshot& snapshot, std::ostream& sink);
KVSnapshot load(std::istream& source,
                std::optional<uint64_t> expected_config_hash = std::nullopt);

}  // namespace krul::kvstore
