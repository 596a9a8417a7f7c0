// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <vector>

#include "krul/common.hpp"
#include "krul/plan.hpp"

namespace krul::engine {

using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 2;
  int head_dim = 8;
  int d_model = 16;  // must equal n_heads * head_dim
  int vocab_size = 64;
  float ffn_mult = 4.0f;
  uint64_t seed = 0;

  int ffn_hidden() const;
  void validate() const;  // throws ConfigError
  uint64_t hash() const;  // stable digest of all fields
};

// Per-layer key/value cache. keys[h] and values[h] are [span.length() x
// head_dim], row r holding position span.start + r. Keys are stored with
// rotary position mixing already applied.
struct KVCacheLayer {
  std::vector<Eigen::MatrixXf> keys;
  std::vector<Eigen::MatrixXf> values;
  TokenSpan span;

  int n_heads() const { return static_cast<int>(keys.size()); }
  int64_t rows() const { return span.length(); }
};

// Attention captured for one layer. prefill[h] is [rows x width] with zeros
// above the causal diagonal; decode_steps[t] is [n_heads x width_t].
struct LayerAttention {
  std::vector<Eigen::MatrixXf> prefill;
  std::vector<Eigen::MatrixXf> decode_steps;
};

struct AttentionRecord {
  // Absolute position of the first captured prefill row. 0 for a fresh
  // prefill; the history length when prefilling new input over restored KV.
  int64_t first_query_pos = 0;
  std::vector<LayerAttention> layers;

  int n_layers() const { return static_cast<int>(layers.size()); }
  int n_heads() const;
  int64_t prefill_rows() const;
  int64_t prefill_width() const;
  void append_decode(const std::vector<Eigen::MatrixXf>& rows_per_layer);
  // Checks row-stochastic rows and causal zeros; throws StateCorruptionError.
  void validate(double tol = 1e-5) const;
};

struct HiddenState {
  Eigen::MatrixXf activations;  // [span.length() x d_model]
  int layer_index = 0;          // layers consumed so far
  TokenSpan span;
};

struct LayerWeights {
  Eigen::MatrixXf wq, wk, wv, wo;  // [d_model x d_model]
  Eigen::MatrixXf w1;              // [d_model x ffn_hidden]
  Eigen::RowVectorXf b1;
  Eigen::MatrixXf w2;              // [ffn_hidden x d_model]
  Eigen::RowVectorXf b2;
};

// Immutable after build_model; safe to share across threads.
class Model {
 public:
  const ModelConfig& config() const { return cfg_; }
  uint64_t config_hash() const { return cfg_.hash(); }
  const Eigen::MatrixXf& embedding() const { return embed_; }
  const Eigen::MatrixXf& unembedding() const { return unembed_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  uint64_t weight_checksum() const;

 private:
  friend Model build_model(const ModelConfig&);
  ModelConfig cfg_;
  Eigen::MatrixXf embed_;    // [vocab_size x d_model]
  Eigen::MatrixXf unembed_;  // [d_model x vocab_size]
  std::vector<LayerWeights> layers_;
};

Model build_model(const ModelConfig& cfg);

struct PrefillResult {
  Eigen::RowVectorXf logits;  // next-token logits for the last position
  std::vector<KVCacheLayer> kv;
  AttentionRecord attn;
};

// Standard causal prefill over `tokens`, capturing attention for every row.
PrefillResult prefill(const Model& model, const TokenSeq& tokens);

// Prefill with per-layer preloaded KV suffixes covering [start_l, L). Layer l
// recomputes the prefix [0, start_l); positions [L, tokens.size()) are new
// input computed over the spliced cache. Suffix starts must be non-increasing
// with depth and all suffixes must end at the same L, else a
// RestorationGapError is thrown. Attention is captured for new input rows.
PrefillResult prefill(const Model& model, const TokenSeq& tokens,
                      const std::vector<KVCacheLayer>& preloaded);

struct DecodeResult {
  Eigen::RowVectorXf logits;
  // Per layer: [n_heads x (s + 1)] attention row for the decoded position.
  std::vector<Eigen::MatrixXf> attn_rows;
};

// Appends `last_token` at position s to a cache covering [0, s) on all
// layers. The cache is grown in place.
DecodeResult decode_step(const Model& model, std::vector<KVCacheLayer>& kv,
                         TokenId last_token);

struct PartialRecompute {
  std::vector<KVCacheLayer> kv;  // layer l covers [0, plan.recompute_len[l])
  // Output of the last layer over its recomputed prefix; absent when the
  // deepest prefix is empty.
  std::optional<HiddenState> final_hidden;
};

// Pyramid prefix recomputation: layer l rebuilds KV for [0, recompute_len[l])
// and feeds layer l+1 the prefix truncation of its output. The plan must be
// non-increasing (checked before any compute).
PartialRecompute partial_prefix_recompute(const Model& model,
                                          const TokenSeq& tokens,
                                          const RestorationPlan& plan);

// First index of the maximal logit.
TokenId greedy_pick(const Eigen::RowVectorXf& logits);

}  // namespace krul::engine
