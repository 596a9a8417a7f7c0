// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <sstream>
#include <vector>

#include "krul/kvstore.hpp"

using namespace krul;
using namespace krul::kvstore;

namespace {

// KV whose entries encode (layer, head, row, col) so slicing mistakes and
// member mix-ups change values detectably.
std::vector<engine::KVCacheLayer> coded_kv(int n_layers, int n_heads,
                                           int head_dim, int64_t history) {
  std::vector<engine::KVCacheLayer> kv(static_cast<size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    auto& layer = kv[static_cast<size_t>(l)];
    layer.span = {0, history};
    for (int h = 0; h < n_heads; ++h) {
      Eigen::MatrixXf k(history, head_dim);
      Eigen::MatrixXf v(history, head_dim);
      for (int64_t r = 0; r < history; ++r) {
        for (int c = 0; c < head_dim; ++c) {
          const float code = static_cast<float>(1000 * l + 100 * h + r) +
                             static_cast<float>(c) * 0.01f;
          k(r, c) = code;
          v(r, c) = -code;
        }
      }
      layer.keys.push_back(std::move(k));
      layer.values.push_back(std::move(v));
    }
  }
  return kv;
}

engine::ModelConfig config_for(int n_layers, int n_heads, int head_dim) {
  engine::ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.head_dim = head_dim;
  cfg.d_model = n_heads * head_dim;
  cfg.vocab_size = 11;
  return cfg;
}

strategy::CompressionStrategy pairing(
    const std::vector<strategy::StrategyPair>& pairs) {
  strategy::CompressionStrategy s;
  s.pairs = pairs;
  for (const auto& p : pairs) {
    s.shared.insert(p.shallow);
    s.shared.insert(p.deep);
  }
  return s;
}

RestorationPlan plan_of(std::vector<int64_t> lens, int64_t history) {
  RestorationPlan plan;
  plan.recompute_len = std::move(lens);
  plan.history_len = history;
  return plan;
}

KVSnapshot sample_snapshot(MergeMode mode = MergeMode::kMean) {
  const auto kv = coded_kv(4, 2, 3, 10);
  const auto strategy = pairing({{1, 3, 0.25}});
  const auto plan = plan_of({8, 6, 4, 2}, 10);
  return compress_and_snapshot(kv, strategy, plan, mode, "conv-7",
                               config_for(4, 2, 3));
}

}  // namespace

TEST_CASE("merge mode names round-trip") {
  CHECK(std::string(merge_mode_name(MergeMode::kMean)) == "mean");
  CHECK(std::string(merge_mode_name(MergeMode::kKeepDeeper)) == "keep-deeper");
  CHECK(merge_mode_from_name("mean") == MergeMode::kMean);
  CHECK(merge_mode_from_name("keep-deeper") == MergeMode::kKeepDeeper);
  CHECK_FALSE(merge_mode_from_name("middle").has_value());
}

TEST_CASE("blob layout covers every layer once in service order") {
  const auto strategy = pairing({{0, 5, 0.1}, {2, 3, 0.2}});
  const auto plan = plan_of({12, 10, 8, 6, 4, 2}, 12);
  const auto specs = plan_blob_specs(strategy, plan);

  REQUIRE(specs.size() == 4);
  // Ordered by shallowest owner: 0 (pair with 5), 1, 2 (pair with 3), 4.
  CHECK(specs[0] == BlobSpec{{0, 5}, {2, 12}});
  CHECK(specs[1] == BlobSpec{{1}, {10, 12}});
  CHECK(specs[2] == BlobSpec{{2, 3}, {6, 12}});
  CHECK(specs[3] == BlobSpec{{4}, {4, 12}});

  // Layer 0 recomputes everything: its blob still appears, empty.
  const auto full = plan_blob_specs({}, plan_of({12, 3}, 12));
  REQUIRE(full.size() == 2);
  CHECK(full[0] == BlobSpec{{0}, {12, 12}});
  CHECK(full[0].span.empty());
  CHECK(full[1] == BlobSpec{{1}, {3, 12}});
}

TEST_CASE("blob layout rejects malformed strategies") {
  const auto plan = plan_of({4, 3, 2, 1}, 6);
  CHECK_THROWS_AS(plan_blob_specs(pairing({{1, 7, 0.1}}), plan),
                  SnapshotError);
  CHECK_THROWS_AS(plan_blob_specs(pairing({{0, 1, 0.1}, {1, 2, 0.2}}), plan),
                  SnapshotError);
}

TEST_CASE("keep-deeper stores the deep member verbatim") {
  const auto kv = coded_kv(4, 2, 3, 10);
  const auto snapshot = sample_snapshot(MergeMode::kKeepDeeper);

  CHECK(snapshot.n_layers == 4);
  CHECK(snapshot.history_len == 10);
  CHECK(snapshot.conversation_id == "conv-7");
  REQUIRE(snapshot.blobs.size() == 3);

  // Pair (1,3): plan {8,6,4,2} puts the blob on layer 3's span [2, 10).
  const auto& pair_blob = snapshot.blobs[1];
  CHECK(pair_blob.owners == std::vector<int>{1, 3});
  CHECK(pair_blob.span == TokenSpan{2, 10});
  for (int h = 0; h < 2; ++h) {
    CHECK(pair_blob.keys[static_cast<size_t>(h)] ==
          kv[3].keys[static_cast<size_t>(h)].bottomRows(8));
    CHECK(pair_blob.values[static_cast<size_t>(h)] ==
          kv[3].values[static_cast<size_t>(h)].bottomRows(8));
  }

  // Both members expand to the deep member's rows over their own spans.
  const auto deep = expand(snapshot, 3);
  CHECK(deep.span == TokenSpan{2, 10});
  CHECK(deep.keys[0] == kv[3].keys[0].bottomRows(8));
  const auto shallow = expand(snapshot, 1);
  CHECK(shallow.span == TokenSpan{6, 10});
  CHECK(shallow.keys[1] == kv[3].keys[1].bottomRows(4));
  CHECK(shallow.values[0] == kv[3].values[0].bottomRows(4));

  // Unpaired layers expand verbatim.
  const auto alone = expand(snapshot, 0);
  CHECK(alone.span == TokenSpan{8, 10});
  CHECK(alone.keys[0] == kv[0].keys[0].bottomRows(2));
}

TEST_CASE("mean merge averages only where both members are stored") {
  const auto kv = coded_kv(4, 2, 3, 10);
  const auto snapshot = sample_snapshot(MergeMode::kMean);

  const auto& pair_blob = snapshot.blobs[1];
  REQUIRE(pair_blob.span == TokenSpan{2, 10});
  for (int h = 0; h < 2; ++h) {
    const auto& k = pair_blob.keys[static_cast<size_t>(h)];
    // Rows [2, 6) exist only in the deep member (layer 3): verbatim.
    CHECK(k.topRows(4) ==
          kv[3].keys[static_cast<size_t>(h)].middleRows(2, 4));
    // Rows [6, 10) are shared: elementwise average of layers 1 and 3.
    const Eigen::MatrixXf want =
        0.5f * (kv[1].keys[static_cast<size_t>(h)].bottomRows(4) +
                kv[3].keys[static_cast<size_t>(h)].bottomRows(4));
    CHECK((k.bottomRows(4) - want).cwiseAbs().maxCoeff() < 1e-6f);
  }
}

TEST_CASE("snapshot construction validates its inputs") {
  const auto kv = coded_kv(4, 2, 3, 10);
  const auto strategy = pairing({{1, 3, 0.25}});
  const auto cfg = config_for(4, 2, 3);

  // Plan layer count disagrees with the cache.
  CHECK_THROWS_AS(compress_and_snapshot(kv, strategy, plan_of({8, 6, 4}, 10),
                                        MergeMode::kMean, "c", cfg),
                  SnapshotError);
  // Cache must cover [0, history).
  auto off = kv;
  off[2].span = {1, 10};
  CHECK_THROWS_AS(compress_and_snapshot(off, strategy,
                                        plan_of({8, 6, 4, 2}, 10),
                                        MergeMode::kMean, "c", cfg),
                  SnapshotError);
  // Head count must match the config.
  auto lopsided = kv;
  lopsided[1].keys.pop_back();
  CHECK_THROWS_AS(compress_and_snapshot(lopsided, strategy,
                                        plan_of({8, 6, 4, 2}, 10),
                                        MergeMode::kMean, "c", cfg),
                  SnapshotError);
}

TEST_CASE("expand rejects gaps and foreign layers") {
  auto snapshot = sample_snapshot();
  CHECK_THROWS_AS(expand(snapshot, 4), RestorationGapError);
  CHECK_THROWS_AS(expand(snapshot, -1), RestorationGapError);

  // A plan asking for more than the blob holds is a coverage gap.
  snapshot.plan.recompute_len[0] = 7;  // blob holds [8, 10)
  CHECK_THROWS_AS(expand(snapshot, 0), RestorationGapError);
}

TEST_CASE("storage accounting is exact") {
  // 4 layers, 2 heads, dim 3, history 10: full row = 2*2*3*4 = 48 bytes.
  const auto snapshot = sample_snapshot();
  const StorageReport report = storage_report(snapshot);
  CHECK(report.full_bytes == 4u * 10u * 48u);
  // Blobs: layer0 [8,10) 2 rows, pair [2,10) 8 rows, layer2 [4,10) 6 rows.
  CHECK(report.stored_bytes == (2u + 8u + 6u) * 48u);
  CHECK(report.reduction() == doctest::Approx(40.0 / 16.0));

  // Uniform plan at ratio 0 with no pairs stores everything.
  const auto kv = coded_kv(2, 1, 2, 5);
  const auto all = compress_and_snapshot(kv, {}, plan_of({0, 0}, 5),
                                         MergeMode::kKeepDeeper, "c",
                                         config_for(2, 1, 2));
  const StorageReport full = storage_report(all);
  CHECK(full.stored_bytes == full.full_bytes);
  CHECK(full.reduction() == doctest::Approx(1.0));
}

TEST_CASE("eight pairs at uniform ratio 0.4 store 45 percent") {
  // 32 layers; pair (2k, 2k+1) for k < 8 so 16 layers share 8 blobs. With a
  // uniform recompute prefix of 16 of 40 positions, every load span is 24
  // rows: stored = (24 unpaired + 8 pair) * 24 rows vs full = 32 * 40.
  const int n_layers = 32;
  const int64_t history = 40;
  std::vector<strategy::StrategyPair> pairs;
  for (int k = 0; k < 8; ++k) pairs.push_back({2 * k, 2 * k + 1, 0.1});
  const auto strategy = pairing(pairs);
  const auto plan =
      plan_of(std::vector<int64_t>(n_layers, 16), history);
  const auto kv = coded_kv(n_layers, 1, 2, history);
  const auto snapshot = compress_and_snapshot(kv, strategy, plan,
                                              MergeMode::kKeepDeeper, "c",
                                              config_for(n_layers, 1, 2));
  const StorageReport report = storage_report(snapshot);
  CHECK(static_cast<double>(report.stored_bytes) /
            static_cast<double>(report.full_bytes) ==
        doctest::Approx(0.45).epsilon(1e-12));
}

TEST_CASE("save and load round-trip bit-exactly") {
  const auto snapshot = sample_snapshot();
  std::stringstream buffer;
  save(snapshot, buffer);

  const KVSnapshot back = load(buffer);
  CHECK(back == snapshot);
  CHECK(back.mode == MergeMode::kMean);
  CHECK(back.plan.recompute_len == std::vector<int64_t>{8, 6, 4, 2});
  CHECK(back.strategy.pairs == snapshot.strategy.pairs);

  // Config guard accepts the matching hash and rejects others.
  std::stringstream again;
  save(snapshot, again);
  CHECK_NOTHROW(load(again, snapshot.config_hash));
  std::stringstream once_more;
  save(snapshot, once_more);
  CHECK_THROWS_AS(load(once_more, snapshot.config_hash + 1),
                  SnapshotLoadError);
}

TEST_CASE("loader names the field that failed") {
  const auto snapshot = sample_snapshot();
  std::stringstream buffer;
  save(snapshot, buffer);
  const std::string bytes = buffer.str();

  const auto field_of = [](const std::string& data,
                           std::optional<uint64_t> hash =
                               std::nullopt) -> std::string {
    std::istringstream in(data);
    try {
      load(in, hash);
    } catch (const SnapshotLoadError& e) {
      return e.field;
    }
    return "";
  };

  // Truncation anywhere breaks the checksum before anything else.
  CHECK(field_of(bytes.substr(0, bytes.size() - 1)) == "checksum");
  CHECK(field_of(bytes.substr(0, 10)) == "checksum");
  CHECK(field_of("") == "checksum");
  CHECK(field_of("KR") == "checksum");

  // A flipped payload byte also lands on the checksum.
  std::string corrupt = bytes;
  corrupt[bytes.size() / 2] ^= 0x40;
  CHECK(field_of(corrupt) == "checksum");

  // Bad magic with a recomputed trailing crc reports the magic field.
  const auto with_crc = [&bytes](std::string data) {
    const uint32_t crc =
        crc32(data.data(), data.size() - 4);
    std::memcpy(data.data() + data.size() - 4, &crc, 4);
    return data;
  };
  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  CHECK(field_of(with_crc(std::move(wrong_magic))) == "magic");

  // Unsupported version, crc made valid again.
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK(field_of(with_crc(std::move(wrong_version))) == "version");

  // Mismatched config hash reported as the config field.
  CHECK(field_of(bytes, snapshot.config_hash + 1) == "config");
  CHECK(field_of(bytes, snapshot.config_hash) == "");
}
