// SPDX-License-Identifier: Apache-2.0
#include "krul/kvstore.hpp"

#include <algorithm>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace krul::kvstore {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'K', 'R', 'U', 'L'};
constexpr uint32_t kFormatVersion = 1;

int64_t payload_floats(const SnapshotBlob& blob) {
  int64_t n = 0;
  for (const auto& m : blob.keys) n += m.size();
  for (const auto& m : blob.values) n += m.size();
  return n;
}

// ---- byte-level encoding helpers (little-endian) ----

void put_bytes(std::string& out, const void* data, size_t len) {
  out.append(static_cast<const char*>(data), len);
}

void put_u32(std::string& out, uint32_t v) { put_bytes(out, &v, sizeof(v)); }
void put_u64(std::string& out, uint64_t v) { put_bytes(out, &v, sizeof(v)); }
void put_i32(std::string& out, int32_t v) { put_bytes(out, &v, sizeof(v)); }
void put_i64(std::string& out, int64_t v) { put_bytes(out, &v, sizeof(v)); }

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}

  size_t remaining() const { return buf_.size() - pos_; }

  const char* take(size_t len, const char* field) {
    if (remaining() < len) {
      throw SnapshotLoadError(field, "container ends mid-field");
    }
    const char* p = buf_.data() + pos_;
    pos_ += len;
    return p;
  }

  uint32_t u32(const char* field) {
    uint32_t v;
    std::memcpy(&v, take(sizeof(v), field), sizeof(v));
    return v;
  }
  uint64_t u64(const char* field) {
    uint64_t v;
    std::memcpy(&v, take(sizeof(v), field), sizeof(v));
    return v;
  }
  int32_t i32(const char* field) {
    int32_t v;
    std::memcpy(&v, take(sizeof(v), field), sizeof(v));
    return v;
  }
  int64_t i64(const char* field) {
    int64_t v;
    std::memcpy(&v, take(sizeof(v), field), sizeof(v));
    return v;
  }

 private:
  const std::string& buf_;
  size_t pos_ = 0;
};

void put_matrix_rowmajor(std::string& out, const Eigen::MatrixXf& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const float v = m(r, c);
      put_bytes(out, &v, sizeof(v));
    }
  }
}

Eigen::MatrixXf take_matrix_rowmajor(ByteReader& reader, int64_t rows,
                                     int64_t cols, const char* field) {
  Eigen::MatrixXf m(rows, cols);
  const char* p =
      reader.take(sizeof(float) * static_cast<size_t>(rows * cols), field);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      float v;
      std::memcpy(&v, p + sizeof(float) * static_cast<size_t>(r * cols + c),
                  sizeof(v));
      m(r, c) = v;
    }
  }
  return m;
}

// ---- metadata <-> json ----

json strategy_to_json(const strategy::CompressionStrategy& s) {
  json pairs = json::array();
  for (const auto& p : s.pairs) {
    pairs.push_back({p.shallow, p.deep, p.distance});
  }
  return json{{"exhausted_before_quota", s.exhausted_before_quota},
              {"pairs", pairs},
              {"shared", std::vector<int>(s.shared.begin(), s.shared.end())}};
}

strategy::CompressionStrategy strategy_from_json(const json& j) {
  strategy::CompressionStrategy s;
  for (const auto& p : j.at("pairs")) {
    s.pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>(),
                       p.at(2).get<double>()});
  }
  for (const auto& l : j.at("shared")) s.shared.insert(l.get<int>());
  s.exhausted_before_quota = j.at("exhausted_before_quota").get<bool>();
  return s;
}

json plan_to_json(const RestorationPlan& p) {
  return json{{"history_len", p.history_len},
              {"recompute_len", p.recompute_len}};
}

RestorationPlan plan_from_json(const json& j) {
  RestorationPlan p;
  p.history_len = j.at("history_len").get<int64_t>();
  p.recompute_len = j.at("recompute_len").get<std::vector<int64_t>>();
  return p;
}

json classifier_to_json(const analysis::LayerClassReport& r) {
  return json{{"avg_weight_sum", r.avg_weight_sum},
              {"ir_layers", r.ir_layers},
              {"non_ir_layers", r.non_ir_layers}};
}

analysis::LayerClassReport classifier_from_json(const json& j) {
  analysis::LayerClassReport r;
  r.ir_layers = j.at("ir_layers").get<std::vector<int>>();
  r.non_ir_layers = j.at("non_ir_layers").get<std::vector<int>>();
  r.avg_weight_sum = j.at("avg_weight_sum").get<std::vector<double>>();
  return r;
}

}  // namespace

const char* merge_mode_name(MergeMode mode) {
  switch (mode) {
    case MergeMode::kMean:
      return "mean";
    case MergeMode::kKeepDeeper:
      return "keep-deeper";
  }
  return "mean";
}

std::optional<MergeMode> merge_mode_from_name(const std::string& name) {
  if (name == "mean") return MergeMode::kMean;
  if (name == "keep-deeper") return MergeMode::kKeepDeeper;
  return std::nullopt;
}

std::vector<BlobSpec> plan_blob_specs(
    const strategy::CompressionStrategy& strategy,
    const RestorationPlan& plan) {
  const int n = plan.n_layers();
  std::map<int, BlobSpec> by_shallowest;
  std::vector<bool> paired(static_cast<size_t>(n), false);
  for (const auto& pair : strategy.pairs) {
    if (pair.shallow < 0 || pair.deep >= n || pair.shallow >= pair.deep) {
      throw SnapshotError("strategy pair outside the plan's layers");
    }
    if (paired[static_cast<size_t>(pair.shallow)] ||
        paired[static_cast<size_t>(pair.deep)]) {
      throw SnapshotError("layer appears in two pairs");
    }
    paired[static_cast<size_t>(pair.shallow)] = true;
    paired[static_cast<size_t>(pair.deep)] = true;
    // One blob serves both members; the deeper member needs the longer
    // suffix, which the monotone plan guarantees is a superset.
    by_shallowest[pair.shallow] =
        BlobSpec{{pair.shallow, pair.deep}, plan.load_span(pair.deep)};
  }
  for (int l = 0; l < n; ++l) {
    if (!paired[static_cast<size_t>(l)]) {
      by_shallowest[l] = BlobSpec{{l}, plan.load_span(l)};
    }
  }
  std::vector<BlobSpec> specs;
  specs.reserve(by_shallowest.size());
  for (auto& [shallowest, spec] : by_shallowest) {
    specs.push_back(std::move(spec));
  }
  return specs;
}

bool operator==(const KVSnapshot& a, const KVSnapshot& b) {
  const auto blob_eq = [](const SnapshotBlob& x, const SnapshotBlob& y) {
    if (x.owners != y.owners || x.span != y.span) return false;
    if (x.keys.size() != y.keys.size() || x.values.size() != y.values.size()) {
      return false;
    }
    for (size_t h = 0; h < x.keys.size(); ++h) {
      if (x.keys[h].rows() != y.keys[h].rows() ||
          x.keys[h].cols() != y.keys[h].cols() ||
          std::memcmp(x.keys[h].data(), y.keys[h].data(),
                      sizeof(float) * static_cast<size_t>(x.keys[h].size())) !=
              0) {
        return false;
      }
      if (x.values[h].rows() != y.values[h].rows() ||
          x.values[h].cols() != y.values[h].cols() ||
          std::memcmp(
              x.values[h].data(), y.values[h].data(),
              sizeof(float) * static_cast<size_t>(x.values[h].size())) != 0) {
        return false;
      }
    }
    return true;
  };
  return a.version == b.version && a.conversation_id == b.conversation_id &&
         a.config_hash == b.config_hash && a.n_layers == b.n_layers &&
         a.n_heads == b.n_heads && a.head_dim == b.head_dim &&
         a.history_len == b.history_len && a.mode == b.mode &&
         a.strategy == b.strategy && a.plan == b.plan &&
         a.classifier.ir_layers == b.classifier.ir_layers &&
         a.classifier.non_ir_layers == b.classifier.non_ir_layers &&
         a.classifier.avg_weight_sum == b.classifier.avg_weight_sum &&
         a.blobs.size() == b.blobs.size() &&
         std::equal(a.blobs.begin(), a.blobs.end(), b.blobs.begin(), blob_eq);
}

KVSnapshot compress_and_snapshot(const std::vector<engine::KVCacheLayer>& kv,
                                 const strategy::CompressionStrategy& strategy,
                                 const RestorationPlan& plan, MergeMode mode,
                                 std::string conversation_id,
                                 const engine::ModelConfig& cfg) {
  const int n = plan.n_layers();
  if (n != cfg.n_layers || static_cast<int>(kv.size()) != n) {
    throw SnapshotError("plan, cache, and config disagree on the layer count");
  }
  const int64_t history = plan.history_len;
  for (const auto& layer : kv) {
    if (layer.span.start != 0 || layer.span.end != history) {
      throw SnapshotError("cache span does not cover the plan's history");
    }
    if (static_cast<int>(layer.keys.size()) != cfg.n_heads ||
        static_cast<int>(layer.values.size()) != cfg.n_heads) {
      throw SnapshotError("cache head count does not match the config");
    }
  }

  KVSnapshot snapshot;
  snapshot.version = kFormatVersion;
  snapshot.conversation_id = std::move(conversation_id);
  snapshot.config_hash = cfg.hash();
  snapshot.n_layers = n;
  snapshot.n_heads = cfg.n_heads;
  snapshot.head_dim = cfg.head_dim;
  snapshot.history_len = history;
  snapshot.mode = mode;
  snapshot.strategy = strategy;
  snapshot.plan = plan;

  for (const auto& spec : plan_blob_specs(strategy, plan)) {
    SnapshotBlob blob;
    blob.owners = spec.owners;
    blob.span = spec.span;
    const int64_t rows = spec.span.length();
    const int64_t start = spec.span.start;
    blob.keys.resize(static_cast<size_t>(cfg.n_heads));
    blob.values.resize(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto hs = static_cast<size_t>(h);
      if (spec.owners.size() == 1) {
        const auto& src = kv[static_cast<size_t>(spec.owners[0])];
        blob.keys[hs] = src.keys[hs].middleRows(start, rows);
        blob.values[hs] = src.values[hs].middleRows(start, rows);
        continue;
      }
      const auto& shallow = kv[static_cast<size_t>(spec.owners[0])];
      const auto& deep = kv[static_cast<size_t>(spec.owners[1])];
      blob.keys[hs] = deep.keys[hs].middleRows(start, rows);
      blob.values[hs] = deep.values[hs].middleRows(start, rows);
      if (mode == MergeMode::kMean) {
        // Both members cover [p_shallow, L); below that only the deeper
        // member needs the rows, so they stay unmerged.
        const int64_t merge_start =
            plan.recompute_len[static_cast<size_t>(spec.owners[0])];
        const int64_t merge_rows = history - merge_start;
        if (merge_rows > 0) {
          blob.keys[hs].bottomRows(merge_rows) =
              0.5f * (shallow.keys[hs].middleRows(merge_start, merge_rows) +
                      deep.keys[hs].middleRows(merge_start, merge_rows));
          blob.values[hs].bottomRows(merge_rows) =
              0.5f * (shallow.values[hs].middleRows(merge_start, merge_rows) +
                      deep.values[hs].middleRows(merge_start, merge_rows));
        }
      }
    }
    snapshot.blobs.push_back(std::move(blob));
  }
  return snapshot;
}

engine::KVCacheLayer expand(const KVSnapshot& snapshot, int layer) {
  const SnapshotBlob* blob = nullptr;
  for (const auto& b : snapshot.blobs) {
    if (std::find(b.owners.begin(), b.owners.end(), layer) != b.owners.end()) {
      blob = &b;
      break;
    }
  }
  if (!blob) {
    throw RestorationGapError("layer " + std::to_string(layer) +
                              " is not covered by any stored blob");
  }
  const TokenSpan want = snapshot.plan.load_span(layer);
  if (want.start < blob->span.start || want.end != blob->span.end) {
    throw RestorationGapError("stored span does not cover the load span");
  }
  engine::KVCacheLayer out;
  out.span = want;
  const int64_t offset = want.start - blob->span.start;
  const int64_t rows = want.length();
  out.keys.resize(blob->keys.size());
  out.values.resize(blob->values.size());
  for (size_t h = 0; h < blob->keys.size(); ++h) {
    out.keys[h] = blob->keys[h].middleRows(offset, rows);
    out.values[h] = blob->values[h].middleRows(offset, rows);
  }
  return out;
}

StorageReport storage_report(const KVSnapshot& snapshot) {
  StorageReport report;
  const uint64_t row_bytes = 2ull *
                             static_cast<uint64_t>(snapshot.n_heads) *
                             static_cast<uint64_t>(snapshot.head_dim) *
                             sizeof(float);
  report.full_bytes = static_cast<uint64_t>(snapshot.n_layers) *
                      static_cast<uint64_t>(snapshot.history_len) * row_bytes;
  for (const auto& blob : snapshot.blobs) {
    report.stored_bytes +=
        static_cast<uint64_t>(blob.span.length()) * row_bytes;
  }
  return report;
}

void save(const KVSnapshot& snapshot, std::ostream& sink) {
  json meta{{"classifier", classifier_to_json(snapshot.classifier)},
            {"conversation_id", snapshot.conversation_id},
            {"head_dim", snapshot.head_dim},
            {"history_len", snapshot.history_len},
            {"mode", merge_mode_name(snapshot.mode)},
            {"n_heads", snapshot.n_heads},
            {"n_layers", snapshot.n_layers},
            {"plan", plan_to_json(snapshot.plan)},
            {"strategy", strategy_to_json(snapshot.strategy)}};
  const std::string meta_text = meta.dump();

  std::string buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put_u32(buf, snapshot.version);
  put_u64(buf, snapshot.config_hash);
  put_u64(buf, meta_text.size());
  put_bytes(buf, meta_text.data(), meta_text.size());
  put_u32(buf, static_cast<uint32_t>(snapshot.blobs.size()));
  for (const auto& blob : snapshot.blobs) {
    put_u32(buf, static_cast<uint32_t>(blob.owners.size()));
    for (const int owner : blob.owners) put_i32(buf, owner);
    put_i64(buf, blob.span.start);
    put_i64(buf, blob.span.end);
    put_u64(buf, static_cast<uint64_t>(payload_floats(blob)) * sizeof(float));
    for (const auto& m : blob.keys) put_matrix_rowmajor(buf, m);
    for (const auto& m : blob.values) put_matrix_rowmajor(buf, m);
  }
  const uint32_t crc = crc32(buf.data(), buf.size());
  put_u32(buf, crc);
  sink.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!sink) throw SnapshotError("snapshot sink write failed");
}

KVSnapshot load(std::istream& source,
                std::optional<uint64_t> expected_config_hash) {
  std::ostringstream raw;
  raw << source.rdbuf();
  const std::string buf = raw.str();

  if (buf.size() >= 4 && std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw SnapshotLoadError("magic", "not a snapshot container");
  }
  if (buf.size() < 4 + sizeof(uint32_t)) {
    throw SnapshotLoadError("checksum", "container shorter than its framing");
  }
  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(uint32_t),
              sizeof(uint32_t));
  const uint32_t actual_crc = crc32(buf.data(), buf.size() - sizeof(uint32_t));
  if (stored_crc != actual_crc) {
    throw SnapshotLoadError("checksum", "container checksum mismatch");
  }

  ByteReader reader(buf);
  reader.take(4, "magic");
  KVSnapshot snapshot;
  snapshot.version = reader.u32("version");
  if (snapshot.version != kFormatVersion) {
    throw SnapshotLoadError("version",
                            "unsupported format version " +
                                std::to_string(snapshot.version));
  }
  snapshot.config_hash = reader.u64("config");
  if (expected_config_hash && snapshot.config_hash != *expected_config_hash) {
    throw SnapshotLoadError("config",
                            "snapshot was taken under a different model"
                            " configuration");
  }

  const uint64_t meta_len = reader.u64("metadata");
  const char* meta_ptr = reader.take(meta_len, "metadata");
  json meta;
  try {
    meta = json::parse(meta_ptr, meta_ptr + meta_len);
    snapshot.conversation_id = meta.at("conversation_id").get<std::string>();
    snapshot.n_layers = meta.at("n_layers").get<int>();
    snapshot.n_heads = meta.at("n_heads").get<int>();
    snapshot.head_dim = meta.at("head_dim").get<int>();
    snapshot.history_len = meta.at("history_len").get<int64_t>();
    const auto mode = merge_mode_from_name(meta.at("mode").get<std::string>());
    if (!mode) throw SnapshotLoadError("metadata", "unknown merge mode");
    snapshot.mode = *mode;
    snapshot.strategy = strategy_from_json(meta.at("strategy"));
    snapshot.plan = plan_from_json(meta.at("plan"));
    snapshot.classifier = classifier_from_json(meta.at("classifier"));
  } catch (const json::exception& e) {
    throw SnapshotLoadError("metadata", e.what());
  }
  if (snapshot.plan.n_layers() != snapshot.n_layers ||
      snapshot.plan.history_len != snapshot.history_len) {
    throw SnapshotLoadError("plan", "plan does not match the snapshot header");
  }

  const uint32_t blob_count = reader.u32("blob");
  std::vector<bool> covered(static_cast<size_t>(snapshot.n_layers), false);
  for (uint32_t b = 0; b < blob_count; ++b) {
    SnapshotBlob blob;
    const uint32_t owner_count = reader.u32("blob");
    if (owner_count < 1 || owner_count > 2) {
      throw SnapshotLoadError("blob", "blob must have one or two owners");
    }
    for (uint32_t o = 0; o < owner_count; ++o) {
      const int owner = reader.i32("blob");
      if (owner < 0 || owner >= snapshot.n_layers) {
        throw SnapshotLoadError("blob", "blob owner outside the layer range");
      }
      if (covered[static_cast<size_t>(owner)]) {
        throw SnapshotLoadError("coverage",
                                "layer covered by more than one blob");
      }
      covered[static_cast<size_t>(owner)] = true;
      blob.owners.push_back(owner);
    }
    blob.span.start = reader.i64("blob");
    blob.span.end = reader.i64("blob");
    if (blob.span.start < 0 || blob.span.start > blob.span.end ||
        blob.span.end != snapshot.history_len) {
      throw SnapshotLoadError("blob", "blob span must end at the history");
    }
    const uint64_t payload_len = reader.u64("blob");
    const uint64_t expect =
        2ull * static_cast<uint64_t>(snapshot.n_heads) *
        static_cast<uint64_t>(blob.span.length()) *
        static_cast<uint64_t>(snapshot.head_dim) * sizeof(float);
    if (payload_len != expect) {
      throw SnapshotLoadError("blob", "payload length mismatch");
    }
    blob.keys.resize(static_cast<size_t>(snapshot.n_heads));
    blob.values.resize(static_cast<size_t>(snapshot.n_heads));
    for (int h = 0; h < snapshot.n_heads; ++h) {
      blob.keys[static_cast<size_t>(h)] = take_matrix_rowmajor(
          reader, blob.span.length(), snapshot.head_dim, "blob");
    }
    for (int h = 0; h < snapshot.n_heads; ++h) {
      blob.values[static_cast<size_t>(h)] = take_matrix_rowmajor(
          reader, blob.span.length(), snapshot.head_dim, "blob");
    }
    snapshot.blobs.push_back(std::move(blob));
  }
  if (reader.remaining() != sizeof(uint32_t)) {
    throw SnapshotLoadError("blob", "trailing bytes after the blob table");
  }
  for (int l = 0; l < snapshot.n_layers; ++l) {
    if (!covered[static_cast<size_t>(l)]) {
      throw SnapshotLoadError("coverage",
                              "layer " + std::to_string(l) +
                                  " is not covered by any blob");
    }
  }
  return snapshot;
}

}  // namespace krul::kvstore
