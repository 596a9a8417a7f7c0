// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace krul {

// Half-open interval of absolute token positions.
struct TokenSpan {
  int64_t start = 0;
  int64_t end = 0;

  int64_t length() const { return end - start; }
  bool empty() const { return end <= start; }
  bool contains(const TokenSpan& other) const {
    return start <= other.start && other.end <= end;
  }
  bool operator==(const TokenSpan&) const = default;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A restoration input whose spans do not tile [0, history) contiguously.
struct RestorationGapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Ragged or internally inconsistent conversation state.
struct StateCorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Misuse of an incremental accumulator (double fold, finalize before fold).
struct AccountingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PlanInvalidError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ClassificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SnapshotError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Snapshot deserialization failure; `field` names the first check that failed
// ("magic", "version", "config", "checksum", ...).
struct SnapshotLoadError : std::runtime_error {
  std::string field;
  SnapshotLoadError(std::string field_, const std::string& msg)
      : std::runtime_error("snapshot load error [" + field_ + "]: " + msg),
        field(std::move(field_)) {}
};

// Deterministic uniform stream. mt19937_64 output is mapped to floats through
// a fixed 24-bit truncation, so the same seed yields bit-identical values on
// every platform (std::uniform_real_distribution makes no such promise).
class UniformStream {
 public:
  explicit UniformStream(uint64_t seed) : rng_(seed) {}

  // Uniform in [lo, hi).
  float next(float lo, float hi) {
    const auto bits = static_cast<uint32_t>(rng_() >> 40);
    const float u = static_cast<float>(bits) * (1.0f / 16777216.0f);
    return lo + (hi - lo) * u;
  }

  // Uniform integer in [0, n).
  uint64_t next_index(uint64_t n) { return rng_() % n; }

  std::mt19937_64& raw() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

uint64_t fnv1a64(const void* data, size_t len,
                 uint64_t basis = 0xcbf29ce484222325ull);
uint32_t crc32(const void* data, size_t len, uint32_t crc = 0);

}  // namespace krul
