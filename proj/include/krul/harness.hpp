// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "krul/analysis.hpp"
#include "krul/engine.hpp"
#include "krul/kvstore.hpp"
#include "krul/scheduler.hpp"
#include "krul/strategy.hpp"

namespace krul::harness {

struct WorkloadSpec {
  int turns = 3;
  int64_t mean_user_len = 32;
  int64_t mean_model_len = 210;
  double decode_prefill_ratio = 6.56;  // model output vs user input length
  uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

struct Turn {
  engine::TokenSeq user;
  int64_t decode_len = 0;
};

// Model-output length for one turn under the workload's length ratio.
int64_t decode_len_for(int64_t input_len, double ratio);

// Deterministic multi-turn conversation shape: user lengths jitter uniformly
// within [0.5, 1.5) of the mean, decode lengths follow the length ratio
// (or jitter around mean_model_len when the ratio is unset / <= 0).
std::vector<Turn> gen_workload(const WorkloadSpec& spec, int64_t vocab_size);

enum class Method {
  kFullRecompute,    // store nothing, rebuild history each turn
  kFullLoad,         // store everything, load it back verbatim
  kFixedPartial,     // uniform recompute/load split, no compression
  kFixedCompression, // adjacent deeper-half pairs, pure load
  kKrul,             // adaptive strategy + calibrated pyramid plan
};

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

struct BenchConfig {
  analysis::ClassifierConfig classifier;
  strategy::StrategyConfig strategy;
  kvstore::MergeMode merge = kvstore::MergeMode::kMean;
  scheduler::CostModel cost;
  double rc_grid_step = 0.05;
  double fixed_ratio = 0.4;  // uniform split used by the fixed-partial baseline
};

struct MethodReport {
  std::string method;
  double sim_ttft_s = 0.0;         // mean over restoration turns
  uint64_t stored_bytes = 0;       // final end-of-turn snapshot
  double logit_max_divergence = 0.0;
  double ttft_speedup_vs_recompute = 0.0;
  double storage_reduction_vs_full = 0.0;  // 0 when nothing is stored
  // Measured restore time, reported on the console only; excluded from the
  // serialized report so identical configs produce identical bytes.
  double wall_restore_s = 0.0;
};

struct BenchReport {
  int schema_version = 1;
  uint64_t model_seed = 0;
  uint64_t workload_seed = 0;
  std::vector<MethodReport> methods;

  std::string to_json() const;
  std::string to_csv() const;
};

// Runs every method over the same token stream: the full-recompute pass
// fixes the conversation (greedy decode), then each method replays it
// teacher-forced, restoring state per its own policy at each turn boundary.
BenchReport run_bench(const std::vector<Turn>& workload,
                      const engine::ModelConfig& model_cfg,
                      const std::vector<Method>& methods,
                      const BenchConfig& cfg);

struct AppConfig {
  engine::ModelConfig model;
  WorkloadSpec workload;
  BenchConfig bench;
  std::vector<Method> methods = {
      Method::kFullRecompute, Method::kFullLoad, Method::kFixedPartial,
      Method::kFixedCompression, Method::kKrul};
  // `calibrate` subcommand inputs; default to the model/workload dimensions.
  int64_t calibrate_history_len = 1000;
  int64_t calibrate_d = 1024;
  int calibrate_n_layers = 32;
};

// Flat key=value file, '#' comments. Unknown keys are errors.
AppConfig parse_config_file(const std::string& path);
AppConfig parse_config_text(const std::string& text);

// Entry point behind the binary: run | calibrate | bench | inspect with
// --config/--seed/--out/--format. Returns the process exit status.
int cli(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace krul::harness
