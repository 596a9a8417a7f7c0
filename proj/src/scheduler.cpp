// SPDX-License-Identifier: Apache-2.0
#include "krul/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <future>
#include <thread>

namespace krul::scheduler {

namespace {

double plan_compute_seconds(const CostModel& cost, const RestorationPlan& plan,
                            int64_t d) {
  double flops = 0.0;
  for (const int64_t p : plan.recompute_len) {
    flops += cost.layer_recompute_flops(p, d);
  }
  return flops / cost.f_peak;
}

double plan_load_seconds(const CostModel& cost, const RestorationPlan& plan,
                         const strategy::CompressionStrategy& strategy,
                         int64_t d) {
  double bytes = 0.0;
  for (const auto& spec : kvstore::plan_blob_specs(strategy, plan)) {
    bytes += cost.blob_bytes(spec.span.length(), d);
  }
  return bytes / cost.b_peak;
}

void check_ratio(double r_c) {
  if (!(r_c >= 0.0) || r_c > 1.0) {
    throw ConfigError("r_c must lie in [0, 1]");
  }
}

}  // namespace

double CostModel::prefill_flops(int64_t new_len, int64_t history_len,
                                int64_t d, int n_layers) const {
  const double n = static_cast<double>(new_len);
  const double h = static_cast<double>(history_len);
  const double dd = static_cast<double>(d);
  const double span_sum = n * h + 0.5 * n * (n + 1.0);
  const double per_layer =
      n * (8.0 * dd * dd + 4.0 * dd * ffn_mult * dd) + 4.0 * dd * span_sum;
  return per_layer * static_cast<double>(n_layers);
}

RestorationPlan build_plan(int64_t history_len, int n_layers, double r_c,
                           const strategy::CompressionStrategy& strategy) {
  check_ratio(r_c);
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (history_len < 0) throw ConfigError("history_len must be >= 0");
  for (const auto& pair : strategy.pairs) {
    if (pair.shallow < 0 || pair.deep >= n_layers) {
      throw PlanInvalidError("strategy pair outside the layer range");
    }
  }

  RestorationPlan plan;
  plan.history_len = history_len;
  plan.recompute_len.resize(static_cast<size_t>(n_layers));
  if (n_layers == 1) {
    plan.recompute_len[0] =
        std::llround(r_c * static_cast<double>(history_len));
    return plan;
  }

  const double denom = static_cast<double>(n_layers - 1);
  for (int l = 0; l < n_layers; ++l) {
    // Linear ramp from min(2*r_c,1) at the surface to max(2*r_c-1,0) at the
    // deepest layer; both halves agree at r_c = 0.5.
    double frac;
    if (r_c <= 0.5) {
      frac = 2.0 * r_c * static_cast<double>(n_layers - 1 - l) / denom;
    } else {
      frac = 1.0 - 2.0 * (1.0 - r_c) * static_cast<double>(l) / denom;
    }
    frac = std::clamp(frac, 0.0, 1.0);
    plan.recompute_len[static_cast<size_t>(l)] =
        std::llround(frac * static_cast<double>(history_len));
  }
  for (int l = 1; l < n_layers; ++l) {
    plan.recompute_len[static_cast<size_t>(l)] =
        std::min(plan.recompute_len[static_cast<size_t>(l)],
                 plan.recompute_len[static_cast<size_t>(l - 1)]);
  }

  // Rounding plus the running minimum can drift the total; nudge the deepest
  // adjustable layers until it sits within one token per layer of the target.
  const double target = r_c * static_cast<double>(history_len) *
                        static_cast<double>(n_layers);
  const double tolerance = static_cast<double>(n_layers);
  auto total = [&plan] { return plan.total_recompute_tokens(); };
  while (static_cast<double>(total()) < target - tolerance) {
    bool moved = false;
    for (int l = n_layers - 1; l >= 0; --l) {
      const int64_t cap =
          l == 0 ? history_len
                 : plan.recompute_len[static_cast<size_t>(l - 1)];
      if (plan.recompute_len[static_cast<size_t>(l)] < cap) {
        ++plan.recompute_len[static_cast<size_t>(l)];
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  while (static_cast<double>(total()) > target + tolerance) {
    bool moved = false;
    for (int l = n_layers - 1; l >= 0; --l) {
      const int64_t floor_len =
          l == n_layers - 1 ? 0
                            : plan.recompute_len[static_cast<size_t>(l + 1)];
      if (plan.recompute_len[static_cast<size_t>(l)] > floor_len) {
        --plan.recompute_len[static_cast<size_t>(l)];
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  return plan;
}

RestorationPlan uniform_plan(int64_t history_len, int n_layers, double r_c) {
  check_ratio(r_c);
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (history_len < 0) throw ConfigError("history_len must be >= 0");
  RestorationPlan plan;
  plan.history_len = history_len;
  const int64_t p = std::clamp<int64_t>(
      std::llround(r_c * static_cast<double>(history_len)), 0, history_len);
  plan.recompute_len.assign(static_cast<size_t>(n_layers), p);
  return plan;
}

double calibrate_rc(const CostModel& cost, int n_layers, int64_t history_len,
                    int64_t d, const strategy::CompressionStrategy& strategy,
                    const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("calibration grid is empty");
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  double best_rc = sorted.front();
  double best_diff = std::numeric_limits<double>::infinity();
  for (const double r_c : sorted) {
    check_ratio(r_c);
    const RestorationPlan plan =
        build_plan(history_len, n_layers, r_c, strategy);
    const double t_c = plan_compute_seconds(cost, plan, d);
    const double t_l = plan_load_seconds(cost, plan, strategy, d);
    const double diff = std::abs(t_c - t_l);
    if (diff < best_diff) {
      best_diff = diff;
      best_rc = r_c;
    }
  }
  return best_rc;
}

std::vector<double> default_rc_grid(double step) {
  if (!(step > 0.0) || step > 1.0) {
    throw ConfigError("grid step must lie in (0, 1]");
  }
  std::vector<double> grid;
  for (int64_t k = 0;; ++k) {
    const double v = static_cast<double>(k) * step;
    if (v > 1.0 + 1e-12) break;
    grid.push_back(std::min(v, 1.0));
  }
  if (grid.back() < 1.0 - 1e-12) grid.push_back(1.0);
  return grid;
}

std::vector<PlanViolation> validate_plan(
    const RestorationPlan& plan,
    const strategy::CompressionStrategy& strategy) {
  std::vector<PlanViolation> violations;
  const auto note = [&violations](std::string kind, std::string detail) {
    violations.push_back({std::move(kind), std::move(detail)});
  };
  const int n = plan.n_layers();
  if (plan.history_len < 0) {
    note("bounds", "history_len is negative");
  }
  for (int l = 0; l < n; ++l) {
    const int64_t p = plan.recompute_len[static_cast<size_t>(l)];
    if (p < 0 || p > plan.history_len) {
      note("bounds", "layer " + std::to_string(l) +
                         " recompute length outside [0, history]");
    }
    if (l > 0 && p > plan.recompute_len[static_cast<size_t>(l - 1)]) {
      note("monotonicity",
           "layer " + std::to_string(l) +
               " recomputes more than the layer above it");
    }
    if (plan.recompute_span(l).length() + plan.load_span(l).length() !=
        plan.history_len) {
      note("totals",
           "layer " + std::to_string(l) + " spans do not add up to history");
    }
  }
  for (const auto& pair : strategy.pairs) {
    if (pair.shallow < 0 || pair.deep >= n || pair.shallow >= pair.deep) {
      note("coverage", "pair member outside the plan's layers");
      continue;
    }
    if (plan.recompute_len[static_cast<size_t>(pair.deep)] >
        plan.recompute_len[static_cast<size_t>(pair.shallow)]) {
      note("coverage",
           "pair (" + std::to_string(pair.shallow) + "," +
               std::to_string(pair.deep) +
               ") blob span misses the shallow member's load span");
    }
  }
  return violations;
}

std::vector<PlanViolation> validate_plan(const RestorationPlan& plan,
                                         const kvstore::KVSnapshot& snapshot) {
  std::vector<PlanViolation> violations =
      validate_plan(plan, snapshot.strategy);
  const auto note = [&violations](std::string kind, std::string detail) {
    violations.push_back({std::move(kind), std::move(detail)});
  };
  if (snapshot.history_len != plan.history_len ||
      snapshot.n_layers != plan.n_layers()) {
    note("bounds", "snapshot header disagrees with the plan");
    return violations;
  }
  std::vector<const kvstore::SnapshotBlob*> blob_of(
      static_cast<size_t>(plan.n_layers()), nullptr);
  for (const auto& blob : snapshot.blobs) {
    for (const int owner : blob.owners) {
      if (owner < 0 || owner >= plan.n_layers()) {
        note("coverage", "blob owner outside the layer range");
        continue;
      }
      if (blob_of[static_cast<size_t>(owner)]) {
        note("coverage",
             "layer " + std::to_string(owner) + " covered by two blobs");
      }
      blob_of[static_cast<size_t>(owner)] = &blob;
    }
  }
  for (int l = 0; l < plan.n_layers(); ++l) {
    const auto* blob = blob_of[static_cast<size_t>(l)];
    if (!blob) {
      note("coverage",
           "layer " + std::to_string(l) + " is not covered by any blob");
      continue;
    }
    const TokenSpan want = plan.load_span(l);
    if (blob->span.end != plan.history_len || blob->span.start > want.start) {
      note("coverage", "layer " + std::to_string(l) +
                           " stored span does not cover its load span");
    }
  }
  return violations;
}

std::string PipelineTrace::event_log() const {
  std::string out;
  char line[160];
  const auto emit = [&out, &line](const char* stream,
                                  const PipelineTask& task) {
    std::snprintf(line, sizeof(line),
                  "{\"stream\":\"%s\",\"layer\":%d,\"start\":%.9g,"
                  "\"end\":%.9g}\n",
                  stream, task.layer, task.start, task.end);
    out += line;
  };
  for (const auto& task : compute_tasks) emit("compute", task);
  for (const auto& task : load_tasks) emit("load", task);
  return out;
}

PipelineTrace simulate_pipeline(const RestorationPlan& plan,
                                const strategy::CompressionStrategy& strategy,
                                const CostModel& cost, int64_t d) {
  PipelineTrace trace;
  double clock = 0.0;
  for (int l = 0; l < plan.n_layers(); ++l) {
    const double secs =
        cost.layer_recompute_flops(plan.recompute_len[static_cast<size_t>(l)],
                                   d) /
        cost.f_peak;
    if (secs <= 0.0) continue;
    trace.compute_tasks.push_back({l, clock, clock + secs});
    clock += secs;
  }
  trace.compute_finish = clock;

  clock = 0.0;
  for (const auto& spec : kvstore::plan_blob_specs(strategy, plan)) {
    const double secs = cost.blob_bytes(spec.span.length(), d) / cost.b_peak;
    if (secs <= 0.0) continue;
    trace.load_tasks.push_back({spec.owners.front(), clock, clock + secs});
    clock += secs;
  }
  trace.load_finish = clock;

  trace.makespan = std::max(trace.compute_finish, trace.load_finish);
  if (trace.makespan > 0.0) {
    if (!trace.compute_tasks.empty()) {
      trace.bubble_compute =
          (trace.makespan - trace.compute_finish) / trace.makespan;
    }
    if (!trace.load_tasks.empty()) {
      trace.bubble_load = (trace.makespan - trace.load_finish) / trace.makespan;
    }
  }
  return trace;
}

std::vector<engine::KVCacheLayer> execute_restore(
    const engine::Model& model, const engine::TokenSeq& history,
    const kvstore::KVSnapshot& snapshot) {
  const auto& cfg = model.config();
  if (snapshot.config_hash != model.config_hash()) {
    throw SnapshotError("snapshot was taken under a different model config");
  }
  if (static_cast<int64_t>(history.size()) != snapshot.history_len) {
    throw RestorationGapError("history length does not match the snapshot");
  }
  const RestorationPlan& plan = snapshot.plan;
  for (const auto& violation : validate_plan(plan, snapshot)) {
    if (violation.kind == "coverage") {
      throw RestorationGapError(violation.kind + ": " + violation.detail);
    }
    throw PlanInvalidError(violation.kind + ": " + violation.detail);
  }

  // One handoff slot per layer; the loader deposits expanded suffixes in
  // blob service order while this thread recomputes the prefixes.
  std::vector<std::promise<engine::KVCacheLayer>> slots(
      static_cast<size_t>(cfg.n_layers));
  std::vector<std::future<engine::KVCacheLayer>> futures;
  futures.reserve(slots.size());
  for (auto& slot : slots) futures.push_back(slot.get_future());

  std::thread loader([&snapshot, &slots, n_layers = cfg.n_layers] {
    std::vector<bool> filled(static_cast<size_t>(n_layers), false);
    try {
      for (const auto& blob : snapshot.blobs) {
        for (const int owner : blob.owners) {
          slots[static_cast<size_t>(owner)].set_value(
              kvstore::expand(snapshot, owner));
          filled[static_cast<size_t>(owner)] = true;
        }
      }
    } catch (...) {
      const auto err = std::current_exception();
      for (size_t l = 0; l < filled.size(); ++l) {
        if (!filled[l]) slots[l].set_exception(err);
      }
    }
  });

  std::vector<engine::KVCacheLayer> restored;
  try {
    engine::PartialRecompute partial =
        engine::partial_prefix_recompute(model, history, plan);
    restored.resize(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
      engine::KVCacheLayer loaded = futures[static_cast<size_t>(l)].get();
      if (loaded.span != plan.load_span(l)) {
        throw RestorationGapError("loaded span does not abut the prefix");
      }
      auto& out = restored[static_cast<size_t>(l)];
      auto& computed = partial.kv[static_cast<size_t>(l)];
      const int64_t prefix = plan.recompute_len[static_cast<size_t>(l)];
      out.keys.resize(static_cast<size_t>(cfg.n_heads));
      out.values.resize(static_cast<size_t>(cfg.n_heads));
      for (int h = 0; h < cfg.n_heads; ++h) {
        const auto hs = static_cast<size_t>(h);
        out.keys[hs].resize(plan.history_len, cfg.head_dim);
        out.values[hs].resize(plan.history_len, cfg.head_dim);
        if (prefix > 0) {
          out.keys[hs].topRows(prefix) = computed.keys[hs];
          out.values[hs].topRows(prefix) = computed.values[hs];
        }
        if (loaded.span.length() > 0) {
          out.keys[hs].bottomRows(loaded.span.length()) = loaded.keys[hs];
          out.values[hs].bottomRows(loaded.span.length()) = loaded.values[hs];
        }
      }
      out.span = {0, plan.history_len};
    }
  } catch (...) {
    loader.join();
    throw;
  }
  loader.join();
  return restored;
}

double calibrate_rc_measured(const engine::Model& model,
                             const engine::TokenSeq& history,
                             const strategy::CompressionStrategy& strategy,
                             const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("calibration grid is empty");
  if (history.empty()) {
    throw ConfigError("measured calibration needs a non-empty history");
  }
  const auto& cfg = model.config();
  const engine::PrefillResult full = engine::prefill(model, history);

  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  double best_rc = sorted.front();
  double best_diff = std::numeric_limits<double>::infinity();
  using clock = std::chrono::steady_clock;
  for (const double r_c : sorted) {
    check_ratio(r_c);
    const RestorationPlan plan = build_plan(
        static_cast<int64_t>(history.size()), cfg.n_layers, r_c, strategy);
    const auto snapshot = kvstore::compress_and_snapshot(
        full.kv, strategy, plan, kvstore::MergeMode::kKeepDeeper,
        "calibration", cfg);

    const auto c0 = clock::now();
    engine::partial_prefix_recompute(model, history, plan);
    const auto c1 = clock::now();
    for (int l = 0; l < cfg.n_layers; ++l) {
      kvstore::expand(snapshot, l);
    }
    const auto c2 = clock::now();

    const double t_c = std::chrono::duration<double>(c1 - c0).count();
    const double t_l = std::chrono::duration<double>(c2 - c1).count();
    const double diff = std::abs(t_c - t_l);
    if (diff < best_diff) {
      best_diff = diff;
      best_rc = r_c;
    }
  }
  return best_rc;
}

}  // namespace krul::scheduler
