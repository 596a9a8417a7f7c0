// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include <json.hpp>

#include "krul/scheduler.hpp"

using namespace krul;
using namespace krul::scheduler;

namespace {

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

// Independent totals used to cross-check the simulator and calibration.
double total_compute_seconds(const CostModel& cost, const RestorationPlan& plan,
                             int64_t d) {
  double flops = 0.0;
  for (const int64_t p : plan.recompute_len) {
    flops += cost.layer_recompute_flops(p, d);
  }
  return flops / cost.f_peak;
}

double total_load_seconds(const CostModel& cost, const RestorationPlan& plan,
                          const strategy::CompressionStrategy& strategy,
                          int64_t d) {
  double bytes = 0.0;
  for (const auto& spec : kvstore::plan_blob_specs(strategy, plan)) {
    bytes += cost.blob_bytes(spec.span.length(), d);
  }
  return bytes / cost.b_peak;
}

}  // namespace

TEST_CASE("layer recompute flops hand value") {
  CostModel cost;
  // p=2, d=4, ffn_mult=4: 2*(8*16 + 4*4*16) + 4*4*3 = 2*384 + 48 = 816.
  CHECK(cost.layer_recompute_flops(2, 4) == doctest::Approx(816.0));
  CHECK(cost.layer_recompute_flops(0, 4) == 0.0);
  CHECK(cost.blob_bytes(3, 4) == doctest::Approx(96.0));
}

TEST_CASE("prefill cost is additive over chunks") {
  CostModel cost;
  // Prefilling a+b tokens at once costs the same as a then b on top.
  const double whole = cost.prefill_flops(48, 0, 64, 4);
  const double split = cost.prefill_flops(16, 0, 64, 4) +
                       cost.prefill_flops(32, 16, 64, 4);
  CHECK(whole == doctest::Approx(split).epsilon(1e-12));

  // One layer of a fresh prefill equals the layer recompute formula.
  const double one_layer = cost.prefill_flops(10, 0, 32, 1);
  CHECK(one_layer == doctest::Approx(cost.layer_recompute_flops(10, 32)));
}

TEST_CASE("pyramid plan hand values") {
  const RestorationPlan plan = build_plan(8, 4, 0.5, {});
  CHECK(plan.history_len == 8);
  CHECK(plan.recompute_len == std::vector<int64_t>{8, 5, 3, 0});
  CHECK(plan.total_recompute_tokens() == 16);  // exactly r_c * L * N

  const RestorationPlan none = build_plan(10, 3, 0.0, {});
  CHECK(none.recompute_len == std::vector<int64_t>{0, 0, 0});
  const RestorationPlan all = build_plan(10, 3, 1.0, {});
  CHECK(all.recompute_len == std::vector<int64_t>{10, 10, 10});

  const RestorationPlan single = build_plan(10, 1, 0.3, {});
  CHECK(single.recompute_len == std::vector<int64_t>{3});

  CHECK_THROWS_AS(build_plan(8, 0, 0.5, {}), ConfigError);
  CHECK_THROWS_AS(build_plan(-1, 4, 0.5, {}), ConfigError);
  CHECK_THROWS_AS(build_plan(8, 4, 1.5, {}), ConfigError);
  CHECK_THROWS_AS(build_plan(8, 4, 0.5, pairing({{1, 9, 0.1}})),
                  PlanInvalidError);
}

TEST_CASE("pyramid plans hold their invariants across random shapes") {
  std::mt19937_64 seeds(99);
  for (int trial = 0; trial < 300; ++trial) {
    const int n_layers = 1 + static_cast<int>(seeds() % 48);
    const int64_t history = static_cast<int64_t>(seeds() % 2000);
    const double r_c = static_cast<double>(seeds() % 1001) / 1000.0;

    const RestorationPlan plan = build_plan(history, n_layers, r_c, {});
    REQUIRE(plan.n_layers() == n_layers);
    for (int l = 0; l < n_layers; ++l) {
      CHECK(plan.recompute_len[static_cast<size_t>(l)] >= 0);
      CHECK(plan.recompute_len[static_cast<size_t>(l)] <= history);
      if (l > 0) {
        CHECK(plan.recompute_len[static_cast<size_t>(l)] <=
              plan.recompute_len[static_cast<size_t>(l - 1)]);
      }
    }
    const double target = r_c * static_cast<double>(history) *
                          static_cast<double>(n_layers);
    CHECK(std::abs(static_cast<double>(plan.total_recompute_tokens()) -
                   target) <= static_cast<double>(n_layers));
    CHECK(validate_plan(plan, strategy::CompressionStrategy{}).empty());
  }
}

TEST_CASE("uniform plan rounds the shared prefix") {
  const RestorationPlan plan = uniform_plan(10, 3, 0.42);
  CHECK(plan.recompute_len == std::vector<int64_t>{4, 4, 4});
  CHECK(uniform_plan(10, 2, 1.0).recompute_len ==
        std::vector<int64_t>{10, 10});
  CHECK_THROWS_AS(uniform_plan(10, 0, 0.5), ConfigError);
}

TEST_CASE("default grid spans zero to one inclusive") {
  const auto grid = default_rc_grid();
  REQUIRE(grid.size() == 21);
  CHECK(grid.front() == 0.0);
  CHECK(grid.back() == 1.0);
  CHECK(grid[10] == doctest::Approx(0.5).epsilon(1e-12));
  const auto coarse = default_rc_grid(0.5);
  REQUIRE(coarse.size() == 3);
  CHECK(coarse[1] == doctest::Approx(0.5));
}

TEST_CASE("calibration matches an exhaustive argmin") {
  std::mt19937_64 seeds(7);
  const auto grid = default_rc_grid();
  for (int trial = 0; trial < 40; ++trial) {
    CostModel cost;
    cost.f_peak = 1e12 * static_cast<double>(1 + seeds() % 500);
    cost.b_peak = 1e9 * static_cast<double>(1 + seeds() % 500);
    const int n_layers = 2 + static_cast<int>(seeds() % 31);
    const int64_t history = 100 + static_cast<int64_t>(seeds() % 900);
    const int64_t d = 64 << (seeds() % 5);

    strategy::CompressionStrategy strat;
    if (trial % 2 == 0 && n_layers >= 4) {
      strat = pairing({{0, n_layers - 1, 0.1}, {1, n_layers - 2, 0.2}});
    }

    const double got = calibrate_rc(cost, n_layers, history, d, strat, grid);

    double best = -1.0;
    double best_gap = 0.0;
    for (const double r : grid) {
      const RestorationPlan plan = build_plan(history, n_layers, r, strat);
      const double gap = std::abs(total_compute_seconds(cost, plan, d) -
                                  total_load_seconds(cost, plan, strat, d));
      if (best < 0.0 || gap < best_gap) {
        best = r;
        best_gap = gap;
      }
    }
    CHECK(got == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("calibration limit cases") {
  CostModel cost;
  const auto grid = default_rc_grid();
  // Infinite bandwidth: loading is free, so the balance point is all-load.
  cost.b_peak = 1e30;
  cost.f_peak = 312e12;
  CHECK(calibrate_rc(cost, 8, 500, 128, {}, grid) == 0.0);
  // Infinite compute: recomputing is free, balance point is all-recompute.
  cost.b_peak = 139e9;
  cost.f_peak = 1e30;
  CHECK(calibrate_rc(cost, 8, 500, 128, {}, grid) == 1.0);
  CHECK_THROWS_AS(calibrate_rc(cost, 8, 500, 128, {}, {}), ConfigError);
}

TEST_CASE("plan validation catches each violation kind") {
  const auto kinds = [](const std::vector<PlanViolation>& v) {
    std::set<std::string> out;
    for (const auto& violation : v) out.insert(violation.kind);
    return out;
  };

  RestorationPlan good;
  good.history_len = 10;
  good.recompute_len = {8, 6, 4, 2};
  CHECK(validate_plan(good, strategy::CompressionStrategy{}).empty());

  RestorationPlan rising = good;
  rising.recompute_len = {4, 6, 4, 2};
  CHECK(kinds(validate_plan(rising, strategy::CompressionStrategy{})).count("monotonicity"));

  RestorationPlan oversized = good;
  oversized.recompute_len = {12, 6, 4, 2};
  CHECK(kinds(validate_plan(oversized, strategy::CompressionStrategy{})).count("bounds"));

  RestorationPlan negative = good;
  negative.recompute_len = {8, 6, 4, -1};
  CHECK(kinds(validate_plan(negative, strategy::CompressionStrategy{})).count("bounds"));

  RestorationPlan bad_history;
  bad_history.history_len = -1;
  CHECK(kinds(validate_plan(bad_history, strategy::CompressionStrategy{})).count("bounds"));

  // A strategy pair outside the plan's layers is a coverage failure.
  CHECK(kinds(validate_plan(good, pairing({{1, 7, 0.1}}))).count("coverage"));
  CHECK(validate_plan(good, pairing({{1, 3, 0.1}})).empty());
}

TEST_CASE("plan validation against a snapshot checks blob coverage") {
  const auto kinds = [](const std::vector<PlanViolation>& v) {
    std::set<std::string> out;
    for (const auto& violation : v) out.insert(violation.kind);
    return out;
  };

  // Build a real snapshot, then check plans against it.
  std::vector<engine::KVCacheLayer> kv(3);
  for (auto& layer : kv) {
    layer.span = {0, 6};
    layer.keys.push_back(Eigen::MatrixXf::Ones(6, 2));
    layer.values.push_back(Eigen::MatrixXf::Ones(6, 2));
  }
  engine::ModelConfig cfg;
  cfg.n_layers = 3;
  cfg.n_heads = 1;
  cfg.head_dim = 2;
  cfg.d_model = 2;
  cfg.vocab_size = 4;
  RestorationPlan plan;
  plan.history_len = 6;
  plan.recompute_len = {4, 2, 0};
  const auto snapshot = kvstore::compress_and_snapshot(
      kv, {}, plan, kvstore::MergeMode::kKeepDeeper, "c", cfg);

  CHECK(validate_plan(plan, snapshot).empty());

  RestorationPlan shallower = plan;
  shallower.recompute_len = {3, 2, 0};  // blob for layer 0 starts at 4
  CHECK(kinds(validate_plan(shallower, snapshot)).count("coverage"));

  RestorationPlan wrong_history = plan;
  wrong_history.history_len = 7;
  CHECK(kinds(validate_plan(wrong_history, snapshot)).count("bounds"));
}

TEST_CASE("simulated streams run disjoint ordered intervals") {
  CostModel cost;
  const auto strategy = pairing({{1, 3, 0.5}});
  const RestorationPlan plan = build_plan(600, 4, 0.5, strategy);
  const PipelineTrace trace = simulate_pipeline(plan, strategy, cost, 128);

  // Layer 3 recomputes nothing and layer 0 loads nothing; zero-duration
  // tasks never enter a stream.
  REQUIRE(trace.compute_tasks.size() == 3);
  REQUIRE(trace.load_tasks.size() == 2);
  CHECK(trace.load_tasks[0].layer == 1);  // pair blob keyed by shallow owner
  CHECK(trace.load_tasks[1].layer == 2);

  const auto check_stream = [](const std::vector<PipelineTask>& tasks) {
    for (size_t i = 0; i < tasks.size(); ++i) {
      CHECK(tasks[i].end >= tasks[i].start);
      if (i > 0) CHECK(tasks[i].start >= tasks[i - 1].end);
    }
  };
  check_stream(trace.compute_tasks);
  check_stream(trace.load_tasks);

  const double compute_total = total_compute_seconds(cost, plan, 128);
  const double load_total = total_load_seconds(cost, plan, strategy, 128);
  CHECK(trace.compute_finish == doctest::Approx(compute_total));
  CHECK(trace.load_finish == doctest::Approx(load_total));
  CHECK(trace.makespan ==
        doctest::Approx(std::max(trace.compute_finish, trace.load_finish)));
  CHECK(trace.makespan >= std::max(compute_total, load_total) - 1e-12);

  // Bubble definition: idle share of the slower stream's horizon.
  const double expect_bubble =
      (trace.makespan - std::min(compute_total, load_total)) / trace.makespan;
  if (compute_total < load_total) {
    CHECK(trace.bubble_compute == doctest::Approx(expect_bubble));
    CHECK(trace.bubble_load == doctest::Approx(0.0));
  } else {
    CHECK(trace.bubble_load == doctest::Approx(expect_bubble));
    CHECK(trace.bubble_compute == doctest::Approx(0.0));
  }
}

TEST_CASE("simulation edge ratios leave one stream empty") {
  CostModel cost;
  // All recompute: no blobs have content, so the load stream is empty.
  const RestorationPlan all = uniform_plan(100, 4, 1.0);
  const PipelineTrace ta = simulate_pipeline(all, {}, cost, 64);
  CHECK(ta.load_tasks.empty());
  CHECK(ta.bubble_load == 0.0);
  CHECK(ta.makespan == doctest::Approx(total_compute_seconds(cost, all, 64)));

  // All load: no compute tasks.
  const RestorationPlan none = uniform_plan(100, 4, 0.0);
  const PipelineTrace tl = simulate_pipeline(none, {}, cost, 64);
  CHECK(tl.compute_tasks.empty());
  CHECK(tl.bubble_compute == 0.0);
  CHECK(tl.makespan ==
        doctest::Approx(total_load_seconds(cost, none, {}, 64)));

  // Zero history: nothing to do at all.
  const PipelineTrace tz = simulate_pipeline(uniform_plan(0, 4, 0.5), {},
                                             cost, 64);
  CHECK(tz.makespan == 0.0);
  CHECK(tz.bubble_compute == 0.0);
  CHECK(tz.bubble_load == 0.0);
}

TEST_CASE("pair blobs are loaded once") {
  CostModel cost;
  const RestorationPlan plan = uniform_plan(400, 4, 0.25);
  const PipelineTrace unpaired = simulate_pipeline(plan, {}, cost, 128);
  const auto strategy = pairing({{0, 2, 0.1}});
  const PipelineTrace paired = simulate_pipeline(plan, strategy, cost, 128);
  CHECK(unpaired.load_tasks.size() == 4);
  CHECK(paired.load_tasks.size() == 3);
  CHECK(paired.load_finish < unpaired.load_finish);
}

TEST_CASE("event log emits one json object per task") {
  CostModel cost;
  const RestorationPlan plan = build_plan(300, 3, 0.5, {});
  const PipelineTrace trace = simulate_pipeline(plan, {}, cost, 64);
  const std::string log = trace.event_log();

  size_t lines = 0;
  std::set<std::string> streams;
  std::istringstream in(log);
  for (std::string line; std::getline(in, line);) {
    const auto event = nlohmann::json::parse(line);
    streams.insert(event.at("stream").get<std::string>());
    CHECK(event.at("end").get<double>() >= event.at("start").get<double>());
    CHECK(event.at("layer").get<int>() >= 0);
    ++lines;
  }
  CHECK(lines == trace.compute_tasks.size() + trace.load_tasks.size());
  CHECK(streams == std::set<std::string>{"compute", "load"});
}

TEST_CASE("restore rebuilds the exact keys and values") {
  engine::ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.n_heads = 2;
  cfg.head_dim = 4;
  cfg.d_model = 8;
  cfg.vocab_size = 13;
  cfg.seed = 21;
  const engine::Model model = build_model(cfg);

  engine::TokenSeq history;
  UniformStream rng(77);
  for (int i = 0; i < 24; ++i) {
    history.push_back(static_cast<engine::TokenId>(rng.next_index(13)));
  }
  const engine::PrefillResult full = prefill(model, history);

  for (const double r_c : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const RestorationPlan plan = build_plan(24, 4, r_c, {});
    const auto snapshot = kvstore::compress_and_snapshot(
        full.kv, {}, plan, kvstore::MergeMode::kKeepDeeper, "conv", cfg);
    auto restored = execute_restore(model, history, snapshot);
    REQUIRE(restored.size() == 4);
    for (int l = 0; l < 4; ++l) {
      const auto& got = restored[static_cast<size_t>(l)];
      const auto& want = full.kv[static_cast<size_t>(l)];
      CHECK(got.span == TokenSpan{0, 24});
      for (int h = 0; h < 2; ++h) {
        CHECK((got.keys[static_cast<size_t>(h)] -
               want.keys[static_cast<size_t>(h)])
                  .cwiseAbs()
                  .maxCoeff() < 1e-6f);
        CHECK((got.values[static_cast<size_t>(h)] -
               want.values[static_cast<size_t>(h)])
                  .cwiseAbs()
                  .maxCoeff() < 1e-6f);
      }
    }
    // The restored cache continues the conversation like the original.
    const auto from_restored =
        decode_step(model, restored, history.back());
    auto kv_copy = full.kv;
    const auto from_original = decode_step(model, kv_copy, history.back());
    CHECK((from_restored.logits - from_original.logits)
              .cwiseAbs()
              .maxCoeff() < 1e-5f);
  }
}

TEST_CASE("restore rejects mismatched snapshots") {
  engine::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 1;
  cfg.head_dim = 4;
  cfg.d_model = 4;
  cfg.vocab_size = 7;
  const engine::Model model = build_model(cfg);
  engine::TokenSeq history = {1, 2, 3, 4, 5, 6};
  const auto full = prefill(model, history);
  const RestorationPlan plan = build_plan(6, 2, 0.5, {});
  auto snapshot = kvstore::compress_and_snapshot(
      full.kv, {}, plan, kvstore::MergeMode::kKeepDeeper, "conv", cfg);

  engine::TokenSeq longer = history;
  longer.push_back(1);
  CHECK_THROWS_AS(execute_restore(model, longer, snapshot),
                  RestorationGapError);

  auto foreign = snapshot;
  foreign.config_hash ^= 1;
  CHECK_THROWS_AS(execute_restore(model, history, foreign), SnapshotError);

  // A gap between plan and blobs surfaces before any compute.
  auto gapped = snapshot;
  gapped.plan.recompute_len = {2, 1};  // stored blobs begin at 6 and 0
  CHECK_THROWS_AS(execute_restore(model, history, gapped),
                  RestorationGapError);
}

TEST_CASE("measured calibration returns a grid member") {
  engine::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 1;
  cfg.head_dim = 4;
  cfg.d_model = 4;
  cfg.vocab_size = 7;
  cfg.seed = 3;
  const engine::Model model = build_model(cfg);
  engine::TokenSeq history = {1, 2, 3, 4, 5, 6, 0, 2};
  const std::vector<double> grid = {0.0, 0.5, 1.0};
  const double r = calibrate_rc_measured(model, history, {}, grid);
  CHECK(std::find(grid.begin(), grid.end(), r) != grid.end());
}
