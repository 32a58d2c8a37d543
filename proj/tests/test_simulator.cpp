#include <gtest/gtest.h>

#include <sstream>

#include "moeplan/simulator.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace moeplan;

namespace {

struct ModelTotals {
  double cost_gbs = 0;
  double e2e_s = 0;
  std::vector<double> layer_cost;
  std::vector<double> layer_latency;
  std::vector<std::vector<double>> t_rep;
};

// The analytical side of the agreement check, evaluated with the same
// method/assignment/pipeline degree the simulator receives.
ModelTotals analytical_totals(const PlatformProfile& profile, const ModelSpec& model,
                              const ExpertDemand& demand, const DeploymentPlan& plan,
                              const CostModelOptions& opts = {}) {
  ModelTotals out;
  int beta = std::max(1, plan.pipeline_degree);
  std::vector<double> latencies;
  for (int e = 0; e < model.num_layers; ++e) {
    LayerCost lc = layer_exec_and_cost(profile, model, e, demand.tokens[e], plan.assign[e],
                                       plan.method[e], beta, opts);
    out.cost_gbs += lc.cost_gbs;
    out.layer_cost.push_back(lc.cost_gbs);
    out.layer_latency.push_back(lc.latency_s);
    latencies.push_back(lc.latency_s);
    std::vector<double> reps;
    for (const auto& ec : lc.experts) reps.push_back(ec.t_rep_s);
    out.t_rep.push_back(reps);
  }
  out.e2e_s = end_to_end_latency(model, latencies);
  return out;
}

void expect_close(double got, double want, double rel, const std::string& what) {
  double tol = rel * std::max({1.0, std::abs(got), std::abs(want)});
  EXPECT_NEAR(got, want, tol) << what;
}

// One layer, two experts, simple numbers for hand checks.
struct HandCase {
  PlatformProfile profile = moeplan::testing::small_profile();
  ModelSpec model;
  ExpertDemand demand;
  DeploymentPlan plan;

  explicit HandCase(Method method, long long d0 = 100, long long d1 = 50) {
    model = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05, 0.5, 0.3, 0.3, 1e6);
    demand = moeplan::testing::make_demand(model, {{d0, d1}});
    plan = moeplan::testing::uniform_plan(model, method, 0, 1, 1);
  }
};

}  // namespace

TEST(Simulator, AgreesWithAnalyticalModelOnRandomFeasiblePlans) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    oracle::SimInstance inst = oracle::random_sim_instance(seed);
    FeasibilityReport rep =
        check_feasibility(inst.profile, inst.model, inst.demand, inst.plan);
    ASSERT_TRUE(rep.ok()) << "seed " << seed << " produced an infeasible instance";
    SimReport sim = simulate(inst.profile, inst.model, inst.plan, inst.demand);
    ModelTotals want = analytical_totals(inst.profile, inst.model, inst.demand, inst.plan);
    EXPECT_FALSE(sim.any_memory_overflow) << "seed " << seed;
    EXPECT_FALSE(sim.any_payload_fallback) << "seed " << seed;
    expect_close(sim.cost_gbs, want.cost_gbs, 1e-9, "total cost seed " + std::to_string(seed));
    expect_close(sim.e2e_latency_s, want.e2e_s, 1e-9, "e2e seed " + std::to_string(seed));
    for (int e = 0; e < inst.model.num_layers; ++e) {
      expect_close(sim.layers[e].cost_gbs, want.layer_cost[e], 1e-9,
                   "layer cost seed " + std::to_string(seed));
      expect_close(sim.layers[e].latency_s, want.layer_latency[e], 1e-9,
                   "layer latency seed " + std::to_string(seed));
      for (std::size_t i = 0; i < sim.layers[e].experts.size(); ++i) {
        expect_close(sim.layers[e].experts[i].t_rep_s, want.t_rep[e][i], 1e-9,
                     "replica time seed " + std::to_string(seed));
      }
    }
    ++checked;
  }
  EXPECT_EQ(checked, 60);
}

TEST(Simulator, ZeroTokenBatchBillsNothing) {
  HandCase hc(Method::PlainIndirect, 0, 0);
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand);
  EXPECT_EQ(sim.invocations, 0);
  EXPECT_EQ(sim.cost_gbs, 0.0);
  // Only the fixed overheads remain: head + non-MoE + max(0, next load) +
  // the empty gather round trip + tail.
  double want = 0.3 + 0.05 + std::max(0.0, 0.5) + (0.1 + 0.0) + 0.3;
  EXPECT_NEAR(sim.e2e_latency_s, want, 1e-12);
  EXPECT_EQ(sim.batch_tokens, 0);

  hc.plan.method[0] = Method::Direct;
  SimReport direct = simulate(hc.profile, hc.model, hc.plan, hc.demand);
  EXPECT_NEAR(direct.e2e_latency_s, 0.3 + 0.05 + 0.5 + 0.3, 1e-12);
}

TEST(Simulator, MemoryOverflowIsFlaggedButCompletes) {
  HandCase hc(Method::PlainIndirect, 23000, 50);
  // Expert 0 needs 100 + 50 + 23000 * 0.02 = 610 MB; push it over the small
  // 1152 MB size by growing its scratch space.
  hc.model.experts[0][0].scratch_mb = 600;  // need 1160 MB > 1152 MB
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand);
  EXPECT_TRUE(sim.any_memory_overflow);
  EXPECT_TRUE(sim.layers[0].experts[0].memory_overflow);
  EXPECT_FALSE(sim.layers[0].experts[1].memory_overflow);
  EXPECT_GT(sim.layers[0].experts[0].cost_gbs, 0.0);
  ModelTotals want = analytical_totals(hc.profile, hc.model, hc.demand, hc.plan);
  expect_close(sim.cost_gbs, want.cost_gbs, 1e-9, "overflowed run still bills the model cost");

  ExpertDemand predicted = moeplan::testing::make_demand(hc.model, {{100, 50}});
  auto events = measure_feedback(sim, predicted, hc.plan, hc.model, hc.profile, 2);
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].layer, 0);
  EXPECT_EQ(events[0].expert, 0);
  EXPECT_EQ(events[0].kind, FeedbackCase::MemoryOverflow);
  EXPECT_EQ(events[0].replicas_needed, 2);  // ceil(1160 / 1152)
  EXPECT_EQ(events[0].predicted_tokens, 100);
  EXPECT_EQ(events[0].actual_tokens, 23000);
}

TEST(Simulator, PayloadRejectFallsBackToPlainIndirect) {
  // 800 tokens * 0.01 MB = 8 MB exceeds the 6 MB payload limit at 1 replica.
  HandCase hc(Method::Direct, 800, 50);
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand);
  EXPECT_TRUE(sim.any_payload_fallback);
  EXPECT_TRUE(sim.layers[0].payload_fallback);
  EXPECT_EQ(sim.layers[0].planned_method, Method::Direct);
  EXPECT_EQ(sim.layers[0].used_method, Method::PlainIndirect);
  EXPECT_TRUE(sim.layers[0].experts[0].payload_reject);
  EXPECT_FALSE(sim.layers[0].experts[1].payload_reject);

  DeploymentPlan fallback = hc.plan;
  fallback.method[0] = Method::PlainIndirect;
  ModelTotals want = analytical_totals(hc.profile, hc.model, hc.demand, fallback);
  expect_close(sim.cost_gbs, want.cost_gbs, 1e-9, "fallback bills as plain indirect");
  expect_close(sim.e2e_latency_s, want.e2e_s, 1e-9, "fallback latency");

  ExpertDemand predicted = moeplan::testing::make_demand(hc.model, {{10, 50}});
  auto events = measure_feedback(sim, predicted, hc.plan, hc.model, hc.profile, 2);
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].kind, FeedbackCase::PayloadOverflow);
  EXPECT_EQ(events[0].replicas_needed, 2);  // ceil(800 * 0.01 / 6)
}

TEST(Simulator, FeedbackMarginFiltersSmallMisses) {
  HandCase hc(Method::PlainIndirect, 100, 50);
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand);

  ExpertDemand exact = moeplan::testing::make_demand(hc.model, {{100, 50}});
  EXPECT_TRUE(measure_feedback(sim, exact, hc.plan, hc.model, hc.profile, 2).empty());

  ExpertDemand near_miss = moeplan::testing::make_demand(hc.model, {{102, 50}});
  EXPECT_TRUE(measure_feedback(sim, near_miss, hc.plan, hc.model, hc.profile, 2).empty());

  ExpertDemand big_miss = moeplan::testing::make_demand(hc.model, {{103, 50}});
  auto events = measure_feedback(sim, big_miss, hc.plan, hc.model, hc.profile, 2);
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].kind, FeedbackCase::MispredictOnly);
  EXPECT_EQ(events[0].replicas_needed, 1);
}

TEST(Simulator, DeterministicAcrossRuns) {
  oracle::SimInstance inst = oracle::random_sim_instance(12);
  SimOptions opts;
  opts.emit_trace = true;
  SimReport a = simulate(inst.profile, inst.model, inst.plan, inst.demand, opts);
  SimReport b = simulate(inst.profile, inst.model, inst.plan, inst.demand, opts);
  EXPECT_EQ(a.cost_gbs, b.cost_gbs);
  EXPECT_EQ(a.e2e_latency_s, b.e2e_latency_s);
  ASSERT_EQ(a.events.size(), b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) {
    EXPECT_EQ(a.events[i].t_s, b.events[i].t_s);
    EXPECT_EQ(a.events[i].duration_s, b.events[i].duration_s);
    EXPECT_EQ(a.events[i].kind, b.events[i].kind);
    EXPECT_EQ(a.events[i].layer, b.events[i].layer);
    EXPECT_EQ(a.events[i].expert, b.events[i].expert);
    EXPECT_EQ(a.events[i].replica, b.events[i].replica);
  }
}

TEST(Simulator, TraceRespectsPhaseOrdering) {
  HandCase hc(Method::PipelinedIndirect, 100, 50);
  hc.plan.pipeline_degree = 20;
  SimOptions opts;
  opts.emit_trace = true;
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand, opts);
  ASSERT_FALSE(sim.events.empty());
  for (std::size_t i = 1; i < sim.events.size(); ++i) {
    EXPECT_LE(sim.events[i - 1].t_s, sim.events[i].t_s) << "trace must be time sorted";
  }
  // Per replica: warm start, then the model download, then everything else.
  double warm_end = -1;
  double model_dl_end = -1;
  double last_expert_end = 0;
  double gather_start = -1;
  for (const auto& ev : sim.events) {
    if (ev.expert == 0 && ev.replica == 0) {
      if (ev.kind == EventKind::WarmStart) warm_end = ev.t_s + ev.duration_s;
      if (ev.kind == EventKind::ModelDownload) {
        EXPECT_GE(ev.t_s, warm_end);
        model_dl_end = ev.t_s + ev.duration_s;
      }
      if (ev.kind == EventKind::StorageDownload || ev.kind == EventKind::Compute) {
        EXPECT_GE(ev.t_s + 1e-12, model_dl_end);
      }
    }
    if (ev.replica >= 0) {
      last_expert_end = std::max(last_expert_end, ev.t_s + ev.duration_s);
    }
    if (ev.kind == EventKind::Gather) gather_start = ev.t_s;
  }
  ASSERT_GE(gather_start, 0.0);
  EXPECT_GE(gather_start + 1e-9, last_expert_end)
      << "results are collected after the slowest replica finishes";
}

TEST(Simulator, CompatBlockMultiplierMatchesModel) {
  HandCase hc(Method::PipelinedIndirect, 100, 50);
  hc.plan.pipeline_degree = 5;
  SimOptions opts;
  opts.cost.block_multiplier = BlockMultiplier::PipelineDegree;
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand, opts);
  ModelTotals want = analytical_totals(hc.profile, hc.model, hc.demand, hc.plan, opts.cost);
  expect_close(sim.cost_gbs, want.cost_gbs, 1e-9, "compat multiplier cost");
  expect_close(sim.e2e_latency_s, want.e2e_s, 1e-9, "compat multiplier latency");
}

TEST(Simulator, ThroughputUsesBatchTokens) {
  HandCase hc(Method::PlainIndirect, 100, 50);
  SimReport derived = simulate(hc.profile, hc.model, hc.plan, hc.demand);
  EXPECT_EQ(derived.batch_tokens, 150);
  EXPECT_NEAR(derived.throughput_tps, 150.0 / derived.e2e_latency_s, 1e-12);

  SimOptions opts;
  opts.batch_tokens = 75;  // top-2 routing counts each token twice
  SimReport hinted = simulate(hc.profile, hc.model, hc.plan, hc.demand, opts);
  EXPECT_EQ(hinted.batch_tokens, 75);
}

TEST(Simulator, EventCsvHasHeaderAndRows) {
  HandCase hc(Method::Direct, 100, 0);
  SimOptions opts;
  opts.emit_trace = true;
  SimReport sim = simulate(hc.profile, hc.model, hc.plan, hc.demand, opts);
  std::ostringstream out;
  write_event_csv(out, sim.events, {"hand case"});
  std::istringstream in(out.str());
  auto rows = read_csv(in);
  ASSERT_GT(rows.size(), 1u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"t_s", "kind", "layer", "expert", "replica",
                                               "bytes_mb", "duration_s"}));
  EXPECT_EQ(rows.size(), sim.events.size() + 1);
}
