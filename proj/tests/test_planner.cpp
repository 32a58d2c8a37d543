#include "moeplan/planner.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "moeplan/cost_model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace moeplan;

namespace {

// The solver and the reference search must land on the same optimum. Equal
// optima are compared with a tiny relative tolerance: two distinct plans can
// tie in exact arithmetic yet differ in the last bits of their summed costs.
void expect_same_cost(double got, double want) {
  EXPECT_LE(std::abs(got - want), 1e-12 * std::max(1.0, std::abs(want)))
      << "got " << got << " want " << want;
}

SolveOptions capped_options() {
  SolveOptions opts;
  opts.beta_max = 8;  // the reference search scans degrees 1..8 exhaustively
  return opts;
}

}  // namespace

TEST(FixedMethodSolver, MatchesReferenceSearchPerMethod) {
  int feasible_seen = 0;
  for (std::uint64_t seed = 1; seed <= 60; ++seed) {
    oracle::PlanCase c = oracle::random_plan_case(seed);
    for (int mi = 1; mi <= 3; ++mi) {
      BruteForceResult ref = brute_force_optimal(c.profile, c.model, c.demand, {}, mi);
      FixedMethodSolution sol =
          solve_fixed_method(c.profile, c.model, c.demand, method_from_int(mi),
                             capped_options());
      ASSERT_EQ(sol.feasible, ref.feasible)
          << "seed " << seed << " method " << mi << " feasibility mismatch";
      if (!sol.feasible) continue;
      ++feasible_seen;
      expect_same_cost(sol.cost_gbs, ref.cost_gbs);
      EXPECT_TRUE(check_feasibility(c.profile, c.model, c.demand, sol.plan).ok())
          << "seed " << seed << " method " << mi;
    }
  }
  EXPECT_GT(feasible_seen, 60);  // the sweep must actually exercise the solver
}

TEST(FixedMethodSolver, MatchesReferenceSearchCompatibilityPayload) {
  CostModelOptions compat;
  compat.payload_rule = PayloadRule::PrintedAlgebraic;
  SolveOptions opts = capped_options();
  opts.cost = compat;
  for (std::uint64_t seed = 200; seed < 220; ++seed) {
    oracle::PlanCase c = oracle::random_plan_case(seed);
    for (int mi = 1; mi <= 3; ++mi) {
      BruteForceResult ref = brute_force_optimal(c.profile, c.model, c.demand, compat, mi);
      FixedMethodSolution sol =
          solve_fixed_method(c.profile, c.model, c.demand, method_from_int(mi), opts);
      ASSERT_EQ(sol.feasible, ref.feasible) << "seed " << seed << " method " << mi;
      if (sol.feasible) expect_same_cost(sol.cost_gbs, ref.cost_gbs);
    }
  }
}

TEST(FixedMethodSolver, LatencyBudgetForcesReplication) {
  // One layer, one expert, 40 tokens. At one replica the plain indirect
  // latency misses the limit; at two replicas it fits. The solver must pay
  // for the second replica rather than declare the case infeasible.
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec loose = moeplan::testing::uniform_model(1, 1, 100, 50, 0.01, 0.01,
                                                    0.05, 0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(loose, {{40}});

  FixedMethodSolution wide =
      solve_fixed_method(p, loose, demand, Method::PlainIndirect, capped_options());
  ASSERT_TRUE(wide.feasible);
  ASSERT_EQ(wide.plan.assign[0][0].replicas, 1);  // unconstrained optimum is one replica

  ModelSpec tight = loose;
  // Place the limit halfway between the one- and two-replica end-to-end times.
  std::vector<ExpertAssignment> two = {{wide.plan.assign[0][0].memory_index, 2}};
  LayerCost two_cost = layer_exec_and_cost(p, tight, 0, demand.tokens[0], two,
                                           Method::PlainIndirect, 1);
  tight.latency_limit_s =
      (end_to_end_latency(tight, {two_cost.latency_s}) + wide.e2e_s) / 2;
  FixedMethodSolution forced =
      solve_fixed_method(p, tight, demand, Method::PlainIndirect, capped_options());
  ASSERT_TRUE(forced.feasible);
  EXPECT_EQ(forced.plan.assign[0][0].replicas, 2);
  EXPECT_GE(forced.cost_gbs, wide.cost_gbs);
  EXPECT_LE(forced.e2e_s, tight.latency_limit_s);

  BruteForceResult ref = brute_force_optimal(p, tight, demand, {}, 2);
  ASSERT_TRUE(ref.feasible);
  expect_same_cost(forced.cost_gbs, ref.cost_gbs);
}

TEST(FixedMethodSolver, PipelineDegreeSearchFindsBreakpointOptimum) {
  // Pipelining pays off when the storage delay is small relative to the
  // block stream; verify the chosen degree beats both extremes and matches
  // the reference search.
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{48, 7}});
  FixedMethodSolution sol =
      solve_fixed_method(p, m, demand, Method::PipelinedIndirect, capped_options());
  ASSERT_TRUE(sol.feasible);
  BruteForceResult ref = brute_force_optimal(p, m, demand, {}, 1);
  ASSERT_TRUE(ref.feasible);
  expect_same_cost(sol.cost_gbs, ref.cost_gbs);
  EXPECT_GE(sol.plan.pipeline_degree, 1);
  EXPECT_LE(sol.plan.pipeline_degree, 8);
}

TEST(FixedMethodSolver, RespectsBetaCap) {
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{48, 7}});
  SolveOptions one = capped_options();
  one.beta_max = 1;
  FixedMethodSolution capped =
      solve_fixed_method(p, m, demand, Method::PipelinedIndirect, one);
  ASSERT_TRUE(capped.feasible);
  EXPECT_EQ(capped.plan.pipeline_degree, 1);
  FixedMethodSolution free =
      solve_fixed_method(p, m, demand, Method::PipelinedIndirect, capped_options());
  EXPECT_LE(free.cost_gbs, capped.cost_gbs);
}

TEST(FixedMethodSolver, ReplicaFloorsAreHonoured) {
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{40, 10}});
  SolveOptions opts = capped_options();
  opts.min_replicas = {{2, 1}};
  FixedMethodSolution sol = solve_fixed_method(p, m, demand, Method::PlainIndirect, opts);
  ASSERT_TRUE(sol.feasible);
  EXPECT_GE(sol.plan.assign[0][0].replicas, 2);

  // Floors beyond the platform cap clamp to it instead of failing.
  opts.min_replicas = {{99, 1}};
  FixedMethodSolution clamped = solve_fixed_method(p, m, demand, Method::PlainIndirect, opts);
  ASSERT_TRUE(clamped.feasible);
  EXPECT_EQ(clamped.plan.assign[0][0].replicas, p.max_replicas);

  opts.min_replicas = {{2, 1}, {1, 1}};
  EXPECT_THROW(solve_fixed_method(p, m, demand, Method::PlainIndirect, opts),
               std::invalid_argument);
}

TEST(FixedMethodSolver, OversizedExpertIsInfeasible) {
  PlatformProfile p = moeplan::testing::small_profile();  // largest size 3072 MB
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 4000, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{10, 10}});
  for (int mi = 1; mi <= 3; ++mi) {
    FixedMethodSolution sol =
        solve_fixed_method(p, m, demand, method_from_int(mi), capped_options());
    EXPECT_FALSE(sol.feasible);
  }
  EXPECT_THROW(ods(p, m, demand, capped_options()), NoPlanError);
}

TEST(FixedMethodSolver, DeterministicAcrossRuns) {
  oracle::PlanCase c = oracle::random_plan_case(7);
  std::string first, second;
  for (std::string* out : {&first, &second}) {
    FixedMethodSolution sol =
        solve_fixed_method(c.profile, c.model, c.demand, Method::Direct, capped_options());
    if (!sol.feasible) {
      *out = "infeasible";
      continue;
    }
    std::ostringstream ss;
    write_plan(ss, sol.plan, c.profile, c.model);
    *out = ss.str();
  }
  EXPECT_EQ(first, second);
}

TEST(MethodSelection, MatchesCheapestMethodPerLayerWhenBudgetIsLoose) {
  for (std::uint64_t seed = 300; seed < 330; ++seed) {
    oracle::PlanCase c = oracle::random_plan_case(seed);
    c.model.latency_limit_s = 1e6;
    OdsResult result;
    try {
      result = ods(c.profile, c.model, c.demand, capped_options());
    } catch (const NoPlanError&) {
      continue;
    }
    EXPECT_EQ(result.iterations, 0);
    EXPECT_FALSE(result.uniform_fallback);
    for (int e = 0; e < c.model.num_layers; ++e) {
      int chosen = method_to_int(result.plan.method[static_cast<std::size_t>(e)]);
      double chosen_cost = result.layer_cost_gbs[static_cast<std::size_t>(e)];
      for (int m = 1; m <= 3; ++m) {
        const FixedMethodSolution& f = result.fixed[static_cast<std::size_t>(m - 1)];
        if (!f.feasible) continue;
        double other = f.layer_cost_gbs[static_cast<std::size_t>(e)];
        EXPECT_LE(chosen_cost, other + 1e-12 * (1.0 + other))
            << "seed " << seed << " layer " << e << " chose " << chosen << " over " << m;
      }
    }
  }
}

TEST(MethodSelection, TiesResolveToLowestMethodIndex) {
  // With no routed tokens every method deploys the same idle experts at zero
  // cost, so every layer ties and the first method must win.
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(2, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{0, 0}, {0, 0}});
  OdsResult result = ods(p, m, demand, capped_options());
  EXPECT_DOUBLE_EQ(result.cost_gbs, 0.0);
  for (Method method : result.plan.method) {
    EXPECT_EQ(method, Method::PipelinedIndirect);
  }
  EXPECT_EQ(result.plan.pipeline_degree, 1);
}

TEST(MethodSelection, StaysWithinGuaranteedRatioOfOptimal) {
  int compared = 0;
  for (std::uint64_t seed = 400; seed < 460; ++seed) {
    oracle::PlanCase c = oracle::random_plan_case(seed);
    BruteForceResult ref = brute_force_optimal(c.profile, c.model, c.demand, {}, 0);
    OdsResult result;
    try {
      result = ods(c.profile, c.model, c.demand, capped_options());
    } catch (const NoPlanError&) {
      EXPECT_FALSE(ref.feasible) << "seed " << seed << ": reference found a plan";
      continue;
    }
    ASSERT_TRUE(ref.feasible) << "seed " << seed << ": only the heuristic found a plan";
    double ratio = worst_case_cost_ratio(c.profile);
    EXPECT_GE(result.cost_gbs, ref.cost_gbs - 1e-12 * (1.0 + ref.cost_gbs)) << "seed " << seed;
    EXPECT_LE(result.cost_gbs, ratio * ref.cost_gbs * (1 + 1e-12)) << "seed " << seed;
    EXPECT_LE(result.iterations, 2 * c.model.num_layers) << "seed " << seed;
    EXPECT_TRUE(check_feasibility(c.profile, c.model, c.demand, result.plan).ok())
        << "seed " << seed;
    ++compared;
  }
  EXPECT_GT(compared, 30);
}

TEST(MethodSelection, EliminationRecoversFromLatencyViolations) {
  // Frozen instance where the joint plan assembled from per-layer winners
  // misses the latency budget, one elimination round removes the worst
  // layer's method, and the repicked plan lands under the limit while still
  // mixing methods across layers.
  oracle::PlanCase c = oracle::random_plan_case(708);
  OdsResult result = ods(c.profile, c.model, c.demand, capped_options());
  EXPECT_EQ(result.iterations, 1);
  EXPECT_FALSE(result.uniform_fallback);
  expect_same_cost(result.cost_gbs, 7.2861308593749996);
  EXPECT_LE(result.e2e_s, c.model.latency_limit_s);
  EXPECT_TRUE(check_feasibility(c.profile, c.model, c.demand, result.plan).ok());
  std::set<Method> used(result.plan.method.begin(), result.plan.method.end());
  EXPECT_GE(used.size(), 2u) << "elimination should leave a mixed-method plan";
}

TEST(MethodSelection, WorstLayerRuleChangesEliminationOrder) {
  // Same frozen instance: blaming the lowest-latency layer instead of the
  // highest-latency one eliminates a different method and happens to land on
  // the reference optimum here, so the two rules must diverge.
  oracle::PlanCase c = oracle::random_plan_case(708);
  OdsResult low =
      ods(c.profile, c.model, c.demand, capped_options(), WorstLayerRule::LowestLatency);
  EXPECT_EQ(low.iterations, 1);
  EXPECT_FALSE(low.uniform_fallback);
  expect_same_cost(low.cost_gbs, 6.4739980468749998);
  for (Method method : low.plan.method) {
    EXPECT_EQ(method, Method::PlainIndirect);
  }
  BruteForceResult ref = brute_force_optimal(c.profile, c.model, c.demand, {}, 0);
  ASSERT_TRUE(ref.feasible);
  expect_same_cost(low.cost_gbs, ref.cost_gbs);
  OdsResult high = ods(c.profile, c.model, c.demand, capped_options());
  EXPECT_GT(high.cost_gbs, low.cost_gbs);
}

TEST(MethodSelection, FallsBackToCheapestUniformWhenEliminationFails) {
  // Frozen instance where elimination rounds never reach the latency budget
  // and the solver must fall back to the cheapest feasible single-method plan.
  oracle::PlanCase c = oracle::random_plan_case(921);
  OdsResult result = ods(c.profile, c.model, c.demand, capped_options());
  EXPECT_TRUE(result.uniform_fallback);
  EXPECT_EQ(result.iterations, 2);
  expect_same_cost(result.cost_gbs, 6.2257500000000006);
  for (Method method : result.plan.method) {
    EXPECT_EQ(method, result.plan.method.front());
  }
  EXPECT_LE(result.e2e_s, c.model.latency_limit_s);
  EXPECT_TRUE(check_feasibility(c.profile, c.model, c.demand, result.plan).ok());
}

TEST(MethodSelection, WorstCaseRatioHandValue) {
  PlatformProfile p = moeplan::testing::small_profile();
  // menu tops at 3 GB, 3 replicas, unit times 0.008 and 0.004, storage
  // 100 MB/s, function link 50 MB/s, storage delay 0.1 s:
  // 3 * 3 * (0.008 + 0.02 + 0.1) / (0.004 + 0.01) = 82.2857...
  double want = 3.0 * 3.0 * (0.008 + 1.0 / 50 + 0.1) / (0.004 + 1.0 / 100);
  EXPECT_DOUBLE_EQ(worst_case_cost_ratio(p), want);
  EXPECT_NEAR(worst_case_cost_ratio(p), 82.28571428571429, 1e-11);
}

TEST(PlanFiles, RoundTripPreservesEveryField) {
  oracle::PlanCase c = oracle::random_plan_case(11);
  c.model.latency_limit_s = 1e6;
  OdsResult result = ods(c.profile, c.model, c.demand, capped_options());
  std::ostringstream out;
  write_plan(out, result.plan, c.profile, c.model, {"config_hash 00ff", "seed 11"});
  std::istringstream in(out.str());
  DeploymentPlan back = read_plan(in, c.profile, c.model);
  EXPECT_EQ(back.pipeline_degree, result.plan.pipeline_degree);
  ASSERT_EQ(back.method.size(), result.plan.method.size());
  for (std::size_t e = 0; e < back.method.size(); ++e) {
    EXPECT_EQ(back.method[e], result.plan.method[e]);
    for (std::size_t i = 0; i < back.assign[e].size(); ++i) {
      EXPECT_EQ(back.assign[e][i].memory_index, result.plan.assign[e][i].memory_index);
      EXPECT_EQ(back.assign[e][i].replicas, result.plan.assign[e][i].replicas);
    }
  }
}

TEST(PlanFiles, RejectsMalformedInput) {
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  {
    std::istringstream in("not-a-plan\n");
    EXPECT_THROW(read_plan(in, p, m), std::runtime_error);
  }
  {
    std::istringstream in(
        "moeplan-plan v1\nbeta 1\nlayers 5\n");
    EXPECT_THROW(read_plan(in, p, m), std::runtime_error);
  }
  {
    std::istringstream in(
        "moeplan-plan v1\nbeta 1\nlayers 1\nlayer 0 method 2\n"
        "expert 0 0 memory_mb 999 replicas 1\n");
    EXPECT_THROW(read_plan(in, p, m), std::runtime_error);  // 999 MB not in the menu
  }
  {
    std::istringstream in(
        "moeplan-plan v1\nbeta 1\nlayers 1\nlayer 0 method 2\nnonsense 0\n");
    EXPECT_THROW(read_plan(in, p, m), std::runtime_error);
  }
}

TEST(PlannerInternals, WitnessRestrictionForcesLargeLoad) {
  // Degree 12 demands a replica carrying at least 12 tokens. Unrestricted,
  // the optimiser may split the 12-token expert; the witness pass must force
  // one expert to keep a full share.
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 2, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  ExpertDemand demand = moeplan::testing::make_demand(m, {{12, 5}});
  SolveOptions opts;
  std::vector<std::vector<planner_detail::ExpertContext>> ctxs(1);
  ctxs[0].resize(2);
  for (int i = 0; i < 2; ++i) {
    ctxs[0][static_cast<std::size_t>(i)] = planner_detail::build_expert_context(
        p, m, 0, i, demand.tokens[0][static_cast<std::size_t>(i)],
        Method::PipelinedIndirect, opts);
  }
  planner_detail::BetaSolveResult witnessed = planner_detail::solve_for_beta(
      p, m, demand, ctxs, Method::PipelinedIndirect, 12, opts.cost,
      planner_detail::kInf, 0, 0, 12);
  ASSERT_TRUE(witnessed.feasible);
  EXPECT_EQ(witnessed.rows[0][0].replicas, 1);  // 12 tokens in one share
  EXPECT_GE(witnessed.max_load, 12);
}

TEST(PlannerInternals, DegreeCandidatesAreBlockCountBreakpoints) {
  PlatformProfile p = moeplan::testing::small_profile();
  ModelSpec m = moeplan::testing::uniform_model(1, 1, 100, 50, 0.01, 0.01, 0.05,
                                                0.5, 0.3, 0.3, 1e6);
  SolveOptions opts;
  std::vector<std::vector<planner_detail::ExpertContext>> ctxs(1);
  ctxs[0].push_back(planner_detail::build_expert_context(p, m, 0, 0, 12,
                                                         Method::PipelinedIndirect, opts));
  std::vector<int> betas = planner_detail::beta_candidates(ctxs, 0);
  // Loads reachable from 12 tokens with up to 3 replicas: 12, 6, 4.
  // Breakpoints ceil(load/k): {12,6,4,3,2,1} from 12, {6,3,2,1} from 6,
  // {4,2,1} from 4.
  std::vector<int> want = {1, 2, 3, 4, 6, 12};
  EXPECT_EQ(betas, want);
  std::vector<int> capped = planner_detail::beta_candidates(ctxs, 5);
  std::vector<int> want_capped = {1, 2, 3, 4};
  EXPECT_EQ(capped, want_capped);
}
