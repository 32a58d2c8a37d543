// Deployment planning: choose a scatter/gather method per layer, a memory
// size and replica count per expert, and one pipeline degree, minimising the
// billed GB-seconds subject to per-replica memory, direct-payload, pipeline
// range, and end-to-end latency constraints.
//
// The fixed-method solver is exact. Per expert it enumerates the feasible
// (memory, replicas) shapes; per layer it walks caps on the replica time (and
// on the replica load, whose maximum sets the direct method's scatter time)
// and keeps the Pareto frontier of (cost, latency) candidates; across layers
// a branch-and-bound search picks one candidate per layer under the latency
// budget. The pipeline degree is searched over the breakpoints of
// ceil(load / beta): between consecutive breakpoints every block count is
// constant and every replica time grows with the degree, so only the left
// endpoint of each interval can be optimal.
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moeplan/cost_model.hpp"
#include "moeplan/core.hpp"
#include "moeplan/csv.hpp"

namespace moeplan {

struct NoPlanError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Which layer loses its preferred method when the mixed plan misses the
// latency budget: the slowest layer is the natural choice; the compatibility
// value picks the fastest instead.
enum class WorstLayerRule { HighestLatency, LowestLatency };

struct SolveOptions {
  int beta_max = 0;          // cap on pipeline-degree candidates; 0 = load bound
  double time_budget_s = 0;  // stop refining the degree search after this; 0 = off
  CostModelOptions cost;
  // Per (layer, expert) replica floors, e.g. from tuning feedback. Empty
  // means no floors; floors above the platform cap are clamped to it.
  std::vector<std::vector<int>> min_replicas;
};

struct FixedMethodSolution {
  bool feasible = false;
  Method method = Method::PlainIndirect;
  DeploymentPlan plan;
  double cost_gbs = std::numeric_limits<double>::infinity();
  std::vector<double> layer_cost_gbs;
  std::vector<double> layer_latency_s;
  double e2e_s = std::numeric_limits<double>::infinity();
};

// Guaranteed worst-to-optimal billed cost ratio of the per-layer method
// selection heuristic, from the platform envelope alone.
inline double worst_case_cost_ratio(const PlatformProfile& profile) {
  double mem_max_gb = profile.memory_mb.back() / 1024.0;
  double u_first = profile.unit_compute_s.front();
  double u_last = profile.unit_compute_s.back();
  double slow = std::max(1.0 / profile.storage_bw_mbps, 1.0 / profile.function_bw_mbps);
  double fast = std::min(1.0 / profile.storage_bw_mbps, 1.0 / profile.function_bw_mbps);
  return mem_max_gb * static_cast<double>(profile.max_replicas) *
         (u_first + slow + profile.storage_delay_s) / (u_last + fast);
}

namespace planner_detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

inline bool payload_ok(const PlatformProfile& profile, const ModelSpec& model, Method method,
                       long long load, const CostModelOptions& opts) {
  double in_mb = static_cast<double>(load) * model.token_in_mb;
  double out_mb = static_cast<double>(load) * model.token_out_mb;
  if (opts.payload_rule == PayloadRule::ForbidOversized) {
    if (method != Method::Direct) return true;
    return in_mb <= profile.payload_limit_mb && out_mb <= profile.payload_limit_mb;
  }
  // Compatibility form (a - 3) * (load * D_in - D_p) <= 0 for every expert:
  // vacuous for the direct method, inverted for the indirect ones.
  double lhs = (static_cast<double>(method_to_int(method)) - 3.0) *
               (in_mb - profile.payload_limit_mb);
  return lhs <= 0;
}

// A (memory, replicas) choice for one expert; independent of the pipeline
// degree, which only changes the replica time.
struct OptionShape {
  int memory_index = 0;
  int replicas = 1;
  long long load = 0;
};

struct ExpertContext {
  long long demand = 0;
  double params_mb = 0;
  int floor = 1;                      // minimum replicas
  std::vector<OptionShape> shapes;    // feasible shapes, demand > 0 only
  ExpertAssignment idle;              // assignment used when demand == 0
  bool idle_ok = false;
};

inline ExpertContext build_expert_context(const PlatformProfile& profile,
                                          const ModelSpec& model, int layer, int expert,
                                          long long demand, Method method,
                                          const SolveOptions& opts) {
  ExpertContext ctx;
  ctx.demand = demand;
  ctx.params_mb = model.experts[static_cast<std::size_t>(layer)]
                               [static_cast<std::size_t>(expert)].params_mb;
  ctx.floor = 1;
  if (!opts.min_replicas.empty()) {
    ctx.floor = std::max(1, opts.min_replicas[static_cast<std::size_t>(layer)]
                                             [static_cast<std::size_t>(expert)]);
    ctx.floor = std::min(ctx.floor, profile.max_replicas);
  }
  int menu = static_cast<int>(profile.memory_mb.size());
  if (demand == 0) {
    // Idle experts still hold their parameters; deploy the smallest size that
    // fits them. They are never invoked, so the replica floor alone sets the
    // count. The payload rule applies to them at zero load like to any other
    // expert.
    if (!payload_ok(profile, model, method, 0, opts.cost)) return ctx;
    double need = replica_memory_mb(model, layer, expert, 0);
    for (int j = 0; j < menu; ++j) {
      if (need <= profile.memory_mb[static_cast<std::size_t>(j)]) {
        ctx.idle = ExpertAssignment{j, ctx.floor};
        ctx.idle_ok = true;
        break;
      }
    }
    return ctx;
  }
  for (int g = ctx.floor; g <= profile.max_replicas; ++g) {
    long long load = tokens_per_replica(demand, g);
    if (!payload_ok(profile, model, method, load, opts.cost)) continue;
    double need = replica_memory_mb(model, layer, expert, load);
    for (int j = 0; j < menu; ++j) {
      if (need <= profile.memory_mb[static_cast<std::size_t>(j)]) {
        ctx.shapes.push_back({j, g, load});
      }
    }
  }
  return ctx;
}

struct ExpertOption {
  OptionShape shape;
  double t_rep_s = 0;
  double cost_gbs = 0;
};

// Prices every shape at the given pipeline degree and drops dominated
// options. For indirect methods an option only matters through (cost, time);
// for the direct method the load matters too, because the layer's largest
// load sets its scatter time.
inline std::vector<ExpertOption> price_options(const PlatformProfile& profile,
                                               const ModelSpec& model,
                                               const ExpertContext& ctx, Method method,
                                               int beta, const CostModelOptions& cost_opts,
                                               long long min_load) {
  std::vector<ExpertOption> opts;
  for (const OptionShape& s : ctx.shapes) {
    if (s.load < min_load) continue;
    ExpertOption o;
    o.shape = s;
    o.t_rep_s = replica_exec_time(method, profile, model, ctx.params_mb, s.memory_index,
                                  s.load, beta, cost_opts);
    double mem_gb = profile.memory_mb[static_cast<std::size_t>(s.memory_index)] / 1024.0;
    o.cost_gbs = static_cast<double>(s.replicas) * billed_seconds(profile, o.t_rep_s) * mem_gb;
    opts.push_back(o);
  }
  std::sort(opts.begin(), opts.end(), [](const ExpertOption& a, const ExpertOption& b) {
    if (a.t_rep_s != b.t_rep_s) return a.t_rep_s < b.t_rep_s;
    if (a.cost_gbs != b.cost_gbs) return a.cost_gbs < b.cost_gbs;
    return a.shape.load < b.shape.load;
  });
  std::vector<ExpertOption> kept;
  if (method != Method::Direct) {
    double best_cost = kInf;
    for (const ExpertOption& o : opts) {
      if (o.cost_gbs < best_cost) {
        best_cost = o.cost_gbs;
        kept.push_back(o);
      }
    }
  } else {
    for (const ExpertOption& o : opts) {
      bool dominated = false;
      for (const ExpertOption& k : kept) {
        if (k.cost_gbs <= o.cost_gbs && k.t_rep_s <= o.t_rep_s &&
            k.shape.load <= o.shape.load) {
          dominated = true;
          break;
        }
      }
      if (!dominated) kept.push_back(o);
    }
  }
  return kept;
}

struct LayerCandidate {
  std::vector<ExpertAssignment> assign;
  double cost_gbs = 0;
  double latency_s = 0;
  long long max_load = 0;
};

// Evaluates an assembled assignment row through the cost model, so candidate
// numbers are bit-identical to what any later evaluation will report.
inline LayerCandidate evaluate_row(const PlatformProfile& profile, const ModelSpec& model,
                                   int layer, const std::vector<long long>& tokens,
                                   std::vector<ExpertAssignment> row, Method method, int beta,
                                   const CostModelOptions& cost_opts) {
  LayerCandidate c;
  LayerCost lc = layer_exec_and_cost(profile, model, layer, tokens, row, method, beta,
                                     cost_opts);
  c.assign = std::move(row);
  c.cost_gbs = lc.cost_gbs;
  c.latency_s = lc.latency_s;
  for (const ExpertCost& ec : lc.experts) {
    c.max_load = std::max(c.max_load, ec.replica_load);
  }
  return c;
}

// Pareto frontier of one layer's (cost, latency) trade-offs under a fixed
// method and pipeline degree. `witness_expert` >= 0 restricts that expert to
// loads of at least `witness_load` (used to satisfy the pipeline-range
// constraint). Empty result means the layer cannot be deployed this way.
inline std::vector<LayerCandidate> layer_candidates(
    const PlatformProfile& profile, const ModelSpec& model, int layer,
    const std::vector<long long>& tokens, const std::vector<ExpertContext>& ctxs,
    Method method, int beta, const CostModelOptions& cost_opts, int witness_expert = -1,
    long long witness_load = 0) {
  int n = static_cast<int>(tokens.size());
  std::vector<ExpertAssignment> base(static_cast<std::size_t>(n));
  std::vector<int> active;
  std::vector<std::vector<ExpertOption>> options(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const ExpertContext& ctx = ctxs[static_cast<std::size_t>(i)];
    if (ctx.demand == 0) {
      if (!ctx.idle_ok) return {};
      base[static_cast<std::size_t>(i)] = ctx.idle;
      continue;
    }
    long long min_load = witness_expert == i ? witness_load : 0;
    options[static_cast<std::size_t>(i)] =
        price_options(profile, model, ctx, method, beta, cost_opts, min_load);
    if (options[static_cast<std::size_t>(i)].empty()) return {};
    active.push_back(i);
  }
  if (active.empty()) {
    return {evaluate_row(profile, model, layer, tokens, base, method, beta, cost_opts)};
  }

  // Cap values: every distinct replica time, and for the direct method every
  // distinct replica load (its maximum sets the scatter time).
  std::set<double> time_caps;
  std::set<long long> load_caps;
  for (int i : active) {
    for (const ExpertOption& o : options[static_cast<std::size_t>(i)]) {
      time_caps.insert(o.t_rep_s);
      if (method == Method::Direct) load_caps.insert(o.shape.load);
    }
  }
  if (method != Method::Direct) {
    load_caps.insert(std::numeric_limits<long long>::max());
  }

  std::vector<LayerCandidate> raw;
  for (long long load_cap : load_caps) {
    // Per expert: options within the load cap in time order, with the
    // cheapest option so far at every prefix.
    struct Sweep {
      std::vector<double> t;
      std::vector<const ExpertOption*> best;
      std::vector<double> best_cost;
    };
    std::vector<Sweep> sweeps(static_cast<std::size_t>(n));
    bool ok = true;
    for (int i : active) {
      Sweep& sw = sweeps[static_cast<std::size_t>(i)];
      for (const ExpertOption& o : options[static_cast<std::size_t>(i)]) {
        if (o.shape.load > load_cap) continue;
        sw.t.push_back(o.t_rep_s);
        if (sw.best_cost.empty() || o.cost_gbs < sw.best_cost.back()) {
          sw.best_cost.push_back(o.cost_gbs);
          sw.best.push_back(&o);
        } else {
          sw.best_cost.push_back(sw.best_cost.back());
          sw.best.push_back(sw.best.back());
        }
      }
      if (sw.t.empty()) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    for (double time_cap : time_caps) {
      std::vector<ExpertAssignment> row = base;
      bool fits = true;
      for (int i : active) {
        const Sweep& sw = sweeps[static_cast<std::size_t>(i)];
        auto it = std::upper_bound(sw.t.begin(), sw.t.end(), time_cap);
        if (it == sw.t.begin()) {
          fits = false;
          break;
        }
        std::size_t idx = static_cast<std::size_t>(it - sw.t.begin()) - 1;
        const ExpertOption* pick = sw.best[idx];
        row[static_cast<std::size_t>(i)] =
            ExpertAssignment{pick->shape.memory_index, pick->shape.replicas};
      }
      if (!fits) continue;
      raw.push_back(evaluate_row(profile, model, layer, tokens, std::move(row), method, beta,
                                 cost_opts));
    }
  }
  if (raw.empty()) return {};

  // Keep the (cost, latency) Pareto frontier.
  std::sort(raw.begin(), raw.end(), [](const LayerCandidate& a, const LayerCandidate& b) {
    if (a.cost_gbs != b.cost_gbs) return a.cost_gbs < b.cost_gbs;
    return a.latency_s < b.latency_s;
  });
  std::vector<LayerCandidate> frontier;
  double best_latency = kInf;
  for (LayerCandidate& c : raw) {
    if (c.latency_s < best_latency) {
      best_latency = c.latency_s;
      frontier.push_back(std::move(c));
    }
  }
  return frontier;
}

struct KnapsackResult {
  bool feasible = false;
  double cost_gbs = kInf;
  std::vector<int> picks;
};

// One candidate per layer minimising total cost with the end-to-end latency
// within the limit. Candidates are cost-sorted, so depth-first search with
// suffix bounds prunes sharply. `incumbent` discards anything that would not
// beat an already-known solution.
//
// Two bounds keep the search polynomial in practice:
//  - a primal one: any prefix can be completed with every remaining layer's
//    minimum-latency candidate, so that completion's cost caps the incumbent
//    at every node, not just at leaves;
//  - a dual one: relaxing each remaining layer to the lower convex hull of
//    its (latency, cost) candidates turns the suffix into a fractional
//    knapsack whose greedy optimum is a true lower bound. The hull segments
//    are merged per suffix and consumed best-savings-per-second first.
// The dual prune carries a small relative margin so float accumulation can
// never discard a strictly better branch, and every accepted solution is
// checked against the real end-to-end expression.
inline KnapsackResult pick_per_layer(const ModelSpec& model,
                                     const std::vector<std::vector<LayerCandidate>>& layers,
                                     double incumbent = kInf) {
  std::size_t L = layers.size();
  double overhead = model.head_s + model.tail_s;
  for (double s : model.non_moe_s) overhead += s;
  double budget = model.latency_limit_s - overhead;

  std::vector<double> suffix_cost(L + 1, 0.0);         // sum of per-layer minimum costs
  std::vector<double> suffix_lat(L + 1, 0.0);          // sum of per-layer minimum latencies
  std::vector<double> suffix_minlat_cost(L + 1, 0.0);  // cost of the minimum-latency picks
  std::vector<int> minlat_idx(L, 0);
  for (std::size_t l = L; l-- > 0;) {
    double mc = kInf;
    double ml = kInf;
    for (std::size_t k = 0; k < layers[l].size(); ++k) {
      const LayerCandidate& c = layers[l][k];
      mc = std::min(mc, c.cost_gbs);
      if (c.latency_s < ml) {
        ml = c.latency_s;
        minlat_idx[l] = static_cast<int>(k);
      }
    }
    suffix_cost[l] = suffix_cost[l + 1] + mc;
    suffix_lat[l] = suffix_lat[l + 1] + ml;
    suffix_minlat_cost[l] =
        suffix_minlat_cost[l + 1] + layers[l][static_cast<std::size_t>(minlat_idx[l])].cost_gbs;
  }

  // Lower convex hull of each layer's candidates in the (latency, cost)
  // plane, kept as segments: spending `dt` more latency on this layer saves
  // at least `dc` cost, at `ratio` savings per second, and ratios within a
  // layer only decrease. Suffix-merged and ratio-sorted, prefix sums give
  // the fractional-relaxation bound for any remaining latency slack.
  struct Seg {
    double dt;
    double dc;
    double ratio;
  };
  std::vector<std::vector<Seg>> suffix_segs(L + 1);
  std::vector<std::vector<double>> pre_dt(L + 1, std::vector<double>{0.0});
  std::vector<std::vector<double>> pre_dc(L + 1, std::vector<double>{0.0});
  {
    std::vector<std::pair<double, double>> pts;  // (latency, cost)
    std::vector<std::pair<double, double>> hull;
    for (std::size_t l = L; l-- > 0;) {
      pts.clear();
      for (const LayerCandidate& c : layers[l]) pts.push_back({c.latency_s, c.cost_gbs});
      std::sort(pts.begin(), pts.end());
      hull.clear();
      for (const auto& p : pts) {
        if (!hull.empty() && p.second >= hull.back().second) continue;  // no savings
        while (hull.size() >= 2) {
          const auto& a = hull[hull.size() - 2];
          const auto& b = hull.back();
          // pop b when it sits on or above the a->p chord: slopes along the
          // lower hull must strictly increase
          if ((b.second - a.second) * (p.first - b.first) >=
              (p.second - b.second) * (b.first - a.first)) {
            hull.pop_back();
          } else {
            break;
          }
        }
        hull.push_back(p);
      }
      suffix_segs[l] = suffix_segs[l + 1];
      for (std::size_t v = 1; v < hull.size(); ++v) {
        double dt = hull[v].first - hull[v - 1].first;
        double dc = hull[v - 1].second - hull[v].second;
        if (dt > 0 && dc > 0) suffix_segs[l].push_back({dt, dc, dc / dt});
      }
      std::sort(suffix_segs[l].begin(), suffix_segs[l].end(),
                [](const Seg& a, const Seg& b) { return a.ratio > b.ratio; });
      pre_dt[l].resize(suffix_segs[l].size() + 1);
      pre_dc[l].resize(suffix_segs[l].size() + 1);
      pre_dt[l][0] = pre_dc[l][0] = 0.0;
      for (std::size_t i = 0; i < suffix_segs[l].size(); ++i) {
        pre_dt[l][i + 1] = pre_dt[l][i] + suffix_segs[l][i].dt;
        pre_dc[l][i + 1] = pre_dc[l][i] + suffix_segs[l][i].dc;
      }
    }
  }

  KnapsackResult best;
  best.cost_gbs = incumbent;
  std::vector<int> picks(L, 0);
  std::vector<double> lats(L, 0.0);
  std::vector<double> tmp_lats(L, 0.0);
  const double kSlack = 1e-9 * (1.0 + std::abs(budget));

  // Greedy fractional bound: cheapest possible suffix cost when `slack`
  // seconds beyond the all-minimum-latency completion may be spent.
  auto suffix_bound = [&](std::size_t l, double slack) {
    const auto& dt = pre_dt[l];
    std::size_t i =
        static_cast<std::size_t>(std::upper_bound(dt.begin(), dt.end(), slack) - dt.begin()) -
        1;
    double savings = pre_dc[l][i];
    if (i < suffix_segs[l].size()) savings += (slack - dt[i]) * suffix_segs[l][i].ratio;
    return suffix_minlat_cost[l] - savings;
  };

  // Complete the current prefix with minimum-latency picks; adopt it as the
  // incumbent when it is strictly cheaper and genuinely within the limit.
  auto try_completion = [&](std::size_t l, double cost) {
    double total = cost + suffix_minlat_cost[l];
    if (total >= best.cost_gbs) return;
    std::copy(lats.begin(), lats.begin() + static_cast<std::ptrdiff_t>(l), tmp_lats.begin());
    for (std::size_t j = l; j < L; ++j) {
      tmp_lats[j] = layers[j][static_cast<std::size_t>(minlat_idx[j])].latency_s;
    }
    if (end_to_end_latency(model, tmp_lats) > model.latency_limit_s) return;
    best.feasible = true;
    best.cost_gbs = total;
    best.picks = picks;
    for (std::size_t j = l; j < L; ++j) best.picks[j] = minlat_idx[j];
  };

  std::function<void(std::size_t, double, double)> dfs = [&](std::size_t l, double cost,
                                                             double lat) {
    if (cost + suffix_cost[l] >= best.cost_gbs) return;
    if (lat + suffix_lat[l] > budget + kSlack) return;
    if (l == L) {
      if (end_to_end_latency(model, lats) > model.latency_limit_s) return;
      best.feasible = true;
      best.cost_gbs = cost;
      best.picks = picks;
      return;
    }
    try_completion(l, cost);
    double lb = cost + suffix_bound(l, budget + kSlack - lat - suffix_lat[l]);
    if (lb >= best.cost_gbs + 1e-9 * (1.0 + std::abs(best.cost_gbs))) return;
    for (std::size_t k = 0; k < layers[l].size(); ++k) {
      const LayerCandidate& c = layers[l][k];
      if (cost + c.cost_gbs + suffix_cost[l + 1] >= best.cost_gbs) break;
      if (lat + c.latency_s + suffix_lat[l + 1] > budget + kSlack) continue;
      picks[l] = static_cast<int>(k);
      lats[l] = c.latency_s;
      dfs(l + 1, cost + c.cost_gbs, lat + c.latency_s);
    }
  };
  dfs(0, 0.0, 0.0);
  return best;
}

struct BetaSolveResult {
  bool feasible = false;
  double cost_gbs = kInf;
  std::vector<std::vector<ExpertAssignment>> rows;
  long long max_load = 0;
};

inline BetaSolveResult solve_for_beta(const PlatformProfile& profile, const ModelSpec& model,
                                      const ExpertDemand& demand,
                                      const std::vector<std::vector<ExpertContext>>& ctxs,
                                      Method method, int beta,
                                      const CostModelOptions& cost_opts, double incumbent,
                                      int witness_layer = -1, int witness_expert = -1,
                                      long long witness_load = 0) {
  BetaSolveResult out;
  std::vector<std::vector<LayerCandidate>> layers(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    layers[static_cast<std::size_t>(e)] = layer_candidates(
        profile, model, e, demand.tokens[static_cast<std::size_t>(e)],
        ctxs[static_cast<std::size_t>(e)], method, beta, cost_opts,
        witness_layer == e ? witness_expert : -1, witness_load);
    if (layers[static_cast<std::size_t>(e)].empty()) return out;
  }
  KnapsackResult pick = pick_per_layer(model, layers, incumbent);
  if (!pick.feasible) return out;
  out.feasible = true;
  out.cost_gbs = pick.cost_gbs;
  out.rows.resize(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    const LayerCandidate& c =
        layers[static_cast<std::size_t>(e)]
              [static_cast<std::size_t>(pick.picks[static_cast<std::size_t>(e)])];
    out.rows[static_cast<std::size_t>(e)] = c.assign;
    out.max_load = std::max(out.max_load, c.max_load);
  }
  return out;
}

// Pipeline-degree candidates: 1 plus every left endpoint of an interval on
// which every reachable load's block count is constant.
inline std::vector<int> beta_candidates(const std::vector<std::vector<ExpertContext>>& ctxs,
                                        int beta_max) {
  std::set<long long> loads;
  long long max_load = 0;
  for (const auto& layer : ctxs) {
    for (const ExpertContext& ctx : layer) {
      for (const OptionShape& s : ctx.shapes) {
        loads.insert(s.load);
        max_load = std::max(max_load, s.load);
      }
    }
  }
  std::set<int> cand;
  cand.insert(1);
  for (long long r : loads) {
    for (long long k = 1; k <= r;) {
      long long v = (r + k - 1) / k;  // ceil(r / k), the left endpoint for k blocks
      if (v <= std::numeric_limits<int>::max()) cand.insert(static_cast<int>(v));
      k = std::max(k + 1, r / v + 1);  // next k that shrinks the value
    }
  }
  std::vector<int> out;
  for (int b : cand) {
    if (b > max_load && b != 1) continue;      // range constraint can never hold
    if (beta_max > 0 && b > beta_max) continue;
    out.push_back(b);
  }
  return out;
}

}  // namespace planner_detail

// Exact minimum-cost deployment with every layer using the same method.
inline FixedMethodSolution solve_fixed_method(const PlatformProfile& profile,
                                              const ModelSpec& model,
                                              const ExpertDemand& demand, Method method,
                                              const SolveOptions& opts = {}) {
  using namespace planner_detail;
  demand.validate(model);
  if (!opts.min_replicas.empty() &&
      static_cast<int>(opts.min_replicas.size()) != model.num_layers) {
    throw std::invalid_argument("replica floors do not match the layer count");
  }
  FixedMethodSolution sol;
  sol.method = method;

  std::vector<std::vector<ExpertContext>> ctxs(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    ctxs[static_cast<std::size_t>(e)].resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      ctxs[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)] = build_expert_context(
          profile, model, e, i,
          demand.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)], method,
          opts);
    }
  }

  struct Best {
    bool found = false;
    double cost = planner_detail::kInf;
    int beta = 1;
    planner_detail::BetaSolveResult result;
  } best;

  auto consider = [&](int beta, const BetaSolveResult& r) {
    if (!r.feasible) return;
    if (!best.found || r.cost_gbs < best.cost) {
      best.found = true;
      best.cost = r.cost_gbs;
      best.beta = beta;
      best.result = r;
    }
  };

  if (method != Method::PipelinedIndirect) {
    consider(1, solve_for_beta(profile, model, demand, ctxs, method, 1, opts.cost, kInf));
  } else {
    std::vector<int> betas = beta_candidates(ctxs, opts.beta_max);
    // Cheap per-expert cost lower bounds (no latency budget, no pipeline
    // range) order the degree search and stop it once no remaining degree
    // can beat the incumbent.
    std::vector<std::pair<double, int>> ordered;
    ordered.reserve(betas.size());
    for (int beta : betas) {
      double lb = 0;
      for (int e = 0; e < model.num_layers; ++e) {
        for (const ExpertContext& ctx : ctxs[static_cast<std::size_t>(e)]) {
          if (ctx.demand == 0) continue;
          double mc = kInf;
          for (const OptionShape& s : ctx.shapes) {
            double t = replica_exec_time(method, profile, model, ctx.params_mb,
                                         s.memory_index, s.load, beta, opts.cost);
            double mem_gb =
                profile.memory_mb[static_cast<std::size_t>(s.memory_index)] / 1024.0;
            mc = std::min(mc, static_cast<double>(s.replicas) *
                                  billed_seconds(profile, t) * mem_gb);
          }
          lb += mc;  // an expert with no shapes makes this infinite, as it should
        }
      }
      ordered.push_back({lb, beta});
    }
    std::sort(ordered.begin(), ordered.end());
    auto start = std::chrono::steady_clock::now();
    for (const auto& [lb, beta] : ordered) {
      if (best.found && lb > best.cost + 1e-9 * (1.0 + best.cost)) break;
      if (opts.time_budget_s > 0 && best.found) {
        double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (elapsed > opts.time_budget_s) break;
      }
      BetaSolveResult r =
          solve_for_beta(profile, model, demand, ctxs, method, beta, opts.cost, best.cost);
      if (!r.feasible) continue;
      if (beta <= std::max<long long>(1, r.max_load)) {
        consider(beta, r);
        continue;
      }
      // The unconstrained optimum keeps every load below the degree, but the
      // degree must not exceed the largest load: force each possible witness
      // expert to carry at least `beta` tokens and keep the best outcome.
      for (int e = 0; e < model.num_layers; ++e) {
        int n = model.experts_per_layer[static_cast<std::size_t>(e)];
        for (int i = 0; i < n; ++i) {
          const ExpertContext& ctx =
              ctxs[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
          bool reachable = false;
          for (const OptionShape& s : ctx.shapes) reachable = reachable || s.load >= beta;
          if (!reachable) continue;
          BetaSolveResult w = solve_for_beta(profile, model, demand, ctxs, method, beta,
                                             opts.cost, best.cost, e, i, beta);
          consider(beta, w);
        }
      }
    }
  }

  if (!best.found) return sol;

  sol.feasible = true;
  sol.plan.method.assign(static_cast<std::size_t>(model.num_layers), method);
  sol.plan.assign = best.result.rows;
  sol.plan.pipeline_degree = best.beta;
  sol.cost_gbs = 0;
  for (int e = 0; e < model.num_layers; ++e) {
    LayerCost lc = layer_exec_and_cost(profile, model, e,
                                       demand.tokens[static_cast<std::size_t>(e)],
                                       sol.plan.assign[static_cast<std::size_t>(e)], method,
                                       best.beta, opts.cost);
    sol.layer_cost_gbs.push_back(lc.cost_gbs);
    sol.layer_latency_s.push_back(lc.latency_s);
    sol.cost_gbs += lc.cost_gbs;
  }
  sol.e2e_s = end_to_end_latency(model, sol.layer_latency_s);
  return sol;
}

struct OdsResult {
  DeploymentPlan plan;
  double cost_gbs = 0;
  std::vector<double> layer_cost_gbs;
  std::vector<double> layer_latency_s;
  double e2e_s = 0;
  int iterations = 0;             // elimination rounds used
  bool uniform_fallback = false;  // mixed selection failed, best uniform used
  std::array<FixedMethodSolution, 3> fixed;
};

// Per-layer method selection: solve each method once for the whole model,
// give every layer its cheapest method, and while the mixed plan misses the
// latency budget, ban the worst layer's current method and re-pick. Falls
// back to the best uniform solution if the mixed search exhausts itself.
inline OdsResult ods(const PlatformProfile& profile, const ModelSpec& model,
                     const ExpertDemand& demand, const SolveOptions& opts = {},
                     WorstLayerRule rule = WorstLayerRule::HighestLatency) {
  using namespace planner_detail;
  OdsResult out;
  for (int m = 1; m <= 3; ++m) {
    out.fixed[static_cast<std::size_t>(m - 1)] =
        solve_fixed_method(profile, model, demand, method_from_int(m), opts);
  }
  bool any = false;
  for (const auto& f : out.fixed) any = any || f.feasible;
  if (!any) throw NoPlanError("no scatter-gather method yields a feasible deployment");

  int L = model.num_layers;
  std::vector<std::array<double, 3>> lc(static_cast<std::size_t>(L));
  for (int e = 0; e < L; ++e) {
    for (int m = 0; m < 3; ++m) {
      lc[static_cast<std::size_t>(e)][static_cast<std::size_t>(m)] =
          out.fixed[static_cast<std::size_t>(m)].feasible
              ? out.fixed[static_cast<std::size_t>(m)]
                    .layer_cost_gbs[static_cast<std::size_t>(e)]
              : kInf;
    }
  }
  std::vector<int> choice(static_cast<std::size_t>(L), 0);
  auto repick = [&](int e) {
    int best = -1;
    for (int m = 0; m < 3; ++m) {
      double c = lc[static_cast<std::size_t>(e)][static_cast<std::size_t>(m)];
      if (c < kInf &&
          (best < 0 || c < lc[static_cast<std::size_t>(e)][static_cast<std::size_t>(best)])) {
        best = m;
      }
    }
    choice[static_cast<std::size_t>(e)] = best;
    return best >= 0;
  };
  bool selectable = true;
  for (int e = 0; e < L && selectable; ++e) selectable = repick(e);

  auto assemble = [&]() {
    out.plan.method.resize(static_cast<std::size_t>(L));
    out.plan.assign.resize(static_cast<std::size_t>(L));
    bool pipelined = false;
    for (int e = 0; e < L; ++e) {
      int m = choice[static_cast<std::size_t>(e)];
      out.plan.method[static_cast<std::size_t>(e)] = method_from_int(m + 1);
      out.plan.assign[static_cast<std::size_t>(e)] =
          out.fixed[static_cast<std::size_t>(m)].plan.assign[static_cast<std::size_t>(e)];
      pipelined = pipelined || m == 0;
    }
    // The pipelined solution's degree may exceed the mixed plan's largest
    // replica share; clamping it keeps the range constraint and can only
    // shrink pipelined block times, because every clamped layer then fits
    // its share into a single block.
    int beta = 1;
    if (pipelined) {
      long long max_load = 0;
      for (int e = 0; e < L; ++e) {
        int n = model.experts_per_layer[static_cast<std::size_t>(e)];
        for (int i = 0; i < n; ++i) {
          long long d =
              demand.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
          if (d == 0) continue;
          max_load = std::max(
              max_load,
              tokens_per_replica(d, out.plan.assign[static_cast<std::size_t>(e)]
                                        [static_cast<std::size_t>(i)].replicas));
        }
      }
      beta = std::min(out.fixed[0].plan.pipeline_degree,
                      static_cast<int>(std::max<long long>(1, max_load)));
    }
    out.plan.pipeline_degree = beta;
    out.layer_cost_gbs.clear();
    out.layer_latency_s.clear();
    out.cost_gbs = 0;
    for (int e = 0; e < L; ++e) {
      LayerCost l = layer_exec_and_cost(profile, model, e,
                                        demand.tokens[static_cast<std::size_t>(e)],
                                        out.plan.assign[static_cast<std::size_t>(e)],
                                        out.plan.method[static_cast<std::size_t>(e)], beta,
                                        opts.cost);
      out.layer_cost_gbs.push_back(l.cost_gbs);
      out.layer_latency_s.push_back(l.latency_s);
      out.cost_gbs += l.cost_gbs;
    }
    out.e2e_s = end_to_end_latency(model, out.layer_latency_s);
  };

  int max_rounds = 2 * L;
  for (int round = 0; selectable && round <= max_rounds; ++round) {
    out.iterations = round;
    assemble();
    if (out.e2e_s <= model.latency_limit_s) return out;
    if (round == max_rounds) break;
    // Over budget: the worst layer loses its current method.
    int worst = 0;
    for (int e = 1; e < L; ++e) {
      bool replaces;
      if (rule == WorstLayerRule::HighestLatency) {
        replaces = out.layer_latency_s[static_cast<std::size_t>(e)] >
                   out.layer_latency_s[static_cast<std::size_t>(worst)];
      } else {
        replaces = out.layer_latency_s[static_cast<std::size_t>(e)] <
                   out.layer_latency_s[static_cast<std::size_t>(worst)];
      }
      if (replaces) worst = e;
    }
    lc[static_cast<std::size_t>(worst)]
      [static_cast<std::size_t>(choice[static_cast<std::size_t>(worst)])] = kInf;
    selectable = repick(worst);
  }

  // Mixed selection failed; fall back to the cheapest uniform deployment.
  int pick = -1;
  for (int m = 0; m < 3; ++m) {
    if (!out.fixed[static_cast<std::size_t>(m)].feasible) continue;
    if (pick < 0 || out.fixed[static_cast<std::size_t>(m)].cost_gbs <
                        out.fixed[static_cast<std::size_t>(pick)].cost_gbs) {
      pick = m;
    }
  }
  if (pick < 0) throw NoPlanError("no scatter-gather method yields a feasible deployment");
  const FixedMethodSolution& f = out.fixed[static_cast<std::size_t>(pick)];
  out.plan = f.plan;
  out.layer_cost_gbs = f.layer_cost_gbs;
  out.layer_latency_s = f.layer_latency_s;
  out.cost_gbs = f.cost_gbs;
  out.e2e_s = f.e2e_s;
  out.uniform_fallback = true;
  return out;
}

struct BruteForceResult {
  bool feasible = false;
  double cost_gbs = std::numeric_limits<double>::infinity();
  DeploymentPlan plan;
  double e2e_s = 0;
};

// Exhaustive reference search. Enumerates every method/memory/replica/degree
// combination within hard size caps and keeps the cheapest plan passing the
// full feasibility check. Deliberately shares nothing with the solver above
// beyond the cost-model primitives.
inline BruteForceResult brute_force_optimal(const PlatformProfile& profile,
                                            const ModelSpec& model, const ExpertDemand& demand,
                                            const CostModelOptions& cost_opts = {},
                                            int force_method = 0) {
  demand.validate(model);
  if (model.num_layers > 3) throw std::invalid_argument("reference search: too many layers");
  for (int n : model.experts_per_layer) {
    if (n > 3) throw std::invalid_argument("reference search: too many experts");
  }
  if (profile.memory_mb.size() > 4) {
    throw std::invalid_argument("reference search: memory menu too large");
  }
  if (profile.max_replicas > 3) {
    throw std::invalid_argument("reference search: too many replicas");
  }
  const int kBetaCap = 8;

  int L = model.num_layers;
  int menu = static_cast<int>(profile.memory_mb.size());
  BruteForceResult best;

  struct LayerChoice {
    Method method;
    std::vector<ExpertAssignment> assign;
    double cost_gbs;
    double latency_s;
  };

  std::vector<int> methods;
  if (force_method > 0) {
    methods.push_back(force_method);
  } else {
    methods = {1, 2, 3};
  }

  long long global_max_load = 0;
  for (const auto& layer : demand.tokens) {
    for (long long d : layer) global_max_load = std::max(global_max_load, d);
  }
  int beta_hi = 1;
  if (force_method == 0 || force_method == 1) {
    beta_hi = static_cast<int>(
        std::min<long long>(kBetaCap, std::max<long long>(1, global_max_load)));
  }

  for (int beta = 1; beta <= beta_hi; ++beta) {
    std::vector<std::vector<LayerChoice>> lists(static_cast<std::size_t>(L));
    bool possible = true;
    for (int e = 0; e < L && possible; ++e) {
      int n = model.experts_per_layer[static_cast<std::size_t>(e)];
      for (int mi : methods) {
        Method method = method_from_int(mi);
        std::vector<ExpertAssignment> row(static_cast<std::size_t>(n));
        std::function<void(int)> rec = [&](int i) {
          if (i == n) {
            LayerCost lcost = layer_exec_and_cost(
                profile, model, e, demand.tokens[static_cast<std::size_t>(e)], row, method,
                beta, cost_opts);
            lists[static_cast<std::size_t>(e)].push_back(
                {method, row, lcost.cost_gbs, lcost.latency_s});
            return;
          }
          long long d =
              demand.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
          for (int j = 0; j < menu; ++j) {
            bool placed = false;
            for (int g = 1; g <= profile.max_replicas; ++g) {
              long long r = d > 0 ? tokens_per_replica(d, g) : 0;
              if (replica_memory_mb(model, e, i, r) >
                  profile.memory_mb[static_cast<std::size_t>(j)]) {
                continue;
              }
              if (cost_opts.payload_rule == PayloadRule::ForbidOversized) {
                if (method == Method::Direct) {
                  double in_mb = static_cast<double>(r) * model.token_in_mb;
                  double out_mb = static_cast<double>(r) * model.token_out_mb;
                  if (in_mb > profile.payload_limit_mb ||
                      out_mb > profile.payload_limit_mb) {
                    continue;
                  }
                }
              } else {
                double lhs = (static_cast<double>(mi) - 3.0) *
                             (static_cast<double>(r) * model.token_in_mb -
                              profile.payload_limit_mb);
                if (lhs > 0) continue;
              }
              row[static_cast<std::size_t>(i)] = ExpertAssignment{j, g};
              rec(i + 1);
              placed = true;
              if (d == 0) break;  // idle experts: every replica count is alike
            }
            if (d == 0 && placed) break;  // idle experts: larger memories are alike
          }
        };
        rec(0);
      }
      if (lists[static_cast<std::size_t>(e)].empty()) possible = false;
      std::sort(lists[static_cast<std::size_t>(e)].begin(),
                lists[static_cast<std::size_t>(e)].end(),
                [](const LayerChoice& a, const LayerChoice& b) {
                  return a.cost_gbs < b.cost_gbs;
                });
    }
    if (!possible) continue;

    double overhead = model.head_s + model.tail_s;
    for (double s : model.non_moe_s) overhead += s;
    double lat_budget = model.latency_limit_s - overhead;
    const double lat_slack = 1e-9 * (1.0 + std::abs(lat_budget));
    std::vector<double> suffix_cost(static_cast<std::size_t>(L) + 1, 0.0);
    std::vector<double> suffix_lat(static_cast<std::size_t>(L) + 1, 0.0);
    for (int e = L; e-- > 0;) {
      double min_lat = planner_detail::kInf;
      for (const LayerChoice& c : lists[static_cast<std::size_t>(e)]) {
        min_lat = std::min(min_lat, c.latency_s);
      }
      suffix_cost[static_cast<std::size_t>(e)] =
          suffix_cost[static_cast<std::size_t>(e) + 1] +
          lists[static_cast<std::size_t>(e)].front().cost_gbs;
      suffix_lat[static_cast<std::size_t>(e)] =
          suffix_lat[static_cast<std::size_t>(e) + 1] + min_lat;
    }

    std::vector<const LayerChoice*> picked(static_cast<std::size_t>(L), nullptr);
    std::function<void(int, double, double)> dfs = [&](int e, double cost, double lat) {
      if (best.feasible &&
          cost + suffix_cost[static_cast<std::size_t>(e)] >= best.cost_gbs - 1e-12) {
        return;
      }
      // The latency bound carries slack so float association can never hide
      // a feasible branch; leaves still face the full feasibility check.
      if (lat + suffix_lat[static_cast<std::size_t>(e)] > lat_budget + lat_slack) return;
      if (e == L) {
        DeploymentPlan plan;
        plan.pipeline_degree = beta;
        for (const LayerChoice* c : picked) {
          plan.method.push_back(c->method);
          plan.assign.push_back(c->assign);
        }
        FeasibilityReport rep = check_feasibility(profile, model, demand, plan, cost_opts);
        if (!rep.ok()) return;
        std::vector<double> lats;
        double total = 0;
        for (int l = 0; l < L; ++l) {
          LayerCost lcost = layer_exec_and_cost(profile, model, l,
                                                demand.tokens[static_cast<std::size_t>(l)],
                                                plan.assign[static_cast<std::size_t>(l)],
                                                plan.method[static_cast<std::size_t>(l)],
                                                beta, cost_opts);
          lats.push_back(lcost.latency_s);
          total += lcost.cost_gbs;
        }
        double e2e = end_to_end_latency(model, lats);
        if (!best.feasible || total < best.cost_gbs) {
          best.feasible = true;
          best.cost_gbs = total;
          best.plan = plan;
          best.e2e_s = e2e;
        }
        return;
      }
      for (const LayerChoice& c : lists[static_cast<std::size_t>(e)]) {
        if (best.feasible &&
            cost + c.cost_gbs + suffix_cost[static_cast<std::size_t>(e) + 1] >=
                best.cost_gbs - 1e-12) {
          break;
        }
        picked[static_cast<std::size_t>(e)] = &c;
        dfs(e + 1, cost + c.cost_gbs, lat + c.latency_s);
      }
    };
    dfs(0, 0.0, 0.0);
  }
  return best;
}

// Text serialisation of a deployment plan. The format is line oriented and
// self-describing; '#' lines carry free-form comments.
inline void write_plan(std::ostream& out, const DeploymentPlan& plan,
                       const PlatformProfile& profile, const ModelSpec& model,
                       const std::vector<std::string>& comments = {}) {
  out << "moeplan-plan v1\n";
  for (const auto& c : comments) out << "# " << c << "\n";
  out << "beta " << plan.pipeline_degree << "\n";
  out << "layers " << model.num_layers << "\n";
  for (int e = 0; e < model.num_layers; ++e) {
    out << "layer " << e << " method "
        << method_to_int(plan.method[static_cast<std::size_t>(e)]) << "\n";
    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    for (int i = 0; i < n; ++i) {
      const ExpertAssignment& a =
          plan.assign[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      out << "expert " << e << " " << i << " memory_mb "
          << format_double(profile.memory_mb[static_cast<std::size_t>(a.memory_index)])
          << " replicas " << a.replicas << "\n";
    }
  }
}

inline DeploymentPlan read_plan(std::istream& in, const PlatformProfile& profile,
                                const ModelSpec& model) {
  std::string line;
  if (!std::getline(in, line) || line != "moeplan-plan v1") {
    throw std::runtime_error("plan file: bad or missing header");
  }
  DeploymentPlan plan;
  plan.method.assign(static_cast<std::size_t>(model.num_layers), Method::PlainIndirect);
  plan.assign.resize(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    plan.assign[static_cast<std::size_t>(e)].resize(
        static_cast<std::size_t>(model.experts_per_layer[static_cast<std::size_t>(e)]));
  }
  auto memory_index = [&](double mb) {
    for (std::size_t j = 0; j < profile.memory_mb.size(); ++j) {
      if (profile.memory_mb[j] == mb) return static_cast<int>(j);
    }
    throw std::runtime_error("plan file: memory size not in the platform menu");
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "beta") {
      ls >> plan.pipeline_degree;
    } else if (tag == "layers") {
      int L = 0;
      ls >> L;
      if (L != model.num_layers) throw std::runtime_error("plan file: layer count mismatch");
    } else if (tag == "layer") {
      int e = 0, m = 0;
      std::string kw;
      ls >> e >> kw >> m;
      if (ls.fail() || kw != "method" || e < 0 || e >= model.num_layers) {
        throw std::runtime_error("plan file: bad layer line");
      }
      plan.method[static_cast<std::size_t>(e)] = method_from_int(m);
    } else if (tag == "expert") {
      int e = 0, i = 0, g = 0;
      double mb = 0;
      std::string kw1, kw2;
      ls >> e >> i >> kw1 >> mb >> kw2 >> g;
      if (ls.fail() || kw1 != "memory_mb" || kw2 != "replicas" || e < 0 ||
          e >= model.num_layers || i < 0 ||
          i >= model.experts_per_layer[static_cast<std::size_t>(e)]) {
        throw std::runtime_error("plan file: bad expert line");
      }
      plan.assign[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)] =
          ExpertAssignment{memory_index(mb), g};
    } else {
      throw std::runtime_error("plan file: unknown line '" + tag + "'");
    }
    if (ls.fail()) throw std::runtime_error("plan file: malformed line");
  }
  plan.validate(profile, model);
  return plan;
}

}  // namespace moeplan
