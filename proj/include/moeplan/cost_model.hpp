// Analytical cost and latency model for serving one MoE layer on a
// serverless platform. Three scatter/gather methods are covered:
//
//   1 pipelined indirect: inputs stream through external storage in
//     minibatches of `beta` tokens; downloads and compute overlap uploads.
//   2 plain indirect: one storage round trip for the whole replica load.
//   3 direct: function-to-function transfers, bounded by the payload limit;
//     the layer after the experts must be re-invoked, so its model load
//     cannot overlap expert compute.
//
// Billed cost is GB-seconds of function residency; every replica is one
// invocation whose duration is rounded up to the billing granularity.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "moeplan/core.hpp"
#include "moeplan/csv.hpp"

namespace moeplan {

// Multiplier on the worst-case block time of the pipelined method. BlockCount
// charges each of the ceil(r/beta) blocks once; PipelineDegree charges beta
// blocks regardless of the load and is kept for compatibility experiments.
enum class BlockMultiplier { BlockCount, PipelineDegree };

// Payload screening for the direct method. ForbidOversized rejects a replica
// whose input or output transfer exceeds the payload limit. PrintedAlgebraic
// evaluates the compatibility form (a - 3) * (r * D_in - D_p) <= 0 instead,
// which is vacuous for the direct method and inverts the guard for the
// indirect ones; it exists only to reproduce that behaviour on demand.
enum class PayloadRule { ForbidOversized, PrintedAlgebraic };

struct CostModelOptions {
  BlockMultiplier block_multiplier = BlockMultiplier::BlockCount;
  PayloadRule payload_rule = PayloadRule::ForbidOversized;
};

// Seconds per token at a given memory size.
inline double token_compute_time(const PlatformProfile& profile, int memory_index) {
  if (memory_index < 0 || memory_index >= static_cast<int>(profile.unit_compute_s.size())) {
    throw std::out_of_range("memory index outside the menu");
  }
  return profile.unit_compute_s[static_cast<std::size_t>(memory_index)];
}

// Worst-case tokens routed to one of `replicas` equal shares.
inline long long tokens_per_replica(long long tokens, int replicas) {
  if (tokens < 0) throw std::invalid_argument("token count must be non-negative");
  if (replicas < 1) throw std::invalid_argument("replica count must be at least 1");
  return (tokens + replicas - 1) / replicas;
}

// Warm start plus parameter download; paid by every expert invocation.
inline double expert_head_time(const PlatformProfile& profile, double params_mb) {
  return params_mb / profile.storage_bw_mbps + profile.storage_delay_s +
         profile.warm_start_s;
}

// Wall-clock residency of one replica processing r tokens.
inline double replica_exec_time(Method method, const PlatformProfile& profile,
                                const ModelSpec& model, double params_mb,
                                int memory_index, long long r, int beta,
                                const CostModelOptions& opts = {}) {
  if (r < 1) throw std::invalid_argument("replica load must be at least 1 token");
  double unit = token_compute_time(profile, memory_index);
  double head = expert_head_time(profile, params_mb);
  double bs = profile.storage_bw_mbps;
  switch (method) {
    case Method::PipelinedIndirect: {
      if (beta < 1) throw std::invalid_argument("pipeline degree must be at least 1");
      long long blocks = (r + beta - 1) / beta;
      double upload_tail = profile.storage_delay_s +
                           static_cast<double>(blocks) * model.token_out_mb / bs;
      double block_time = profile.storage_delay_s +
                          static_cast<double>(beta) *
                              std::max(model.token_in_mb / bs + unit,
                                       model.token_out_mb / bs);
      double mult = opts.block_multiplier == BlockMultiplier::BlockCount
                        ? static_cast<double>(blocks)
                        : static_cast<double>(beta);
      return head + upload_tail + mult * block_time;
    }
    case Method::PlainIndirect: {
      return head + 2.0 * profile.storage_delay_s +
             static_cast<double>(r) *
                 ((model.token_in_mb + model.token_out_mb) / bs + unit);
    }
    case Method::Direct: {
      return head + static_cast<double>(r) *
                        (model.token_out_mb / profile.function_bw_mbps + unit);
    }
  }
  throw std::invalid_argument("unknown method");
}

// Invocation duration as billed: rounded up to the billing granularity.
inline double billed_seconds(const PlatformProfile& profile, double seconds) {
  double g = profile.billing_granularity_s;
  if (g <= 0) return seconds;
  return std::ceil(seconds / g - 1e-12) * g;
}

struct ExpertCost {
  long long tokens = 0;       // routed to this expert
  long long replica_load = 0; // worst-case tokens on one replica
  double t_rep_s = 0;         // wall clock of one replica, 0 when idle
  double cost_gbs = 0;        // all replicas, billed
};

struct LayerCost {
  Method method = Method::PlainIndirect;
  std::vector<ExpertCost> experts;
  double cost_gbs = 0;
  double latency_s = 0;   // scatter start to results ready in the next layer
  double stage12_s = 0;   // slowest expert, head through last upload
  double gather_s = 0;    // result collection by the next layer
};

// Cost and latency of one layer under fixed per-expert assignments. Experts
// with zero tokens are not invoked: they contribute no cost and do not enter
// the latency maxima.
inline LayerCost layer_exec_and_cost(const PlatformProfile& profile, const ModelSpec& model,
                                     int layer, const std::vector<long long>& tokens,
                                     const std::vector<ExpertAssignment>& assign,
                                     Method method, int beta,
                                     const CostModelOptions& opts = {}) {
  if (layer < 0 || layer >= model.num_layers) throw std::out_of_range("layer index");
  int n = model.experts_per_layer[layer];
  if (static_cast<int>(tokens.size()) != n || static_cast<int>(assign.size()) != n) {
    throw std::invalid_argument("tokens/assignments do not match the expert count");
  }
  LayerCost out;
  out.method = method;
  out.experts.resize(static_cast<std::size_t>(n));
  double max_rep = 0;
  long long max_load = 0;
  long long total_tokens = 0;
  for (int i = 0; i < n; ++i) {
    ExpertCost& ec = out.experts[static_cast<std::size_t>(i)];
    ec.tokens = tokens[static_cast<std::size_t>(i)];
    total_tokens += ec.tokens;
    if (ec.tokens == 0) continue;
    const ExpertAssignment& a = assign[static_cast<std::size_t>(i)];
    ec.replica_load = tokens_per_replica(ec.tokens, a.replicas);
    ec.t_rep_s = replica_exec_time(method, profile, model,
                                   model.experts[layer][static_cast<std::size_t>(i)].params_mb,
                                   a.memory_index, ec.replica_load, beta, opts);
    double mem_gb = profile.memory_mb[static_cast<std::size_t>(a.memory_index)] / 1024.0;
    ec.cost_gbs = static_cast<double>(a.replicas) * billed_seconds(profile, ec.t_rep_s) * mem_gb;
    out.cost_gbs += ec.cost_gbs;
    max_rep = std::max(max_rep, ec.t_rep_s);
    max_load = std::max(max_load, ec.replica_load);
  }
  out.stage12_s = max_rep;
  double t_load = model.next_load_s[static_cast<std::size_t>(layer)];
  if (method == Method::Direct) {
    // The next layer is invoked by the incoming results, so its model load
    // starts only after the slowest expert finishes.
    double scatter = static_cast<double>(max_load) * model.token_in_mb / profile.function_bw_mbps;
    out.gather_s = t_load;
    out.latency_s = scatter + max_rep + t_load;
  } else {
    // The next layer warms up while experts run, then drains the results
    // from storage in one pass.
    out.gather_s = profile.storage_delay_s +
                   static_cast<double>(total_tokens) * model.token_out_mb / profile.storage_bw_mbps;
    out.latency_s = std::max(max_rep, t_load) + out.gather_s;
  }
  return out;
}

// Full pipeline latency: head, per-layer non-MoE work, the MoE stages, tail.
inline double end_to_end_latency(const ModelSpec& model,
                                 const std::vector<double>& layer_latency_s) {
  if (static_cast<int>(layer_latency_s.size()) != model.num_layers) {
    throw std::invalid_argument("latency list does not match the layer count");
  }
  double t = model.head_s + model.tail_s;
  for (int e = 0; e < model.num_layers; ++e) {
    t += model.non_moe_s[static_cast<std::size_t>(e)] +
         layer_latency_s[static_cast<std::size_t>(e)];
  }
  return t;
}

// Memory needed by one replica of expert (layer, i) carrying r tokens.
inline double replica_memory_mb(const ModelSpec& model, int layer, int expert, long long r) {
  const ExpertShape& shape = model.experts[layer][static_cast<std::size_t>(expert)];
  return shape.params_mb + shape.scratch_mb +
         static_cast<double>(r) * (model.token_in_mb + model.token_out_mb);
}

// Checks a full plan against the deployment constraints: per-replica memory,
// payload limits of direct layers, the pipeline-degree range, and the
// end-to-end latency budget. Infeasibility is reported, not thrown.
inline FeasibilityReport check_feasibility(const PlatformProfile& profile,
                                           const ModelSpec& model,
                                           const ExpertDemand& demand,
                                           const DeploymentPlan& plan,
                                           const CostModelOptions& opts = {}) {
  demand.validate(model);
  plan.validate(profile, model);
  FeasibilityReport report;
  long long max_load = 0;
  // Latency evaluation needs a usable pipeline degree even when the plan's
  // one is out of range; the range violation itself is reported below.
  int beta_eff = std::max(1, plan.pipeline_degree);
  std::vector<double> latencies(static_cast<std::size_t>(model.num_layers), 0.0);
  for (int e = 0; e < model.num_layers; ++e) {
    int n = model.experts_per_layer[e];
    for (int i = 0; i < n; ++i) {
      const ExpertAssignment& a = plan.assign[e][static_cast<std::size_t>(i)];
      long long d = demand.tokens[e][static_cast<std::size_t>(i)];
      long long r = d > 0 ? tokens_per_replica(d, a.replicas) : 0;
      max_load = std::max(max_load, r);
      double need = replica_memory_mb(model, e, i, r);
      double have = profile.memory_mb[static_cast<std::size_t>(a.memory_index)];
      if (need > have) {
        report.violations.push_back(
            {ViolationKind::Memory, e, i,
             "needs " + format_double(need) + " MB, configured " + format_double(have) + " MB"});
      }
      if (opts.payload_rule == PayloadRule::ForbidOversized) {
        if (plan.method[e] == Method::Direct) {
          double in_mb = static_cast<double>(r) * model.token_in_mb;
          double out_mb = static_cast<double>(r) * model.token_out_mb;
          if (in_mb > profile.payload_limit_mb || out_mb > profile.payload_limit_mb) {
            report.violations.push_back(
                {ViolationKind::Payload, e, i,
                 "direct transfer of " + format_double(std::max(in_mb, out_mb)) +
                     " MB exceeds the payload limit"});
          }
        }
      } else {
        // Compatibility form: (a - 3) * (r * D_in - D_p) <= 0 for every expert.
        double lhs = (static_cast<double>(method_to_int(plan.method[e])) - 3.0) *
                     (static_cast<double>(r) * model.token_in_mb - profile.payload_limit_mb);
        if (lhs > 0) {
          report.violations.push_back(
              {ViolationKind::Payload, e, i, "algebraic payload form violated"});
        }
      }
    }
    LayerCost lc = layer_exec_and_cost(profile, model, e, demand.tokens[e], plan.assign[e],
                                       plan.method[e], beta_eff, opts);
    latencies[static_cast<std::size_t>(e)] = lc.latency_s;
  }
  if (plan.pipeline_degree < 1) {
    report.violations.push_back({ViolationKind::BetaRange, -1, -1, "pipeline degree below 1"});
  } else if (plan.any_pipelined() &&
             plan.pipeline_degree > std::max<long long>(1, max_load)) {
    report.violations.push_back(
        {ViolationKind::BetaRange, -1, -1,
         "pipeline degree " + std::to_string(plan.pipeline_degree) +
             " exceeds the largest replica load " + std::to_string(max_load)});
  }
  double e2e = end_to_end_latency(model, latencies);
  if (e2e > model.latency_limit_s) {
    report.violations.push_back(
        {ViolationKind::Latency, -1, -1,
         "end to end " + format_double(e2e) + " s exceeds the limit " +
             format_double(model.latency_limit_s) + " s"});
  }
  return report;
}

}  // namespace moeplan
