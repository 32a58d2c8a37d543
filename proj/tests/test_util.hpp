// Shared fixture builders for the unit and acceptance suites.
#pragma once

#include <vector>

#include "moeplan/core.hpp"

namespace moeplan::testing {

// Two-option profile used by the hand-computed expectations: storage at
// 100 MB/s, function links at 50 MB/s, 0.1 s storage delay, 0.5 s warm start.
inline PlatformProfile small_profile() {
  PlatformProfile p;
  p.memory_mb = {1152, 3072};
  p.unit_compute_s = {0.008, 0.004};
  p.storage_bw_mbps = 100;
  p.function_bw_mbps = 50;
  p.storage_delay_s = 0.1;
  p.warm_start_s = 0.5;
  p.payload_limit_mb = 6;
  p.max_replicas = 3;
  p.billing_granularity_s = 0;  // exact costs for closed-form checks
  p.validate();
  return p;
}

// Mirrors configs/platform_desk.cfg.
inline PlatformProfile desk_profile() {
  PlatformProfile p;
  p.memory_mb = {128,  768,  960,  1152, 1344, 1536, 1728,
                 1920, 2112, 2304, 2496, 2688, 2880, 3072};
  p.unit_compute_s = {0.096,  0.016,  0.0128, 0.0107, 0.0091, 0.008, 0.0071,
                      0.0064, 0.0058, 0.0053, 0.0049, 0.0046, 0.0043, 0.004};
  p.storage_bw_mbps = 100;
  p.function_bw_mbps = 500;
  p.storage_delay_s = 0.02;
  p.warm_start_s = 0.2;
  p.payload_limit_mb = 6;
  p.max_replicas = 8;
  p.billing_granularity_s = 0.001;
  p.validate();
  return p;
}

inline ModelSpec uniform_model(int layers, int experts, double params_mb,
                               double scratch_mb, double token_in_mb,
                               double token_out_mb, double non_moe_s,
                               double next_load_s, double head_s, double tail_s,
                               double latency_limit_s) {
  ModelSpec m;
  m.num_layers = layers;
  m.experts_per_layer.assign(layers, experts);
  m.experts.assign(layers, std::vector<ExpertShape>(
                               experts, ExpertShape{params_mb, scratch_mb}));
  m.token_in_mb = token_in_mb;
  m.token_out_mb = token_out_mb;
  m.non_moe_s.assign(layers, non_moe_s);
  m.next_load_s.assign(layers, next_load_s);
  m.head_s = head_s;
  m.tail_s = tail_s;
  m.latency_limit_s = latency_limit_s;
  m.validate();
  return m;
}

// Mirrors configs/model_desk.cfg.
inline ModelSpec desk_model() {
  return uniform_model(12, 4, 50, 20, 0.01, 0.01, 0.05, 0.5, 0.3, 0.3, 60);
}

inline ExpertDemand make_demand(const ModelSpec& model,
                                std::vector<std::vector<long long>> tokens) {
  ExpertDemand d;
  d.tokens = std::move(tokens);
  d.validate(model);
  return d;
}

inline DeploymentPlan uniform_plan(const ModelSpec& model, Method method,
                                   int memory_index, int replicas, int beta) {
  DeploymentPlan plan;
  plan.method.assign(model.num_layers, method);
  plan.assign.resize(model.num_layers);
  for (int e = 0; e < model.num_layers; ++e) {
    plan.assign[e].assign(model.experts_per_layer[e],
                          ExpertAssignment{memory_index, replicas});
  }
  plan.pipeline_degree = beta;
  return plan;
}

}  // namespace moeplan::testing
