// Core domain types: platform profile, model description, per-expert demand
// and deployment plans. Validation lives here so every module can assume
// well-formed inputs.
#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeplan/config.hpp"

namespace moeplan {

// Scatter/gather style between the gating function and the experts of one
// layer. Numbering follows the plan file format.
enum class Method : int {
  PipelinedIndirect = 1,  // minibatch pipeline through external storage
  PlainIndirect = 2,      // one shot through external storage
  Direct = 3,             // function-to-function transfer, payload limited
};

inline Method method_from_int(int v) {
  if (v < 1 || v > 3) throw std::invalid_argument("method must be 1, 2 or 3");
  return static_cast<Method>(v);
}

inline int method_to_int(Method m) { return static_cast<int>(m); }

struct PlatformProfile {
  std::vector<double> memory_mb;       // ascending menu of allocatable sizes
  std::vector<double> unit_compute_s;  // seconds per token at each size
  double storage_bw_mbps = 0;          // function <-> external storage
  double function_bw_mbps = 0;         // function <-> function
  double storage_delay_s = 0;          // fixed per storage access
  double warm_start_s = 0;             // function warm start
  double payload_limit_mb = 0;         // direct invocation payload cap
  int max_replicas = 0;
  double billing_granularity_s = 0.001;  // per-invocation rounding, 0 disables

  void validate() const {
    if (memory_mb.empty()) throw std::invalid_argument("memory menu is empty");
    if (memory_mb.size() != unit_compute_s.size()) {
      throw std::invalid_argument("memory menu and unit compute times differ in length");
    }
    for (std::size_t j = 0; j < memory_mb.size(); ++j) {
      if (memory_mb[j] <= 0) throw std::invalid_argument("memory sizes must be positive");
      if (unit_compute_s[j] <= 0) {
        throw std::invalid_argument("unit compute times must be positive");
      }
      if (j > 0 && memory_mb[j] <= memory_mb[j - 1]) {
        throw std::invalid_argument("memory menu must be strictly ascending");
      }
      if (j > 0 && unit_compute_s[j] >= unit_compute_s[j - 1]) {
        throw std::invalid_argument("unit compute times must strictly decrease with memory");
      }
    }
    if (storage_bw_mbps <= 0) throw std::invalid_argument("storage bandwidth must be positive");
    if (function_bw_mbps <= 0) throw std::invalid_argument("function bandwidth must be positive");
    if (storage_delay_s < 0) throw std::invalid_argument("storage delay must be non-negative");
    if (warm_start_s < 0) throw std::invalid_argument("warm start must be non-negative");
    if (payload_limit_mb <= 0) throw std::invalid_argument("payload limit must be positive");
    if (max_replicas < 1) throw std::invalid_argument("max replicas must be at least 1");
    if (billing_granularity_s < 0) {
      throw std::invalid_argument("billing granularity must be non-negative");
    }
  }
};

struct ExpertShape {
  double params_mb = 0;   // parameter download size
  double scratch_mb = 0;  // intermediate buffers while computing
};

struct ModelSpec {
  int num_layers = 0;
  std::vector<int> experts_per_layer;
  std::vector<std::vector<ExpertShape>> experts;  // [layer][expert]
  double token_in_mb = 0;   // per-token expert input
  double token_out_mb = 0;  // per-token expert output
  std::vector<double> non_moe_s;    // non-MoE compute + gating, per layer
  std::vector<double> next_load_s;  // warm start + model download of the layer after
  double head_s = 0;
  double tail_s = 0;
  double latency_limit_s = 0;

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("model needs at least one layer");
    if (static_cast<int>(experts_per_layer.size()) != num_layers ||
        static_cast<int>(experts.size()) != num_layers ||
        static_cast<int>(non_moe_s.size()) != num_layers ||
        static_cast<int>(next_load_s.size()) != num_layers) {
      throw std::invalid_argument("per-layer model fields must match the layer count");
    }
    for (int e = 0; e < num_layers; ++e) {
      if (experts_per_layer[e] < 1) {
        throw std::invalid_argument("every layer needs at least one expert");
      }
      if (static_cast<int>(experts[e].size()) != experts_per_layer[e]) {
        throw std::invalid_argument("expert shape row does not match the expert count");
      }
      for (const auto& shape : experts[e]) {
        if (shape.params_mb <= 0) throw std::invalid_argument("expert params must be positive");
        if (shape.scratch_mb < 0) throw std::invalid_argument("expert scratch must be non-negative");
      }
      if (non_moe_s[e] < 0 || next_load_s[e] < 0) {
        throw std::invalid_argument("per-layer times must be non-negative");
      }
    }
    if (token_in_mb <= 0 || token_out_mb <= 0) {
      throw std::invalid_argument("token activation sizes must be positive");
    }
    if (head_s < 0 || tail_s < 0) throw std::invalid_argument("head/tail times must be non-negative");
    double fixed = head_s + tail_s;
    for (int e = 0; e < num_layers; ++e) fixed += non_moe_s[e];
    if (latency_limit_s <= fixed) {
      throw std::invalid_argument("latency limit must exceed the fixed pipeline overheads");
    }
  }
};

// Predicted or measured per-expert token counts for one batch.
struct ExpertDemand {
  std::vector<std::vector<long long>> tokens;  // [layer][expert]

  bool activated(int layer, int expert) const { return tokens[layer][expert] > 0; }

  void validate(const ModelSpec& model) const {
    if (static_cast<int>(tokens.size()) != model.num_layers) {
      throw std::invalid_argument("demand layer count does not match the model");
    }
    for (int e = 0; e < model.num_layers; ++e) {
      if (static_cast<int>(tokens[e].size()) != model.experts_per_layer[e]) {
        throw std::invalid_argument("demand expert count does not match the model");
      }
      for (long long d : tokens[e]) {
        if (d < 0) throw std::invalid_argument("token counts must be non-negative");
      }
    }
  }
};

struct ExpertAssignment {
  int memory_index = 0;  // into PlatformProfile::memory_mb
  int replicas = 1;
};

struct DeploymentPlan {
  std::vector<Method> method;                          // per layer
  std::vector<std::vector<ExpertAssignment>> assign;   // [layer][expert]
  int pipeline_degree = 1;                             // shared by pipelined layers

  bool any_pipelined() const {
    for (Method m : method) {
      if (m == Method::PipelinedIndirect) return true;
    }
    return false;
  }

  // Structural validity only; resource constraints are check_feasibility's job.
  void validate(const PlatformProfile& profile, const ModelSpec& model) const {
    if (static_cast<int>(method.size()) != model.num_layers ||
        static_cast<int>(assign.size()) != model.num_layers) {
      throw std::invalid_argument("plan layer count does not match the model");
    }
    for (int e = 0; e < model.num_layers; ++e) {
      if (static_cast<int>(assign[e].size()) != model.experts_per_layer[e]) {
        throw std::invalid_argument("plan expert count does not match the model");
      }
      for (const auto& a : assign[e]) {
        if (a.memory_index < 0 ||
            a.memory_index >= static_cast<int>(profile.memory_mb.size())) {
          throw std::invalid_argument("memory index outside the menu");
        }
        if (a.replicas < 1 || a.replicas > profile.max_replicas) {
          throw std::invalid_argument("replica count outside [1, max_replicas]");
        }
      }
    }
    // The pipeline degree range is a deployment constraint, not a structural
    // one; check_feasibility reports it so a bad plan file can be diagnosed.
  }
};

enum class ViolationKind { Memory, Payload, BetaRange, Latency };

inline const char* violation_kind_name(ViolationKind k) {
  switch (k) {
    case ViolationKind::Memory: return "memory";
    case ViolationKind::Payload: return "payload";
    case ViolationKind::BetaRange: return "beta-range";
    case ViolationKind::Latency: return "latency";
  }
  return "?";
}

struct Violation {
  ViolationKind kind;
  int layer = -1;   // -1: plan-wide
  int expert = -1;  // -1: layer-wide
  std::string detail;
};

struct FeasibilityReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  bool has(ViolationKind k) const {
    for (const auto& v : violations) {
      if (v.kind == k) return true;
    }
    return false;
  }
};

// -------- config loading --------

inline PlatformProfile load_platform(const Config& cfg) {
  cfg.require_known_keys(
      "platform",
      {"memory_mb", "unit_compute_s", "storage_bw_mbps", "function_bw_mbps",
       "storage_delay_s", "warm_start_s", "payload_limit_mb", "max_replicas",
       "billing_granularity_s"});
  PlatformProfile p;
  p.memory_mb = cfg.get_double_list("platform.memory_mb");
  p.unit_compute_s = cfg.get_double_list("platform.unit_compute_s");
  p.storage_bw_mbps = cfg.get_double("platform.storage_bw_mbps");
  p.function_bw_mbps = cfg.get_double("platform.function_bw_mbps");
  p.storage_delay_s = cfg.get_double("platform.storage_delay_s");
  p.warm_start_s = cfg.get_double("platform.warm_start_s");
  p.payload_limit_mb = cfg.get_double("platform.payload_limit_mb");
  p.max_replicas = static_cast<int>(cfg.get_int("platform.max_replicas"));
  p.billing_granularity_s = cfg.get_double("platform.billing_granularity_s", 0.001);
  try {
    p.validate();
  } catch (const std::invalid_argument& err) {
    throw ParseError(std::string("platform config: ") + err.what());
  }
  return p;
}

inline std::vector<double> broadcast_per_layer(const Config& cfg, const std::string& key,
                                               int layers) {
  auto values = cfg.get_double_list(key);
  if (static_cast<int>(values.size()) == 1) {
    return std::vector<double>(static_cast<std::size_t>(layers), values[0]);
  }
  if (static_cast<int>(values.size()) != layers) {
    throw ParseError("key '" + key + "' expects 1 or " + std::to_string(layers) +
                     " values");
  }
  return values;
}

inline ModelSpec load_model(const Config& cfg) {
  cfg.require_known_keys(
      "model",
      {"num_layers", "experts_per_layer", "expert_params_mb", "expert_scratch_mb",
       "token_in_mb", "token_out_mb", "non_moe_s", "next_load_s", "head_s", "tail_s",
       "latency_limit_s"});
  ModelSpec m;
  m.num_layers = static_cast<int>(cfg.get_int("model.num_layers"));
  if (m.num_layers < 1) throw ParseError("model config: num_layers must be positive");
  auto counts = cfg.get_int_list("model.experts_per_layer");
  if (counts.size() == 1) {
    m.experts_per_layer.assign(static_cast<std::size_t>(m.num_layers),
                               static_cast<int>(counts[0]));
  } else if (static_cast<int>(counts.size()) == m.num_layers) {
    for (long long c : counts) m.experts_per_layer.push_back(static_cast<int>(c));
  } else {
    throw ParseError("model config: experts_per_layer expects 1 or num_layers values");
  }
  auto params = broadcast_per_layer(cfg, "model.expert_params_mb", m.num_layers);
  auto scratch = broadcast_per_layer(cfg, "model.expert_scratch_mb", m.num_layers);
  m.experts.resize(static_cast<std::size_t>(m.num_layers));
  for (int e = 0; e < m.num_layers; ++e) {
    m.experts[e].assign(static_cast<std::size_t>(m.experts_per_layer[e]),
                        ExpertShape{params[e], scratch[e]});
  }
  m.token_in_mb = cfg.get_double("model.token_in_mb");
  m.token_out_mb = cfg.get_double("model.token_out_mb");
  m.non_moe_s = broadcast_per_layer(cfg, "model.non_moe_s", m.num_layers);
  m.next_load_s = broadcast_per_layer(cfg, "model.next_load_s", m.num_layers);
  m.head_s = cfg.get_double("model.head_s");
  m.tail_s = cfg.get_double("model.tail_s");
  m.latency_limit_s = cfg.get_double("model.latency_limit_s");
  try {
    m.validate();
  } catch (const std::invalid_argument& err) {
    throw ParseError(std::string("model config: ") + err.what());
  }
  return m;
}

}  // namespace moeplan
