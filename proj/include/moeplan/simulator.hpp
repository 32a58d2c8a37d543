// Deterministic discrete-event simulation of one batch flowing through a
// deployed MoE model. Functions are billed for wall-clock residency rounded
// up to the billing granularity, so the simulator reconstructs every replica
// invocation phase by phase (warm start, parameter fetch, transfers, compute)
// instead of evaluating the closed-form model. Capacity is padded: each of an
// expert's replicas is provisioned for the worst-case share ceil(d / g), so a
// correctly sized plan behaves identically in the model and the simulation.
//
// Divergence the planner did not anticipate is surfaced as flagged events:
// a replica whose working set exceeds its configured memory completes with a
// MemoryOverflow mark, and a direct layer whose transfers exceed the payload
// limit is re-run through storage (PayloadReject, method 2 fallback).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <string>
#include <vector>

#include "moeplan/cost_model.hpp"
#include "moeplan/core.hpp"
#include "moeplan/csv.hpp"

namespace moeplan {

enum class EventKind {
  WarmStart,
  ModelDownload,    // expert parameters from storage
  InputUpload,      // gating writes a partition to storage (unbilled)
  StorageDownload,  // expert reads its inputs
  Compute,
  StorageUpload,    // expert writes results
  DirectTransfer,   // function-to-function payload
  Gather,           // next layer drains results from storage
  NextModelLoad,    // next layer parameter load
  MemoryOverflow,
  PayloadReject,
};

inline const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::WarmStart: return "warm_start";
    case EventKind::ModelDownload: return "model_download";
    case EventKind::InputUpload: return "input_upload";
    case EventKind::StorageDownload: return "storage_download";
    case EventKind::Compute: return "compute";
    case EventKind::StorageUpload: return "storage_upload";
    case EventKind::DirectTransfer: return "direct_transfer";
    case EventKind::Gather: return "gather";
    case EventKind::NextModelLoad: return "next_model_load";
    case EventKind::MemoryOverflow: return "memory_overflow";
    case EventKind::PayloadReject: return "payload_reject";
  }
  return "unknown";
}

struct SimEvent {
  double t_s = 0;
  double duration_s = 0;
  EventKind kind = EventKind::Compute;
  int layer = -1;
  int expert = -1;
  int replica = -1;
  double bytes_mb = 0;
};

struct ExpertSim {
  long long tokens = 0;        // actually routed
  long long replica_load = 0;  // padded share per replica
  int replicas = 0;
  int memory_index = 0;
  double t_rep_s = 0;          // residency of one replica
  double cost_gbs = 0;         // all replicas, billed
  bool memory_overflow = false;
  bool payload_reject = false;
};

struct LayerReport {
  Method planned_method = Method::PlainIndirect;
  Method used_method = Method::PlainIndirect;
  bool payload_fallback = false;
  double start_s = 0;
  double latency_s = 0;  // scatter start to next layer ready
  double stage_s = 0;    // slowest replica residency
  double gather_s = 0;
  double cost_gbs = 0;
  std::vector<ExpertSim> experts;
};

struct SimReport {
  std::vector<LayerReport> layers;
  double cost_gbs = 0;
  double e2e_latency_s = 0;
  double throughput_tps = 0;
  long long batch_tokens = 0;
  long long invocations = 0;
  bool any_memory_overflow = false;
  bool any_payload_fallback = false;
  std::vector<SimEvent> events;  // populated when tracing is on
};

struct SimOptions {
  CostModelOptions cost;
  bool emit_trace = false;
  long long batch_tokens = 0;  // throughput basis; 0 derives it from demand
};

namespace detail {

struct Phase {
  EventKind kind;
  double duration_s;
  double bytes_mb;
  double not_before_s = 0;  // absolute floor on the phase end (stream coupling)
};

// Executes one replica's phases back to back and returns its residency.
inline double run_phases(std::vector<SimEvent>* trace, const std::vector<Phase>& phases,
                         double invoke_s, int layer, int expert, int replica) {
  double t = invoke_s;
  for (const auto& p : phases) {
    double end = std::max(t + p.duration_s, p.not_before_s);
    if (trace != nullptr) {
      trace->push_back({t, end - t, p.kind, layer, expert, replica, p.bytes_mb});
    }
    t = end;
  }
  return t - invoke_s;
}

}  // namespace detail

inline SimReport simulate(const PlatformProfile& profile, const ModelSpec& model,
                          const DeploymentPlan& plan, const ExpertDemand& demand,
                          const SimOptions& opts = {}) {
  demand.validate(model);
  plan.validate(profile, model);
  int beta = std::max(1, plan.pipeline_degree);
  double bs = profile.storage_bw_mbps;
  double bf = profile.function_bw_mbps;

  SimReport report;
  report.layers.resize(static_cast<std::size_t>(model.num_layers));
  std::vector<SimEvent>* trace = opts.emit_trace ? &report.events : nullptr;

  double clock = model.head_s;
  long long max_layer_tokens = 0;
  for (int e = 0; e < model.num_layers; ++e) {
    clock += model.non_moe_s[static_cast<std::size_t>(e)];
    LayerReport& lr = report.layers[static_cast<std::size_t>(e)];
    lr.planned_method = plan.method[static_cast<std::size_t>(e)];
    lr.used_method = lr.planned_method;
    lr.start_s = clock;

    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    lr.experts.resize(static_cast<std::size_t>(n));
    long long layer_tokens = 0;
    for (int i = 0; i < n; ++i) {
      ExpertSim& es = lr.experts[static_cast<std::size_t>(i)];
      const ExpertAssignment& a = plan.assign[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      es.tokens = demand.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      es.replicas = a.replicas;
      es.memory_index = a.memory_index;
      if (es.tokens > 0) es.replica_load = tokens_per_replica(es.tokens, a.replicas);
      layer_tokens += es.tokens;
    }
    max_layer_tokens = std::max(max_layer_tokens, layer_tokens);

    // The platform rejects oversized direct payloads; the layer then reruns
    // through storage as plain indirect.
    if (lr.used_method == Method::Direct) {
      for (int i = 0; i < n; ++i) {
        ExpertSim& es = lr.experts[static_cast<std::size_t>(i)];
        if (es.tokens == 0) continue;
        double in_mb = static_cast<double>(es.replica_load) * model.token_in_mb;
        double out_mb = static_cast<double>(es.replica_load) * model.token_out_mb;
        if (in_mb > profile.payload_limit_mb || out_mb > profile.payload_limit_mb) {
          es.payload_reject = true;
          lr.payload_fallback = true;
          if (trace != nullptr) {
            trace->push_back({clock, 0, EventKind::PayloadReject, e, i, -1,
                              std::max(in_mb, out_mb)});
          }
        }
      }
      if (lr.payload_fallback) {
        lr.used_method = Method::PlainIndirect;
        report.any_payload_fallback = true;
      }
    }

    // Scatter: direct transfers delay the lockstep expert start; indirect
    // partitions upload to storage concurrently with the expert head phase.
    double scatter_s = 0;
    if (lr.used_method == Method::Direct) {
      for (int i = 0; i < n; ++i) {
        const ExpertSim& es = lr.experts[static_cast<std::size_t>(i)];
        if (es.tokens == 0) continue;
        double dur = static_cast<double>(es.replica_load) * model.token_in_mb / bf;
        scatter_s = std::max(scatter_s, dur);
        if (trace != nullptr) {
          trace->push_back({clock, dur, EventKind::DirectTransfer, e, i, -1,
                            static_cast<double>(es.replica_load) * model.token_in_mb});
        }
      }
    }
    double invoke_s = clock + scatter_s;

    double stage_s = 0;
    for (int i = 0; i < n; ++i) {
      ExpertSim& es = lr.experts[static_cast<std::size_t>(i)];
      if (es.tokens == 0) continue;
      const ExpertShape& shape = model.experts[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      double unit = token_compute_time(profile, es.memory_index);
      long long r = es.replica_load;

      double upload_ready_s = 0;
      if (lr.used_method != Method::Direct) {
        double up_dur = profile.storage_delay_s +
                        static_cast<double>(es.tokens) * model.token_in_mb / bs;
        upload_ready_s = clock + up_dur;
        if (trace != nullptr) {
          trace->push_back({clock, up_dur, EventKind::InputUpload, e, i, -1,
                            static_cast<double>(es.tokens) * model.token_in_mb});
        }
      }

      // Phase list for one replica; all replicas of an expert are identical.
      std::vector<detail::Phase> phases;
      std::vector<SimEvent> overlapped;  // storage uploads running behind compute
      double head_dur = profile.warm_start_s + profile.storage_delay_s + shape.params_mb / bs;
      phases.push_back({EventKind::WarmStart, profile.warm_start_s, 0, 0});
      phases.push_back({EventKind::ModelDownload,
                        profile.storage_delay_s + shape.params_mb / bs, shape.params_mb, 0});
      switch (lr.used_method) {
        case Method::PipelinedIndirect: {
          long long blocks = (r + beta - 1) / beta;
          long long charged = opts.cost.block_multiplier == BlockMultiplier::BlockCount
                                  ? blocks
                                  : static_cast<long long>(beta);
          double in_mb = static_cast<double>(beta) * model.token_in_mb;
          double out_mb = static_cast<double>(beta) * model.token_out_mb;
          double dl = profile.storage_delay_s + in_mb / bs;
          double stream = in_mb / bs + static_cast<double>(beta) * unit;
          // Steady-state block: fetching and computing block b overlaps
          // uploading block b-1, so the wall is the slower of the two and
          // block boundaries advance by it exactly.
          double wall = profile.storage_delay_s + std::max(stream, out_mb / bs);
          for (long long b = 0; b < charged; ++b) {
            double boundary = invoke_s + head_dur + static_cast<double>(b) * wall;
            double floor = boundary + dl;
            if (b == 0) floor = std::max(floor, upload_ready_s);
            phases.push_back({EventKind::StorageDownload, dl, in_mb, floor});
            phases.push_back({EventKind::Compute, static_cast<double>(beta) * unit, 0, 0});
            if (b > 0) {
              overlapped.push_back({boundary, out_mb / bs, EventKind::StorageUpload, e, i, -1,
                                    out_mb});
            }
          }
          double tail = profile.storage_delay_s +
                        static_cast<double>(blocks) * model.token_out_mb / bs;
          phases.push_back({EventKind::StorageUpload, tail,
                            static_cast<double>(blocks) * model.token_out_mb,
                            invoke_s + head_dur + static_cast<double>(charged) * wall + tail});
          break;
        }
        case Method::PlainIndirect: {
          double in_mb = static_cast<double>(r) * model.token_in_mb;
          double out_mb = static_cast<double>(r) * model.token_out_mb;
          phases.push_back({EventKind::StorageDownload,
                            profile.storage_delay_s + in_mb / bs, in_mb, upload_ready_s});
          phases.push_back({EventKind::Compute, static_cast<double>(r) * unit, 0, 0});
          phases.push_back({EventKind::StorageUpload,
                            profile.storage_delay_s + out_mb / bs, out_mb, 0});
          break;
        }
        case Method::Direct: {
          double out_mb = static_cast<double>(r) * model.token_out_mb;
          phases.push_back({EventKind::Compute, static_cast<double>(r) * unit, 0, 0});
          phases.push_back({EventKind::DirectTransfer, out_mb / bf, out_mb, 0});
          break;
        }
      }

      double mem_mb = profile.memory_mb[static_cast<std::size_t>(es.memory_index)];
      double need_mb = replica_memory_mb(model, e, i, r);
      if (need_mb > mem_mb) {
        es.memory_overflow = true;
        report.any_memory_overflow = true;
        if (trace != nullptr) {
          trace->push_back({invoke_s, 0, EventKind::MemoryOverflow, e, i, 0, need_mb});
        }
      }

      double residency = 0;
      for (int rep = 0; rep < es.replicas; ++rep) {
        residency = detail::run_phases(trace, phases, invoke_s, e, i, rep);
      }
      if (trace != nullptr) {
        trace->insert(trace->end(), overlapped.begin(), overlapped.end());
      }
      es.t_rep_s = residency;
      double billed = billed_seconds(profile, residency);
      es.cost_gbs = static_cast<double>(es.replicas) * billed * (mem_mb / 1024.0);
      lr.cost_gbs += es.cost_gbs;
      report.invocations += es.replicas;
      stage_s = std::max(stage_s, residency);
    }
    lr.stage_s = stage_s;

    double t_load = model.next_load_s[static_cast<std::size_t>(e)];
    if (lr.used_method == Method::Direct) {
      // Results invoke the next layer directly, so its parameter load starts
      // only after the slowest expert has finished transferring.
      double last_end = invoke_s + stage_s;
      if (trace != nullptr) {
        trace->push_back({last_end, t_load, EventKind::NextModelLoad, e, -1, -1, 0});
      }
      lr.gather_s = t_load;
      lr.latency_s = scatter_s + stage_s + t_load;
    } else {
      // The next layer loads its parameters while the experts run, then
      // drains every expert's results from storage in one pass.
      long long total = layer_tokens;
      double gather = profile.storage_delay_s +
                      static_cast<double>(total) * model.token_out_mb / bs;
      double barrier = clock + std::max(stage_s, t_load);
      if (trace != nullptr) {
        trace->push_back({clock, t_load, EventKind::NextModelLoad, e, -1, -1, 0});
        trace->push_back({barrier, gather, EventKind::Gather, e, -1, -1,
                          static_cast<double>(total) * model.token_out_mb});
      }
      lr.gather_s = gather;
      lr.latency_s = std::max(stage_s, t_load) + gather;
    }
    report.cost_gbs += lr.cost_gbs;
    clock = lr.start_s + lr.latency_s;
  }
  clock += model.tail_s;
  report.e2e_latency_s = clock;
  report.batch_tokens = opts.batch_tokens > 0 ? opts.batch_tokens : max_layer_tokens;
  if (report.e2e_latency_s > 0) {
    report.throughput_tps = static_cast<double>(report.batch_tokens) / report.e2e_latency_s;
  }
  // Trace entries are appended per function; present them on a single
  // timeline. The sort is stable so simultaneous events keep a fixed order.
  std::stable_sort(report.events.begin(), report.events.end(),
                   [](const SimEvent& a, const SimEvent& b) { return a.t_s < b.t_s; });
  return report;
}

// Mismatch feedback for the tuning loop: an expert whose padded replica count
// was wrong by more than `margin` shares is classified by what the simulation
// actually observed.
enum class FeedbackCase { MemoryOverflow, PayloadOverflow, MispredictOnly };

inline const char* feedback_case_name(FeedbackCase c) {
  switch (c) {
    case FeedbackCase::MemoryOverflow: return "memory_overflow";
    case FeedbackCase::PayloadOverflow: return "payload_overflow";
    case FeedbackCase::MispredictOnly: return "mispredict_only";
  }
  return "unknown";
}

struct FeedbackEvent {
  int layer = -1;
  int expert = -1;
  FeedbackCase kind = FeedbackCase::MispredictOnly;
  long long predicted_tokens = 0;
  long long actual_tokens = 0;
  int replicas_needed = 1;  // floor for the next plan's replica count
};

inline std::vector<FeedbackEvent> measure_feedback(const SimReport& report,
                                                   const ExpertDemand& predicted,
                                                   const DeploymentPlan& plan,
                                                   const ModelSpec& model,
                                                   const PlatformProfile& profile,
                                                   long long margin) {
  predicted.validate(model);
  std::vector<FeedbackEvent> out;
  for (int e = 0; e < model.num_layers; ++e) {
    const LayerReport& lr = report.layers[static_cast<std::size_t>(e)];
    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    for (int i = 0; i < n; ++i) {
      const ExpertSim& es = lr.experts[static_cast<std::size_t>(i)];
      const ExpertAssignment& a = plan.assign[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      long long d_hat = predicted.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
      long long share_hat = d_hat > 0 ? tokens_per_replica(d_hat, a.replicas) : 0;
      long long share_real = es.tokens > 0 ? tokens_per_replica(es.tokens, a.replicas) : 0;
      if (std::llabs(share_hat - share_real) <= margin) continue;
      FeedbackEvent ev;
      ev.layer = e;
      ev.expert = i;
      ev.predicted_tokens = d_hat;
      ev.actual_tokens = es.tokens;
      if (es.memory_overflow) {
        ev.kind = FeedbackCase::MemoryOverflow;
        double need = replica_memory_mb(model, e, i, es.replica_load);
        double have = profile.memory_mb[static_cast<std::size_t>(a.memory_index)];
        ev.replicas_needed = static_cast<int>(std::ceil(need / have - 1e-12));
      } else if (es.payload_reject) {
        ev.kind = FeedbackCase::PayloadOverflow;
        double total_in = static_cast<double>(es.tokens) * model.token_in_mb;
        ev.replicas_needed =
            static_cast<int>(std::ceil(total_in / profile.payload_limit_mb - 1e-12));
      } else {
        ev.kind = FeedbackCase::MispredictOnly;
        ev.replicas_needed = 1;
      }
      ev.replicas_needed = std::max(1, ev.replicas_needed);
      out.push_back(ev);
    }
  }
  return out;
}

inline void write_event_csv(std::ostream& out, const std::vector<SimEvent>& events,
                            const std::vector<std::string>& comments = {}) {
  CsvWriter csv(out);
  for (const auto& c : comments) csv.comment(c);
  csv.row({"t_s", "kind", "layer", "expert", "replica", "bytes_mb", "duration_s"});
  for (const auto& ev : events) {
    csv.row({format_double(ev.t_s), event_kind_name(ev.kind), std::to_string(ev.layer),
             std::to_string(ev.expert), std::to_string(ev.replica), format_double(ev.bytes_mb),
             format_double(ev.duration_s)});
  }
}

}  // namespace moeplan
