// Closed-loop tuning of the routing-count table against simulated billed
// cost. Each iteration overwrites Q addressed key-value pairs, re-predicts
// per-expert demand, re-plans the deployment, and replays the serving batches
// on the simulator. Exploration follows a per-dimension epsilon-greedy rule:
// dimension q keeps the best pair seen so far with probability 1 - eps_q and
// samples a fresh pair otherwise. The epsilon vector decays as eps0/(1+rho*t)
// but the first slow_fraction*Q dimensions are re-inflated by (1+rho'*t)
// whenever the simulation contradicts the plan, with rho' graded by severity:
// memory overflow > payload overflow > a bare mispredict. Overflow events
// also emit replica floors that the next iteration's solve must honour. The
// loop stops once the running minimum cost has moved less than
// stop_tolerance over stop_window consecutive iterations.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "moeplan/config.hpp"
#include "moeplan/core.hpp"
#include "moeplan/csv.hpp"
#include "moeplan/feature_table.hpp"
#include "moeplan/planner.hpp"
#include "moeplan/predictor.hpp"
#include "moeplan/rng.hpp"
#include "moeplan/simulator.hpp"
#include "moeplan/workload.hpp"

namespace moeplan {

struct TunerConfig {
  long long pairs = 1000;             // Q: addressed key-value pairs
  double slow_fraction = 0.5;         // share of dimensions with slowed decay
  long long mispredict_margin = 2;    // per-replica token-share slack
  double decay_rate = 0.5;            // rho
  double feedback_memory = 0.25;      // rho' on memory overflow
  double feedback_payload = 0.15;     // rho' on payload overflow
  double feedback_mispredict = 0.05;  // rho' on a bare mispredict
  int stop_window = 5;                // plateau length required to stop
  double stop_tolerance = 0.01;       // plateau depth (GB-seconds)
  double epsilon0 = 0.0115;           // base exploration probability
  int max_iterations = 100;
  long long fresh_value_max = 10;     // value range for never-seen keys
  bool feedback_per_event = false;    // re-inflate once per event, not per iteration

  void validate() const {
    if (pairs < 1) throw std::invalid_argument("pairs must be positive");
    if (!(slow_fraction > 0 && slow_fraction < 1)) {
      throw std::invalid_argument("slow_fraction must be in (0, 1)");
    }
    if (mispredict_margin < 0) throw std::invalid_argument("mispredict_margin must be >= 0");
    if (!(decay_rate > feedback_memory && feedback_memory > feedback_payload &&
          feedback_payload > feedback_mispredict && feedback_mispredict > 0)) {
      throw std::invalid_argument(
          "feedback rates must satisfy decay_rate > memory > payload > mispredict > 0");
    }
    if (stop_window < 1) throw std::invalid_argument("stop_window must be positive");
    if (stop_tolerance < 0) throw std::invalid_argument("stop_tolerance must be >= 0");
    if (!(epsilon0 >= 0 && epsilon0 <= 1)) {
      throw std::invalid_argument("epsilon0 must be in [0, 1]");
    }
    if (max_iterations < 1) throw std::invalid_argument("max_iterations must be positive");
    if (fresh_value_max < 1) throw std::invalid_argument("fresh_value_max must be positive");
  }
};

inline TunerConfig load_tuner(const Config& cfg) {
  cfg.require_known_keys(
      "tuner", {"pairs", "slow_fraction", "mispredict_margin", "decay_rate", "feedback_memory",
                "feedback_payload", "feedback_mispredict", "stop_window", "stop_tolerance",
                "epsilon0", "max_iterations", "fresh_value_max", "feedback_per_event"});
  TunerConfig t;
  t.pairs = cfg.get_int("tuner.pairs", t.pairs);
  t.slow_fraction = cfg.get_double("tuner.slow_fraction", t.slow_fraction);
  t.mispredict_margin = cfg.get_int("tuner.mispredict_margin", t.mispredict_margin);
  t.decay_rate = cfg.get_double("tuner.decay_rate", t.decay_rate);
  t.feedback_memory = cfg.get_double("tuner.feedback_memory", t.feedback_memory);
  t.feedback_payload = cfg.get_double("tuner.feedback_payload", t.feedback_payload);
  t.feedback_mispredict = cfg.get_double("tuner.feedback_mispredict", t.feedback_mispredict);
  t.stop_window = static_cast<int>(cfg.get_int("tuner.stop_window", t.stop_window));
  t.stop_tolerance = cfg.get_double("tuner.stop_tolerance", t.stop_tolerance);
  t.epsilon0 = cfg.get_double("tuner.epsilon0", t.epsilon0);
  t.max_iterations = static_cast<int>(cfg.get_int("tuner.max_iterations", t.max_iterations));
  t.fresh_value_max = cfg.get_int("tuner.fresh_value_max", t.fresh_value_max);
  t.feedback_per_event = cfg.get_int("tuner.feedback_per_event", 0) != 0;
  t.validate();
  return t;
}

// Base exploration probability after t iterations of decay.
inline double decayed_epsilon(double epsilon0, double rho, int tau) {
  return epsilon0 / (1.0 + rho * static_cast<double>(tau));
}

// Re-inflation applied to the slow block when feedback fires at iteration t.
inline double boosted_epsilon(double epsilon, double rho_prime, int tau) {
  return epsilon * (1.0 + rho_prime * static_cast<double>(tau));
}

// Upper envelope of the slow block under the worst feedback pattern: the
// largest re-inflation firing every iteration. Strictly decreasing in t and
// the quantity the convergence bound is stated about.
inline double worst_case_epsilon(double epsilon0_max, double rho, double rho1, int tau) {
  return epsilon0_max * (1.0 + rho1 * static_cast<double>(tau)) /
         (1.0 + rho * static_cast<double>(tau));
}

// Iteration index after which the worst-case envelope stays below delta.
inline double convergence_bound(double rho, double rho1, double epsilon0_max, double delta) {
  if (!(rho > rho1)) throw std::invalid_argument("decay rate must exceed the feedback rate");
  if (!(epsilon0_max > 0)) throw std::invalid_argument("epsilon0 must be positive");
  if (!(delta > 0 && delta <= epsilon0_max)) {
    throw std::invalid_argument("delta must be in (0, max epsilon0]");
  }
  return (1.0 + rho) / (rho - rho1) * (1.0 - delta / epsilon0_max);
}

struct FeedbackCounts {
  int memory = 0;
  int payload = 0;
  int mispredict = 0;
};

struct IterationRecord {
  int iteration = 0;        // 1-based
  double cost_gbs = 0;      // mean simulated cost over the serving batches
  double min_cost_gbs = 0;  // best cost seen up to this iteration
  double max_epsilon = 0;   // largest per-dimension epsilon after feedback
  FeedbackCounts feedback;
  int floored_experts = 0;  // replica directives handed to the next solve
};

struct TuneResult {
  std::vector<std::pair<FeatureKey, long long>> best_pairs;
  FeatureTable best_table{1};          // table state the best trial evaluated
  DeploymentPlan best_plan;
  ExpertDemand best_planning_demand;   // demand the best plan was solved for
  double best_cost_gbs = std::numeric_limits<double>::infinity();
  int best_iteration = 0;              // 0 when no trial produced a plan
  std::vector<IterationRecord> trace;
  int iterations = 0;
  bool converged = false;              // plateau rule fired before the cap
};

namespace tuner_detail {

constexpr std::uint64_t kStreamProposal = 0x90;

// Key sampling ranges for exploration. limited_f1 holds the distinct token
// ids of batches that produced feedback this iteration; when non-empty the
// slow block draws its token-id fields from it instead of the full range.
struct KeyPools {
  std::vector<int> limited_f1;
  int vocab = 1;    // exclusive upper bound for f1 and f3
  int seq_len = 1;  // exclusive upper bound for f2
};

inline FeatureKey sample_key(Rng& rng, const KeyPools& pools, bool limited,
                             const ModelSpec& model) {
  FeatureKey key;
  if (limited) {
    key.f1 = pools.limited_f1[rng.below(pools.limited_f1.size())];
    key.f3 = pools.limited_f1[rng.below(pools.limited_f1.size())];
  } else {
    key.f1 = static_cast<int>(rng.below(static_cast<std::uint64_t>(pools.vocab)));
    key.f3 = static_cast<int>(rng.below(static_cast<std::uint64_t>(pools.vocab)));
  }
  key.f2 = static_cast<int>(rng.below(static_cast<std::uint64_t>(pools.seq_len)));
  key.layer = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.num_layers)));
  key.expert = static_cast<int>(rng.below(
      static_cast<std::uint64_t>(model.experts_per_layer[static_cast<std::size_t>(key.layer)])));
  return key;
}

struct Proposal {
  std::vector<std::pair<FeatureKey, long long>> pairs;
  int explored = 0;
};

// One acquisition step: per dimension keep the best pair with probability
// 1 - eps, otherwise sample a fresh key and a value near its current count.
inline Proposal propose_pairs(Rng& rng,
                              const std::vector<std::pair<FeatureKey, long long>>& best,
                              const FeatureTable& table, double eps_slow, double eps_fast,
                              std::size_t slow_count, const KeyPools& pools,
                              long long fresh_value_max, const ModelSpec& model) {
  Proposal out;
  out.pairs.reserve(best.size());
  for (std::size_t q = 0; q < best.size(); ++q) {
    double eps = std::min(q < slow_count ? eps_slow : eps_fast, 1.0);
    if (rng.uniform() < eps) {
      bool limited = q < slow_count && !pools.limited_f1.empty();
      FeatureKey key = sample_key(rng, pools, limited, model);
      long long current = table.count(key);
      long long hi = current > 0 ? 2 * current : fresh_value_max;
      long long value = 1 + static_cast<long long>(rng.below(static_cast<std::uint64_t>(hi)));
      out.pairs.emplace_back(key, value);
      ++out.explored;
    } else {
      out.pairs.push_back(best[q]);
    }
  }
  return out;
}

struct Trial {
  std::vector<std::pair<FeatureKey, long long>> pairs;
  double cost_gbs = 0;
};

}  // namespace tuner_detail

// Runs the tuning loop against the workload's serving batches. top_k is the
// per-token expert count used for demand prediction and must match the
// routing that produced the feature table. vocab/seq_len bound the fresh-key
// ranges; 0 derives them from the workload itself.
inline TuneResult tune(const PlatformProfile& profile, const ModelSpec& model,
                       const Workload& workload, const FeatureTable& initial_table,
                       int top_k, const TunerConfig& tcfg, std::uint64_t seed,
                       const SolveOptions& solve_opts = {},
                       WorstLayerRule rule = WorstLayerRule::HighestLatency, int vocab = 0,
                       int seq_len = 0) {
  tcfg.validate();
  profile.validate();
  model.validate();
  if (workload.batches.empty()) {
    throw std::invalid_argument("workload has no serving batches");
  }

  tuner_detail::KeyPools pools;
  pools.vocab = vocab;
  pools.seq_len = seq_len;
  if (pools.vocab <= 0 || pools.seq_len <= 0) {
    int max_id = 0;
    int max_pos = 0;
    auto scan = [&](const RoutedBatch& b) {
      for (const auto& tok : b.tokens) {
        max_id = std::max(max_id, tok.f1);
        for (int f3 : tok.f3) max_id = std::max(max_id, f3);
        max_pos = std::max(max_pos, tok.position);
      }
    };
    for (const auto& b : workload.profile_records) scan(b);
    for (const auto& b : workload.batches) scan(b);
    if (pools.vocab <= 0) pools.vocab = max_id + 1;
    if (pools.seq_len <= 0) pools.seq_len = max_pos + 1;
  }

  FeatureTable table = initial_table;
  std::size_t q_eff =
      std::min(static_cast<std::size_t>(tcfg.pairs), table.size());
  std::size_t slow_count =
      std::min(static_cast<std::size_t>(tcfg.slow_fraction * static_cast<double>(tcfg.pairs)),
               q_eff);

  // The first trial re-writes the highest-count entries with their current
  // values, so iteration 1 evaluates the unmodified table.
  std::vector<std::pair<FeatureKey, long long>> current_pairs;
  current_pairs.reserve(q_eff);
  for (const FeatureKey& key : table.top_keys(q_eff)) {
    current_pairs.emplace_back(key, table.count(key));
  }

  // Per-batch token ids and ground-truth demand never change across
  // iterations; cache them.
  std::size_t num_batches = workload.batches.size();
  std::vector<std::vector<int>> batch_ids(num_batches);
  std::vector<NewBatchStats> batch_stats(num_batches);
  std::vector<ExpertDemand> batch_truth(num_batches);
  for (std::size_t j = 0; j < num_batches; ++j) {
    batch_ids[j] = workload.batches[j].token_ids();
    batch_stats[j] = NewBatchStats::from_tokens(batch_ids[j], pools.seq_len);
    batch_truth[j] = demand_from_routing(workload.batches[j], model);
  }

  TuneResult result;
  result.best_table = table;
  std::vector<tuner_detail::Trial> history;
  std::vector<double> min_costs;
  std::vector<std::vector<int>> floors;  // directives for the next iteration
  constexpr double kInf = std::numeric_limits<double>::infinity();

  for (int tau = 1; tau <= tcfg.max_iterations; ++tau) {
    double eps_fast = decayed_epsilon(tcfg.epsilon0, tcfg.decay_rate, tau);
    double eps_slow = eps_fast;

    for (const auto& [key, value] : current_pairs) table.set(key, value);

    // One deployment per iteration, solved for the rounded-up mean of the
    // per-batch predicted demands.
    std::vector<ExpertDemand> predicted;
    predicted.reserve(num_batches);
    for (std::size_t j = 0; j < num_batches; ++j) {
      predicted.push_back(predict_demand(table, batch_ids[j], batch_stats[j], model, top_k));
    }
    ExpertDemand planning = ceil_mean_demand(predicted);

    SolveOptions opts = solve_opts;
    if (!floors.empty()) {
      if (opts.min_replicas.empty()) {
        opts.min_replicas = floors;
      } else {
        for (std::size_t e = 0; e < floors.size(); ++e) {
          for (std::size_t i = 0; i < floors[e].size(); ++i) {
            opts.min_replicas[e][i] = std::max(opts.min_replicas[e][i], floors[e][i]);
          }
        }
      }
    }
    floors.clear();

    IterationRecord rec;
    rec.iteration = tau;
    std::set<int> limited_ids;
    double cost = kInf;
    bool planned = false;
    OdsResult planned_result;
    try {
      planned_result = ods(profile, model, planning, opts, rule);
      planned = true;
    } catch (const NoPlanError&) {
      // Trial counts as infinitely expensive; the loop keeps exploring.
    }

    double rho_prime_max = 0;
    if (planned) {
      double cost_sum = 0;
      std::vector<std::vector<int>> next_floors(
          static_cast<std::size_t>(model.num_layers));
      for (int e = 0; e < model.num_layers; ++e) {
        next_floors[static_cast<std::size_t>(e)].assign(
            static_cast<std::size_t>(model.experts_per_layer[static_cast<std::size_t>(e)]), 0);
      }
      for (std::size_t j = 0; j < num_batches; ++j) {
        SimOptions sim_opts;
        sim_opts.cost = opts.cost;
        sim_opts.batch_tokens = static_cast<long long>(workload.batches[j].tokens.size());
        SimReport report =
            simulate(profile, model, planned_result.plan, batch_truth[j], sim_opts);
        cost_sum += report.cost_gbs;
        auto events = measure_feedback(report, planning, planned_result.plan, model, profile,
                                       tcfg.mispredict_margin);
        if (!events.empty()) {
          for (int f1 : batch_ids[j]) limited_ids.insert(f1);
        }
        for (const auto& ev : events) {
          double rho_prime = 0;
          switch (ev.kind) {
            case FeedbackCase::MemoryOverflow:
              rho_prime = tcfg.feedback_memory;
              ++rec.feedback.memory;
              break;
            case FeedbackCase::PayloadOverflow:
              rho_prime = tcfg.feedback_payload;
              ++rec.feedback.payload;
              break;
            case FeedbackCase::MispredictOnly:
              rho_prime = tcfg.feedback_mispredict;
              ++rec.feedback.mispredict;
              break;
          }
          if (tcfg.feedback_per_event) {
            eps_slow = std::min(boosted_epsilon(eps_slow, rho_prime, tau), 1.0);
          } else {
            rho_prime_max = std::max(rho_prime_max, rho_prime);
          }
          if (ev.replicas_needed > 1) {
            int& slot = next_floors[static_cast<std::size_t>(ev.layer)]
                                   [static_cast<std::size_t>(ev.expert)];
            slot = std::max(slot, ev.replicas_needed);
          }
        }
      }
      cost = cost_sum / static_cast<double>(num_batches);
      for (const auto& layer : next_floors) {
        for (int g : layer) rec.floored_experts += g > 1 ? 1 : 0;
      }
      if (rec.floored_experts > 0) floors = std::move(next_floors);
    }
    if (!tcfg.feedback_per_event && rho_prime_max > 0) {
      eps_slow = std::min(boosted_epsilon(eps_slow, rho_prime_max, tau), 1.0);
    }

    history.push_back({current_pairs, cost});
    double running_min = min_costs.empty() ? cost : std::min(min_costs.back(), cost);
    min_costs.push_back(running_min);
    rec.cost_gbs = cost;
    rec.min_cost_gbs = running_min;
    rec.max_epsilon = std::max(eps_slow, eps_fast);
    result.trace.push_back(rec);
    result.iterations = tau;

    if (cost < result.best_cost_gbs) {
      result.best_cost_gbs = cost;
      result.best_iteration = tau;
      result.best_pairs = current_pairs;
      result.best_table = table;
      result.best_plan = planned_result.plan;
      result.best_planning_demand = planning;
    }

    if (tau > tcfg.stop_window) {
      double prev = min_costs[static_cast<std::size_t>(tau - 1 - tcfg.stop_window)];
      double change =
          std::isinf(prev) && std::isinf(running_min) ? 0.0 : prev - running_min;
      if (change < tcfg.stop_tolerance) {
        result.converged = true;
        break;
      }
    }

    // Acquire the next iteration's pairs with the post-feedback epsilons.
    std::size_t best_idx = 0;
    for (std::size_t t = 1; t < history.size(); ++t) {
      if (history[t].cost_gbs < history[best_idx].cost_gbs) best_idx = t;
    }
    pools.limited_f1.assign(limited_ids.begin(), limited_ids.end());
    Rng rng(mix_seed(mix_seed(seed, tuner_detail::kStreamProposal),
                     static_cast<std::uint64_t>(tau)));
    current_pairs = tuner_detail::propose_pairs(rng, history[best_idx].pairs, table, eps_slow,
                                                eps_fast, slow_count, pools,
                                                tcfg.fresh_value_max, model)
                        .pairs;
  }
  return result;
}

inline void write_trace_csv(std::ostream& out, const std::vector<IterationRecord>& trace,
                            const std::vector<std::string>& comments = {}) {
  CsvWriter w(out);
  for (const auto& c : comments) w.comment(c);
  w.row({"iteration", "cost_gbs", "min_cost_gbs", "max_epsilon", "memory_cases",
         "payload_cases", "mispredict_cases"});
  for (const auto& r : trace) {
    w.row({std::to_string(r.iteration), format_double(r.cost_gbs),
           format_double(r.min_cost_gbs), format_double(r.max_epsilon),
           std::to_string(r.feedback.memory), std::to_string(r.feedback.payload),
           std::to_string(r.feedback.mispredict)});
  }
}

}  // namespace moeplan
