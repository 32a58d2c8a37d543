// moeplan — command line front end for the deployment planning toolkit.
//
// Subcommands:
//   profile   generate a synthetic workload and write its profiled co-occurrence table
//   plan      predict per-expert demand and solve for a deployment plan
//   simulate  replay a plan against the serving batches on the platform simulator
//   tune      run the online table tuner and report the best trial
//   compare   cost four planning strategies on the same serving traffic
//
// Every output file embeds the hash of the input config files and the seed so
// runs are attributable and byte-reproducible.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moeplan/moeplan.hpp"

namespace {

using namespace moeplan;

struct CommonArgs {
  std::string profile_path;
  std::string model_path;
  std::string workload_path;
  std::string plan_path;
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  int top_k = 0;  // 0: use the workload's routing fan-out
  int beta_max = 0;
  double time_budget_s = 0;
  std::string block_multiplier = "block-count";
  std::string payload_rule = "forbid-oversized";
  std::string worst_layer_rule = "highest-latency";
  bool emit_trace = false;
};

struct Inputs {
  PlatformProfile profile;
  ModelSpec model;
  WorkloadConfig workload;
  Config workload_cfg;  // retained: the tuner section lives in the same file
  std::string config_hash;
};

Config read_config(const std::string& path) {
  Config cfg;
  cfg.parse_file(path);
  return cfg;
}

Inputs load_inputs(const CommonArgs& args, bool need_workload) {
  Inputs in;
  in.profile = load_platform(read_config(args.profile_path));
  in.model = load_model(read_config(args.model_path));
  std::vector<std::string> hashed = {args.profile_path, args.model_path};
  if (need_workload) {
    in.workload_cfg = read_config(args.workload_path);
    in.workload = load_workload(in.workload_cfg);
    hashed.push_back(args.workload_path);
  }
  in.config_hash = hash_hex(hash_files(hashed));
  return in;
}

std::vector<std::string> run_comments(const Inputs& in, const CommonArgs& args) {
  return {"config_hash " + in.config_hash, "seed " + std::to_string(args.seed)};
}

CostModelOptions cost_options(const CommonArgs& args) {
  CostModelOptions opts;
  if (args.block_multiplier == "block-count") {
    opts.block_multiplier = BlockMultiplier::BlockCount;
  } else if (args.block_multiplier == "pipeline-degree") {
    opts.block_multiplier = BlockMultiplier::PipelineDegree;
  } else {
    throw std::invalid_argument("--block-multiplier must be block-count or pipeline-degree");
  }
  if (args.payload_rule == "forbid-oversized") {
    opts.payload_rule = PayloadRule::ForbidOversized;
  } else if (args.payload_rule == "printed-algebraic") {
    opts.payload_rule = PayloadRule::PrintedAlgebraic;
  } else {
    throw std::invalid_argument("--payload-rule must be forbid-oversized or printed-algebraic");
  }
  return opts;
}

SolveOptions solve_options(const CommonArgs& args) {
  SolveOptions opts;
  opts.beta_max = args.beta_max;
  opts.time_budget_s = args.time_budget_s;
  opts.cost = cost_options(args);
  return opts;
}

WorstLayerRule layer_rule(const CommonArgs& args) {
  if (args.worst_layer_rule == "highest-latency") return WorstLayerRule::HighestLatency;
  if (args.worst_layer_rule == "lowest-latency") return WorstLayerRule::LowestLatency;
  throw std::invalid_argument("--worst-layer-rule must be highest-latency or lowest-latency");
}

int effective_top_k(const CommonArgs& args, const WorkloadConfig& w) {
  return args.top_k > 0 ? args.top_k : w.top_k;
}

std::filesystem::path out_file(const CommonArgs& args, const std::string& name) {
  std::filesystem::create_directories(args.out_dir);
  return std::filesystem::path(args.out_dir) / name;
}

void write_text_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << body;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void announce(const std::filesystem::path& path) {
  std::cout << "wrote " << path.string() << "\n";
}

// Per-batch predicted demand for the serving traffic, reduced to the single
// demand one deployment is solved for.
ExpertDemand planning_demand(const FeatureTable& table, const Workload& workload,
                             const ModelSpec& model, int k, int seq_len) {
  std::vector<ExpertDemand> parts;
  parts.reserve(workload.batches.size());
  for (const auto& batch : workload.batches) {
    std::vector<int> ids = batch.token_ids();
    NewBatchStats stats = NewBatchStats::from_tokens(ids, seq_len);
    parts.push_back(predict_demand(table, ids, stats, model, k));
  }
  return ceil_mean_demand(parts);
}

// Mean true demand of the serving batches, rounded up per expert.
ExpertDemand true_planning_demand(const Workload& workload, const ModelSpec& model) {
  std::vector<ExpertDemand> parts;
  parts.reserve(workload.batches.size());
  for (const auto& batch : workload.batches) parts.push_back(demand_from_routing(batch, model));
  return ceil_mean_demand(parts);
}

void write_plan_file(const std::filesystem::path& path, const DeploymentPlan& plan,
                     const Inputs& in, const CommonArgs& args) {
  std::ostringstream body;
  write_plan(body, plan, in.profile, in.model, run_comments(in, args));
  write_text_file(path, body.str());
  announce(path);
}

// --- profile ----------------------------------------------------------------

int cmd_profile(const CommonArgs& args) {
  Inputs in = load_inputs(args, true);
  Workload workload = generate_workload(in.workload, in.model, args.seed);
  FeatureTable table = build_profile_table(workload, in.model);
  std::ostringstream body;
  table.write_csv(body, run_comments(in, args));
  auto path = out_file(args, "table.csv");
  write_text_file(path, body.str());
  announce(path);
  std::cout << "profiled_sequences " << in.workload.profile_sequences << "\n";
  std::cout << "distinct_keys " << table.size() << "\n";
  return 0;
}

// --- plan -------------------------------------------------------------------

int cmd_plan(const CommonArgs& args) {
  Inputs in = load_inputs(args, true);
  Workload workload = generate_workload(in.workload, in.model, args.seed);
  FeatureTable table = build_profile_table(workload, in.model);
  ExpertDemand demand =
      planning_demand(table, workload, in.model, effective_top_k(args, in.workload),
                      in.workload.seq_len);
  OdsResult result = ods(in.profile, in.model, demand, solve_options(args), layer_rule(args));

  write_plan_file(out_file(args, "plan.txt"), result.plan, in, args);

  std::ostringstream body;
  CsvWriter csv(body);
  for (const auto& c : run_comments(in, args)) csv.comment(c);
  csv.comment("total_cost_gbs " + format_double(result.cost_gbs));
  csv.comment("e2e_latency_s " + format_double(result.e2e_s));
  csv.comment("pipeline_degree " + std::to_string(result.plan.pipeline_degree));
  csv.comment("uniform_fallback " + std::to_string(result.uniform_fallback ? 1 : 0));
  csv.comment("elimination_rounds " + std::to_string(result.iterations));
  csv.row({"layer", "method", "expert", "memory_mb", "replicas", "cost_gbs", "latency_s"});
  for (int e = 0; e < in.model.num_layers; ++e) {
    const auto le = static_cast<std::size_t>(e);
    for (int i = 0; i < in.model.experts_per_layer[le]; ++i) {
      const ExpertAssignment& a = result.plan.assign[le][static_cast<std::size_t>(i)];
      csv.row({std::to_string(e), std::to_string(method_to_int(result.plan.method[le])),
               std::to_string(i),
               format_double(in.profile.memory_mb[static_cast<std::size_t>(a.memory_index)]),
               std::to_string(a.replicas), format_double(result.layer_cost_gbs[le]),
               format_double(result.layer_latency_s[le])});
    }
  }
  auto path = out_file(args, "cost_report.csv");
  write_text_file(path, body.str());
  announce(path);
  std::cout << "total_cost_gbs " << format_double(result.cost_gbs) << "\n";
  std::cout << "e2e_latency_s " << format_double(result.e2e_s) << "\n";
  return 0;
}

// --- simulate ---------------------------------------------------------------

int cmd_simulate(const CommonArgs& args) {
  Inputs in = load_inputs(args, true);
  Workload workload = generate_workload(in.workload, in.model, args.seed);
  std::ifstream plan_in(args.plan_path);
  if (!plan_in) throw std::runtime_error("cannot open plan file " + args.plan_path);
  DeploymentPlan plan = read_plan(plan_in, in.profile, in.model);

  std::ostringstream layers_body;
  CsvWriter layers_csv(layers_body);
  for (const auto& c : run_comments(in, args)) layers_csv.comment(c);
  layers_csv.row({"batch", "layer", "planned_method", "used_method", "payload_fallback",
                  "start_s", "latency_s", "stage_s", "gather_s", "cost_gbs"});

  std::ostringstream summary_body;
  CsvWriter summary_csv(summary_body);
  for (const auto& c : run_comments(in, args)) summary_csv.comment(c);
  summary_csv.row({"batch", "cost_gbs", "e2e_latency_s", "throughput_tps", "batch_tokens",
                   "invocations", "any_memory_overflow", "any_payload_fallback"});

  SimOptions sim_opts;
  sim_opts.cost = cost_options(args);
  sim_opts.emit_trace = args.emit_trace;

  double total_cost = 0;
  for (std::size_t j = 0; j < workload.batches.size(); ++j) {
    const RoutedBatch& batch = workload.batches[j];
    ExpertDemand demand = demand_from_routing(batch, in.model);
    sim_opts.batch_tokens = static_cast<long long>(batch.tokens.size());
    SimReport report = simulate(in.profile, in.model, plan, demand, sim_opts);
    total_cost += report.cost_gbs;

    for (int e = 0; e < in.model.num_layers; ++e) {
      const LayerReport& lr = report.layers[static_cast<std::size_t>(e)];
      layers_csv.row({std::to_string(j), std::to_string(e),
                      std::to_string(method_to_int(lr.planned_method)),
                      std::to_string(method_to_int(lr.used_method)),
                      std::to_string(lr.payload_fallback ? 1 : 0), format_double(lr.start_s),
                      format_double(lr.latency_s), format_double(lr.stage_s),
                      format_double(lr.gather_s), format_double(lr.cost_gbs)});
    }
    summary_csv.row({std::to_string(j), format_double(report.cost_gbs),
                     format_double(report.e2e_latency_s), format_double(report.throughput_tps),
                     std::to_string(batch.tokens.size()), std::to_string(report.invocations),
                     std::to_string(report.any_memory_overflow ? 1 : 0),
                     std::to_string(report.any_payload_fallback ? 1 : 0)});

    if (args.emit_trace) {
      std::ostringstream events_body;
      write_event_csv(events_body, report.events, run_comments(in, args));
      auto path = out_file(args, "sim_events_" + std::to_string(j) + ".csv");
      write_text_file(path, events_body.str());
      announce(path);
    }
  }

  auto layers_path = out_file(args, "sim_layers.csv");
  write_text_file(layers_path, layers_body.str());
  announce(layers_path);
  auto summary_path = out_file(args, "sim_summary.csv");
  write_text_file(summary_path, summary_body.str());
  announce(summary_path);
  std::cout << "mean_cost_gbs "
            << format_double(total_cost / static_cast<double>(workload.batches.size())) << "\n";
  return 0;
}

// --- tune -------------------------------------------------------------------

int cmd_tune(const CommonArgs& args) {
  Inputs in = load_inputs(args, true);
  TunerConfig tcfg = load_tuner(in.workload_cfg);
  Workload workload = generate_workload(in.workload, in.model, args.seed);
  FeatureTable table = build_profile_table(workload, in.model);

  TuneResult result =
      tune(in.profile, in.model, workload, table, effective_top_k(args, in.workload), tcfg,
           args.seed, solve_options(args), layer_rule(args), in.workload.vocab,
           in.workload.seq_len);

  std::ostringstream trace_body;
  write_trace_csv(trace_body, result.trace, run_comments(in, args));
  auto trace_path = out_file(args, "trace.csv");
  write_text_file(trace_path, trace_body.str());
  announce(trace_path);

  if (result.best_iteration == 0) {
    std::cout << "no feasible deployment in any trial\n";
    return 3;
  }

  std::ostringstream pairs_body;
  CsvWriter pairs_csv(pairs_body);
  for (const auto& c : run_comments(in, args)) pairs_csv.comment(c);
  pairs_csv.row({"f1", "f2", "f3", "layer", "expert", "count"});
  for (const auto& [key, count] : result.best_pairs) {
    pairs_csv.row({std::to_string(key.f1), std::to_string(key.f2), std::to_string(key.f3),
                   std::to_string(key.layer), std::to_string(key.expert),
                   std::to_string(count)});
  }
  auto pairs_path = out_file(args, "best_pairs.csv");
  write_text_file(pairs_path, pairs_body.str());
  announce(pairs_path);

  write_plan_file(out_file(args, "best_plan.txt"), result.best_plan, in, args);

  std::cout << "best_cost_gbs " << format_double(result.best_cost_gbs) << "\n";
  std::cout << "best_iteration " << result.best_iteration << "\n";
  std::cout << "iterations " << result.iterations << "\n";
  std::cout << "converged " << (result.converged ? 1 : 0) << "\n";
  return 0;
}

// --- compare ----------------------------------------------------------------

// Deployment that never tailors memory: every expert at the largest size on
// the menu, everything else (method, replicas, degree) still planned. Solved
// by running the planner on a menu truncated to its top entry, then mapping
// the single surviving index back to the full menu. Feasible whenever the
// unrestricted planner is: raising an expert's memory never hurts any
// constraint.
DeploymentPlan over_provisioned_plan(const PlatformProfile& profile, const ModelSpec& model,
                                     const ExpertDemand& demand, const SolveOptions& opts,
                                     WorstLayerRule rule) {
  PlatformProfile capped = profile;
  capped.memory_mb = {profile.memory_mb.back()};
  capped.unit_compute_s = {profile.unit_compute_s.back()};
  OdsResult result = ods(capped, model, demand, opts, rule);
  int top = static_cast<int>(profile.memory_mb.size()) - 1;
  for (auto& layer : result.plan.assign) {
    for (ExpertAssignment& a : layer) a.memory_index = top;
  }
  return result.plan;
}

struct ScenarioResult {
  std::string name;
  DeploymentPlan plan;
  double cost_gbs = 0;
  double e2e_s = 0;
};

ScenarioResult run_scenario(const std::string& name, const DeploymentPlan& plan,
                            const Inputs& in, const Workload& workload,
                            const CostModelOptions& opts) {
  ScenarioResult r;
  r.name = name;
  r.plan = plan;
  SimOptions sim_opts;
  sim_opts.cost = opts;
  double cost = 0, e2e = 0;
  for (const auto& batch : workload.batches) {
    ExpertDemand demand = demand_from_routing(batch, in.model);
    sim_opts.batch_tokens = static_cast<long long>(batch.tokens.size());
    SimReport report = simulate(in.profile, in.model, plan, demand, sim_opts);
    cost += report.cost_gbs;
    e2e += report.e2e_latency_s;
  }
  double n = static_cast<double>(workload.batches.size());
  r.cost_gbs = cost / n;
  r.e2e_s = e2e / n;
  return r;
}

int cmd_compare(const CommonArgs& args) {
  Inputs in = load_inputs(args, true);
  TunerConfig tcfg = load_tuner(in.workload_cfg);
  Workload workload = generate_workload(in.workload, in.model, args.seed);
  FeatureTable table = build_profile_table(workload, in.model);
  int k = effective_top_k(args, in.workload);
  SolveOptions opts = solve_options(args);
  WorstLayerRule rule = layer_rule(args);

  TuneResult tuned = tune(in.profile, in.model, workload, table, k, tcfg, args.seed, opts,
                          rule, in.workload.vocab, in.workload.seq_len);
  if (tuned.best_iteration == 0) {
    std::cout << "no feasible deployment in any tuning trial\n";
    return 3;
  }

  ExpertDemand true_demand = true_planning_demand(workload, in.model);
  OdsResult oracle = ods(in.profile, in.model, true_demand, opts, rule);

  ExpertDemand profiled =
      planning_demand(table, workload, in.model, k, in.workload.seq_len);
  OdsResult untuned = ods(in.profile, in.model, profiled, opts, rule);

  DeploymentPlan fat = over_provisioned_plan(in.profile, in.model, true_demand, opts, rule);

  std::vector<ScenarioResult> rows = {
      run_scenario("bo_predicted", tuned.best_plan, in, workload, opts.cost),
      run_scenario("true_distribution", oracle.plan, in, workload, opts.cost),
      run_scenario("profiled_predicted", untuned.plan, in, workload, opts.cost),
      run_scenario("over_provisioned", fat, in, workload, opts.cost),
  };

  std::ostringstream body;
  CsvWriter csv(body);
  for (const auto& c : run_comments(in, args)) csv.comment(c);
  csv.row({"scenario", "cost_gbs", "e2e_latency_s", "pipeline_degree", "methods"});
  for (const auto& r : rows) {
    std::string methods;
    for (std::size_t e = 0; e < r.plan.method.size(); ++e) {
      if (e) methods += "|";
      methods += std::to_string(method_to_int(r.plan.method[e]));
    }
    csv.row({r.name, format_double(r.cost_gbs), format_double(r.e2e_s),
             std::to_string(r.plan.pipeline_degree), methods});
    std::cout << r.name << " cost_gbs " << format_double(r.cost_gbs) << "\n";
  }
  auto path = out_file(args, "compare.csv");
  write_text_file(path, body.str());
  announce(path);
  return 0;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool with_plan) {
  cmd->add_option("--profile", args.profile_path, "platform profile config file")->required();
  cmd->add_option("--model", args.model_path, "model spec config file")->required();
  cmd->add_option("--workload", args.workload_path, "workload config file")->required();
  if (with_plan) {
    cmd->add_option("--plan", args.plan_path, "deployment plan file to replay")->required();
  }
  cmd->add_option("--seed", args.seed, "base seed for all random streams");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--k", args.top_k, "experts routed per token (0: workload setting)");
  cmd->add_option("--beta-max", args.beta_max, "cap on pipeline-degree candidates (0: load bound)");
  cmd->add_option("--time-budget-s", args.time_budget_s,
                  "stop refining the degree search after this many seconds (0: off)");
  cmd->add_option("--block-multiplier", args.block_multiplier,
                  "pipelined billing multiplier: block-count or pipeline-degree")
      ->check(CLI::IsMember({"block-count", "pipeline-degree"}));
  cmd->add_option("--payload-rule", args.payload_rule,
                  "direct-method payload screen: forbid-oversized or printed-algebraic")
      ->check(CLI::IsMember({"forbid-oversized", "printed-algebraic"}));
  cmd->add_option("--worst-layer-rule", args.worst_layer_rule,
                  "layer losing its method on a latency miss: highest-latency or lowest-latency")
      ->check(CLI::IsMember({"highest-latency", "lowest-latency"}));
  cmd->add_flag("--emit-trace", args.emit_trace, "write per-batch simulator event logs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Serverless mixture-of-experts deployment planner"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* profile_cmd =
      app.add_subcommand("profile", "generate a workload and write its profiled table");
  CLI::App* plan_cmd = app.add_subcommand("plan", "solve for a deployment plan");
  CLI::App* simulate_cmd =
      app.add_subcommand("simulate", "replay a plan on the platform simulator");
  CLI::App* tune_cmd = app.add_subcommand("tune", "run the online table tuner");
  CLI::App* compare_cmd =
      app.add_subcommand("compare", "cost four planning strategies on the same traffic");
  add_common(profile_cmd, args, false);
  add_common(plan_cmd, args, false);
  add_common(simulate_cmd, args, true);
  add_common(tune_cmd, args, false);
  add_common(compare_cmd, args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (profile_cmd->parsed()) return cmd_profile(args);
    if (plan_cmd->parsed()) return cmd_plan(args);
    if (simulate_cmd->parsed()) return cmd_simulate(args);
    if (tune_cmd->parsed()) return cmd_tune(args);
    if (compare_cmd->parsed()) return cmd_compare(args);
  } catch (const NoPlanError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
