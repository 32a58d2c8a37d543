// Synthetic MoE workload generation. Token ids follow a Zipf(0.8) vocabulary
// prior that each sequence batch perturbs with a log-normal tilt, so batches
// drift away from the profiled mix. Every token carries a per-layer attention
// partner (f3): usually the id of another token in the same batch, with a
// small uniform-vocabulary noise floor. Routing hashes the bucketised
// (token id, partner id) pair per layer through a Zipf rank table and a
// per-layer expert permutation, so expert popularity is skewed, stable for a
// given seed, and genuinely depends on the attention feature.
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "moeplan/config.hpp"
#include "moeplan/core.hpp"
#include "moeplan/csv.hpp"
#include "moeplan/feature_table.hpp"
#include "moeplan/rng.hpp"

namespace moeplan {

struct WorkloadConfig {
  int vocab = 512;
  int seq_len = 128;
  int batch_tokens = 10240;
  double zipf_skew = 1.0;   // expert popularity skew
  int top_k = 1;
  int f1_buckets = 64;
  int f3_buckets = 64;
  double mix_noise = 0.1;   // chance an attention partner is uniform noise
  double batch_tilt = 0.4;  // log-normal sigma applied to vocab weights
  int profile_sequences = 100;
  int num_batches = 4;

  void validate() const {
    if (vocab < 1 || vocab > kMaxTokenId) throw std::invalid_argument("vocab out of range");
    if (seq_len < 1 || seq_len > kMaxPosition) {
      throw std::invalid_argument("seq_len out of range");
    }
    if (batch_tokens < 1) throw std::invalid_argument("batch_tokens must be positive");
    if (zipf_skew < 0) throw std::invalid_argument("zipf_skew must be non-negative");
    if (top_k < 1) throw std::invalid_argument("top_k must be positive");
    if (f1_buckets < 1 || f3_buckets < 1) throw std::invalid_argument("buckets must be positive");
    if (mix_noise < 0 || mix_noise > 1) throw std::invalid_argument("mix_noise must be in [0,1]");
    if (batch_tilt < 0) throw std::invalid_argument("batch_tilt must be non-negative");
    if (profile_sequences < 1) throw std::invalid_argument("profile_sequences must be positive");
    if (num_batches < 1) throw std::invalid_argument("num_batches must be positive");
  }
};

inline WorkloadConfig load_workload(const Config& cfg) {
  cfg.require_known_keys(
      "workload", {"vocab", "seq_len", "batch_tokens", "zipf_skew", "top_k", "f1_buckets",
                   "f3_buckets", "mix_noise", "batch_tilt", "profile_sequences", "num_batches"});
  WorkloadConfig w;
  w.vocab = cfg.get_int("workload.vocab", w.vocab);
  w.seq_len = cfg.get_int("workload.seq_len", w.seq_len);
  w.batch_tokens = cfg.get_int("workload.batch_tokens", w.batch_tokens);
  w.zipf_skew = cfg.get_double("workload.zipf_skew", w.zipf_skew);
  w.top_k = cfg.get_int("workload.top_k", w.top_k);
  w.f1_buckets = cfg.get_int("workload.f1_buckets", w.f1_buckets);
  w.f3_buckets = cfg.get_int("workload.f3_buckets", w.f3_buckets);
  w.mix_noise = cfg.get_double("workload.mix_noise", w.mix_noise);
  w.batch_tilt = cfg.get_double("workload.batch_tilt", w.batch_tilt);
  w.profile_sequences = cfg.get_int("workload.profile_sequences", w.profile_sequences);
  w.num_batches = cfg.get_int("workload.num_batches", w.num_batches);
  w.validate();
  return w;
}

// One token with everything the platform learns about it while serving: its
// id, position, per-layer attention partner, and the experts that layer
// routes it to.
struct RoutedToken {
  int sequence = 0;
  int position = 0;
  int f1 = 0;
  std::vector<int> f3;                    // one per layer
  std::vector<std::vector<int>> experts;  // per layer, top_k entries
};

struct RoutedBatch {
  std::vector<RoutedToken> tokens;

  std::vector<int> token_ids() const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(t.f1);
    return ids;
  }
};

struct Workload {
  std::vector<RoutedBatch> profile_records;  // one batch per profiled sequence
  std::vector<RoutedBatch> batches;          // serving traffic
};

namespace detail {

// Substream tags so every random decision has its own deterministic stream.
constexpr std::uint64_t kStreamPermutation = 0x70;
constexpr std::uint64_t kStreamTilt = 0x71;
constexpr std::uint64_t kStreamTokens = 0x72;
constexpr std::uint64_t kStreamPartners = 0x73;
constexpr std::uint64_t kPhaseProfile = 1;
constexpr std::uint64_t kPhaseServe = 2;

inline std::uint64_t unit_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t phase,
                               std::uint64_t unit) {
  return mix_seed(mix_seed(seed, stream), (phase << 32) | unit);
}

// Stateless hash of a routing tuple to [0, 1).
inline double routing_unit(std::uint64_t seed, int bucket1, int bucket3, int layer) {
  std::uint64_t h = mix_seed(seed, 0x7a);
  h = mix_seed(h, static_cast<std::uint64_t>(bucket1));
  h = mix_seed(h, static_cast<std::uint64_t>(bucket3));
  h = mix_seed(h, static_cast<std::uint64_t>(layer));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline std::uint64_t pair_hash(std::uint64_t seed, int bucket1, int layer) {
  std::uint64_t h = mix_seed(seed, 0x7b);
  h = mix_seed(h, static_cast<std::uint64_t>(bucket1));
  return mix_seed(h, static_cast<std::uint64_t>(layer));
}

// Cumulative distribution over ranks 0..n-1 with weight (rank+1)^-skew.
inline std::vector<double> zipf_cumulative(int n, double skew) {
  std::vector<double> cum(static_cast<std::size_t>(n));
  double total = 0;
  for (int r = 0; r < n; ++r) {
    total += std::pow(static_cast<double>(r + 1), -skew);
    cum[static_cast<std::size_t>(r)] = total;
  }
  for (double& c : cum) c /= total;
  cum.back() = 1.0;  // guard against rounding
  return cum;
}

inline int rank_from_unit(const std::vector<double>& cum, double u) {
  auto it = std::lower_bound(cum.begin(), cum.end(), u,
                             [](double c, double v) { return c <= v; });
  if (it == cum.end()) return static_cast<int>(cum.size()) - 1;
  return static_cast<int>(it - cum.begin());
}

// Per-batch tilted vocabulary distribution as a cumulative table.
inline std::vector<double> tilted_vocab_cumulative(const WorkloadConfig& w, Rng& tilt_rng) {
  std::vector<double> cum(static_cast<std::size_t>(w.vocab));
  double total = 0;
  for (int v = 0; v < w.vocab; ++v) {
    double base = std::pow(static_cast<double>(v + 1), -0.8);
    double tilt = std::exp(w.batch_tilt * tilt_rng.normal());
    total += base * tilt;
    cum[static_cast<std::size_t>(v)] = total;
  }
  for (double& c : cum) c /= total;
  cum.back() = 1.0;
  return cum;
}

inline std::vector<std::vector<int>> layer_permutations(const ModelSpec& model,
                                                        std::uint64_t seed) {
  std::vector<std::vector<int>> perms(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    auto& perm = perms[static_cast<std::size_t>(e)];
    perm.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(mix_seed(seed, kStreamPermutation), static_cast<std::uint64_t>(e)));
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
  }
  return perms;
}

// Routes every token of a batch through every layer.
inline void route_batch(RoutedBatch& batch, const WorkloadConfig& w, const ModelSpec& model,
                        const std::vector<std::vector<int>>& perms, std::uint64_t seed,
                        Rng& partner_rng) {
  std::vector<std::vector<double>> rank_cum;
  rank_cum.reserve(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    rank_cum.push_back(
        zipf_cumulative(model.experts_per_layer[static_cast<std::size_t>(e)], w.zipf_skew));
  }
  std::size_t n_tokens = batch.tokens.size();
  for (auto& tok : batch.tokens) {
    tok.f3.resize(static_cast<std::size_t>(model.num_layers));
    tok.experts.assign(static_cast<std::size_t>(model.num_layers), {});
    for (int e = 0; e < model.num_layers; ++e) {
      int f3;
      if (partner_rng.uniform() < w.mix_noise) {
        f3 = static_cast<int>(partner_rng.below(static_cast<std::uint64_t>(w.vocab)));
      } else {
        std::size_t other = partner_rng.below(n_tokens);
        f3 = batch.tokens[other].f1;
      }
      tok.f3[static_cast<std::size_t>(e)] = f3;

      int experts_here = model.experts_per_layer[static_cast<std::size_t>(e)];
      const auto& perm = perms[static_cast<std::size_t>(e)];
      int b1 = tok.f1 % w.f1_buckets;
      int b3 = f3 % w.f3_buckets;
      double u = routing_unit(seed, b1, b3, e);
      int first = perm[static_cast<std::size_t>(
          rank_from_unit(rank_cum[static_cast<std::size_t>(e)], u))];
      auto& chosen = tok.experts[static_cast<std::size_t>(e)];
      chosen.push_back(first);
      // Further experts depend on the token id alone, skipping already
      // chosen ones, so top-2 routing stays deterministic per (token, layer).
      std::uint64_t h = pair_hash(seed, b1, e);
      while (static_cast<int>(chosen.size()) < std::min(w.top_k, experts_here)) {
        int cand = static_cast<int>(h % static_cast<std::uint64_t>(experts_here));
        h = mix_seed(h, 0x11);
        bool seen = false;
        for (int c : chosen) seen = seen || c == cand;
        if (!seen) chosen.push_back(cand);
      }
    }
  }
}

inline RoutedBatch draw_batch(const WorkloadConfig& w, int n_tokens, std::uint64_t seed,
                              std::uint64_t phase, std::uint64_t unit) {
  RoutedBatch batch;
  batch.tokens.resize(static_cast<std::size_t>(n_tokens));
  Rng tilt_rng(unit_seed(seed, kStreamTilt, phase, unit));
  Rng token_rng(unit_seed(seed, kStreamTokens, phase, unit));
  std::vector<double> vocab_cum = tilted_vocab_cumulative(w, tilt_rng);
  for (int t = 0; t < n_tokens; ++t) {
    auto& tok = batch.tokens[static_cast<std::size_t>(t)];
    tok.sequence = t / w.seq_len;
    tok.position = t % w.seq_len;
    tok.f1 = rank_from_unit(vocab_cum, token_rng.uniform());
  }
  return batch;
}

}  // namespace detail

inline Workload generate_workload(const WorkloadConfig& w, const ModelSpec& model,
                                  std::uint64_t seed) {
  w.validate();
  for (int e = 0; e < model.num_layers; ++e) {
    if (model.experts_per_layer[static_cast<std::size_t>(e)] < w.top_k) {
      throw std::invalid_argument("top_k exceeds an expert count");
    }
  }
  Workload out;
  auto perms = detail::layer_permutations(model, seed);
  out.profile_records.reserve(static_cast<std::size_t>(w.profile_sequences));
  for (int s = 0; s < w.profile_sequences; ++s) {
    RoutedBatch b = detail::draw_batch(w, w.seq_len, seed, detail::kPhaseProfile,
                                       static_cast<std::uint64_t>(s));
    for (auto& tok : b.tokens) tok.sequence = s;
    Rng partner_rng(detail::unit_seed(seed, detail::kStreamPartners, detail::kPhaseProfile,
                                      static_cast<std::uint64_t>(s)));
    detail::route_batch(b, w, model, perms, seed, partner_rng);
    out.profile_records.push_back(std::move(b));
  }
  out.batches.reserve(static_cast<std::size_t>(w.num_batches));
  for (int i = 0; i < w.num_batches; ++i) {
    RoutedBatch b = detail::draw_batch(w, w.batch_tokens, seed, detail::kPhaseServe,
                                       static_cast<std::uint64_t>(i));
    Rng partner_rng(detail::unit_seed(seed, detail::kStreamPartners, detail::kPhaseServe,
                                      static_cast<std::uint64_t>(i)));
    detail::route_batch(b, w, model, perms, seed, partner_rng);
    out.batches.push_back(std::move(b));
  }
  return out;
}

// Profiled co-occurrence counts from the routed profile sequences.
inline FeatureTable build_profile_table(const Workload& workload, const ModelSpec& model) {
  FeatureTable table(model.num_layers);
  for (const auto& record : workload.profile_records) {
    for (const auto& tok : record.tokens) {
      for (int e = 0; e < model.num_layers; ++e) {
        for (int expert : tok.experts[static_cast<std::size_t>(e)]) {
          FeatureKey key;
          key.f1 = tok.f1;
          key.f2 = tok.position;
          key.f3 = tok.f3[static_cast<std::size_t>(e)];
          key.layer = e;
          key.expert = expert;
          table.add(key, 1);
        }
      }
    }
  }
  return table;
}

// True per-expert token counts implied by a routed batch.
inline ExpertDemand demand_from_routing(const RoutedBatch& batch, const ModelSpec& model) {
  ExpertDemand d;
  d.tokens.resize(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    d.tokens[static_cast<std::size_t>(e)].assign(
        static_cast<std::size_t>(model.experts_per_layer[static_cast<std::size_t>(e)]), 0);
  }
  for (const auto& tok : batch.tokens) {
    for (int e = 0; e < model.num_layers; ++e) {
      for (int expert : tok.experts[static_cast<std::size_t>(e)]) {
        ++d.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(expert)];
      }
    }
  }
  return d;
}

inline void write_batch_csv(std::ostream& out, const RoutedBatch& batch,
                            const std::vector<std::string>& comments = {}) {
  CsvWriter csv(out);
  for (const auto& c : comments) csv.comment(c);
  csv.row({"sequence_id", "position", "token_id"});
  for (const auto& tok : batch.tokens) {
    csv.row({std::to_string(tok.sequence), std::to_string(tok.position),
             std::to_string(tok.f1)});
  }
}

// Reads a token stream written by write_batch_csv. Routing features are not
// stored; callers re-derive them from the generator when needed.
inline RoutedBatch read_batch_csv(std::istream& in) {
  auto rows = read_csv(in);
  if (rows.empty() || rows[0] != std::vector<std::string>{"sequence_id", "position", "token_id"}) {
    throw std::runtime_error("batch csv: bad or missing header");
  }
  RoutedBatch batch;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 3) throw std::runtime_error("batch csv: bad row");
    RoutedToken tok;
    tok.sequence = std::stoi(rows[r][0]);
    tok.position = std::stoi(rows[r][1]);
    tok.f1 = std::stoi(rows[r][2]);
    batch.tokens.push_back(tok);
  }
  return batch;
}

}  // namespace moeplan
