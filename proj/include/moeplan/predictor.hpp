// Expert popularity prediction. Before a batch is served only the token ids
// and positions are known, so the expert posterior marginalises the unseen
// attention feature f3 (and the position, whose prior is uniform) against
// the profiled co-occurrence table:
//
//   score(i | f1) = sum over (f2, f3) present for f1 of
//       P*(i | f1,f2,f3) * [P*(f1,f2,f3) P'(f3) / P*(f1,f2)]
//                        * [P*(f1,f2)   P'(f2) / P*(f1)]
//
// where P* are table frequencies within the layer, P'(f2) = 1/sequence
// length and P'(f3) is the empirical token-id frequency of the new batch
// (zero for ids the batch does not contain).
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "moeplan/core.hpp"
#include "moeplan/feature_table.hpp"

namespace moeplan {

// TokenIdOnly ranks experts by raw (f1, expert) co-occurrence and is the
// comparison baseline; Full is the production three-feature posterior.
enum class PredictorFeatures { Full, TokenIdOnly };

struct NewBatchStats {
  std::unordered_map<int, double> f1_freq;  // empirical token-id distribution
  int sequence_length = 1;

  static NewBatchStats from_tokens(const std::vector<int>& f1s, int sequence_length) {
    if (sequence_length < 1) throw std::invalid_argument("sequence length must be positive");
    NewBatchStats s;
    s.sequence_length = sequence_length;
    if (f1s.empty()) return s;
    std::unordered_map<int, long long> counts;
    for (int f1 : f1s) ++counts[f1];
    double inv = 1.0 / static_cast<double>(f1s.size());
    for (const auto& [f1, c] : counts) s.f1_freq[f1] = static_cast<double>(c) * inv;
    return s;
  }

  double f3_prob(int f3) const {
    auto it = f1_freq.find(f3);
    return it == f1_freq.end() ? 0.0 : it->second;
  }
};

struct PosteriorResult {
  std::vector<double> scores;  // normalised to sum 1 when any mass exists
  bool fallback = false;       // f1 never profiled: popularity marginal used
};

namespace detail {

inline void normalize_or_uniform(std::vector<double>& scores) {
  double total = std::accumulate(scores.begin(), scores.end(), 0.0);
  if (total > 0) {
    for (double& s : scores) s /= total;
  } else {
    double u = 1.0 / static_cast<double>(scores.size());
    for (double& s : scores) s = u;
  }
}

inline std::vector<double> expert_marginal_scores(const FeatureTable& table, int layer,
                                                  int num_experts) {
  std::vector<double> scores(static_cast<std::size_t>(num_experts), 0.0);
  for (int i = 0; i < num_experts; ++i) {
    scores[static_cast<std::size_t>(i)] =
        static_cast<double>(table.expert_total(layer, i));
  }
  normalize_or_uniform(scores);
  return scores;
}

}  // namespace detail

inline PosteriorResult posterior(const FeatureTable& table, const NewBatchStats& stats,
                                 int layer, int f1, int num_experts,
                                 PredictorFeatures features = PredictorFeatures::Full) {
  if (layer < 0 || layer >= table.num_layers()) throw std::out_of_range("layer index");
  if (num_experts < 1) throw std::invalid_argument("expert count must be positive");
  PosteriorResult out;
  out.scores.assign(static_cast<std::size_t>(num_experts), 0.0);

  const auto* idxs = table.entries_for(layer, f1);
  long long n1 = table.marginal_f1(layer, f1);
  if (idxs == nullptr || n1 <= 0) {
    // Never profiled: fall back to the layer's expert popularity.
    out.scores = detail::expert_marginal_scores(table, layer, num_experts);
    out.fallback = true;
    return out;
  }

  if (features == PredictorFeatures::TokenIdOnly) {
    for (std::size_t idx : *idxs) {
      const auto& e = table.entry(idx);
      if (e.key.expert < num_experts) {
        out.scores[static_cast<std::size_t>(e.key.expert)] += static_cast<double>(e.count);
      }
    }
    detail::normalize_or_uniform(out.scores);
    return out;
  }

  double pf2 = 1.0 / static_cast<double>(stats.sequence_length);
  for (std::size_t idx : *idxs) {
    const auto& e = table.entry(idx);
    if (e.key.expert >= num_experts) continue;
    double pf3 = stats.f3_prob(e.key.f3);
    if (pf3 <= 0) continue;
    long long n3 = table.marginal_f1f2f3(layer, f1, e.key.f2, e.key.f3);
    long long n2 = table.marginal_f1f2(layer, f1, e.key.f2);
    double expert_given_feats = static_cast<double>(e.count) / static_cast<double>(n3);
    double f3_weight = static_cast<double>(n3) * pf3 / static_cast<double>(n2);
    double f2_weight = static_cast<double>(n2) * pf2 / static_cast<double>(n1);
    out.scores[static_cast<std::size_t>(e.key.expert)] +=
        expert_given_feats * f3_weight * f2_weight;
  }
  double total = std::accumulate(out.scores.begin(), out.scores.end(), 0.0);
  if (total <= 0) {
    // f1 was profiled but none of its attention partners occur in the new
    // batch; degrade to the token-id evidence rather than guessing uniformly.
    return posterior(table, stats, layer, f1, num_experts, PredictorFeatures::TokenIdOnly);
  }
  for (double& s : out.scores) s /= total;
  return out;
}

// Top-k experts by posterior score; ties go to the lower expert index.
inline std::vector<int> predict(const FeatureTable& table, const NewBatchStats& stats,
                                int layer, int f1, int num_experts, int k,
                                PredictorFeatures features = PredictorFeatures::Full) {
  if (k < 1 || k > num_experts) throw std::invalid_argument("k must be in [1, experts]");
  PosteriorResult post = posterior(table, stats, layer, f1, num_experts, features);
  std::vector<int> order(static_cast<std::size_t>(num_experts));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double sa = post.scores[static_cast<std::size_t>(a)];
    double sb = post.scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// Predicted per-expert token counts for a batch of token ids. Tokens sharing
// a token id share a prediction, so the posterior is evaluated once per
// distinct id and layer.
inline ExpertDemand predict_demand(const FeatureTable& table, const std::vector<int>& batch_f1,
                                   const NewBatchStats& stats, const ModelSpec& model, int k,
                                   PredictorFeatures features = PredictorFeatures::Full) {
  ExpertDemand demand;
  demand.tokens.resize(static_cast<std::size_t>(model.num_layers));
  for (int e = 0; e < model.num_layers; ++e) {
    int n = model.experts_per_layer[static_cast<std::size_t>(e)];
    demand.tokens[static_cast<std::size_t>(e)].assign(static_cast<std::size_t>(n), 0);
    if (k > n) throw std::invalid_argument("k exceeds the layer's expert count");
    std::unordered_map<int, std::vector<int>> cache;
    for (int f1 : batch_f1) {
      auto it = cache.find(f1);
      if (it == cache.end()) {
        it = cache.emplace(f1, predict(table, stats, e, f1, n, k, features)).first;
      }
      for (int expert : it->second) {
        ++demand.tokens[static_cast<std::size_t>(e)][static_cast<std::size_t>(expert)];
      }
    }
  }
  return demand;
}

// Elementwise ceiling of the mean over several same-shaped demands. Used to
// reduce per-batch predictions to the single demand one deployment is solved
// for: rounding up keeps the plan sized for at least the average batch.
inline ExpertDemand ceil_mean_demand(const std::vector<ExpertDemand>& parts) {
  if (parts.empty()) throw std::invalid_argument("no demands to aggregate");
  ExpertDemand out = parts.front();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    if (parts[p].tokens.size() != out.tokens.size()) {
      throw std::invalid_argument("demand shapes differ");
    }
    for (std::size_t e = 0; e < out.tokens.size(); ++e) {
      if (parts[p].tokens[e].size() != out.tokens[e].size()) {
        throw std::invalid_argument("demand shapes differ");
      }
      for (std::size_t i = 0; i < out.tokens[e].size(); ++i) {
        out.tokens[e][i] += parts[p].tokens[e][i];
      }
    }
  }
  long long n = static_cast<long long>(parts.size());
  for (auto& layer : out.tokens) {
    for (long long& v : layer) v = (v + n - 1) / n;
  }
  return out;
}

struct AccuracyReport {
  std::vector<double> layer_mad;  // mean |predicted - actual| per expert
  double mean_mad = 0;
};

inline AccuracyReport accuracy(const ExpertDemand& predicted, const ExpertDemand& actual) {
  if (predicted.tokens.size() != actual.tokens.size()) {
    throw std::invalid_argument("demand shapes differ");
  }
  AccuracyReport rep;
  rep.layer_mad.reserve(predicted.tokens.size());
  for (std::size_t e = 0; e < predicted.tokens.size(); ++e) {
    if (predicted.tokens[e].size() != actual.tokens[e].size()) {
      throw std::invalid_argument("demand shapes differ");
    }
    double sum = 0;
    for (std::size_t i = 0; i < predicted.tokens[e].size(); ++i) {
      sum += std::abs(static_cast<double>(predicted.tokens[e][i] - actual.tokens[e][i]));
    }
    rep.layer_mad.push_back(sum / static_cast<double>(predicted.tokens[e].size()));
  }
  for (double v : rep.layer_mad) rep.mean_mad += v;
  rep.mean_mad /= static_cast<double>(rep.layer_mad.empty() ? 1 : rep.layer_mad.size());
  return rep;
}

}  // namespace moeplan
