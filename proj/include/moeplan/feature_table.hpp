// Profiled co-occurrence table between token features and expert choices.
//
// A record is a count for the key (f1, f2, f3, layer, expert):
//   f1 token id, f2 sequence position, f3 token id of the attended-to token
//   in front of the layer. Counts come from offline profiling and can later
//   be overwritten pair-by-pair by the tuner.
//
// Marginals over (layer, f1), (layer, f1, f2) and (layer, f1, f2, f3) plus
// per-expert and per-layer totals are kept incrementally so posterior
// queries touch only the entries under one (layer, f1).
#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "moeplan/csv.hpp"

namespace moeplan {

// Field widths of the packed 64-bit key; ranges are validated on insert.
inline constexpr int kMaxTokenId = 1 << 20;   // f1 and f3
inline constexpr int kMaxPosition = 1 << 12;  // f2
inline constexpr int kMaxLayers = 1 << 6;
inline constexpr int kMaxExperts = 1 << 6;

struct FeatureKey {
  int f1 = 0;
  int f2 = 0;
  int f3 = 0;
  int layer = 0;
  int expert = 0;

  bool operator==(const FeatureKey& o) const {
    return f1 == o.f1 && f2 == o.f2 && f3 == o.f3 && layer == o.layer &&
           expert == o.expert;
  }
  bool operator<(const FeatureKey& o) const {
    if (f1 != o.f1) return f1 < o.f1;
    if (f2 != o.f2) return f2 < o.f2;
    if (f3 != o.f3) return f3 < o.f3;
    if (layer != o.layer) return layer < o.layer;
    return expert < o.expert;
  }
};

class FeatureTable {
 public:
  explicit FeatureTable(int num_layers) : layer_total_(num_layers, 0) {
    if (num_layers < 1 || num_layers > kMaxLayers) {
      throw std::invalid_argument("layer count outside the supported range");
    }
  }

  int num_layers() const { return static_cast<int>(layer_total_.size()); }
  std::size_t size() const { return entries_.size(); }
  long long total() const { return total_; }
  long long layer_total(int layer) const { return layer_total_.at(layer); }

  // Adds to an existing count or creates the key.
  void add(const FeatureKey& key, long long count) {
    if (count <= 0) throw std::invalid_argument("counts must be positive");
    check(key);
    std::uint64_t packed = pack(key);
    auto [it, fresh] = index_.try_emplace(packed, entries_.size());
    if (fresh) {
      entries_.push_back({key, 0});
      by_f1_[pack_lf1(key.layer, key.f1)].push_back(it->second);
    }
    apply_delta(it->second, count);
  }

  // Overwrites the count of a key, creating it if absent.
  void set(const FeatureKey& key, long long count) {
    if (count <= 0) throw std::invalid_argument("counts must be positive");
    check(key);
    std::uint64_t packed = pack(key);
    auto [it, fresh] = index_.try_emplace(packed, entries_.size());
    if (fresh) {
      entries_.push_back({key, 0});
      by_f1_[pack_lf1(key.layer, key.f1)].push_back(it->second);
    }
    apply_delta(it->second, count - entries_[it->second].count);
  }

  long long count(const FeatureKey& key) const {
    auto it = index_.find(pack(key));
    return it == index_.end() ? 0 : entries_[it->second].count;
  }

  struct Entry {
    FeatureKey key;
    long long count;
  };

  // Entries under one (layer, f1), in insertion order. May be null.
  const std::vector<std::size_t>* entries_for(int layer, int f1) const {
    auto it = by_f1_.find(pack_lf1(layer, f1));
    return it == by_f1_.end() ? nullptr : &it->second;
  }

  const Entry& entry(std::size_t idx) const { return entries_[idx]; }
  const std::vector<Entry>& entries() const { return entries_; }

  long long marginal_f1(int layer, int f1) const {
    return lookup(n1_, pack_lf1(layer, f1));
  }
  long long marginal_f1f2(int layer, int f1, int f2) const {
    return lookup(n2_, pack_lf1(layer, f1) | (static_cast<std::uint64_t>(f2) << 26));
  }
  long long marginal_f1f2f3(int layer, int f1, int f2, int f3) const {
    return lookup(n3_, pack_lf1(layer, f1) | (static_cast<std::uint64_t>(f2) << 26) |
                           (static_cast<std::uint64_t>(f3) << 38));
  }
  long long expert_total(int layer, int expert) const {
    return lookup(expert_total_, (static_cast<std::uint64_t>(layer) << 6) |
                                     static_cast<std::uint64_t>(expert));
  }

  // Keys ranked by count (descending, key ascending on ties). Used to pick
  // the tuner's initial address set.
  std::vector<FeatureKey> top_keys(std::size_t limit) const {
    std::vector<const Entry*> ptrs;
    ptrs.reserve(entries_.size());
    for (const auto& e : entries_) ptrs.push_back(&e);
    std::sort(ptrs.begin(), ptrs.end(), [](const Entry* a, const Entry* b) {
      if (a->count != b->count) return a->count > b->count;
      return a->key < b->key;
    });
    std::vector<FeatureKey> out;
    out.reserve(std::min(limit, ptrs.size()));
    for (std::size_t i = 0; i < ptrs.size() && i < limit; ++i) out.push_back(ptrs[i]->key);
    return out;
  }

  void write_csv(std::ostream& out, const std::vector<std::string>& comments = {}) const {
    CsvWriter w(out);
    for (const auto& c : comments) w.comment(c);
    w.row({"f1", "f2", "f3", "layer", "expert", "count"});
    std::vector<const Entry*> ptrs;
    ptrs.reserve(entries_.size());
    for (const auto& e : entries_) ptrs.push_back(&e);
    std::sort(ptrs.begin(), ptrs.end(),
              [](const Entry* a, const Entry* b) { return a->key < b->key; });
    for (const Entry* e : ptrs) {
      w.row({std::to_string(e->key.f1), std::to_string(e->key.f2),
             std::to_string(e->key.f3), std::to_string(e->key.layer),
             std::to_string(e->key.expert), std::to_string(e->count)});
    }
  }

  static FeatureTable read_csv_table(std::istream& in, int num_layers) {
    auto rows = read_csv(in);
    if (rows.empty() || rows[0] != std::vector<std::string>{"f1", "f2", "f3", "layer",
                                                            "expert", "count"}) {
      throw std::runtime_error("feature table csv: bad or missing header");
    }
    FeatureTable t(num_layers);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() != 6) throw std::runtime_error("feature table csv: bad row");
      FeatureKey key{std::stoi(rows[r][0]), std::stoi(rows[r][1]), std::stoi(rows[r][2]),
                     std::stoi(rows[r][3]), std::stoi(rows[r][4])};
      t.add(key, std::stoll(rows[r][5]));
    }
    return t;
  }

 private:
  static void check_range(int v, int limit, const char* what) {
    if (v < 0 || v >= limit) {
      throw std::out_of_range(std::string("feature key field out of range: ") + what);
    }
  }

  void check(const FeatureKey& k) const {
    check_range(k.f1, kMaxTokenId, "f1");
    check_range(k.f2, kMaxPosition, "f2");
    check_range(k.f3, kMaxTokenId, "f3");
    check_range(k.layer, num_layers(), "layer");
    check_range(k.expert, kMaxExperts, "expert");
  }

  // f1:20 | f2:12 | f3:20 | layer:6 | expert:6
  static std::uint64_t pack(const FeatureKey& k) {
    return static_cast<std::uint64_t>(k.f1) | (static_cast<std::uint64_t>(k.f2) << 20) |
           (static_cast<std::uint64_t>(k.f3) << 32) |
           (static_cast<std::uint64_t>(k.layer) << 52) |
           (static_cast<std::uint64_t>(k.expert) << 58);
  }

  // layer:6 | f1:20 for the per-(layer, f1) structures.
  static std::uint64_t pack_lf1(int layer, int f1) {
    return static_cast<std::uint64_t>(f1) | (static_cast<std::uint64_t>(layer) << 20);
  }

  static long long lookup(const std::unordered_map<std::uint64_t, long long>& m,
                          std::uint64_t key) {
    auto it = m.find(key);
    return it == m.end() ? 0 : it->second;
  }

  void apply_delta(std::size_t idx, long long delta) {
    if (delta == 0) return;
    Entry& e = entries_[idx];
    e.count += delta;
    const FeatureKey& k = e.key;
    n1_[pack_lf1(k.layer, k.f1)] += delta;
    n2_[pack_lf1(k.layer, k.f1) | (static_cast<std::uint64_t>(k.f2) << 26)] += delta;
    n3_[pack_lf1(k.layer, k.f1) | (static_cast<std::uint64_t>(k.f2) << 26) |
        (static_cast<std::uint64_t>(k.f3) << 38)] += delta;
    expert_total_[(static_cast<std::uint64_t>(k.layer) << 6) |
                  static_cast<std::uint64_t>(k.expert)] += delta;
    layer_total_[static_cast<std::size_t>(k.layer)] += delta;
    total_ += delta;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_f1_;
  std::unordered_map<std::uint64_t, long long> n1_, n2_, n3_, expert_total_;
  std::vector<long long> layer_total_;
  long long total_ = 0;
};

}  // namespace moeplan
