// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace lum {

// One user-item interaction with its condition context.
struct BehaviorEvent {
  int64_t user_id = 0;
  int64_t item_id = 0;          // dense index into Catalog::items
  int scenario_id = 0;          // 0 is reserved for "unknown"
  std::vector<int> query_terms;
  int category_id = 0;
  int64_t timestamp = 0;
};

struct ItemAttrs {
  int64_t raw_id = 0;
  int category_id = 0;
  double popularity = 0.0;
  int popularity_bucket = 0;
  std::vector<float> content;
};

struct Catalog {
  std::vector<ItemAttrs> items;  // indexed by dense item id
  int num_items() const { return static_cast<int>(items.size()); }
};

struct VocabSizes {
  int num_users = 0;
  int num_items = 0;
  int num_scenarios = 0;   // including reserved id 0
  int num_categories = 0;
  int num_query_tokens = 0;
  int content_dim = 0;
  int num_popularity_buckets = 8;
};

// Behavior corpus: per-user event groups, each sorted by (timestamp,
// item_id), plus the item attribute table and vocabulary sizes.
struct Corpus {
  std::vector<std::vector<BehaviorEvent>> events_by_user;  // indexed by dense user id
  std::vector<int64_t> user_raw_ids;                       // dense -> raw
  Catalog catalog;
  VocabSizes vocab;
  uint64_t seed = 0;

  int num_users() const { return static_cast<int>(events_by_user.size()); }
  int64_t num_events() const {
    int64_t n = 0;
    for (const auto& ev : events_by_user) n += static_cast<int64_t>(ev.size());
    return n;
  }
};

struct SyntheticWorldConfig {
  int num_users = 200;
  int num_items = 400;
  int num_scenarios = 2;    // real scenarios; ids 1..num_scenarios (0 stays reserved)
  int num_categories = 8;
  int latent_dim = 16;
  int events_per_user_min = 20;
  int events_per_user_max = 60;
  double condition_effect_strength = 1.0;
  uint64_t rng_seed = 1;
};

// Samples a world where scenario conditions rotate user preferences and
// query/category condition fields reveal the item's category with a
// probability that grows with condition_effect_strength. At strength 0
// conditions carry no information about items.
Corpus generate_synthetic_corpus(const SyntheticWorldConfig& config);

// Reads an interaction log with header
//   user_id,item_id,scenario_id,category_id,query_terms,timestamp
// (query_terms is a space-separated token-id list, possibly empty).
// Blank scenario maps to the reserved id 0. Raw user/item ids are
// remapped to dense indices in ascending raw-id order.
Corpus load_interactions(const std::string& path);

// Writes events.csv, items.csv and meta.json under `dir`.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// For each user with more than holdout_last_n events, the trailing
// holdout_last_n events (chronologically last) go to test.
std::pair<Corpus, Corpus> chronological_split(const Corpus& corpus, int holdout_last_n);

}  // namespace lum
