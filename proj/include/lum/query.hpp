// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lum/data.hpp"
#include "lum/model.hpp"
#include "lum/tokens.hpp"

namespace lum {

// A downstream request: "what would this user engage with next, under
// this condition". Any subset of the condition fields may be populated.
struct KnowledgeQuery {
  int64_t user_id = 0;
  Token condition;
};

struct ScoredItem {
  int64_t item_id = 0;  // raw id
  float score = 0.0f;
};

struct QueryResult {
  std::vector<float> output;        // o at the query position [model_dim]
  std::vector<ScoredItem> top_k;    // scores non-increasing, ties by item id
  std::string model_version;
};

// Catalog-wide item embeddings from the model's item token encoder,
// precomputed once per model version.
struct ItemIndex {
  int model_dim = 0;
  int num_items = 0;
  std::vector<float> embeddings;  // num_items x model_dim
  std::vector<float> norms;       // L2 per row
  std::string model_version;

  const float* row(int i) const { return &embeddings[static_cast<size_t>(i) * model_dim]; }
};

ItemIndex build_item_index(const LUMModel& model, const Catalog& catalog);
void save_item_embeddings(const ItemIndex& index, const std::string& path);
ItemIndex load_item_embeddings(const std::string& path);

// Stable 64-bit hash of the canonicalized condition fields (query terms
// are sorted; the encoder mean-pool is order-invariant anyway).
uint64_t condition_fingerprint(const Token& condition);
std::string fingerprint_hex(uint64_t fp);

QueryResult query_single(const LUMModel& model, const ItemIndex& index, const Catalog& catalog,
                         const std::vector<BehaviorEvent>& history, const KnowledgeQuery& query,
                         int k);

// One forward pass for all queries over a shared history prefix. Results
// match per-query query_single runs.
std::vector<QueryResult> query_group(const LUMModel& model, const ItemIndex& index,
                                     const Catalog& catalog,
                                     const std::vector<BehaviorEvent>& history,
                                     const std::vector<KnowledgeQuery>& queries, int k);

enum class CacheSource { Realtime, OfflineFallback };

struct CacheKey {
  int64_t user_id = 0;
  uint64_t condition_fp = 0;
  std::string model_version;
  bool operator==(const CacheKey& o) const {
    return user_id == o.user_id && condition_fp == o.condition_fp && model_version == o.model_version;
  }
};

struct CacheEntry {
  CacheKey key;
  QueryResult result;
  CacheSource source = CacheSource::Realtime;
};

// LRU-bounded store for query results. Realtime entries take precedence
// over offline fallbacks for the same key; entries under different model
// versions never collide. Internally serialized with a mutex, so
// concurrent readers and writers are safe.
class KnowledgeCache {
 public:
  explicit KnowledgeCache(size_t capacity = 0);  // 0 = unbounded

  std::optional<CacheEntry> get(const CacheKey& key) const;
  void put(CacheEntry entry);                  // realtime path: always stores
  void warm(std::vector<CacheEntry> entries);  // fallback path: never displaces realtime
  size_t size() const;
  size_t capacity() const { return capacity_; }

  void save(const std::string& path) const;
  void load_file(const std::string& path);  // inserts the file's entries

 private:
  struct KeyHash {
    size_t operator()(const CacheKey& k) const;
  };
  void insert_locked(CacheEntry entry);

  size_t capacity_ = 0;
  mutable std::mutex mu_;
  mutable std::list<CacheEntry> lru_;  // front = most recent
  mutable std::unordered_map<CacheKey, std::list<CacheEntry>::iterator, KeyHash> map_;
};

// One interest-log record, as written by batch inference.
struct InterestRecord {
  int64_t user_id = 0;          // raw id
  uint64_t condition_fp = 0;
  std::string model_version;
  std::vector<float> output;
  std::vector<int64_t> top_k;   // raw item ids
};

// Runs the condition set against every user in the corpus (group query
// per user) and writes JSON-lines records ordered by (user_id,
// condition_fp). Reruns on the same model are byte-identical.
void batch_infer(const LUMModel& model, const ItemIndex& index, const Corpus& corpus,
                 const std::vector<Token>& conditions, int k, const std::string& out_path);

std::vector<InterestRecord> load_interest_log(const std::string& path);

// Default interest conditions: one scenario-only condition per real
// scenario id 1..n (clamped by the vocabulary).
std::vector<Token> default_interest_conditions(const VocabSizes& vocab, int n);

// Populates a cache with offline-fallback entries from an interest log.
void warm_cache_from_log(KnowledgeCache& cache, const std::vector<InterestRecord>& records);

}  // namespace lum
