// SPDX-License-Identifier: Apache-2.0
#include "lum/query.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lum {

namespace {

void validate_condition(const LUMConfig& cfg, const Token& c) {
  if (c.kind != TokenKind::Condition)
    throw std::invalid_argument("query: condition token has wrong kind");
  const bool populated = c.scenario_id != -1 || c.category_id != -1 || !c.query_terms.empty();
  if (!populated) throw std::invalid_argument("query: condition has no populated fields");
  if (c.scenario_id != -1 && (c.scenario_id < 0 || c.scenario_id >= cfg.num_scenarios))
    throw std::out_of_range("query: unknown scenario id " + std::to_string(c.scenario_id) +
                            " (vocabulary has " + std::to_string(cfg.num_scenarios) + ")");
  if (c.category_id != -1 && (c.category_id < 0 || c.category_id >= cfg.num_categories))
    throw std::out_of_range("query: unknown category id " + std::to_string(c.category_id));
  for (int t : c.query_terms)
    if (t < 0 || t >= cfg.num_query_tokens)
      throw std::out_of_range("query: unknown query term " + std::to_string(t));
}

std::vector<ScoredItem> top_k_by_cosine(const ItemIndex& index, const Catalog& catalog,
                                        const std::vector<float>& o, int k) {
  const int d = index.model_dim;
  double on = 0.0;
  for (float x : o) on += static_cast<double>(x) * x;
  on = std::max(std::sqrt(on), 1e-12);
  std::vector<ScoredItem> scored(static_cast<size_t>(index.num_items));
  for (int i = 0; i < index.num_items; ++i) {
    const float* e = index.row(i);
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(o[static_cast<size_t>(j)]) * e[j];
    scored[static_cast<size_t>(i)].item_id = catalog.items[static_cast<size_t>(i)].raw_id;
    scored[static_cast<size_t>(i)].score =
        static_cast<float>(dot / (on * std::max(static_cast<double>(index.norms[static_cast<size_t>(i)]), 1e-12)));
  }
  const size_t kk = std::min<size_t>(static_cast<size_t>(std::max(k, 0)), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(kk), scored.end(),
                    [](const ScoredItem& a, const ScoredItem& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.item_id < b.item_id;
                    });
  scored.resize(kk);
  return scored;
}

TokenizedSequence history_prefix(const LUMModel& model, const Catalog& catalog,
                                 const std::vector<BehaviorEvent>& history) {
  auto seq = model.cfg.condition_tokens ? tokenize_events(catalog, history)
                                        : tokenize_items_only(catalog, history);
  return truncate_recent(seq, model.cfg.max_sequence_tokens - 2);
}

}  // namespace

ItemIndex build_item_index(const LUMModel& model, const Catalog& catalog) {
  if (catalog.num_items() != model.cfg.num_items)
    throw std::invalid_argument("build_item_index: catalog size does not match model vocabulary");
  ItemIndex index;
  index.model_dim = model.cfg.arch.model_dim;
  index.num_items = catalog.num_items();
  index.model_version = model.version;
  std::vector<Token> tokens;
  tokens.reserve(static_cast<size_t>(index.num_items));
  for (int i = 0; i < index.num_items; ++i) tokens.push_back(make_item_token(catalog, i));
  std::vector<const Token*> ptrs;
  for (const auto& t : tokens) ptrs.push_back(&t);
  nn::Tape tape;
  auto emb = encode_item_tokens(tape, model, ptrs);
  index.embeddings = emb->v;
  index.norms.resize(static_cast<size_t>(index.num_items));
  for (int i = 0; i < index.num_items; ++i) {
    double s = 0.0;
    const float* row = index.row(i);
    for (int j = 0; j < index.model_dim; ++j) s += static_cast<double>(row[j]) * row[j];
    index.norms[static_cast<size_t>(i)] = static_cast<float>(std::sqrt(s));
  }
  return index;
}

void save_item_embeddings(const ItemIndex& index, const std::string& path) {
  nn::ParameterStore ps;
  auto t = ps.create("item_embeddings", {index.num_items, index.model_dim});
  t->v = index.embeddings;
  nlohmann::json meta;
  meta["model_version"] = index.model_version;
  meta["model_dim"] = index.model_dim;
  meta["num_items"] = index.num_items;
  nn::save_parameters(ps, meta.dump(), path);
}

ItemIndex load_item_embeddings(const std::string& path) {
  std::string meta_json;
  auto ps = nn::load_parameters<float>(path, &meta_json);
  nlohmann::json meta = nlohmann::json::parse(meta_json);
  ItemIndex index;
  index.model_version = meta.at("model_version").get<std::string>();
  index.model_dim = meta.at("model_dim").get<int>();
  index.num_items = meta.at("num_items").get<int>();
  index.embeddings = ps.get("item_embeddings")->v;
  index.norms.resize(static_cast<size_t>(index.num_items));
  for (int i = 0; i < index.num_items; ++i) {
    double s = 0.0;
    const float* row = index.row(i);
    for (int j = 0; j < index.model_dim; ++j) s += static_cast<double>(row[j]) * row[j];
    index.norms[static_cast<size_t>(i)] = static_cast<float>(std::sqrt(s));
  }
  return index;
}

uint64_t condition_fingerprint(const Token& condition) {
  if (condition.kind != TokenKind::Condition)
    throw std::invalid_argument("condition_fingerprint: not a condition token");
  uint64_t h = rng::fnv1a_init();
  h = rng::fnv1a_u64(h, 0xC0ull);  // kind marker
  h = rng::fnv1a_u64(h, static_cast<uint64_t>(static_cast<int64_t>(condition.scenario_id)));
  h = rng::fnv1a_u64(h, static_cast<uint64_t>(static_cast<int64_t>(condition.category_id)));
  auto terms = condition.query_terms;
  std::sort(terms.begin(), terms.end());
  h = rng::fnv1a_u64(h, terms.size());
  for (int t : terms) h = rng::fnv1a_u64(h, static_cast<uint64_t>(static_cast<int64_t>(t)));
  return h;
}

std::string fingerprint_hex(uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

std::vector<QueryResult> query_group(const LUMModel& model, const ItemIndex& index,
                                     const Catalog& catalog,
                                     const std::vector<BehaviorEvent>& history,
                                     const std::vector<KnowledgeQuery>& queries, int k) {
  if (queries.empty()) throw std::invalid_argument("query_group: empty query list");
  if (k < 1) throw std::invalid_argument("query_group: k must be >= 1");
  for (const auto& q : queries) validate_condition(model.cfg, q.condition);
  if (index.model_version != model.version)
    throw std::invalid_argument("query_group: item index was built for a different model version");

  const auto prefix = history_prefix(model, catalog, history);

  nn::Tape tape;
  nn::TensorRef outputs;
  std::vector<int> query_positions;
  if (model.cfg.condition_tokens) {
    std::vector<Token> conds;
    for (const auto& q : queries) conds.push_back(q.condition);
    auto gq = build_group_query_batch(prefix, conds);
    outputs = lum_forward(tape, model, gq.batch, gq.mask);
    query_positions = gq.query_positions;
  } else {
    // The no-condition variant ignores the condition and reads the
    // running next-item representation at the last history position.
    if (prefix.size() == 0)
      throw std::invalid_argument("query_group: no-condition model requires non-empty history");
    auto rows = pack_sequences({prefix}, prefix.size());
    auto mask = build_training_mask(rows[0]);
    outputs = lum_forward(tape, model, rows[0], mask);
    query_positions.assign(queries.size(), prefix.size() - 1);
  }

  const int d = model.cfg.arch.model_dim;
  std::vector<QueryResult> results;
  results.reserve(queries.size());
  for (size_t j = 0; j < queries.size(); ++j) {
    QueryResult r;
    const int p = query_positions[j];
    r.output.assign(outputs->v.begin() + static_cast<std::ptrdiff_t>(p) * d,
                    outputs->v.begin() + static_cast<std::ptrdiff_t>(p + 1) * d);
    r.top_k = top_k_by_cosine(index, catalog, r.output, k);
    r.model_version = model.version;
    results.push_back(std::move(r));
  }
  return results;
}

QueryResult query_single(const LUMModel& model, const ItemIndex& index, const Catalog& catalog,
                         const std::vector<BehaviorEvent>& history, const KnowledgeQuery& query,
                         int k) {
  return query_group(model, index, catalog, history, {query}, k).front();
}

// --- cache ---

size_t KnowledgeCache::KeyHash::operator()(const CacheKey& k) const {
  uint64_t h = rng::fnv1a_init();
  h = rng::fnv1a_u64(h, static_cast<uint64_t>(k.user_id));
  h = rng::fnv1a_u64(h, k.condition_fp);
  h = rng::fnv1a(h, k.model_version.data(), k.model_version.size());
  return static_cast<size_t>(h);
}

KnowledgeCache::KnowledgeCache(size_t capacity) : capacity_(capacity) {}

std::optional<CacheEntry> KnowledgeCache::get(const CacheKey& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = map_.find(key);
  if (it == map_.end()) return std::nullopt;
  lru_.splice(lru_.begin(), lru_, it->second);  // refresh recency
  return *it->second;
}

void KnowledgeCache::insert_locked(CacheEntry entry) {
  auto it = map_.find(entry.key);
  if (it != map_.end()) {
    lru_.erase(it->second);
    map_.erase(it);
  }
  lru_.push_front(std::move(entry));
  map_[lru_.front().key] = lru_.begin();
  if (capacity_ > 0 && map_.size() > capacity_) {
    map_.erase(lru_.back().key);
    lru_.pop_back();
  }
}

void KnowledgeCache::put(CacheEntry entry) {
  std::lock_guard<std::mutex> lock(mu_);
  insert_locked(std::move(entry));
}

void KnowledgeCache::warm(std::vector<CacheEntry> entries) {
  std::lock_guard<std::mutex> lock(mu_);
  for (auto& e : entries) {
    auto it = map_.find(e.key);
    if (it != map_.end() && it->second->source == CacheSource::Realtime)
      continue;  // realtime results win over fallbacks
    e.source = CacheSource::OfflineFallback;
    insert_locked(std::move(e));
  }
}

size_t KnowledgeCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return map_.size();
}

namespace {

nlohmann::json result_to_json(int64_t user_id, uint64_t fp, const QueryResult& r) {
  nlohmann::json j;
  j["user_id"] = user_id;
  j["condition_fp"] = fingerprint_hex(fp);
  j["model_version"] = r.model_version;
  j["o"] = r.output;
  std::vector<int64_t> ids;
  for (const auto& s : r.top_k) ids.push_back(s.item_id);
  j["top_k"] = ids;
  return j;
}

}  // namespace

void KnowledgeCache::save(const std::string& path) const {
  std::lock_guard<std::mutex> lock(mu_);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cache save: cannot open " + path);
  // oldest first so that reloading reproduces the recency order
  for (auto it = lru_.rbegin(); it != lru_.rend(); ++it) {
    auto j = result_to_json(it->key.user_id, it->key.condition_fp, it->result);
    j["source"] = it->source == CacheSource::Realtime ? "realtime" : "fallback";
    std::vector<float> scores;
    for (const auto& s : it->result.top_k) scores.push_back(s.score);
    j["top_k_scores"] = scores;
    os << j.dump() << "\n";
  }
}

void KnowledgeCache::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cache load: cannot open " + path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    CacheEntry e;
    e.key.user_id = j.at("user_id").get<int64_t>();
    e.key.condition_fp = std::stoull(j.at("condition_fp").get<std::string>(), nullptr, 16);
    e.key.model_version = j.at("model_version").get<std::string>();
    e.result.model_version = e.key.model_version;
    e.result.output = j.at("o").get<std::vector<float>>();
    const auto ids = j.at("top_k").get<std::vector<int64_t>>();
    const auto scores = j.at("top_k_scores").get<std::vector<float>>();
    for (size_t i = 0; i < ids.size(); ++i)
      e.result.top_k.push_back({ids[i], i < scores.size() ? scores[i] : 0.0f});
    e.source = j.at("source").get<std::string>() == "realtime" ? CacheSource::Realtime
                                                               : CacheSource::OfflineFallback;
    put(std::move(e));
  }
}

// --- batch inference ---

void batch_infer(const LUMModel& model, const ItemIndex& index, const Corpus& corpus,
                 const std::vector<Token>& conditions, int k, const std::string& out_path) {
  if (conditions.empty()) throw std::invalid_argument("batch_infer: empty condition set");
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("batch_infer: cannot open " + out_path + " for writing");

  // fixed output order: user ascending, then fingerprint ascending
  std::vector<std::pair<uint64_t, size_t>> cond_order;
  for (size_t i = 0; i < conditions.size(); ++i)
    cond_order.push_back({condition_fingerprint(conditions[i]), i});
  std::sort(cond_order.begin(), cond_order.end());

  for (int u = 0; u < corpus.num_users(); ++u) {
    const auto& history = corpus.events_by_user[static_cast<size_t>(u)];
    if (history.empty() && !model.cfg.condition_tokens) continue;
    std::vector<KnowledgeQuery> queries;
    for (const auto& [fp, ci] : cond_order)
      queries.push_back(KnowledgeQuery{corpus.user_raw_ids[static_cast<size_t>(u)], conditions[ci]});
    const auto results = query_group(model, index, corpus.catalog, history, queries, k);
    for (size_t qi = 0; qi < queries.size(); ++qi)
      os << result_to_json(corpus.user_raw_ids[static_cast<size_t>(u)], cond_order[qi].first,
                           results[qi])
                .dump()
         << "\n";
  }
  if (!os) throw std::runtime_error("batch_infer: write failed for " + out_path);
}

std::vector<InterestRecord> load_interest_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open interest log: " + path);
  std::vector<InterestRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("interest log line " + std::to_string(line_no) + ": " + e.what());
    }
    InterestRecord r;
    r.user_id = j.at("user_id").get<int64_t>();
    r.condition_fp = std::stoull(j.at("condition_fp").get<std::string>(), nullptr, 16);
    r.model_version = j.at("model_version").get<std::string>();
    r.output = j.at("o").get<std::vector<float>>();
    r.top_k = j.at("top_k").get<std::vector<int64_t>>();
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<Token> default_interest_conditions(const VocabSizes& vocab, int n) {
  std::vector<Token> out;
  const int real_scenarios = std::max(vocab.num_scenarios - 1, 1);
  for (int i = 0; i < std::min(n, real_scenarios); ++i)
    out.push_back(Token::condition(1 + i, {}, -1));
  if (out.empty()) out.push_back(Token::condition(0, {}, -1));
  return out;
}

void warm_cache_from_log(KnowledgeCache& cache, const std::vector<InterestRecord>& records) {
  std::vector<CacheEntry> entries;
  for (const auto& r : records) {
    CacheEntry e;
    e.key = CacheKey{r.user_id, r.condition_fp, r.model_version};
    e.result.model_version = r.model_version;
    e.result.output = r.output;
    for (int64_t id : r.top_k) e.result.top_k.push_back({id, 0.0f});
    e.source = CacheSource::OfflineFallback;
    entries.push_back(std::move(e));
  }
  cache.warm(std::move(entries));
}

}  // namespace lum
