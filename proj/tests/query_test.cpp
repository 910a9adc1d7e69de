// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "lum/dlrm.hpp"
#include "lum/query.hpp"

using namespace lum;
namespace fs = std::filesystem;

namespace {

struct World {
  Corpus corpus;
  LUMModel model;
  ItemIndex index;
};

World make_world(uint64_t seed, int epochs = 1) {
  World w{testutil::make_mapping_corpus(12, 8, 4, seed), {}, {}};
  auto cfg = testutil::tiny_lum_config(w.corpus, seed);
  cfg.epochs = epochs;
  auto [model, report] = train_lum(w.corpus, cfg);
  w.model = std::move(model);
  w.index = build_item_index(w.model, w.corpus.catalog);
  return w;
}

std::string slurp(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

QueryResult mk_result(float x) {
  QueryResult r;
  r.output = {x, x + 1};
  r.top_k = {{1, 0.5f}};
  r.model_version = "v";
  return r;
}

}  // namespace

TEST_CASE("query_single: full catalog ordering and determinism") {
  auto w = make_world(3);
  KnowledgeQuery q{0, Token::condition(1, {}, -1)};
  const auto& history = w.corpus.events_by_user[0];
  const auto r1 = query_single(w.model, w.index, w.corpus.catalog, history, q, w.corpus.catalog.num_items());
  CHECK(static_cast<int>(r1.top_k.size()) == w.corpus.catalog.num_items());
  for (size_t i = 1; i < r1.top_k.size(); ++i) CHECK(r1.top_k[i - 1].score >= r1.top_k[i].score);
  std::set<int64_t> seen;
  for (const auto& s : r1.top_k) seen.insert(s.item_id);
  CHECK(seen.size() == r1.top_k.size());  // a total ordering of the catalog

  const auto r2 = query_single(w.model, w.index, w.corpus.catalog, history, q, w.corpus.catalog.num_items());
  CHECK(r1.output == r2.output);
  CHECK(r1.model_version == r2.model_version);
  for (size_t i = 0; i < r1.top_k.size(); ++i) {
    CHECK(r1.top_k[i].item_id == r2.top_k[i].item_id);
    CHECK(r1.top_k[i].score == r2.top_k[i].score);
  }
}

TEST_CASE("query_single: empty history still answers on the condition alone") {
  auto w = make_world(5);
  KnowledgeQuery q{0, Token::condition(2, {}, -1)};
  const auto r = query_single(w.model, w.index, w.corpus.catalog, {}, q, 3);
  CHECK(r.top_k.size() == 3);
  CHECK(static_cast<int>(r.output.size()) == w.model.cfg.arch.model_dim);
}

TEST_CASE("query_single: trained mapping model retrieves the conditioned item at rank 1") {
  auto w = make_world(7, 4);
  int hits = 0, total = 0;
  for (int u = 0; u < w.corpus.num_users(); ++u) {
    for (int scenario = 1; scenario <= 4; ++scenario) {
      KnowledgeQuery q{u, Token::condition(scenario, {}, -1)};
      const auto r = query_single(w.model, w.index, w.corpus.catalog,
                                  w.corpus.events_by_user[static_cast<size_t>(u)], q, 1);
      hits += (r.top_k[0].item_id == scenario - 1) ? 1 : 0;
      ++total;
    }
  }
  INFO("rank-1 hit rate ", static_cast<double>(hits) / total);
  CHECK(static_cast<double>(hits) / total > 0.9);
}

TEST_CASE("query: oov and empty conditions are rejected") {
  auto w = make_world(9);
  const auto& history = w.corpus.events_by_user[0];
  KnowledgeQuery oov{0, Token::condition(99, {}, -1)};
  CHECK_THROWS_WITH_AS(query_single(w.model, w.index, w.corpus.catalog, history, oov, 1),
                       doctest::Contains("unknown scenario"), std::out_of_range);
  KnowledgeQuery empty{0, Token::condition(-1, {}, -1)};
  CHECK_THROWS_WITH_AS(query_single(w.model, w.index, w.corpus.catalog, history, empty, 1),
                       doctest::Contains("no populated fields"), std::invalid_argument);
  CHECK_THROWS_AS(query_group(w.model, w.index, w.corpus.catalog, history, {}, 1),
                  std::invalid_argument);
}

TEST_CASE("query_group: one query equals query_single exactly") {
  auto w = make_world(11);
  const auto& history = w.corpus.events_by_user[1];
  KnowledgeQuery q{1, Token::condition(2, {}, 1)};
  const auto single = query_single(w.model, w.index, w.corpus.catalog, history, q, 5);
  const auto group = query_group(w.model, w.index, w.corpus.catalog, history, {q}, 5);
  REQUIRE(group.size() == 1);
  CHECK(group[0].output == single.output);  // bitwise
  for (size_t i = 0; i < single.top_k.size(); ++i) {
    CHECK(group[0].top_k[i].item_id == single.top_k[i].item_id);
    CHECK(group[0].top_k[i].score == single.top_k[i].score);
  }
}

TEST_CASE("query_group: matches the sequential oracle within tolerance") {
  auto w = make_world(13);
  const auto& history = w.corpus.events_by_user[2];
  std::vector<KnowledgeQuery> queries{
      {2, Token::condition(1, {}, -1)},
      {2, Token::condition(3, {}, 2)},
      {2, Token::condition(2, {}, -1)},
  };
  const auto group = query_group(w.model, w.index, w.corpus.catalog, history, queries, 6);
  REQUIRE(group.size() == 3);
  for (size_t j = 0; j < queries.size(); ++j) {
    const auto single = query_single(w.model, w.index, w.corpus.catalog, history, queries[j], 6);
    double max_abs = 0;
    for (float v : single.output) max_abs = std::max(max_abs, std::fabs(static_cast<double>(v)));
    for (size_t d = 0; d < single.output.size(); ++d)
      CHECK(std::fabs(group[j].output[d] - single.output[d]) <= 1e-5 * std::max(1.0, max_abs));
    for (size_t i = 0; i < single.top_k.size(); ++i)
      CHECK(group[j].top_k[i].item_id == single.top_k[i].item_id);
  }
}

TEST_CASE("query_group: permuting queries permutes results") {
  auto w = make_world(17);
  const auto& history = w.corpus.events_by_user[3];
  std::vector<KnowledgeQuery> queries{
      {3, Token::condition(1, {}, -1)},
      {3, Token::condition(2, {}, -1)},
      {3, Token::condition(4, {}, 3)},
  };
  auto reversed = queries;
  std::reverse(reversed.begin(), reversed.end());
  const auto a = query_group(w.model, w.index, w.corpus.catalog, history, queries, 4);
  const auto b = query_group(w.model, w.index, w.corpus.catalog, history, reversed, 4);
  for (size_t j = 0; j < queries.size(); ++j) {
    CHECK(a[j].output == b[queries.size() - 1 - j].output);
    CHECK(a[j].top_k[0].item_id == b[queries.size() - 1 - j].top_k[0].item_id);
  }
}

TEST_CASE("query: top-k prefix consistency") {
  auto w = make_world(19);
  KnowledgeQuery q{0, Token::condition(1, {}, -1)};
  const auto& history = w.corpus.events_by_user[0];
  const auto small = query_single(w.model, w.index, w.corpus.catalog, history, q, 3);
  const auto large = query_single(w.model, w.index, w.corpus.catalog, history, q, 8);
  for (size_t i = 0; i < small.top_k.size(); ++i)
    CHECK(small.top_k[i].item_id == large.top_k[i].item_id);
}

TEST_CASE("condition fingerprint canonicalizes term order") {
  const auto a = condition_fingerprint(Token::condition(1, {4, 2, 9}, 3));
  const auto b = condition_fingerprint(Token::condition(1, {9, 4, 2}, 3));
  const auto c = condition_fingerprint(Token::condition(1, {9, 4}, 3));
  const auto d = condition_fingerprint(Token::condition(2, {4, 2, 9}, 3));
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a != d);
  CHECK(fingerprint_hex(a).size() == 16);
}

TEST_CASE("cache: get after put, version isolation, precedence") {
  KnowledgeCache cache;
  CacheKey key{7, 0xabcull, "vA"};
  CHECK_FALSE(cache.get(key).has_value());

  cache.put({key, mk_result(1.0f), CacheSource::Realtime});
  auto got = cache.get(key);
  REQUIRE(got.has_value());
  CHECK(got->result.output == mk_result(1.0f).output);

  CacheKey other_version{7, 0xabcull, "vB"};
  CHECK_FALSE(cache.get(other_version).has_value());  // versions never collide

  // warming a fallback must not displace the realtime entry
  cache.warm({{key, mk_result(2.0f), CacheSource::OfflineFallback}});
  CHECK(cache.get(key)->result.output == mk_result(1.0f).output);
  CHECK(cache.get(key)->source == CacheSource::Realtime);

  // warm first, then realtime overwrites
  CacheKey key2{8, 0xdefull, "vA"};
  cache.warm({{key2, mk_result(3.0f), CacheSource::OfflineFallback}});
  CHECK(cache.get(key2)->source == CacheSource::OfflineFallback);
  cache.put({key2, mk_result(4.0f), CacheSource::Realtime});
  CHECK(cache.get(key2)->source == CacheSource::Realtime);
  CHECK(cache.get(key2)->result.output == mk_result(4.0f).output);
}

TEST_CASE("cache: bounded capacity evicts the least recently used entry") {
  KnowledgeCache cache(2);
  CacheKey k1{1, 1, "v"}, k2{2, 2, "v"}, k3{3, 3, "v"};
  cache.put({k1, mk_result(1), CacheSource::Realtime});
  cache.put({k2, mk_result(2), CacheSource::Realtime});
  CHECK(cache.get(k1).has_value());  // refresh k1; k2 becomes LRU
  cache.put({k3, mk_result(3), CacheSource::Realtime});
  CHECK(cache.size() == 2);
  CHECK(cache.get(k1).has_value());
  CHECK_FALSE(cache.get(k2).has_value());
  CHECK(cache.get(k3).has_value());
}

TEST_CASE("cache: randomized operations agree with a reference map") {
  auto eng = rng::make_engine(23);
  KnowledgeCache cache;
  std::map<std::tuple<int64_t, uint64_t, std::string>, std::pair<float, CacheSource>> reference;
  for (int op = 0; op < 1000; ++op) {
    CacheKey key{rng::uniform_int(eng, 0, 5), static_cast<uint64_t>(rng::uniform_int(eng, 0, 5)),
                 rng::uniform(eng) < 0.5 ? "vA" : "vB"};
    const auto ref_key = std::make_tuple(key.user_id, key.condition_fp, key.model_version);
    const double roll = rng::uniform(eng);
    const float val = static_cast<float>(op);
    if (roll < 0.4) {
      cache.put({key, mk_result(val), CacheSource::Realtime});
      reference[ref_key] = {val, CacheSource::Realtime};
    } else if (roll < 0.6) {
      cache.warm({{key, mk_result(val), CacheSource::OfflineFallback}});
      auto it = reference.find(ref_key);
      if (it == reference.end() || it->second.second != CacheSource::Realtime)
        reference[ref_key] = {val, CacheSource::OfflineFallback};
    } else {
      const auto got = cache.get(key);
      const auto it = reference.find(ref_key);
      if (it == reference.end()) {
        CHECK_FALSE(got.has_value());
      } else {
        REQUIRE(got.has_value());
        CHECK(got->result.output[0] == it->second.first);
        CHECK(got->source == it->second.second);
      }
    }
  }
  CHECK(cache.size() == reference.size());
}

TEST_CASE("cache: save and reload preserve entries and precedence") {
  const auto dir = fs::temp_directory_path() / "lum_cache_rt";
  fs::create_directories(dir);
  const auto path = (dir / "cache.jsonl").string();
  KnowledgeCache cache;
  cache.put({{1, 10, "v"}, mk_result(1), CacheSource::Realtime});
  cache.warm({{{2, 20, "v"}, mk_result(2), CacheSource::OfflineFallback}});
  cache.save(path);
  KnowledgeCache loaded;
  loaded.load_file(path);
  CHECK(loaded.size() == 2);
  CHECK(loaded.get({1, 10, "v"})->source == CacheSource::Realtime);
  CHECK(loaded.get({2, 20, "v"})->source == CacheSource::OfflineFallback);
  CHECK(loaded.get({1, 10, "v"})->result.output == mk_result(1).output);
}

TEST_CASE("batch_infer: record count, determinism, and downstream loading") {
  auto w = make_world(29);
  // shrink to two users for the count check
  Corpus two = w.corpus;
  two.events_by_user.resize(2);
  two.user_raw_ids.resize(2);
  const std::vector<Token> conditions{Token::condition(1, {}, -1), Token::condition(2, {}, -1)};
  const auto dir = fs::temp_directory_path() / "lum_batch_infer";
  fs::create_directories(dir);
  const auto p1 = (dir / "log1.jsonl").string(), p2 = (dir / "log2.jsonl").string();
  batch_infer(w.model, w.index, two, conditions, 5, p1);
  batch_infer(w.model, w.index, two, conditions, 5, p2);
  CHECK(slurp(p1) == slurp(p2));  // byte-identical rerun

  const auto records = load_interest_log(p1);
  REQUIRE(records.size() == 4);  // 2 users x 2 conditions
  // sorted by (user, fingerprint)
  for (size_t i = 1; i < records.size(); ++i) {
    const bool user_asc = records[i - 1].user_id < records[i].user_id;
    const bool same_user_fp_asc = records[i - 1].user_id == records[i].user_id &&
                                  records[i - 1].condition_fp < records[i].condition_fp;
    CHECK((user_asc || same_user_fp_asc));
  }
  for (const auto& r : records) {
    CHECK(r.model_version == w.model.version);
    CHECK(static_cast<int>(r.output.size()) == w.model.cfg.arch.model_dim);
    CHECK(r.top_k.size() == 5);
  }

  // the dlrm side consumes the log without touching the model
  InterestProvider provider(records, conditions, w.model.cfg.arch.model_dim);
  CHECK(provider.count() == 2);
  std::vector<float> vecs;
  std::vector<uint8_t> present;
  provider.lookup(0, &vecs, &present);
  CHECK(present == std::vector<uint8_t>{1, 1});
  CHECK(vecs.size() == static_cast<size_t>(2 * w.model.cfg.arch.model_dim));
  provider.lookup(777, &vecs, &present);  // unknown user falls back to zeros
  CHECK(present == std::vector<uint8_t>{0, 0});
  for (float v : vecs) CHECK(v == 0.0f);

  // query result matches the logged record for the same condition
  KnowledgeQuery q{0, conditions[0]};
  const auto direct = query_single(w.model, w.index, two.catalog, two.events_by_user[0], q, 5);
  const auto fp = condition_fingerprint(conditions[0]);
  bool found = false;
  for (const auto& r : records)
    if (r.user_id == 0 && r.condition_fp == fp) {
      found = true;
      CHECK(r.output == direct.output);
    }
  CHECK(found);
}

TEST_CASE("item embeddings: export/load round trip") {
  auto w = make_world(31);
  const auto dir = fs::temp_directory_path() / "lum_item_emb";
  fs::create_directories(dir);
  const auto path = (dir / "items.bin").string();
  save_item_embeddings(w.index, path);
  const auto loaded = load_item_embeddings(path);
  CHECK(loaded.embeddings == w.index.embeddings);
  CHECK(loaded.model_version == w.index.model_version);
  CHECK(loaded.model_dim == w.index.model_dim);
}

TEST_CASE("cache transparency: cached result equals recomputation") {
  auto w = make_world(37);
  const auto& history = w.corpus.events_by_user[0];
  KnowledgeQuery q{0, Token::condition(1, {}, -1)};
  const auto fresh = query_single(w.model, w.index, w.corpus.catalog, history, q, 4);
  KnowledgeCache cache;
  cache.put({{0, condition_fingerprint(q.condition), w.model.version}, fresh, CacheSource::Realtime});
  const auto cached = cache.get({0, condition_fingerprint(q.condition), w.model.version});
  REQUIRE(cached.has_value());
  const auto again = query_single(w.model, w.index, w.corpus.catalog, history, q, 4);
  CHECK(cached->result.output == again.output);
  for (size_t i = 0; i < again.top_k.size(); ++i)
    CHECK(cached->result.top_k[i].item_id == again.top_k[i].item_id);
}
