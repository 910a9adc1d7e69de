// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <map>

#include "helpers.hpp"
#include "lum/tokens.hpp"

using namespace lum;

namespace {

Catalog small_catalog(int n) {
  Catalog c;
  for (int i = 0; i < n; ++i) {
    ItemAttrs a;
    a.raw_id = i;
    a.category_id = i % 3;
    a.popularity_bucket = i % 2;
    c.items.push_back(a);
  }
  return c;
}

BehaviorEvent ev(int64_t item, int64_t ts, int scenario = 1, std::vector<int> terms = {}) {
  BehaviorEvent e;
  e.item_id = item;
  e.timestamp = ts;
  e.scenario_id = scenario;
  e.query_terms = std::move(terms);
  e.category_id = 0;
  return e;
}

std::vector<TokenizedSequence> random_sequences(const Catalog& catalog, rng::Engine& eng, int count,
                                                int max_events) {
  std::vector<TokenizedSequence> seqs;
  for (int s = 0; s < count; ++s) {
    std::vector<BehaviorEvent> events;
    const int n = static_cast<int>(rng::uniform_int(eng, 1, max_events));
    for (int e = 0; e < n; ++e)
      events.push_back(ev(rng::uniform_int(eng, 0, catalog.num_items() - 1), 100 + e * 10));
    seqs.push_back(tokenize_events(catalog, events));
  }
  return seqs;
}

// multiset key of a token for conservation checks
std::string token_key(const Token& t) {
  std::string k = t.kind == TokenKind::Item ? "I:" : "C:";
  k += std::to_string(t.item_index) + "/" + std::to_string(t.scenario_id) + "/" +
       std::to_string(t.category_id);
  for (int q : t.query_terms) k += "," + std::to_string(q);
  return k;
}

}  // namespace

TEST_CASE("tokenize: interleaves condition and item tokens") {
  auto catalog = small_catalog(50);
  // search for "dress"-like term then a homepage interaction
  std::vector<BehaviorEvent> events{ev(42, 100, 1, {7}), ev(7, 200, 2)};
  const auto seq = tokenize_events(catalog, events);
  REQUIRE(seq.size() == 4);
  CHECK(seq.tokens[0].kind == TokenKind::Condition);
  CHECK(seq.tokens[0].scenario_id == 1);
  CHECK(seq.tokens[0].query_terms == std::vector<int>{7});
  CHECK(seq.tokens[1].kind == TokenKind::Item);
  CHECK(seq.tokens[1].item_index == 42);
  CHECK(seq.tokens[2].kind == TokenKind::Condition);
  CHECK(seq.tokens[2].scenario_id == 2);
  CHECK(seq.tokens[2].query_terms.empty());
  CHECK(seq.tokens[3].item_index == 7);
}

TEST_CASE("tokenize: empty and singleton inputs") {
  auto catalog = small_catalog(5);
  CHECK(tokenize_events(catalog, {}).size() == 0);
  const auto seq = tokenize_events(catalog, {ev(3, 100)});
  REQUIRE(seq.size() == 2);
  CHECK(seq.tokens[0].kind == TokenKind::Condition);
  CHECK(seq.tokens[1].kind == TokenKind::Item);
}

TEST_CASE("tokenize: unsorted input is rejected") {
  auto catalog = small_catalog(5);
  CHECK_THROWS_WITH_AS(tokenize_events(catalog, {ev(1, 200), ev(2, 100)}),
                       doctest::Contains("not sorted"), std::invalid_argument);
}

TEST_CASE("tokenize: alternation invariant on random inputs") {
  auto catalog = small_catalog(20);
  auto eng = rng::make_engine(3);
  for (const auto& seq : random_sequences(catalog, eng, 20, 15)) {
    CHECK(seq.size() % 2 == 0);
    for (int i = 0; i < seq.size(); ++i)
      CHECK(seq.tokens[static_cast<size_t>(i)].kind ==
            (i % 2 == 0 ? TokenKind::Condition : TokenKind::Item));
  }
}

TEST_CASE("truncate: keeps the most recent tokens on a condition boundary") {
  auto catalog = small_catalog(10);
  const auto seq = tokenize_events(catalog, {ev(1, 100), ev(2, 200), ev(3, 300)});
  const auto cut = truncate_recent(seq, 4);
  REQUIRE(cut.size() == 4);
  CHECK(cut.tokens[0].kind == TokenKind::Condition);
  CHECK(cut.tokens[1].item_index == 2);
  CHECK(cut.tokens[3].item_index == 3);

  CHECK(truncate_recent(seq, 8).size() == 6);  // shorter than cap: unchanged
  const auto pair = truncate_recent(seq, 2);
  REQUIRE(pair.size() == 2);
  CHECK(pair.tokens[1].item_index == 3);  // final (C, I) pair

  CHECK_THROWS_AS(truncate_recent(seq, 3), std::invalid_argument);  // odd cap
}

TEST_CASE("pack: first-fit-decreasing on the worked example") {
  auto catalog = small_catalog(10);
  // token lengths 6, 4, 2
  std::vector<TokenizedSequence> seqs{
      tokenize_events(catalog, {ev(1, 100), ev(2, 200), ev(3, 300)}),
      tokenize_events(catalog, {ev(4, 100), ev(5, 200)}),
      tokenize_events(catalog, {ev(6, 100)}),
  };
  const auto rows = pack_sequences(seqs, 8);
  REQUIRE(rows.size() == 2);
  // row 0: the 6-token sequence plus the 2-token one
  std::vector<int> want_segments{0, 0, 0, 0, 0, 0, 1, 1};
  CHECK(rows[0].segment_ids == want_segments);
  CHECK(rows[0].stream[7].item_index == 6);
  CHECK(rows[0].position_ids[6] == 0);  // position ids restart per segment
  CHECK(rows[0].position_ids[5] == 5);
  // row 1: the 4-token sequence with padding tail
  CHECK(rows[1].segment_ids[3] == 0);
  CHECK(rows[1].segment_ids[4] == -1);
}

TEST_CASE("pack: exact fits never co-pack") {
  auto catalog = small_catalog(10);
  std::vector<TokenizedSequence> seqs{
      tokenize_events(catalog, {ev(1, 100), ev(2, 200), ev(3, 300), ev(4, 400)}),
      tokenize_events(catalog, {ev(5, 100), ev(6, 200), ev(7, 300), ev(8, 400)}),
  };
  const auto rows = pack_sequences(seqs, 8);
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) {
    CHECK(row.num_segments == 1);
    for (int s : row.segment_ids) CHECK(s == 0);
  }
}

TEST_CASE("pack: a single short sequence gets a padding tail") {
  auto catalog = small_catalog(10);
  const auto rows = pack_sequences({tokenize_events(catalog, {ev(1, 100)})}, 8);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].segment_ids[0] == 0);
  CHECK(rows[0].segment_ids[1] == 0);
  for (int p = 2; p < 8; ++p) {
    CHECK(rows[0].segment_ids[static_cast<size_t>(p)] == -1);
    CHECK(rows[0].loss_positions[static_cast<size_t>(p)] == 0);
  }
}

TEST_CASE("pack: oversized sequence directs caller to truncate") {
  auto catalog = small_catalog(10);
  const auto seq = tokenize_events(catalog, {ev(1, 100), ev(2, 200), ev(3, 300)});
  CHECK_THROWS_WITH_AS(pack_sequences({seq}, 4), doctest::Contains("truncate"),
                       std::invalid_argument);
}

TEST_CASE("pack: conserves the token multiset and loss-position count") {
  auto catalog = small_catalog(25);
  auto eng = rng::make_engine(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto seqs = random_sequences(catalog, eng, 12, 8);
    std::map<std::string, int> want;
    int want_pairs = 0;
    for (const auto& s : seqs) {
      for (const auto& t : s.tokens) want[token_key(t)] += 1;
      want_pairs += s.size() / 2;  // one (C, I) pair per event
    }
    const auto rows = pack_sequences(seqs, 16);
    std::map<std::string, int> got;
    int got_loss = 0;
    for (const auto& row : rows) {
      for (int p = 0; p < row.size(); ++p) {
        if (row.segment_ids[static_cast<size_t>(p)] < 0) continue;
        got[token_key(row.stream[static_cast<size_t>(p)])] += 1;
        got_loss += row.loss_positions[static_cast<size_t>(p)] ? 1 : 0;
        if (row.loss_positions[static_cast<size_t>(p)]) {
          CHECK(row.stream[static_cast<size_t>(p)].kind == TokenKind::Condition);
          CHECK(row.target_items[static_cast<size_t>(p)] ==
                row.stream[static_cast<size_t>(p) + 1].item_index);
        }
      }
      // alternation within each segment
      for (int p = 1; p < row.size(); ++p)
        if (row.segment_ids[static_cast<size_t>(p)] >= 0 &&
            row.segment_ids[static_cast<size_t>(p)] == row.segment_ids[static_cast<size_t>(p) - 1])
          CHECK(row.stream[static_cast<size_t>(p)].kind != row.stream[static_cast<size_t>(p) - 1].kind);
    }
    CHECK(got == want);
    CHECK(got_loss == want_pairs);
  }
}

TEST_CASE("training mask: lower-triangular within one segment") {
  auto catalog = small_catalog(5);
  const auto rows = pack_sequences({tokenize_events(catalog, {ev(1, 100)})}, 2);
  const auto mask = build_training_mask(rows[0]);
  CHECK(mask.at(0, 0));
  CHECK_FALSE(mask.at(0, 1));
  CHECK(mask.at(1, 0));
  CHECK(mask.at(1, 1));
  CHECK(mask.to_grid() == "10\n11\n");
}

TEST_CASE("training mask: segments are isolated") {
  auto catalog = small_catalog(5);
  std::vector<TokenizedSequence> seqs{tokenize_events(catalog, {ev(1, 100)}),
                                      tokenize_events(catalog, {ev(2, 100)})};
  const auto rows = pack_sequences(seqs, 4);
  REQUIRE(rows.size() == 1);
  const auto mask = build_training_mask(rows[0]);
  // position 2 opens segment 1; it may only attend to itself
  CHECK(mask.at(2, 2));
  CHECK_FALSE(mask.at(2, 0));
  CHECK_FALSE(mask.at(2, 1));
  CHECK(mask.at(3, 2));
  CHECK_FALSE(mask.at(3, 1));
}

TEST_CASE("training mask: padding rows are entirely false") {
  PackedBatch batch;
  batch.stream.resize(3);
  batch.segment_ids = {-1, -1, -1};
  batch.position_ids = {0, 0, 0};
  batch.loss_positions = {0, 0, 0};
  batch.target_items = {-1, -1, -1};
  const auto mask = build_training_mask(batch);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) CHECK_FALSE(mask.at(r, c));
}

TEST_CASE("training mask: causality property on random packs") {
  auto catalog = small_catalog(25);
  auto eng = rng::make_engine(21);
  auto seqs = random_sequences(catalog, eng, 10, 7);
  for (const auto& row : pack_sequences(seqs, 16)) {
    const auto mask = build_training_mask(row);
    for (int p = 0; p < row.size(); ++p)
      for (int q = 0; q < row.size(); ++q)
        if (mask.at(p, q)) {
          CHECK(q <= p);
          CHECK(row.segment_ids[static_cast<size_t>(p)] == row.segment_ids[static_cast<size_t>(q)]);
        }
  }
}

TEST_CASE("group query batch: masking and shared position ids") {
  auto catalog = small_catalog(10);
  const auto prefix = tokenize_events(catalog, {ev(1, 100), ev(2, 200)});  // 4 tokens
  std::vector<Token> queries{Token::condition(1, {}, -1), Token::condition(2, {}, -1)};
  const auto gq = build_group_query_batch(prefix, queries);
  REQUIRE(gq.batch.size() == 6);
  CHECK(gq.prefix_len == 4);
  CHECK(gq.query_positions == std::vector<int>{4, 5});
  // query at 4 sees {0,1,2,3,4}; query at 5 sees {0,1,2,3,5}
  for (int c = 0; c < 4; ++c) {
    CHECK(gq.mask.at(4, c));
    CHECK(gq.mask.at(5, c));
  }
  CHECK(gq.mask.at(4, 4));
  CHECK_FALSE(gq.mask.at(4, 5));
  CHECK(gq.mask.at(5, 5));
  CHECK_FALSE(gq.mask.at(5, 4));
  // both queries sit at position len(prefix)
  CHECK(gq.batch.position_ids[4] == 4);
  CHECK(gq.batch.position_ids[5] == 4);
}

TEST_CASE("group query batch: single query equals plain causal extension") {
  auto catalog = small_catalog(10);
  const auto prefix = tokenize_events(catalog, {ev(1, 100), ev(2, 200)});
  const auto gq = build_group_query_batch(prefix, {Token::condition(1, {}, -1)});
  for (int p = 0; p < gq.batch.size(); ++p)
    for (int q = 0; q < gq.batch.size(); ++q) CHECK(gq.mask.at(p, q) == (q <= p));
}

TEST_CASE("group query batch: empty condition list is an error") {
  auto catalog = small_catalog(10);
  const auto prefix = tokenize_events(catalog, {ev(1, 100)});
  CHECK_THROWS_AS(build_group_query_batch(prefix, {}), std::invalid_argument);
}

TEST_CASE("group query isolation property") {
  auto catalog = small_catalog(10);
  auto eng = rng::make_engine(33);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<BehaviorEvent> events;
    const int n = static_cast<int>(rng::uniform_int(eng, 0, 6));
    for (int e = 0; e < n; ++e) events.push_back(ev(rng::uniform_int(eng, 0, 9), 100 + e));
    std::vector<Token> queries;
    const int nq = static_cast<int>(rng::uniform_int(eng, 1, 5));
    for (int i = 0; i < nq; ++i) queries.push_back(Token::condition(1, {}, -1));
    const auto gq = build_group_query_batch(tokenize_events(catalog, events), queries);
    for (int a : gq.query_positions)
      for (int b : gq.query_positions)
        if (a != b) CHECK_FALSE(gq.mask.at(a, b));
  }
}
