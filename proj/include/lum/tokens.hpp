// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lum/data.hpp"
#include "lum/mask.hpp"

namespace lum {

enum class TokenKind : uint8_t { Condition, Item };

// Heterogeneous token. Condition tokens populate scenario_id,
// query_terms and category_id (-1 marks an absent categorical field);
// item tokens populate item fields from the catalog.
struct Token {
  TokenKind kind = TokenKind::Condition;
  // condition fields, in encoder order
  int scenario_id = -1;
  std::vector<int> query_terms;
  int category_id = -1;
  // item fields, in encoder order
  int item_index = -1;
  int popularity_bucket = 0;
  std::vector<float> content;

  static Token condition(int scenario, std::vector<int> terms, int category) {
    Token t;
    t.kind = TokenKind::Condition;
    t.scenario_id = scenario;
    t.query_terms = std::move(terms);
    t.category_id = category;
    return t;
  }
  static Token item(int index, int category, int pop_bucket, std::vector<float> content_vec) {
    Token t;
    t.kind = TokenKind::Item;
    t.item_index = index;
    t.category_id = category;
    t.popularity_bucket = pop_bucket;
    t.content = std::move(content_vec);
    return t;
  }
};

bool tokens_equal(const Token& a, const Token& b);

// Token stream for one user. In interleaved form tokens alternate
// Condition, Item, Condition, Item, ...; the items-only form (used by
// the no-condition model variant) holds item tokens only.
struct TokenizedSequence {
  int64_t user_id = 0;
  bool interleaved = true;
  std::vector<Token> tokens;

  int size() const { return static_cast<int>(tokens.size()); }
};

// One packed training row: token stream padded to a fixed length, with
// per-position segment ids (-1 for padding), per-segment restarting
// position ids, loss flags and target items.
//
// A position carries loss when its successor within the same segment is
// an item token; in interleaved streams these are exactly the condition
// positions that precede an item.
struct PackedBatch {
  std::vector<Token> stream;
  std::vector<int> segment_ids;    // -1 = padding
  std::vector<int> position_ids;   // restart at 0 per segment
  std::vector<uint8_t> loss_positions;
  std::vector<int> target_items;   // dense item index, -1 where no loss
  int num_segments = 0;

  int size() const { return static_cast<int>(stream.size()); }
};

Token make_condition_token(const BehaviorEvent& ev);
Token make_item_token(const Catalog& catalog, int64_t item_id);

// events -> [C, I, C, I, ...]; requires events sorted by timestamp.
TokenizedSequence tokenize_events(const Catalog& catalog, const std::vector<BehaviorEvent>& events);

// events -> [I, I, ...] for the no-condition-token model variant.
TokenizedSequence tokenize_items_only(const Catalog& catalog, const std::vector<BehaviorEvent>& events);

// Keeps the most recent max_tokens tokens. For interleaved sequences the
// cut lands on a condition boundary (max_tokens must be even).
TokenizedSequence truncate_recent(const TokenizedSequence& seq, int max_tokens);

// First-fit-decreasing packing into rows of length max_len. Stable: ties
// in length keep input order. Every input token appears exactly once.
std::vector<PackedBatch> pack_sequences(const std::vector<TokenizedSequence>& sequences, int max_len);

// Causal mask with segment isolation: allowed(p, q) iff same segment,
// q <= p, and neither position is padding.
AttentionMask build_training_mask(const PackedBatch& batch);

struct GroupQueryBatch {
  PackedBatch batch;
  AttentionMask mask;
  int prefix_len = 0;
  std::vector<int> query_positions;
};

// prefix tokens followed by the query conditions. Every query position
// attends to the whole prefix and itself, never to another query; all
// query positions share position id prefix_len.
GroupQueryBatch build_group_query_batch(const TokenizedSequence& prefix,
                                        const std::vector<Token>& conditions);

}  // namespace lum
