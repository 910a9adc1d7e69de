// SPDX-License-Identifier: Apache-2.0
#include "lum/tokens.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace lum {

bool tokens_equal(const Token& a, const Token& b) {
  return a.kind == b.kind && a.scenario_id == b.scenario_id && a.query_terms == b.query_terms &&
         a.category_id == b.category_id && a.item_index == b.item_index &&
         a.popularity_bucket == b.popularity_bucket && a.content == b.content;
}

Token make_condition_token(const BehaviorEvent& ev) {
  return Token::condition(ev.scenario_id, ev.query_terms, ev.category_id);
}

Token make_item_token(const Catalog& catalog, int64_t item_id) {
  if (item_id < 0 || item_id >= catalog.num_items())
    throw std::out_of_range("make_item_token: item " + std::to_string(item_id) + " not in catalog");
  const auto& attrs = catalog.items[static_cast<size_t>(item_id)];
  return Token::item(static_cast<int>(item_id), attrs.category_id, attrs.popularity_bucket, attrs.content);
}

namespace {

void require_sorted(const std::vector<BehaviorEvent>& events) {
  for (size_t i = 1; i < events.size(); ++i) {
    const auto& a = events[i - 1];
    const auto& b = events[i];
    if (a.timestamp > b.timestamp || (a.timestamp == b.timestamp && a.item_id > b.item_id))
      throw std::invalid_argument("tokenize: events not sorted by timestamp at index " + std::to_string(i));
  }
}

}  // namespace

TokenizedSequence tokenize_events(const Catalog& catalog, const std::vector<BehaviorEvent>& events) {
  require_sorted(events);
  TokenizedSequence seq;
  seq.interleaved = true;
  if (!events.empty()) seq.user_id = events.front().user_id;
  seq.tokens.reserve(events.size() * 2);
  for (const auto& ev : events) {
    seq.tokens.push_back(make_condition_token(ev));
    seq.tokens.push_back(make_item_token(catalog, ev.item_id));
  }
  return seq;
}

TokenizedSequence tokenize_items_only(const Catalog& catalog, const std::vector<BehaviorEvent>& events) {
  require_sorted(events);
  TokenizedSequence seq;
  seq.interleaved = false;
  if (!events.empty()) seq.user_id = events.front().user_id;
  seq.tokens.reserve(events.size());
  for (const auto& ev : events) seq.tokens.push_back(make_item_token(catalog, ev.item_id));
  return seq;
}

TokenizedSequence truncate_recent(const TokenizedSequence& seq, int max_tokens) {
  if (max_tokens < 1) throw std::invalid_argument("truncate_recent: max_tokens must be >= 1");
  if (seq.interleaved) {
    if (max_tokens % 2 != 0)
      throw std::invalid_argument("truncate_recent: max_tokens must be even for interleaved sequences");
  }
  if (seq.size() <= max_tokens) return seq;
  TokenizedSequence out;
  out.user_id = seq.user_id;
  out.interleaved = seq.interleaved;
  out.tokens.assign(seq.tokens.end() - max_tokens, seq.tokens.end());
  return out;
}

std::vector<PackedBatch> pack_sequences(const std::vector<TokenizedSequence>& sequences, int max_len) {
  if (max_len < 1) throw std::invalid_argument("pack_sequences: max_len must be >= 1");
  for (const auto& s : sequences)
    if (s.size() > max_len)
      throw std::invalid_argument("pack_sequences: sequence of " + std::to_string(s.size()) +
                                  " tokens exceeds max_len " + std::to_string(max_len) +
                                  "; truncate it first");

  // First-fit-decreasing over lengths, stable on ties.
  std::vector<size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return sequences[a].size() > sequences[b].size(); });

  struct Row {
    std::vector<size_t> members;
    int used = 0;
  };
  std::vector<Row> rows;
  for (size_t idx : order) {
    const int len = sequences[idx].size();
    if (len == 0) continue;
    bool placed = false;
    for (auto& row : rows) {
      if (row.used + len <= max_len) {
        row.members.push_back(idx);
        row.used += len;
        placed = true;
        break;
      }
    }
    if (!placed) rows.push_back(Row{{idx}, len});
  }

  std::vector<PackedBatch> out;
  out.reserve(rows.size());
  for (const auto& row : rows) {
    PackedBatch b;
    b.stream.resize(static_cast<size_t>(max_len));
    b.segment_ids.assign(static_cast<size_t>(max_len), -1);
    b.position_ids.assign(static_cast<size_t>(max_len), 0);
    b.loss_positions.assign(static_cast<size_t>(max_len), 0);
    b.target_items.assign(static_cast<size_t>(max_len), -1);
    int pos = 0, seg = 0;
    for (size_t idx : row.members) {
      const auto& seq = sequences[idx];
      for (int t = 0; t < seq.size(); ++t) {
        b.stream[static_cast<size_t>(pos + t)] = seq.tokens[static_cast<size_t>(t)];
        b.segment_ids[static_cast<size_t>(pos + t)] = seg;
        b.position_ids[static_cast<size_t>(pos + t)] = t;
      }
      for (int t = 0; t + 1 < seq.size(); ++t) {
        if (seq.tokens[static_cast<size_t>(t) + 1].kind == TokenKind::Item) {
          b.loss_positions[static_cast<size_t>(pos + t)] = 1;
          b.target_items[static_cast<size_t>(pos + t)] = seq.tokens[static_cast<size_t>(t) + 1].item_index;
        }
      }
      pos += seq.size();
      ++seg;
    }
    b.num_segments = seg;
    out.push_back(std::move(b));
  }
  return out;
}

AttentionMask build_training_mask(const PackedBatch& batch) {
  const int n = batch.size();
  AttentionMask mask(n, AttentionMask::Mode::Training);
  for (int p = 0; p < n; ++p) {
    const int seg = batch.segment_ids[static_cast<size_t>(p)];
    if (seg < 0) continue;
    for (int q = 0; q <= p; ++q)
      if (batch.segment_ids[static_cast<size_t>(q)] == seg) mask.set(p, q, true);
  }
  return mask;
}

GroupQueryBatch build_group_query_batch(const TokenizedSequence& prefix,
                                        const std::vector<Token>& conditions) {
  if (conditions.empty())
    throw std::invalid_argument("build_group_query_batch: empty condition list");
  for (const auto& c : conditions)
    if (c.kind != TokenKind::Condition)
      throw std::invalid_argument("build_group_query_batch: query token is not a condition");
  if (prefix.interleaved && prefix.size() % 2 != 0)
    throw std::invalid_argument("build_group_query_batch: interleaved prefix has odd length");

  const int L = prefix.size();
  const int n = L + static_cast<int>(conditions.size());
  GroupQueryBatch out;
  out.prefix_len = L;
  auto& b = out.batch;
  b.stream.resize(static_cast<size_t>(n));
  b.segment_ids.assign(static_cast<size_t>(n), 0);
  b.position_ids.assign(static_cast<size_t>(n), 0);
  b.loss_positions.assign(static_cast<size_t>(n), 0);
  b.target_items.assign(static_cast<size_t>(n), -1);
  b.num_segments = 1;
  for (int t = 0; t < L; ++t) {
    b.stream[static_cast<size_t>(t)] = prefix.tokens[static_cast<size_t>(t)];
    b.position_ids[static_cast<size_t>(t)] = t;
  }
  for (size_t j = 0; j < conditions.size(); ++j) {
    const int p = L + static_cast<int>(j);
    b.stream[static_cast<size_t>(p)] = conditions[j];
    // every query is the "next" step after the prefix
    b.position_ids[static_cast<size_t>(p)] = L;
    out.query_positions.push_back(p);
  }

  AttentionMask mask(n, AttentionMask::Mode::GroupQuery);
  for (int p = 0; p < L; ++p)
    for (int q = 0; q <= p; ++q) mask.set(p, q, true);
  for (int p = L; p < n; ++p) {
    for (int q = 0; q < L; ++q) mask.set(p, q, true);
    mask.set(p, p, true);
  }
  out.mask = std::move(mask);
  return out;
}

}  // namespace lum
