// SPDX-License-Identifier: Apache-2.0
#include "lum/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lum {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double rel_spread(const std::vector<double>& v) {
  const double med = median(v);
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  return med > 0.0 ? (*mx - *mn) / med : 0.0;
}

// one optimizer-free training step: forward + loss + backward
double run_training_pass(const LUMModel& model, const Catalog& catalog,
                         const std::vector<PackedBatch>& rows,
                         const std::vector<AttentionMask>& masks, int k_negatives) {
  const auto t0 = Clock::now();
  for (size_t r = 0; r < rows.size(); ++r) {
    std::vector<int> targets;
    for (int p = 0; p < rows[r].size(); ++p)
      if (rows[r].loss_positions[static_cast<size_t>(p)])
        targets.push_back(rows[r].target_items[static_cast<size_t>(p)]);
    if (targets.empty()) continue;
    const auto negs = in_batch_negatives(targets, k_negatives);
    const_cast<LUMModel&>(model).params.zero_grads();
    nn::Tape tape;
    int n_pos = 0;
    auto loss = lum_row_loss(tape, model, catalog, rows[r], masks[r], negs, &n_pos);
    if (n_pos > 0) tape.backward(loss);
  }
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int64_t count_real_tokens(const std::vector<PackedBatch>& rows) {
  int64_t n = 0;
  for (const auto& r : rows)
    for (int s : r.segment_ids)
      if (s >= 0) ++n;
  return n;
}

}  // namespace

std::vector<TokenizedSequence> make_skewed_sequences(const Corpus& corpus, int max_len,
                                                     uint64_t seed) {
  auto eng = rng::make_engine(seed);
  std::vector<TokenizedSequence> seqs;
  for (const auto& events : corpus.events_by_user) {
    if (events.empty()) continue;
    auto seq = tokenize_events(corpus.catalog, events);
    int target;
    if (rng::uniform(eng) < 0.8)
      target = static_cast<int>(rng::uniform_int(eng, 2, std::max(max_len / 4, 2)));
    else
      target = static_cast<int>(rng::uniform_int(eng, max_len / 4, max_len));
    if (target % 2) --target;
    target = std::max(target, 2);
    seqs.push_back(truncate_recent(seq, target));
  }
  return seqs;
}

BenchReport bench_packing(const Corpus& corpus, const LUMConfig& cfg, int max_len, int reps) {
  if (reps < 5) throw std::invalid_argument("bench_packing: need at least 5 repetitions");
  auto model = init_lum_model<float>(cfg);
  const auto seqs = make_skewed_sequences(corpus, max_len, cfg.seed ^ 0xbe9c0ull);

  auto packed = pack_sequences(seqs, max_len);
  std::vector<PackedBatch> unpacked;
  for (const auto& s : seqs) {
    auto one = pack_sequences({s}, max_len);
    unpacked.push_back(std::move(one.front()));
  }
  std::vector<AttentionMask> packed_masks, unpacked_masks;
  for (const auto& r : packed) packed_masks.push_back(build_training_mask(r));
  for (const auto& r : unpacked) unpacked_masks.push_back(build_training_mask(r));
  const int64_t tokens = count_real_tokens(packed);

  run_training_pass(model, corpus.catalog, packed, packed_masks, cfg.negatives_per_positive);
  run_training_pass(model, corpus.catalog, unpacked, unpacked_masks, cfg.negatives_per_positive);

  std::vector<double> t_packed, t_unpacked;
  for (int i = 0; i < reps; ++i) {
    t_packed.push_back(
        run_training_pass(model, corpus.catalog, packed, packed_masks, cfg.negatives_per_positive));
    t_unpacked.push_back(run_training_pass(model, corpus.catalog, unpacked, unpacked_masks,
                                           cfg.negatives_per_positive));
  }

  BenchReport report;
  report.config = "packing: " + std::to_string(seqs.size()) + " sequences, max_len " +
                  std::to_string(max_len) + ", " + std::to_string(packed.size()) + " packed rows vs " +
                  std::to_string(unpacked.size()) + " padded rows";
  report.median_seconds = median(t_packed);
  report.baseline_median_seconds = median(t_unpacked);
  report.items_processed = tokens;
  report.throughput = tokens / report.median_seconds;
  report.baseline_throughput = tokens / report.baseline_median_seconds;
  report.speedup = report.throughput / report.baseline_throughput;
  report.rel_spread = std::max(rel_spread(t_packed), rel_spread(t_unpacked));
  report.noisy = report.rel_spread > 0.2;
  return report;
}

BenchReport bench_group_query(const LUMModel& model, const ItemIndex& index, const Corpus& corpus,
                              int prefix_len, int num_queries, int k, int reps) {
  if (reps < 5) throw std::invalid_argument("bench_group_query: need at least 5 repetitions");
  if (num_queries < 1) throw std::invalid_argument("bench_group_query: need at least one query");

  // pick the first user with enough history for the requested prefix
  const std::vector<BehaviorEvent>* history = nullptr;
  for (const auto& events : corpus.events_by_user)
    if (static_cast<int>(events.size()) * 2 >= prefix_len) {
      history = &events;
      break;
    }
  if (!history) throw std::invalid_argument("bench_group_query: no user has a long enough history");

  std::vector<KnowledgeQuery> queries;
  for (int i = 0; i < num_queries; ++i) {
    KnowledgeQuery q;
    q.user_id = 0;
    q.condition = Token::condition(1 + i % std::max(model.cfg.num_scenarios - 1, 1), {},
                                   i % model.cfg.num_categories);
    queries.push_back(std::move(q));
  }

  auto run_group = [&]() {
    const auto t0 = Clock::now();
    auto res = query_group(model, index, corpus.catalog, *history, queries, k);
    (void)res;
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };
  auto run_sequential = [&]() {
    const auto t0 = Clock::now();
    for (const auto& q : queries) {
      auto res = query_single(model, index, corpus.catalog, *history, q, k);
      (void)res;
    }
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };

  run_group();
  run_sequential();
  std::vector<double> t_group, t_seq;
  for (int i = 0; i < reps; ++i) {
    t_group.push_back(run_group());
    t_seq.push_back(run_sequential());
  }

  BenchReport report;
  report.config = "group query: prefix " + std::to_string(prefix_len) + " tokens, " +
                  std::to_string(num_queries) + " queries";
  report.median_seconds = median(t_group);
  report.baseline_median_seconds = median(t_seq);
  report.items_processed = num_queries;
  report.throughput = num_queries / report.median_seconds;
  report.baseline_throughput = num_queries / report.baseline_median_seconds;
  report.speedup = report.baseline_median_seconds / report.median_seconds;
  report.rel_spread = std::max(rel_spread(t_group), rel_spread(t_seq));
  report.noisy = report.rel_spread > 0.2;
  return report;
}

double query_recall_at_k(const LUMModel& model, const ItemIndex& index, const Corpus& train,
                         const Corpus& test, int k) {
  double total = 0.0;
  int n = 0;
  for (int u = 0; u < test.num_users(); ++u) {
    const auto& held = test.events_by_user[static_cast<size_t>(u)];
    if (held.empty()) continue;
    const auto& hist = train.events_by_user[static_cast<size_t>(u)];
    if (hist.empty() && !model.cfg.condition_tokens) continue;
    const auto& ev = held.front();
    KnowledgeQuery q;
    q.user_id = test.user_raw_ids[static_cast<size_t>(u)];
    q.condition = make_condition_token(ev);
    const auto result = query_single(model, index, test.catalog, hist, q, k);
    const int64_t want = test.catalog.items[static_cast<size_t>(ev.item_id)].raw_id;
    for (const auto& s : result.top_k)
      if (s.item_id == want) {
        total += 1.0;
        break;
      }
    ++n;
  }
  return n == 0 ? 0.0 : total / n;
}

}  // namespace lum
