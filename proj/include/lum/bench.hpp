// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lum/data.hpp"
#include "lum/eval.hpp"
#include "lum/model.hpp"
#include "lum/query.hpp"

namespace lum {

// Skewed-length token sequences for the packing benchmark: 80% of users
// hold at most max_len/4 tokens, the rest up to max_len.
std::vector<TokenizedSequence> make_skewed_sequences(const Corpus& corpus, int max_len,
                                                     uint64_t seed);

// Compares forward+backward throughput (real tokens per second) of
// FFD-packed rows against one-sequence-per-row padding. Median over
// `reps` timed repetitions after one warmup.
BenchReport bench_packing(const Corpus& corpus, const LUMConfig& cfg, int max_len, int reps = 5);

// Compares one group-query pass against num_queries sequential
// query_single calls over a prefix_len-token history.
BenchReport bench_group_query(const LUMModel& model, const ItemIndex& index, const Corpus& corpus,
                              int prefix_len, int num_queries, int k = 10, int reps = 5);

// Mean recall@k of each user's first held-out item through the LUM
// knowledge-query path (condition from the held-out event, ranking the
// catalog by output/item-embedding similarity).
double query_recall_at_k(const LUMModel& model, const ItemIndex& index, const Corpus& train,
                         const Corpus& test, int k);

}  // namespace lum
