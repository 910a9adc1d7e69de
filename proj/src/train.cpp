// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "lum/model.hpp"

namespace lum {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<TokenizedSequence> corpus_sequences(const Corpus& corpus, const LUMConfig& cfg) {
  std::vector<TokenizedSequence> seqs;
  for (const auto& events : corpus.events_by_user) {
    if (events.empty()) continue;
    auto seq = cfg.condition_tokens ? tokenize_events(corpus.catalog, events)
                                    : tokenize_items_only(corpus.catalog, events);
    seq = truncate_recent(seq, cfg.max_sequence_tokens);
    if (seq.size() > 0) seqs.push_back(std::move(seq));
  }
  return seqs;
}

int real_tokens(const PackedBatch& row) {
  int n = 0;
  for (int s : row.segment_ids)
    if (s >= 0) ++n;
  return n;
}

// fraction of loss positions whose positive similarity beats every
// sampled in-batch negative
double in_batch_accuracy(const LUMModel& model, const Catalog& catalog,
                         const std::vector<PackedBatch>& rows,
                         const std::vector<AttentionMask>& masks, int k_negatives) {
  int64_t hits = 0, total = 0;
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    std::vector<int> loss_rows, targets;
    for (int p = 0; p < row.size(); ++p)
      if (row.loss_positions[static_cast<size_t>(p)]) {
        loss_rows.push_back(p);
        targets.push_back(row.target_items[static_cast<size_t>(p)]);
      }
    if (loss_rows.empty()) continue;
    const auto negs = in_batch_negatives(targets, k_negatives);
    nn::Tape tape;
    auto outputs = lum_forward(tape, model, row, masks[r]);
    const int D = model.cfg.arch.model_dim;
    auto cosine = [&](const float* a, const std::vector<float>& b) {
      double dot = 0, na = 0, nb = 0;
      for (int j = 0; j < D; ++j) {
        dot += static_cast<double>(a[j]) * b[static_cast<size_t>(j)];
        na += static_cast<double>(a[j]) * a[j];
        nb += static_cast<double>(b[static_cast<size_t>(j)]) * b[static_cast<size_t>(j)];
      }
      return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
    };
    for (size_t l = 0; l < loss_rows.size(); ++l) {
      if (negs[l].empty()) continue;
      const float* o = &outputs->v[static_cast<size_t>(loss_rows[l]) * D];
      const auto pos_emb = encode_token_values(model, make_item_token(catalog, targets[l]));
      const double spos = cosine(o, pos_emb);
      bool win = true;
      for (int ng : negs[l]) {
        const auto neg_emb = encode_token_values(model, make_item_token(catalog, ng));
        if (cosine(o, neg_emb) >= spos) {
          win = false;
          break;
        }
      }
      hits += win ? 1 : 0;
      total += 1;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

std::pair<LUMModel, TrainReport> train_lum(const Corpus& corpus, const LUMConfig& cfg) {
  cfg.validate();
  if (corpus.num_events() == 0) throw std::invalid_argument("train_lum: empty corpus");

  auto model = init_lum_model<float>(cfg);
  auto base_sequences = corpus_sequences(corpus, cfg);
  if (base_sequences.empty()) throw std::invalid_argument("train_lum: corpus has no usable sequences");

  TrainReport report;
  auto shuffle_eng = rng::make_engine(cfg.seed ^ 0x5bd1e995u);
  const auto t_start = Clock::now();
  int64_t total_tokens = 0;
  int step_no = 0;

  std::vector<PackedBatch> last_rows;
  std::vector<AttentionMask> last_masks;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto seqs = base_sequences;
    rng::shuffle(shuffle_eng, seqs);
    auto rows = pack_sequences(seqs, cfg.max_sequence_tokens);
    std::vector<AttentionMask> masks;
    masks.reserve(rows.size());
    for (const auto& r : rows) masks.push_back(build_training_mask(r));

    double epoch_loss_sum = 0.0;
    int64_t epoch_positions = 0;

    for (size_t row0 = 0; row0 < rows.size(); row0 += static_cast<size_t>(cfg.batch_rows)) {
      const size_t row1 = std::min(rows.size(), row0 + static_cast<size_t>(cfg.batch_rows));
      // flatten targets across the step to draw in-batch negatives
      std::vector<int> flat_targets;
      std::vector<size_t> row_counts;
      int step_tokens = 0;
      for (size_t r = row0; r < row1; ++r) {
        size_t count = 0;
        for (int p = 0; p < rows[r].size(); ++p)
          if (rows[r].loss_positions[static_cast<size_t>(p)]) {
            flat_targets.push_back(rows[r].target_items[static_cast<size_t>(p)]);
            ++count;
          }
        row_counts.push_back(count);
        step_tokens += real_tokens(rows[r]);
      }
      if (flat_targets.empty()) continue;
      const auto negatives = in_batch_negatives(flat_targets, cfg.negatives_per_positive);

      const auto t_step = Clock::now();
      model.params.zero_grads();
      nn::Tape tape;
      nn::TensorRef total = nn::tensor<float>({1});
      size_t cursor = 0;
      int num_positions = 0;
      for (size_t r = row0; r < row1; ++r) {
        std::vector<std::vector<int>> row_negs(negatives.begin() + static_cast<std::ptrdiff_t>(cursor),
                                               negatives.begin() + static_cast<std::ptrdiff_t>(cursor + row_counts[r - row0]));
        cursor += row_counts[r - row0];
        int n_pos = 0;
        auto row_loss = lum_row_loss(tape, model, corpus.catalog, rows[r], masks[r], row_negs, &n_pos);
        num_positions += n_pos;
        total = nn::add(tape, total, row_loss);
      }
      auto mean_loss = nn::scale(tape, total, 1.0 / std::max(num_positions, 1));
      tape.backward(mean_loss);
      nn::adam_step(model.params, static_cast<double>(cfg.learning_rate));

      const double step_s = seconds_since(t_step);
      total_tokens += step_tokens;
      TrainStepRecord rec;
      rec.step = step_no++;
      rec.epoch = epoch;
      rec.loss = mean_loss->v[0];
      rec.wall_ms = step_s * 1000.0;
      rec.tokens_per_sec = step_s > 0 ? step_tokens / step_s : 0.0;
      report.steps.push_back(rec);
      epoch_loss_sum += static_cast<double>(mean_loss->v[0]) * num_positions;
      epoch_positions += num_positions;
    }
    report.epoch_mean_loss.push_back(
        epoch_positions > 0 ? static_cast<float>(epoch_loss_sum / static_cast<double>(epoch_positions)) : 0.0f);
    if (epoch == cfg.epochs - 1) {
      last_rows = std::move(rows);
      last_masks = std::move(masks);
    }
  }

  report.wall_seconds = seconds_since(t_start);
  report.tokens_per_second = report.wall_seconds > 0 ? total_tokens / report.wall_seconds : 0.0;
  model.refresh_version();
  report.final_in_batch_accuracy =
      in_batch_accuracy(model, corpus.catalog, last_rows, last_masks, cfg.negatives_per_positive);
  return {std::move(model), std::move(report)};
}

}  // namespace lum
