// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lum/checkpoint.hpp"
#include "lum/data.hpp"
#include "lum/ops.hpp"
#include "lum/tensor.hpp"
#include "lum/tokens.hpp"

namespace lum {

struct TransformerConfig {
  int model_dim = 128;
  int num_heads = 4;
  int num_layers = 4;
  int mlp_hidden = 256;

  int head_dim() const { return model_dim / num_heads; }
};

struct LUMConfig {
  TransformerConfig arch;

  // vocabulary sizes, normally taken from a corpus
  int num_items = 0;
  int num_scenarios = 1;   // includes reserved id 0
  int num_categories = 1;
  int num_query_tokens = 1;
  int num_popularity_buckets = 8;
  int content_dim = 0;

  // per-field embedding widths of the token encoder
  int item_id_dim = 32;
  int category_dim = 8;
  int popularity_dim = 4;
  int scenario_dim = 8;
  int query_dim = 8;

  int max_sequence_tokens = 256;
  int negatives_per_positive = 8;  // K
  float temperature = 0.07f;       // cosine similarity temperature
  float learning_rate = 1e-3f;
  int batch_rows = 8;
  int epochs = 3;
  uint64_t seed = 1;
  bool condition_tokens = true;    // false trains the next-item-only variant

  void validate() const;
  void adopt_vocab(const VocabSizes& vocab);

  int item_encoder_input_dim() const {
    return item_id_dim + category_dim + popularity_dim + content_dim;
  }
  int condition_encoder_input_dim() const { return scenario_dim + query_dim + category_dim; }
};

std::string lum_config_to_json(const LUMConfig& cfg);
LUMConfig lum_config_from_json(const std::string& json_text);

// Token encoder projections, transformer parameters and the positional
// table. The item token encoder doubles as the target item embedding of
// the contrastive loss (weight sharing between input and target).
template <typename T>
struct LUMModelT {
  LUMConfig cfg;
  nn::ParameterStoreT<T> params;
  std::string version;  // content hash; set at init / train / load

  nn::Ref<T> item_id_table, item_cat_table, item_pop_table, item_proj_w, item_proj_b;
  nn::Ref<T> cond_scen_table, cond_query_table, cond_cat_table, cond_proj_w, cond_proj_b;
  nn::Ref<T> pos_table;
  struct Layer {
    nn::Ref<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    nn::Ref<T> ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  nn::Ref<T> final_ln_g, final_ln_b;

  void refresh_version() { version = nn::parameters_fingerprint(params, lum_config_to_json(cfg)); }
};

using LUMModel = LUMModelT<float>;

template <typename T>
LUMModelT<T> make_lum_model(const LUMConfig& cfg) {
  cfg.validate();
  LUMModelT<T> m;
  m.cfg = cfg;
  auto& ps = m.params;
  auto eng = rng::make_engine(cfg.seed);
  const double sd = 0.02;
  const int D = cfg.arch.model_dim;

  m.item_id_table = ps.create_normal("token.item.id_table", {cfg.num_items, cfg.item_id_dim}, eng, sd);
  m.item_cat_table = ps.create_normal("token.item.cat_table", {cfg.num_categories, cfg.category_dim}, eng, sd);
  m.item_pop_table =
      ps.create_normal("token.item.pop_table", {cfg.num_popularity_buckets, cfg.popularity_dim}, eng, sd);
  m.item_proj_w = ps.create_normal("token.item.proj_w", {cfg.item_encoder_input_dim(), D}, eng, sd);
  m.item_proj_b = ps.create("token.item.proj_b", {D});

  m.cond_scen_table = ps.create_normal("token.cond.scen_table", {cfg.num_scenarios, cfg.scenario_dim}, eng, sd);
  m.cond_query_table =
      ps.create_normal("token.cond.query_table", {std::max(cfg.num_query_tokens, 1), cfg.query_dim}, eng, sd);
  m.cond_cat_table = ps.create_normal("token.cond.cat_table", {cfg.num_categories, cfg.category_dim}, eng, sd);
  m.cond_proj_w = ps.create_normal("token.cond.proj_w", {cfg.condition_encoder_input_dim(), D}, eng, sd);
  m.cond_proj_b = ps.create("token.cond.proj_b", {D});

  m.pos_table = ps.create_normal("pos_table", {cfg.max_sequence_tokens + 1, D}, eng, sd);

  m.layers.resize(static_cast<size_t>(cfg.arch.num_layers));
  for (int l = 0; l < cfg.arch.num_layers; ++l) {
    auto& L = m.layers[static_cast<size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    L.ln1_g = ps.create_ones(p + "ln1.gain", {D});
    L.ln1_b = ps.create(p + "ln1.bias", {D});
    L.wq = ps.create_normal(p + "attn.wq", {D, D}, eng, sd);
    L.bq = ps.create(p + "attn.bq", {D});
    L.wk = ps.create_normal(p + "attn.wk", {D, D}, eng, sd);
    L.bk = ps.create(p + "attn.bk", {D});
    L.wv = ps.create_normal(p + "attn.wv", {D, D}, eng, sd);
    L.bv = ps.create(p + "attn.bv", {D});
    L.wo = ps.create_normal(p + "attn.wo", {D, D}, eng, sd);
    L.bo = ps.create(p + "attn.bo", {D});
    L.ln2_g = ps.create_ones(p + "ln2.gain", {D});
    L.ln2_b = ps.create(p + "ln2.bias", {D});
    L.w1 = ps.create_normal(p + "mlp.w1", {D, cfg.arch.mlp_hidden}, eng, sd);
    L.b1 = ps.create(p + "mlp.b1", {cfg.arch.mlp_hidden});
    L.w2 = ps.create_normal(p + "mlp.w2", {cfg.arch.mlp_hidden, D}, eng, sd);
    L.b2 = ps.create(p + "mlp.b2", {D});
  }
  m.final_ln_g = ps.create_ones("final_ln.gain", {D});
  m.final_ln_b = ps.create("final_ln.bias", {D});
  m.refresh_version();
  return m;
}

template <typename T>
LUMModelT<T> init_lum_model(const LUMConfig& cfg) {
  return make_lum_model<T>(cfg);
}

namespace model_detail {

template <typename T>
nn::Ref<T> content_tensor(const std::vector<const Token*>& toks, int content_dim) {
  auto t = nn::tensor<T>({static_cast<int>(toks.size()), content_dim});
  for (size_t i = 0; i < toks.size(); ++i) {
    if (static_cast<int>(toks[i]->content.size()) != content_dim)
      throw std::invalid_argument("encode: item content vector has size " +
                                  std::to_string(toks[i]->content.size()) + ", expected " +
                                  std::to_string(content_dim));
    for (int j = 0; j < content_dim; ++j)
      t->v[i * static_cast<size_t>(content_dim) + j] = static_cast<T>(toks[i]->content[static_cast<size_t>(j)]);
  }
  return t;
}

}  // namespace model_detail

// e^c rows for a batch of condition tokens. Absent categorical fields
// (-1) and empty query-term lists contribute zero sub-vectors.
template <typename T>
nn::Ref<T> encode_condition_tokens(nn::TapeT<T>& tape, const LUMModelT<T>& m,
                                   const std::vector<const Token*>& toks) {
  std::vector<int> scen, cat, flat, offsets{0};
  for (const Token* t : toks) {
    if (t->kind != TokenKind::Condition)
      throw std::invalid_argument("encode_condition_tokens: token is not a condition");
    scen.push_back(t->scenario_id);
    cat.push_back(t->category_id);
    for (int q : t->query_terms) flat.push_back(q);
    offsets.push_back(static_cast<int>(flat.size()));
  }
  auto e_scen = nn::embedding_rows(tape, m.cond_scen_table, scen);
  auto e_query = nn::embedding_bag_mean(tape, m.cond_query_table, flat, offsets);
  auto e_cat = nn::embedding_rows(tape, m.cond_cat_table, cat);
  auto cat_all = nn::concat_cols<T>(tape, {e_scen, e_query, e_cat});
  return nn::linear(tape, cat_all, m.cond_proj_w, m.cond_proj_b);
}

// e^i rows for a batch of item tokens.
template <typename T>
nn::Ref<T> encode_item_tokens(nn::TapeT<T>& tape, const LUMModelT<T>& m,
                              const std::vector<const Token*>& toks) {
  std::vector<int> ids, cat, pop;
  for (const Token* t : toks) {
    if (t->kind != TokenKind::Item)
      throw std::invalid_argument("encode_item_tokens: token is not an item");
    ids.push_back(t->item_index);
    cat.push_back(t->category_id);
    pop.push_back(t->popularity_bucket);
  }
  auto e_id = nn::embedding_rows(tape, m.item_id_table, ids);
  auto e_cat = nn::embedding_rows(tape, m.item_cat_table, cat);
  auto e_pop = nn::embedding_rows(tape, m.item_pop_table, pop);
  std::vector<nn::Ref<T>> parts{e_id, e_cat, e_pop};
  if (m.cfg.content_dim > 0)
    parts.push_back(model_detail::content_tensor<T>(toks, m.cfg.content_dim));
  auto cat_all = nn::concat_cols<T>(tape, parts);
  return nn::linear(tape, cat_all, m.item_proj_w, m.item_proj_b);
}

// Single-token convenience; runs on a scratch tape.
template <typename T>
std::vector<T> encode_token_values(const LUMModelT<T>& m, const Token& token) {
  nn::TapeT<T> tape;
  std::vector<const Token*> one{&token};
  auto e = token.kind == TokenKind::Item ? encode_item_tokens(tape, m, one)
                                         : encode_condition_tokens(tape, m, one);
  return e->v;
}

// Full user-encoder pass over a packed row: token encoding, positional
// embedding, pre-norm transformer blocks, final layer norm. Returns the
// [seq, model_dim] outputs; padding rows stay isolated via the mask.
template <typename T>
nn::Ref<T> lum_forward(nn::TapeT<T>& tape, const LUMModelT<T>& m, const PackedBatch& batch,
                       const AttentionMask& mask) {
  const int n = batch.size();
  if (mask.size != n) throw std::invalid_argument("lum_forward: mask size does not match batch");
  const int D = m.cfg.arch.model_dim;

  std::vector<const Token*> cond_toks, item_toks;
  std::vector<int> cond_pos, item_pos;
  std::vector<uint8_t> row_active(static_cast<size_t>(n), 0);
  std::vector<int> pos_ids(static_cast<size_t>(n), -1);
  for (int p = 0; p < n; ++p) {
    if (batch.segment_ids[static_cast<size_t>(p)] < 0) continue;
    row_active[static_cast<size_t>(p)] = 1;
    const int pid = batch.position_ids[static_cast<size_t>(p)];
    if (pid < 0 || pid >= m.pos_table->rows())
      throw std::out_of_range("lum_forward: position id " + std::to_string(pid) +
                              " exceeds positional table of " + std::to_string(m.pos_table->rows()));
    pos_ids[static_cast<size_t>(p)] = pid;
    const Token& t = batch.stream[static_cast<size_t>(p)];
    if (t.kind == TokenKind::Condition) {
      cond_toks.push_back(&t);
      cond_pos.push_back(p);
    } else {
      item_toks.push_back(&t);
      item_pos.push_back(p);
    }
  }

  auto x = nn::tensor<T>({n, D});
  if (!cond_toks.empty()) {
    auto enc = encode_condition_tokens(tape, m, cond_toks);
    x = nn::add(tape, x, nn::scatter_rows(tape, enc, cond_pos, n));
  }
  if (!item_toks.empty()) {
    auto enc = encode_item_tokens(tape, m, item_toks);
    x = nn::add(tape, x, nn::scatter_rows(tape, enc, item_pos, n));
  }
  x = nn::add(tape, x, nn::embedding_rows(tape, m.pos_table, pos_ids));

  for (const auto& L : m.layers) {
    auto h = nn::layer_norm(tape, x, L.ln1_g, L.ln1_b);
    auto q = nn::linear(tape, h, L.wq, L.bq);
    auto k = nn::linear(tape, h, L.wk, L.bk);
    auto v = nn::linear(tape, h, L.wv, L.bv);
    auto a = nn::masked_attention(tape, q, k, v, mask, m.cfg.arch.num_heads, &row_active);
    x = nn::add(tape, x, nn::linear(tape, a, L.wo, L.bo));
    auto h2 = nn::layer_norm(tape, x, L.ln2_g, L.ln2_b);
    auto mid = nn::gelu(tape, nn::linear(tape, h2, L.w1, L.b1));
    x = nn::add(tape, x, nn::linear(tape, mid, L.w2, L.b2));
  }
  return nn::layer_norm(tape, x, m.final_ln_g, m.final_ln_b);
}

// Next-condition-item InfoNCE over explicit embedding rows; thin wrapper
// that keeps the loss shape of the training objective in one place.
template <typename T>
nn::Ref<T> nce_loss(nn::TapeT<T>& tape, const nn::Ref<T>& condition_outputs,
                    const nn::Ref<T>& positive_items, const nn::Ref<T>& negative_items,
                    const std::vector<int>& negative_offsets, double temperature) {
  return nn::info_nce(tape, condition_outputs, positive_items, negative_items, negative_offsets,
                      temperature);
}

// Deterministic in-batch negative selection: for position l, walk the
// other positions starting after l (wrapping) and take up to K target
// items that differ from l's own target.
std::vector<std::vector<int>> in_batch_negatives(const std::vector<int>& targets, int k);

// InfoNCE loss summed over the loss positions of one packed row, with
// explicit negatives per loss position. Targets/negatives are encoded
// through the item token encoder (shared weights).
template <typename T>
nn::Ref<T> lum_row_loss(nn::TapeT<T>& tape, const LUMModelT<T>& m, const Catalog& catalog,
                        const PackedBatch& batch, const AttentionMask& mask,
                        const std::vector<std::vector<int>>& negatives_per_position,
                        int* out_num_positions = nullptr) {
  auto outputs = lum_forward(tape, m, batch, mask);
  std::vector<int> loss_rows;
  std::vector<int> targets;
  for (int p = 0; p < batch.size(); ++p)
    if (batch.loss_positions[static_cast<size_t>(p)]) {
      loss_rows.push_back(p);
      targets.push_back(batch.target_items[static_cast<size_t>(p)]);
    }
  if (out_num_positions) *out_num_positions = static_cast<int>(loss_rows.size());
  if (loss_rows.empty()) return nn::tensor<T>({1});
  if (negatives_per_position.size() != loss_rows.size())
    throw std::invalid_argument("lum_row_loss: negative lists do not match loss positions");

  auto o = nn::gather_rows(tape, outputs, loss_rows);

  std::vector<Token> item_tokens;
  std::vector<int> pos_rows, neg_rows, neg_offsets{0};
  std::map<int, int> encoded;  // item index -> row in item_tokens
  auto intern = [&](int item) {
    auto it = encoded.find(item);
    if (it != encoded.end()) return it->second;
    const int row = static_cast<int>(item_tokens.size());
    item_tokens.push_back(make_item_token(catalog, item));
    encoded[item] = row;
    return row;
  };
  for (size_t l = 0; l < loss_rows.size(); ++l) {
    pos_rows.push_back(intern(targets[l]));
    for (int ng : negatives_per_position[l]) neg_rows.push_back(intern(ng));
    neg_offsets.push_back(static_cast<int>(neg_rows.size()));
  }
  std::vector<const Token*> tok_ptrs;
  for (const auto& t : item_tokens) tok_ptrs.push_back(&t);
  auto item_emb = encode_item_tokens(tape, m, tok_ptrs);
  auto pos = nn::gather_rows(tape, item_emb, pos_rows);
  nn::Ref<T> neg;
  if (neg_rows.empty()) {
    // no negatives anywhere: loss degenerates to zero
    return nn::tensor<T>({1});
  }
  neg = nn::gather_rows(tape, item_emb, neg_rows);
  return nce_loss(tape, o, pos, neg, neg_offsets, static_cast<double>(m.cfg.temperature));
}

struct TrainStepRecord {
  int step = 0;
  int epoch = 0;
  float loss = 0.0f;  // mean per loss position
  double wall_ms = 0.0;
  double tokens_per_sec = 0.0;
};

struct TrainReport {
  std::vector<TrainStepRecord> steps;
  std::vector<float> epoch_mean_loss;
  double wall_seconds = 0.0;
  double tokens_per_second = 0.0;
  // in-batch accuracy over the final epoch: fraction of loss positions
  // whose positive outranked every sampled negative
  double final_in_batch_accuracy = 0.0;
};

std::pair<LUMModel, TrainReport> train_lum(const Corpus& corpus, const LUMConfig& cfg);

template <typename T>
void save_lum_checkpoint(const LUMModelT<T>& model, const std::string& path) {
  nn::save_parameters(model.params, lum_config_to_json(model.cfg), path);
}

template <typename T>
LUMModelT<T> load_lum_checkpoint(const std::string& path) {
  std::string cfg_json;
  auto loaded = nn::load_parameters<T>(path, &cfg_json);
  auto model = make_lum_model<T>(lum_config_from_json(cfg_json));
  if (loaded.order != model.params.order)
    throw std::runtime_error("load_lum_checkpoint: parameter list does not match config");
  for (const auto& name : loaded.order) {
    auto& dst = *model.params.by_name.at(name);
    auto& src = *loaded.by_name.at(name);
    if (dst.shape != src.shape)
      throw std::runtime_error("load_lum_checkpoint: shape mismatch for " + name);
    dst.v = src.v;
  }
  model.refresh_version();
  return model;
}

template <typename T>
int64_t parameter_count(const LUMModelT<T>& model) {
  return model.params.total_elements();
}

}  // namespace lum
