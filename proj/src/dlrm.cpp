// SPDX-License-Identifier: Apache-2.0
#include "lum/dlrm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lum/checkpoint.hpp"
#include "lum/ops.hpp"
#include "lum/rng.hpp"

namespace lum {

double interest_matching(const std::vector<float>& o, const std::vector<float>& e_i) {
  if (o.size() != e_i.size())
    throw std::invalid_argument("interest_matching: dimension mismatch " + std::to_string(o.size()) +
                                " vs " + std::to_string(e_i.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t j = 0; j < o.size(); ++j) {
    dot += static_cast<double>(o[j]) * e_i[j];
    na += static_cast<double>(o[j]) * o[j];
    nb += static_cast<double>(e_i[j]) * e_i[j];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("interest_matching: zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void DlrmConfig::validate() const {
  if (vocab.num_users < 1 || vocab.num_items < 1)
    throw std::invalid_argument("DlrmConfig: vocabulary must have users and items");
  if (user_dim < 1 || item_dim < 1 || category_dim < 1 || scenario_dim < 1 || query_dim < 1 ||
      popularity_dim < 1)
    throw std::invalid_argument("DlrmConfig: embedding dims must be >= 1");
  if (hidden_dim < 1 || tower_hidden < 1 || tower_dim < 1)
    throw std::invalid_argument("DlrmConfig: network widths must be >= 1");
  if (lum_dim < 0 || num_interests < 0)
    throw std::invalid_argument("DlrmConfig: lum feature sizes must be >= 0");
  if (lum_dim > 0 && num_interests < 1)
    throw std::invalid_argument("DlrmConfig: lum variant needs at least one interest condition");
  if (!(learning_rate > 0.0f) || epochs < 1 || batch_size < 1 || negatives_per_positive < 1)
    throw std::invalid_argument("DlrmConfig: bad training settings");
}

std::string dlrm_config_to_json(const DlrmConfig& cfg, const std::string& kind) {
  nlohmann::json j;
  j["kind"] = kind;
  j["vocab"] = {{"num_users", cfg.vocab.num_users},
                {"num_items", cfg.vocab.num_items},
                {"num_scenarios", cfg.vocab.num_scenarios},
                {"num_categories", cfg.vocab.num_categories},
                {"num_query_tokens", cfg.vocab.num_query_tokens},
                {"content_dim", cfg.vocab.content_dim},
                {"num_popularity_buckets", cfg.vocab.num_popularity_buckets}};
  j["user_dim"] = cfg.user_dim;
  j["item_dim"] = cfg.item_dim;
  j["category_dim"] = cfg.category_dim;
  j["scenario_dim"] = cfg.scenario_dim;
  j["query_dim"] = cfg.query_dim;
  j["popularity_dim"] = cfg.popularity_dim;
  j["hidden_dim"] = cfg.hidden_dim;
  j["tower_hidden"] = cfg.tower_hidden;
  j["tower_dim"] = cfg.tower_dim;
  j["lum_dim"] = cfg.lum_dim;
  j["num_interests"] = cfg.num_interests;
  j["interest_matching_feature"] = cfg.interest_matching_feature;
  j["learning_rate"] = cfg.learning_rate;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["negatives_per_positive"] = cfg.negatives_per_positive;
  j["seed"] = cfg.seed;
  return j.dump();
}

DlrmConfig dlrm_config_from_json(const std::string& json_text, std::string* kind) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  if (kind) *kind = j.at("kind").get<std::string>();
  DlrmConfig cfg;
  const auto& v = j.at("vocab");
  cfg.vocab.num_users = v.at("num_users").get<int>();
  cfg.vocab.num_items = v.at("num_items").get<int>();
  cfg.vocab.num_scenarios = v.at("num_scenarios").get<int>();
  cfg.vocab.num_categories = v.at("num_categories").get<int>();
  cfg.vocab.num_query_tokens = v.at("num_query_tokens").get<int>();
  cfg.vocab.content_dim = v.at("content_dim").get<int>();
  cfg.vocab.num_popularity_buckets = v.at("num_popularity_buckets").get<int>();
  cfg.user_dim = j.at("user_dim").get<int>();
  cfg.item_dim = j.at("item_dim").get<int>();
  cfg.category_dim = j.at("category_dim").get<int>();
  cfg.scenario_dim = j.at("scenario_dim").get<int>();
  cfg.query_dim = j.at("query_dim").get<int>();
  cfg.popularity_dim = j.at("popularity_dim").get<int>();
  cfg.hidden_dim = j.at("hidden_dim").get<int>();
  cfg.tower_hidden = j.at("tower_hidden").get<int>();
  cfg.tower_dim = j.at("tower_dim").get<int>();
  cfg.lum_dim = j.at("lum_dim").get<int>();
  cfg.num_interests = j.at("num_interests").get<int>();
  cfg.interest_matching_feature = j.at("interest_matching_feature").get<bool>();
  cfg.learning_rate = j.at("learning_rate").get<float>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.negatives_per_positive = j.at("negatives_per_positive").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

InterestProvider::InterestProvider(const std::vector<InterestRecord>& records,
                                   const std::vector<Token>& conditions, int expected_dim) {
  for (const auto& c : conditions) cond_fps_.push_back(condition_fingerprint(c));
  std::unordered_map<uint64_t, size_t> slot;
  for (size_t i = 0; i < cond_fps_.size(); ++i) slot[cond_fps_[i]] = i;
  for (const auto& r : records) {
    if (dim_ == 0) dim_ = static_cast<int>(r.output.size());
    if (expected_dim > 0 && static_cast<int>(r.output.size()) != expected_dim)
      throw std::invalid_argument("interest log vector of dim " + std::to_string(r.output.size()) +
                                  " does not match configured dim " + std::to_string(expected_dim));
    if (model_version_.empty()) model_version_ = r.model_version;
    auto it = slot.find(r.condition_fp);
    if (it == slot.end()) continue;  // condition outside the configured set
    auto& rows = by_user_[r.user_id];
    rows.resize(cond_fps_.size());
    rows[it->second] = r.output;
  }
  if (expected_dim > 0) dim_ = expected_dim;
}

void InterestProvider::lookup(int64_t user_raw_id, std::vector<float>* vecs,
                              std::vector<uint8_t>* present) const {
  const int n = count();
  vecs->assign(static_cast<size_t>(n) * dim_, 0.0f);
  present->assign(static_cast<size_t>(n), 0);
  auto it = by_user_.find(user_raw_id);
  if (it == by_user_.end()) return;
  for (int s = 0; s < n; ++s) {
    const auto& row = it->second[static_cast<size_t>(s)];
    if (row.empty()) continue;
    std::copy(row.begin(), row.end(), vecs->begin() + static_cast<std::ptrdiff_t>(s) * dim_);
    (*present)[static_cast<size_t>(s)] = 1;
  }
}

namespace {

float activity_feature(size_t n_events) { return std::log1p(static_cast<float>(n_events)) * 0.25f; }

void fill_lum_features(FeatureRecord& rec, const InterestProvider* interests,
                       const ItemIndex* item_embeddings, int64_t user_raw, int item_index) {
  if (!interests || !item_embeddings) return;
  rec.has_lum = true;
  interests->lookup(user_raw, &rec.interest_vecs, &rec.interest_present);
  const float* e = item_embeddings->row(item_index);
  rec.item_lum_emb.assign(e, e + item_embeddings->model_dim);
  const int n = interests->count();
  const int d = interests->dim();
  rec.sims.assign(static_cast<size_t>(n), 0.0f);
  for (int s = 0; s < n; ++s) {
    if (!rec.interest_present[static_cast<size_t>(s)]) continue;
    std::vector<float> o(rec.interest_vecs.begin() + static_cast<std::ptrdiff_t>(s) * d,
                         rec.interest_vecs.begin() + static_cast<std::ptrdiff_t>(s + 1) * d);
    double on = 0.0, en = 0.0, dot = 0.0;
    for (int j = 0; j < d; ++j) {
      dot += static_cast<double>(o[static_cast<size_t>(j)]) * e[j];
      on += static_cast<double>(o[static_cast<size_t>(j)]) * o[static_cast<size_t>(j)];
      en += static_cast<double>(e[j]) * e[j];
    }
    const double denom = std::sqrt(on) * std::sqrt(en);
    rec.sims[static_cast<size_t>(s)] = denom > 0.0 ? static_cast<float>(dot / denom) : 0.0f;
  }
}

}  // namespace

std::vector<FeatureRecord> build_rank_records(const Corpus& corpus, const InterestProvider* interests,
                                              const ItemIndex* item_embeddings,
                                              const RecordBuildOptions& options) {
  if (interests && item_embeddings && interests->dim() != item_embeddings->model_dim)
    throw std::invalid_argument("build_rank_records: interest dim " + std::to_string(interests->dim()) +
                                " does not match item embedding dim " +
                                std::to_string(item_embeddings->model_dim));
  auto eng = rng::make_engine(options.seed);
  std::vector<FeatureRecord> records;
  const int num_items = corpus.catalog.num_items();
  for (int u = 0; u < corpus.num_users(); ++u) {
    const auto& events = corpus.events_by_user[static_cast<size_t>(u)];
    if (events.empty()) continue;
    const float activity = activity_feature(events.size());
    const int64_t raw = corpus.user_raw_ids[static_cast<size_t>(u)];
    for (const auto& ev : events) {
      auto make_record = [&](int item_index, int label) {
        FeatureRecord rec;
        rec.user_index = u;
        rec.user_activity = activity;
        rec.item_index = item_index;
        const auto& attrs = corpus.catalog.items[static_cast<size_t>(item_index)];
        rec.item_category = attrs.category_id;
        rec.popularity_bucket = attrs.popularity_bucket;
        rec.content = attrs.content;
        rec.scenario_id = ev.scenario_id;
        rec.query_terms = ev.query_terms;
        rec.label = label;
        fill_lum_features(rec, interests, item_embeddings, raw, item_index);
        return rec;
      };
      records.push_back(make_record(static_cast<int>(ev.item_id), 1));
      for (int s = 0; s < options.negatives_per_positive; ++s) {
        int neg = static_cast<int>(rng::uniform_int(eng, 0, num_items - 1));
        if (num_items > 1)
          while (neg == static_cast<int>(ev.item_id))
            neg = static_cast<int>(rng::uniform_int(eng, 0, num_items - 1));
        records.push_back(make_record(neg, 0));
      }
    }
  }
  return records;
}

namespace {

int ranker_numeric_dim(const DlrmConfig& cfg) {
  int d = 1 + cfg.vocab.content_dim;  // activity + content
  if (cfg.lum_variant()) {
    d += cfg.num_interests * cfg.lum_dim;  // interest vectors
    d += cfg.num_interests;                // presence flags
    d += cfg.lum_dim;                      // target item embedding
    if (cfg.interest_matching_feature) d += cfg.num_interests;
  }
  return d;
}

int ranker_input_dim(const DlrmConfig& cfg) {
  return cfg.user_dim + cfg.item_dim + cfg.category_dim + cfg.popularity_dim + cfg.scenario_dim +
         cfg.query_dim + ranker_numeric_dim(cfg);
}

void check_lum_record(const DlrmConfig& cfg, const FeatureRecord& r) {
  if (!cfg.lum_variant()) return;
  if (!r.has_lum)
    throw std::invalid_argument("ranker: LUM variant configured but record has no lum features");
  if (static_cast<int>(r.interest_vecs.size()) != cfg.num_interests * cfg.lum_dim ||
      static_cast<int>(r.item_lum_emb.size()) != cfg.lum_dim)
    throw std::invalid_argument("ranker: lum feature dims do not match config (got " +
                                std::to_string(r.item_lum_emb.size()) + ", expected " +
                                std::to_string(cfg.lum_dim) + ")");
}

// Builds the dense numeric feature block for a batch of records.
nn::TensorRef numeric_block(const DlrmConfig& cfg, const std::vector<const FeatureRecord*>& recs) {
  const int nd = ranker_numeric_dim(cfg);
  auto t = nn::tensor<float>({static_cast<int>(recs.size()), nd});
  for (size_t i = 0; i < recs.size(); ++i) {
    const auto& r = *recs[i];
    float* row = &t->v[i * static_cast<size_t>(nd)];
    int c = 0;
    row[c++] = r.user_activity;
    if (cfg.vocab.content_dim > 0) {
      if (static_cast<int>(r.content.size()) != cfg.vocab.content_dim)
        throw std::invalid_argument("ranker: content vector size mismatch");
      for (int j = 0; j < cfg.vocab.content_dim; ++j) row[c++] = r.content[static_cast<size_t>(j)];
    }
    if (cfg.lum_variant()) {
      check_lum_record(cfg, r);
      for (float x : r.interest_vecs) row[c++] = x;
      for (uint8_t p : r.interest_present) row[c++] = static_cast<float>(p);
      for (float x : r.item_lum_emb) row[c++] = x;
      if (cfg.interest_matching_feature)
        for (float x : r.sims) row[c++] = x;
    }
  }
  return t;
}

struct IdBatch {
  std::vector<int> user, item, cat, pop, scen, query_flat, query_offsets{0};
};

IdBatch gather_ids(const std::vector<const FeatureRecord*>& recs) {
  IdBatch b;
  for (const auto* r : recs) {
    b.user.push_back(r->user_index);
    b.item.push_back(r->item_index);
    b.cat.push_back(r->item_category);
    b.pop.push_back(r->popularity_bucket);
    b.scen.push_back(r->scenario_id);
    for (int q : r->query_terms) b.query_flat.push_back(q);
    b.query_offsets.push_back(static_cast<int>(b.query_flat.size()));
  }
  return b;
}

nn::TensorRef ranker_logits(nn::Tape& tape, const RankerModel& m,
                            const std::vector<const FeatureRecord*>& recs) {
  const auto ids = gather_ids(recs);
  auto e_user = nn::embedding_rows(tape, m.user_table, ids.user);
  auto e_item = nn::embedding_rows(tape, m.item_table, ids.item);
  auto e_cat = nn::embedding_rows(tape, m.cat_table, ids.cat);
  auto e_pop = nn::embedding_rows(tape, m.pop_table, ids.pop);
  auto e_scen = nn::embedding_rows(tape, m.scen_table, ids.scen);
  auto e_query = nn::embedding_bag_mean(tape, m.query_table, ids.query_flat, ids.query_offsets);
  auto numeric = numeric_block(m.cfg, recs);
  auto x = nn::concat_cols<float>(tape, {e_user, e_item, e_cat, e_pop, e_scen, e_query, numeric});
  auto h = nn::gelu(tape, nn::linear(tape, x, m.w1, m.b1));
  return nn::linear(tape, h, m.w2, m.b2);
}

RankerModel make_ranker(const DlrmConfig& cfg) {
  cfg.validate();
  RankerModel m;
  m.cfg = cfg;
  auto eng = rng::make_engine(cfg.seed);
  const double sd = 0.05;
  auto& ps = m.params;
  m.user_table = ps.create_normal("rank.user_table", {cfg.vocab.num_users, cfg.user_dim}, eng, sd);
  m.item_table = ps.create_normal("rank.item_table", {cfg.vocab.num_items, cfg.item_dim}, eng, sd);
  m.cat_table = ps.create_normal("rank.cat_table", {std::max(cfg.vocab.num_categories, 1), cfg.category_dim}, eng, sd);
  m.pop_table = ps.create_normal("rank.pop_table", {std::max(cfg.vocab.num_popularity_buckets, 1), cfg.popularity_dim}, eng, sd);
  m.scen_table = ps.create_normal("rank.scen_table", {std::max(cfg.vocab.num_scenarios, 1), cfg.scenario_dim}, eng, sd);
  m.query_table = ps.create_normal("rank.query_table", {std::max(cfg.vocab.num_query_tokens, 1), cfg.query_dim}, eng, sd);
  m.w1 = ps.create_normal("rank.mlp.w1", {ranker_input_dim(cfg), cfg.hidden_dim}, eng, sd);
  m.b1 = ps.create("rank.mlp.b1", {cfg.hidden_dim});
  m.w2 = ps.create_normal("rank.mlp.w2", {cfg.hidden_dim, 1}, eng, sd);
  m.b2 = ps.create("rank.mlp.b2", {1});
  return m;
}

}  // namespace

RankerModel train_ranker(const std::vector<FeatureRecord>& records, const DlrmConfig& cfg) {
  if (records.empty()) throw std::invalid_argument("train_ranker: no records");
  bool has0 = false, has1 = false;
  for (const auto& r : records) {
    if (r.label != 0 && r.label != 1)
      throw std::invalid_argument("train_ranker: label outside {0,1}");
    (r.label ? has1 : has0) = true;
  }
  if (!has0 || !has1)
    throw std::invalid_argument("train_ranker: all labels identical; AUC would be undefined");

  auto model = make_ranker(cfg);
  auto eng = rng::make_engine(cfg.seed ^ 0xda3e39cbull);
  std::vector<size_t> order(records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng::shuffle(eng, order);
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
      std::vector<const FeatureRecord*> batch;
      std::vector<int> labels;
      for (size_t i = b0; i < b1; ++i) {
        batch.push_back(&records[order[i]]);
        labels.push_back(records[order[i]].label);
      }
      model.params.zero_grads();
      nn::Tape tape;
      auto logits = ranker_logits(tape, model, batch);
      auto loss = nn::bce_with_logits(tape, logits, labels);
      tape.backward(loss);
      nn::adam_step(model.params, static_cast<double>(cfg.learning_rate));
    }
  }
  return model;
}

std::vector<double> ranker_predict(const RankerModel& model, const std::vector<FeatureRecord>& records) {
  std::vector<double> out;
  out.reserve(records.size());
  constexpr size_t kChunk = 256;
  for (size_t b0 = 0; b0 < records.size(); b0 += kChunk) {
    const size_t b1 = std::min(records.size(), b0 + kChunk);
    std::vector<const FeatureRecord*> batch;
    for (size_t i = b0; i < b1; ++i) batch.push_back(&records[i]);
    nn::Tape tape;
    auto logits = ranker_logits(tape, model, batch);
    for (size_t i = 0; i < batch.size(); ++i) {
      const double z = static_cast<double>(logits->v[i]);
      double p = 1.0 / (1.0 + std::exp(-z));
      p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);  // strictly inside (0,1)
      out.push_back(p);
    }
  }
  return out;
}

double ranker_predict_one(const RankerModel& model, const FeatureRecord& record) {
  return ranker_predict(model, {record})[0];
}

void save_ranker(const RankerModel& model, const std::string& path) {
  nn::save_parameters(model.params, dlrm_config_to_json(model.cfg, "ranker"), path);
}

RankerModel load_ranker(const std::string& path) {
  std::string cfg_json;
  auto loaded = nn::load_parameters<float>(path, &cfg_json);
  std::string kind;
  auto cfg = dlrm_config_from_json(cfg_json, &kind);
  if (kind != "ranker") throw std::runtime_error("load_ranker: checkpoint holds a " + kind + " model");
  auto model = make_ranker(cfg);
  for (const auto& name : model.params.order) {
    auto& dst = *model.params.by_name.at(name);
    auto& src = *loaded.by_name.at(name);
    if (dst.shape != src.shape) throw std::runtime_error("load_ranker: shape mismatch for " + name);
    dst.v = src.v;
  }
  return model;
}

// --- retrieval ---

namespace {

int user_tower_input_dim(const DlrmConfig& cfg) {
  int d = cfg.user_dim + cfg.scenario_dim + cfg.query_dim + 1;
  if (cfg.lum_variant()) d += cfg.num_interests * cfg.lum_dim + cfg.num_interests;
  return d;
}

int item_tower_input_dim(const DlrmConfig& cfg) {
  int d = cfg.item_dim + cfg.category_dim + cfg.popularity_dim + cfg.vocab.content_dim;
  if (cfg.lum_variant()) d += cfg.lum_dim;
  return d;
}

RetrievalModel make_retrieval(const DlrmConfig& cfg) {
  cfg.validate();
  RetrievalModel m;
  m.cfg = cfg;
  auto eng = rng::make_engine(cfg.seed);
  const double sd = 0.05;
  auto& ps = m.params;
  m.user_table = ps.create_normal("tower.user_table", {cfg.vocab.num_users, cfg.user_dim}, eng, sd);
  m.scen_table = ps.create_normal("tower.scen_table", {std::max(cfg.vocab.num_scenarios, 1), cfg.scenario_dim}, eng, sd);
  m.query_table = ps.create_normal("tower.query_table", {std::max(cfg.vocab.num_query_tokens, 1), cfg.query_dim}, eng, sd);
  m.item_table = ps.create_normal("tower.item_table", {cfg.vocab.num_items, cfg.item_dim}, eng, sd);
  m.cat_table = ps.create_normal("tower.cat_table", {std::max(cfg.vocab.num_categories, 1), cfg.category_dim}, eng, sd);
  m.pop_table = ps.create_normal("tower.pop_table", {std::max(cfg.vocab.num_popularity_buckets, 1), cfg.popularity_dim}, eng, sd);
  m.uw1 = ps.create_normal("tower.user.w1", {user_tower_input_dim(cfg), cfg.tower_hidden}, eng, sd);
  m.ub1 = ps.create("tower.user.b1", {cfg.tower_hidden});
  m.uw2 = ps.create_normal("tower.user.w2", {cfg.tower_hidden, cfg.tower_dim}, eng, sd);
  m.ub2 = ps.create("tower.user.b2", {cfg.tower_dim});
  m.iw1 = ps.create_normal("tower.item.w1", {item_tower_input_dim(cfg), cfg.tower_hidden}, eng, sd);
  m.ib1 = ps.create("tower.item.b1", {cfg.tower_hidden});
  m.iw2 = ps.create_normal("tower.item.w2", {cfg.tower_hidden, cfg.tower_dim}, eng, sd);
  m.ib2 = ps.create("tower.item.b2", {cfg.tower_dim});
  return m;
}

struct UserRow {
  int user_index;
  float activity;
  int scenario;
  std::vector<int> terms;
  std::vector<float> interests;       // N*lum_dim
  std::vector<uint8_t> present;       // N
};

nn::TensorRef user_tower_forward(nn::Tape& tape, const RetrievalModel& m,
                                 const std::vector<UserRow>& rows) {
  const auto& cfg = m.cfg;
  std::vector<int> user, scen, flat, offsets{0};
  for (const auto& r : rows) {
    user.push_back(r.user_index);
    scen.push_back(r.scenario);
    for (int q : r.terms) flat.push_back(q);
    offsets.push_back(static_cast<int>(flat.size()));
  }
  auto e_user = nn::embedding_rows(tape, m.user_table, user);
  auto e_scen = nn::embedding_rows(tape, m.scen_table, scen);
  auto e_query = nn::embedding_bag_mean(tape, m.query_table, flat, offsets);
  int nd = 1;
  if (cfg.lum_variant()) nd += cfg.num_interests * cfg.lum_dim + cfg.num_interests;
  auto numeric = nn::tensor<float>({static_cast<int>(rows.size()), nd});
  for (size_t i = 0; i < rows.size(); ++i) {
    float* row = &numeric->v[i * static_cast<size_t>(nd)];
    int c = 0;
    row[c++] = rows[i].activity;
    if (cfg.lum_variant()) {
      if (static_cast<int>(rows[i].interests.size()) != cfg.num_interests * cfg.lum_dim)
        throw std::invalid_argument("user tower: interest vector dim mismatch");
      for (float x : rows[i].interests) row[c++] = x;
      for (uint8_t p : rows[i].present) row[c++] = static_cast<float>(p);
    }
  }
  auto x = nn::concat_cols<float>(tape, {e_user, e_scen, e_query, numeric});
  auto h = nn::gelu(tape, nn::linear(tape, x, m.uw1, m.ub1));
  return nn::linear(tape, h, m.uw2, m.ub2);
}

nn::TensorRef item_tower_forward(nn::Tape& tape, const RetrievalModel& m, const Catalog& catalog,
                                 const std::vector<int>& items, const ItemIndex* item_embeddings) {
  const auto& cfg = m.cfg;
  std::vector<int> cat, pop;
  for (int it : items) {
    const auto& attrs = catalog.items.at(static_cast<size_t>(it));
    cat.push_back(attrs.category_id);
    pop.push_back(attrs.popularity_bucket);
  }
  auto e_item = nn::embedding_rows(tape, m.item_table, items);
  auto e_cat = nn::embedding_rows(tape, m.cat_table, cat);
  auto e_pop = nn::embedding_rows(tape, m.pop_table, pop);
  const int nd = cfg.vocab.content_dim + (cfg.lum_variant() ? cfg.lum_dim : 0);
  std::vector<nn::TensorRef> parts{e_item, e_cat, e_pop};
  if (nd > 0) {
    auto numeric = nn::tensor<float>({static_cast<int>(items.size()), nd});
    for (size_t i = 0; i < items.size(); ++i) {
      float* row = &numeric->v[i * static_cast<size_t>(nd)];
      int c = 0;
      const auto& attrs = catalog.items.at(static_cast<size_t>(items[i]));
      if (cfg.vocab.content_dim > 0) {
        if (static_cast<int>(attrs.content.size()) != cfg.vocab.content_dim)
          throw std::invalid_argument("item tower: content vector size mismatch");
        for (float x : attrs.content) row[c++] = x;
      }
      if (cfg.lum_variant()) {
        if (!item_embeddings)
          throw std::invalid_argument("item tower: LUM variant needs item embeddings");
        const float* e = item_embeddings->row(items[i]);
        for (int j = 0; j < cfg.lum_dim; ++j) row[c++] = e[j];
      }
    }
    parts.push_back(numeric);
  }
  auto x = nn::concat_cols<float>(tape, parts);
  auto h = nn::gelu(tape, nn::linear(tape, x, m.iw1, m.ib1));
  return nn::linear(tape, h, m.iw2, m.ib2);
}

UserRow make_user_row(const DlrmConfig& cfg, const RetrievalContext& ctx,
                      const InterestProvider* interests) {
  UserRow row;
  row.user_index = ctx.user_index;
  row.activity = ctx.user_activity;
  row.scenario = ctx.scenario_id;
  row.terms = ctx.query_terms;
  if (cfg.lum_variant()) {
    if (!interests) throw std::invalid_argument("retrieval: LUM variant needs an interest provider");
    interests->lookup(ctx.user_raw_id, &row.interests, &row.present);
  }
  return row;
}

}  // namespace

RetrievalModel train_retrieval(const Corpus& train, const InterestProvider* interests,
                               const ItemIndex* item_embeddings, const DlrmConfig& cfg) {
  if (cfg.lum_variant()) {
    if (!interests || !item_embeddings)
      throw std::invalid_argument("train_retrieval: LUM variant needs interest log and item embeddings");
    if (interests->dim() != cfg.lum_dim || item_embeddings->model_dim != cfg.lum_dim)
      throw std::invalid_argument("train_retrieval: interest/item embedding dim does not match lum_dim " +
                                  std::to_string(cfg.lum_dim));
  }
  auto model = make_retrieval(cfg);

  struct Sample {
    UserRow row;
    int item;
  };
  std::vector<Sample> samples;
  for (int u = 0; u < train.num_users(); ++u) {
    const auto& events = train.events_by_user[static_cast<size_t>(u)];
    if (events.empty()) continue;
    RetrievalContext ctx;
    ctx.user_index = u;
    ctx.user_raw_id = train.user_raw_ids[static_cast<size_t>(u)];
    ctx.user_activity = activity_feature(events.size());
    for (const auto& ev : events) {
      ctx.scenario_id = ev.scenario_id;
      ctx.query_terms = ev.query_terms;
      samples.push_back({make_user_row(cfg, ctx, interests), static_cast<int>(ev.item_id)});
    }
  }
  if (samples.empty()) throw std::invalid_argument("train_retrieval: corpus has no events");

  auto eng = rng::make_engine(cfg.seed ^ 0x7f4a7c15ull);
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng::shuffle(eng, order);
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
      if (b1 - b0 < 2) continue;  // in-batch contrast needs at least 2 rows
      std::vector<UserRow> urows;
      std::vector<int> items;
      for (size_t i = b0; i < b1; ++i) {
        urows.push_back(samples[order[i]].row);
        items.push_back(samples[order[i]].item);
      }
      model.params.zero_grads();
      nn::Tape tape;
      auto ue = user_tower_forward(tape, model, urows);
      auto ie = item_tower_forward(tape, model, train.catalog, items, item_embeddings);
      auto logits = nn::matmul_nt(tape, ue, ie);
      std::vector<int> targets(urows.size());
      std::iota(targets.begin(), targets.end(), 0);
      auto loss = nn::softmax_cross_entropy(tape, logits, targets);
      tape.backward(loss);
      nn::adam_step(model.params, static_cast<double>(cfg.learning_rate));
    }
  }
  return model;
}

std::vector<float> retrieval_user_embedding(const RetrievalModel& model, const RetrievalContext& ctx,
                                            const InterestProvider* interests) {
  nn::Tape tape;
  auto out = user_tower_forward(tape, model, {make_user_row(model.cfg, ctx, interests)});
  return out->v;
}

std::vector<float> retrieval_item_embedding(const RetrievalModel& model, const Catalog& catalog,
                                            int item_index, const ItemIndex* item_embeddings) {
  nn::Tape tape;
  auto out = item_tower_forward(tape, model, catalog, {item_index}, item_embeddings);
  return out->v;
}

float retrieval_score(const std::vector<float>& user_emb, const std::vector<float>& item_emb) {
  if (user_emb.size() != item_emb.size())
    throw std::invalid_argument("retrieval_score: embedding dims differ");
  double s = 0.0;
  for (size_t j = 0; j < user_emb.size(); ++j) s += static_cast<double>(user_emb[j]) * item_emb[j];
  return static_cast<float>(s);
}

std::vector<ScoredItem> retrieve_top_k(const RetrievalModel& model, const Catalog& catalog,
                                       const RetrievalContext& ctx, const InterestProvider* interests,
                                       const ItemIndex* item_embeddings, int k) {
  if (k < 1) throw std::invalid_argument("retrieve_top_k: k must be >= 1");
  const auto ue = retrieval_user_embedding(model, ctx, interests);
  std::vector<int> all_items(static_cast<size_t>(catalog.num_items()));
  std::iota(all_items.begin(), all_items.end(), 0);
  nn::Tape tape;
  auto ie = item_tower_forward(tape, model, catalog, all_items, item_embeddings);
  std::vector<ScoredItem> scored(all_items.size());
  const int d = model.cfg.tower_dim;
  for (size_t i = 0; i < all_items.size(); ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j)
      s += static_cast<double>(ue[static_cast<size_t>(j)]) * ie->v[i * static_cast<size_t>(d) + j];
    scored[i] = {catalog.items[i].raw_id, static_cast<float>(s)};
  }
  const size_t kk = std::min<size_t>(static_cast<size_t>(k), scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(kk), scored.end(),
                    [](const ScoredItem& a, const ScoredItem& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.item_id < b.item_id;
                    });
  scored.resize(kk);
  return scored;
}

void save_retrieval(const RetrievalModel& model, const std::string& path) {
  nn::save_parameters(model.params, dlrm_config_to_json(model.cfg, "retrieval"), path);
}

RetrievalModel load_retrieval(const std::string& path) {
  std::string cfg_json;
  auto loaded = nn::load_parameters<float>(path, &cfg_json);
  std::string kind;
  auto cfg = dlrm_config_from_json(cfg_json, &kind);
  if (kind != "retrieval")
    throw std::runtime_error("load_retrieval: checkpoint holds a " + kind + " model");
  auto model = make_retrieval(cfg);
  for (const auto& name : model.params.order) {
    auto& dst = *model.params.by_name.at(name);
    auto& src = *loaded.by_name.at(name);
    if (dst.shape != src.shape) throw std::runtime_error("load_retrieval: shape mismatch for " + name);
    dst.v = src.v;
  }
  return model;
}

double evaluate_retrieval_recall(const RetrievalModel& model, const Corpus& history_corpus,
                                 const Corpus& test_corpus, const InterestProvider* interests,
                                 const ItemIndex* item_embeddings, int k) {
  double total = 0.0;
  int n = 0;
  for (int u = 0; u < test_corpus.num_users(); ++u) {
    const auto& test_events = test_corpus.events_by_user[static_cast<size_t>(u)];
    if (test_events.empty()) continue;
    const auto& hist = history_corpus.events_by_user[static_cast<size_t>(u)];
    RetrievalContext ctx;
    ctx.user_index = u;
    ctx.user_raw_id = test_corpus.user_raw_ids[static_cast<size_t>(u)];
    ctx.user_activity = activity_feature(hist.size());
    const auto& ev = test_events.front();
    ctx.scenario_id = ev.scenario_id;
    ctx.query_terms = ev.query_terms;
    const auto top = retrieve_top_k(model, test_corpus.catalog, ctx, interests, item_embeddings, k);
    const int64_t want = test_corpus.catalog.items[static_cast<size_t>(ev.item_id)].raw_id;
    double hit = 0.0;
    for (const auto& s : top)
      if (s.item_id == want) {
        hit = 1.0;
        break;
      }
    total += hit;
    ++n;
  }
  return n == 0 ? 0.0 : total / n;
}

}  // namespace lum
