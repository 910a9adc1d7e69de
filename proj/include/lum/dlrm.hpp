// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lum/data.hpp"
#include "lum/query.hpp"
#include "lum/tensor.hpp"

namespace lum {

// Cosine similarity between a queried interest vector and an item
// embedding. Throws on dimension mismatch or zero norms.
double interest_matching(const std::vector<float>& o, const std::vector<float>& e_i);

struct DlrmConfig {
  VocabSizes vocab;

  int user_dim = 16;
  int item_dim = 16;
  int category_dim = 8;
  int scenario_dim = 4;
  int query_dim = 8;
  int popularity_dim = 4;

  int hidden_dim = 64;    // ranker MLP hidden width
  int tower_hidden = 64;  // retrieval tower hidden width
  int tower_dim = 32;     // retrieval embedding width

  // knowledge utilization; lum_dim 0 is the base variant
  int lum_dim = 0;
  int num_interests = 0;               // N interest vectors per user
  bool interest_matching_feature = false;  // also feed sim(o_n, e_i)

  float learning_rate = 3e-3f;
  int epochs = 4;
  int batch_size = 64;
  int negatives_per_positive = 4;
  uint64_t seed = 1;

  bool lum_variant() const { return lum_dim > 0; }
  void validate() const;
};

std::string dlrm_config_to_json(const DlrmConfig& cfg, const std::string& kind);
DlrmConfig dlrm_config_from_json(const std::string& json_text, std::string* kind);

// Downstream model input row. lum_* fields are populated only for the
// LUM-augmented variants; missing interests fall back to zero vectors
// with a cleared presence flag.
struct FeatureRecord {
  int user_index = 0;
  float user_activity = 0.0f;
  int item_index = 0;
  int item_category = 0;
  int popularity_bucket = 0;
  std::vector<float> content;
  int scenario_id = 0;
  std::vector<int> query_terms;

  bool has_lum = false;
  std::vector<float> interest_vecs;      // N x lum_dim, flattened
  std::vector<uint8_t> interest_present; // N
  std::vector<float> item_lum_emb;       // lum_dim
  std::vector<float> sims;               // N

  int label = 0;
};

// Per-user interest vectors loaded from a batch-inference log, keyed by
// the condition fingerprints in a fixed order.
class InterestProvider {
 public:
  InterestProvider(const std::vector<InterestRecord>& records, const std::vector<Token>& conditions,
                   int expected_dim);

  int dim() const { return dim_; }
  int count() const { return static_cast<int>(cond_fps_.size()); }
  const std::string& model_version() const { return model_version_; }

  // vecs gets N*dim floats (zeros where missing), present gets N flags
  void lookup(int64_t user_raw_id, std::vector<float>* vecs, std::vector<uint8_t>* present) const;

 private:
  std::vector<uint64_t> cond_fps_;
  int dim_ = 0;
  std::string model_version_;
  std::unordered_map<int64_t, std::vector<std::vector<float>>> by_user_;
};

struct RecordBuildOptions {
  int negatives_per_positive = 4;
  uint64_t seed = 1;
};

// One positive record per event plus sampled non-clicked negatives with
// the same user/context.
std::vector<FeatureRecord> build_rank_records(const Corpus& corpus, const InterestProvider* interests,
                                              const ItemIndex* item_embeddings,
                                              const RecordBuildOptions& options);

// --- CTR ranker (embedding + MLP, binary cross-entropy) ---

struct RankerModel {
  DlrmConfig cfg;
  nn::ParameterStore params;
  nn::TensorRef user_table, item_table, cat_table, pop_table, scen_table, query_table;
  nn::TensorRef w1, b1, w2, b2;
};

RankerModel train_ranker(const std::vector<FeatureRecord>& records, const DlrmConfig& cfg);
std::vector<double> ranker_predict(const RankerModel& model, const std::vector<FeatureRecord>& records);
double ranker_predict_one(const RankerModel& model, const FeatureRecord& record);

void save_ranker(const RankerModel& model, const std::string& path);
RankerModel load_ranker(const std::string& path);

// --- two-tower retrieval ---

struct RetrievalModel {
  DlrmConfig cfg;
  nn::ParameterStore params;
  nn::TensorRef user_table, scen_table, query_table;
  nn::TensorRef item_table, cat_table, pop_table;
  nn::TensorRef uw1, ub1, uw2, ub2;
  nn::TensorRef iw1, ib1, iw2, ib2;
};

struct RetrievalContext {
  int user_index = 0;
  int64_t user_raw_id = 0;
  float user_activity = 0.0f;
  int scenario_id = 0;
  std::vector<int> query_terms;
};

// In-batch contrastive training over (user-context, clicked item) pairs.
RetrievalModel train_retrieval(const Corpus& train, const InterestProvider* interests,
                               const ItemIndex* item_embeddings, const DlrmConfig& cfg);

std::vector<float> retrieval_user_embedding(const RetrievalModel& model, const RetrievalContext& ctx,
                                            const InterestProvider* interests);
std::vector<float> retrieval_item_embedding(const RetrievalModel& model, const Catalog& catalog,
                                            int item_index, const ItemIndex* item_embeddings);
float retrieval_score(const std::vector<float>& user_emb, const std::vector<float>& item_emb);

// Top-k items by tower score, ties broken by ascending item id.
std::vector<ScoredItem> retrieve_top_k(const RetrievalModel& model, const Catalog& catalog,
                                       const RetrievalContext& ctx, const InterestProvider* interests,
                                       const ItemIndex* item_embeddings, int k);

void save_retrieval(const RetrievalModel& model, const std::string& path);
RetrievalModel load_retrieval(const std::string& path);

// Mean recall@k of each user's first held-out item, ranking the full
// catalog with contexts taken from the held-out event.
double evaluate_retrieval_recall(const RetrievalModel& model, const Corpus& history_corpus,
                                 const Corpus& test_corpus, const InterestProvider* interests,
                                 const ItemIndex* item_embeddings, int k);

}  // namespace lum
