// SPDX-License-Identifier: Apache-2.0
#include "lum/model.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lum {

void LUMConfig::validate() const {
  if (arch.model_dim < 1 || arch.num_heads < 1 || arch.num_layers < 1 || arch.mlp_hidden < 1)
    throw std::invalid_argument("LUMConfig: architecture dimensions must be positive");
  if (arch.model_dim % arch.num_heads != 0)
    throw std::invalid_argument("LUMConfig: model_dim " + std::to_string(arch.model_dim) +
                                " not divisible by num_heads " + std::to_string(arch.num_heads));
  if (num_items < 1) throw std::invalid_argument("LUMConfig: num_items must be >= 1");
  if (num_scenarios < 1 || num_categories < 1 || num_popularity_buckets < 1)
    throw std::invalid_argument("LUMConfig: vocabulary sizes must be >= 1");
  if (content_dim < 0) throw std::invalid_argument("LUMConfig: content_dim must be >= 0");
  if (item_id_dim < 1 || category_dim < 1 || popularity_dim < 1 || scenario_dim < 1 || query_dim < 1)
    throw std::invalid_argument("LUMConfig: field embedding dims must be >= 1");
  if (max_sequence_tokens < 2 || max_sequence_tokens % 2 != 0)
    throw std::invalid_argument("LUMConfig: max_sequence_tokens must be even and >= 2");
  if (negatives_per_positive < 1)
    throw std::invalid_argument("LUMConfig: negatives_per_positive must be >= 1");
  if (!(temperature > 0.0f)) throw std::invalid_argument("LUMConfig: temperature must be > 0");
  if (!(learning_rate > 0.0f)) throw std::invalid_argument("LUMConfig: learning_rate must be > 0");
  if (batch_rows < 1 || epochs < 1)
    throw std::invalid_argument("LUMConfig: batch_rows and epochs must be >= 1");
}

void LUMConfig::adopt_vocab(const VocabSizes& vocab) {
  num_items = vocab.num_items;
  num_scenarios = std::max(vocab.num_scenarios, 1);
  num_categories = std::max(vocab.num_categories, 1);
  num_query_tokens = std::max(vocab.num_query_tokens, 1);
  num_popularity_buckets = std::max(vocab.num_popularity_buckets, 1);
  content_dim = vocab.content_dim;
}

std::string lum_config_to_json(const LUMConfig& cfg) {
  nlohmann::json j;
  j["arch"] = {{"model_dim", cfg.arch.model_dim},
               {"num_heads", cfg.arch.num_heads},
               {"num_layers", cfg.arch.num_layers},
               {"mlp_hidden", cfg.arch.mlp_hidden}};
  j["num_items"] = cfg.num_items;
  j["num_scenarios"] = cfg.num_scenarios;
  j["num_categories"] = cfg.num_categories;
  j["num_query_tokens"] = cfg.num_query_tokens;
  j["num_popularity_buckets"] = cfg.num_popularity_buckets;
  j["content_dim"] = cfg.content_dim;
  j["item_id_dim"] = cfg.item_id_dim;
  j["category_dim"] = cfg.category_dim;
  j["popularity_dim"] = cfg.popularity_dim;
  j["scenario_dim"] = cfg.scenario_dim;
  j["query_dim"] = cfg.query_dim;
  j["max_sequence_tokens"] = cfg.max_sequence_tokens;
  j["negatives_per_positive"] = cfg.negatives_per_positive;
  j["temperature"] = cfg.temperature;
  j["learning_rate"] = cfg.learning_rate;
  j["batch_rows"] = cfg.batch_rows;
  j["epochs"] = cfg.epochs;
  j["seed"] = cfg.seed;
  j["condition_tokens"] = cfg.condition_tokens;
  return j.dump();
}

LUMConfig lum_config_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  LUMConfig cfg;
  const auto& a = j.at("arch");
  cfg.arch.model_dim = a.at("model_dim").get<int>();
  cfg.arch.num_heads = a.at("num_heads").get<int>();
  cfg.arch.num_layers = a.at("num_layers").get<int>();
  cfg.arch.mlp_hidden = a.at("mlp_hidden").get<int>();
  cfg.num_items = j.at("num_items").get<int>();
  cfg.num_scenarios = j.at("num_scenarios").get<int>();
  cfg.num_categories = j.at("num_categories").get<int>();
  cfg.num_query_tokens = j.at("num_query_tokens").get<int>();
  cfg.num_popularity_buckets = j.at("num_popularity_buckets").get<int>();
  cfg.content_dim = j.at("content_dim").get<int>();
  cfg.item_id_dim = j.at("item_id_dim").get<int>();
  cfg.category_dim = j.at("category_dim").get<int>();
  cfg.popularity_dim = j.at("popularity_dim").get<int>();
  cfg.scenario_dim = j.at("scenario_dim").get<int>();
  cfg.query_dim = j.at("query_dim").get<int>();
  cfg.max_sequence_tokens = j.at("max_sequence_tokens").get<int>();
  cfg.negatives_per_positive = j.at("negatives_per_positive").get<int>();
  cfg.temperature = j.at("temperature").get<float>();
  cfg.learning_rate = j.at("learning_rate").get<float>();
  cfg.batch_rows = j.at("batch_rows").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.condition_tokens = j.at("condition_tokens").get<bool>();
  return cfg;
}

std::vector<std::vector<int>> in_batch_negatives(const std::vector<int>& targets, int k) {
  const int n = static_cast<int>(targets.size());
  std::vector<std::vector<int>> out(static_cast<size_t>(n));
  for (int l = 0; l < n; ++l) {
    auto& negs = out[static_cast<size_t>(l)];
    for (int d = 1; d < n && static_cast<int>(negs.size()) < k; ++d) {
      const int j = (l + d) % n;
      if (targets[static_cast<size_t>(j)] != targets[static_cast<size_t>(l)])
        negs.push_back(targets[static_cast<size_t>(j)]);
    }
  }
  return out;
}

}  // namespace lum
