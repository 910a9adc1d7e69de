// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "lum/data.hpp"
#include "lum/model.hpp"
#include "lum/rng.hpp"

namespace testutil {

// Empirical mutual information (nats) between event scenario and the
// catalog category of the event's item.
inline double scenario_category_mi(const lum::Corpus& corpus) {
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ps, pc;
  double n = 0;
  for (const auto& events : corpus.events_by_user)
    for (const auto& ev : events) {
      const int cat = corpus.catalog.items[static_cast<size_t>(ev.item_id)].category_id;
      joint[{ev.scenario_id, cat}] += 1;
      ps[ev.scenario_id] += 1;
      pc[cat] += 1;
      n += 1;
    }
  double mi = 0.0;
  for (const auto& [key, cnt] : joint) {
    const double pxy = cnt / n;
    const double px = ps[key.first] / n;
    const double py = pc[key.second] / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return mi;
}

// MI of the same corpus with scenario labels permuted: the chance level
// of the estimator at this sample size.
inline double shuffled_mi_threshold(const lum::Corpus& corpus, int reps, uint64_t seed) {
  std::vector<int> scenarios;
  std::vector<int> cats;
  for (const auto& events : corpus.events_by_user)
    for (const auto& ev : events) {
      scenarios.push_back(ev.scenario_id);
      cats.push_back(corpus.catalog.items[static_cast<size_t>(ev.item_id)].category_id);
    }
  auto eng = lum::rng::make_engine(seed);
  double worst = 0.0;
  for (int r = 0; r < reps; ++r) {
    lum::rng::shuffle(eng, scenarios);
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ps, pc;
    const double n = static_cast<double>(scenarios.size());
    for (size_t i = 0; i < scenarios.size(); ++i) {
      joint[{scenarios[i], cats[i]}] += 1;
      ps[scenarios[i]] += 1;
      pc[cats[i]] += 1;
    }
    double mi = 0.0;
    for (const auto& [key, cnt] : joint) {
      const double pxy = cnt / n;
      mi += pxy * std::log(pxy / ((ps[key.first] / n) * (pc[key.second] / n)));
    }
    worst = std::max(worst, mi);
  }
  return worst;
}

// Largest pairwise total-variation distance between per-scenario item
// category distributions.
inline double scenario_category_tv(const lum::Corpus& corpus) {
  std::map<int, std::map<int, double>> dist;
  std::map<int, double> totals;
  for (const auto& events : corpus.events_by_user)
    for (const auto& ev : events) {
      const int cat = corpus.catalog.items[static_cast<size_t>(ev.item_id)].category_id;
      dist[ev.scenario_id][cat] += 1;
      totals[ev.scenario_id] += 1;
    }
  std::set<int> cats;
  for (auto& [s, d] : dist)
    for (auto& [c, v] : d) cats.insert(c);
  double worst = 0.0;
  for (auto it = dist.begin(); it != dist.end(); ++it)
    for (auto jt = std::next(it); jt != dist.end(); ++jt) {
      double tv = 0.0;
      for (int c : cats)
        tv += std::fabs(it->second[c] / totals[it->first] - jt->second[c] / totals[jt->first]);
      worst = std::max(worst, tv / 2.0);
    }
  return worst;
}

inline double shuffled_tv_threshold(lum::Corpus corpus, int reps, uint64_t seed) {
  std::vector<int> scenarios;
  for (const auto& events : corpus.events_by_user)
    for (const auto& ev : events) scenarios.push_back(ev.scenario_id);
  auto eng = lum::rng::make_engine(seed);
  double worst = 0.0;
  for (int r = 0; r < reps; ++r) {
    lum::rng::shuffle(eng, scenarios);
    size_t i = 0;
    for (auto& events : corpus.events_by_user)
      for (auto& ev : events) ev.scenario_id = scenarios[i++];
    worst = std::max(worst, scenario_category_tv(corpus));
  }
  return worst;
}

// A world where the next item is a deterministic function of the
// scenario condition: scenario s (1-based) always leads to item s-1.
inline lum::Corpus make_mapping_corpus(int num_users, int events_per_user, int num_scenarios,
                                       uint64_t seed) {
  lum::Corpus corpus;
  corpus.seed = seed;
  const int num_items = num_scenarios;
  corpus.catalog.items.resize(static_cast<size_t>(num_items));
  for (int i = 0; i < num_items; ++i) {
    auto& item = corpus.catalog.items[static_cast<size_t>(i)];
    item.raw_id = i;
    item.category_id = i % 4;
    item.popularity = 1.0 / num_items;
    item.popularity_bucket = 0;
  }
  auto eng = lum::rng::make_engine(seed);
  corpus.events_by_user.resize(static_cast<size_t>(num_users));
  corpus.user_raw_ids.resize(static_cast<size_t>(num_users));
  for (int u = 0; u < num_users; ++u) {
    corpus.user_raw_ids[static_cast<size_t>(u)] = u;
    int64_t t = 1000;
    for (int e = 0; e < events_per_user; ++e) {
      lum::BehaviorEvent ev;
      ev.user_id = u;
      ev.scenario_id = static_cast<int>(lum::rng::uniform_int(eng, 1, num_scenarios));
      ev.item_id = ev.scenario_id - 1;
      ev.category_id = corpus.catalog.items[static_cast<size_t>(ev.item_id)].category_id;
      ev.timestamp = t;
      t += 60;
      corpus.events_by_user[static_cast<size_t>(u)].push_back(std::move(ev));
    }
  }
  corpus.vocab.num_users = num_users;
  corpus.vocab.num_items = num_items;
  corpus.vocab.num_scenarios = num_scenarios + 1;
  corpus.vocab.num_categories = 4;
  corpus.vocab.num_query_tokens = 1;
  corpus.vocab.content_dim = 0;
  corpus.vocab.num_popularity_buckets = 1;
  return corpus;
}

// Small model configuration that trains in well under a second.
inline lum::LUMConfig tiny_lum_config(const lum::Corpus& corpus, uint64_t seed = 1) {
  lum::LUMConfig cfg;
  cfg.arch.model_dim = 32;
  cfg.arch.num_heads = 2;
  cfg.arch.num_layers = 2;
  cfg.arch.mlp_hidden = 64;
  cfg.item_id_dim = 12;
  cfg.category_dim = 4;
  cfg.popularity_dim = 2;
  cfg.scenario_dim = 6;
  cfg.query_dim = 4;
  cfg.max_sequence_tokens = 64;
  cfg.negatives_per_positive = 4;
  cfg.learning_rate = 5e-3f;
  cfg.batch_rows = 4;
  cfg.epochs = 3;
  cfg.seed = seed;
  cfg.adopt_vocab(corpus.vocab);
  return cfg;
}

}  // namespace testutil
