// SPDX-License-Identifier: Apache-2.0
#include "lum/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lum/rng.hpp"

namespace lum {

namespace {

constexpr int kContentDim = 8;
constexpr int kNoiseQueryTokens = 8;
constexpr int kPopularityBuckets = 8;

std::string fmt_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void sort_user_events(std::vector<BehaviorEvent>& evs) {
  std::sort(evs.begin(), evs.end(), [](const BehaviorEvent& a, const BehaviorEvent& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.item_id < b.item_id;
  });
}

// Equal-frequency popularity buckets: most popular items land in bucket 0.
void assign_popularity_buckets(Catalog& catalog, int num_buckets) {
  const int n = catalog.num_items();
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const auto& ia = catalog.items[static_cast<size_t>(a)];
    const auto& ib = catalog.items[static_cast<size_t>(b)];
    if (ia.popularity != ib.popularity) return ia.popularity > ib.popularity;
    return a < b;
  });
  for (int rank = 0; rank < n; ++rank)
    catalog.items[static_cast<size_t>(idx[static_cast<size_t>(rank)])].popularity_bucket =
        static_cast<int>(static_cast<int64_t>(rank) * num_buckets / std::max(n, 1));
}

// Plane rotation applied in sequence; angle 0 is the identity.
struct GivensRotation {
  int a = 0, b = 1;
  double angle = 0.0;
};

std::vector<double> apply_rotations(const std::vector<GivensRotation>& rots,
                                    std::vector<double> x) {
  for (const auto& r : rots) {
    const double c = std::cos(r.angle), s = std::sin(r.angle);
    const double xa = x[static_cast<size_t>(r.a)], xb = x[static_cast<size_t>(r.b)];
    x[static_cast<size_t>(r.a)] = c * xa - s * xb;
    x[static_cast<size_t>(r.b)] = s * xa + c * xb;
  }
  return x;
}

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticWorldConfig& config) {
  if (config.num_users < 1 || config.num_items < 1 || config.num_scenarios < 1 ||
      config.num_categories < 1)
    throw std::invalid_argument("generate_synthetic_corpus: all counts must be >= 1");
  if (config.latent_dim < 1) throw std::invalid_argument("generate_synthetic_corpus: latent_dim must be >= 1");
  if (config.events_per_user_min > config.events_per_user_max || config.events_per_user_min < 1)
    throw std::invalid_argument("generate_synthetic_corpus: bad events_per_user range");
  if (config.condition_effect_strength < 0.0)
    throw std::invalid_argument("generate_synthetic_corpus: condition_effect_strength must be >= 0");

  auto eng = rng::make_engine(config.rng_seed);
  const int d = config.latent_dim;
  const int C = config.num_categories;
  const int S = config.num_scenarios;

  // Category centroids give items a category-aligned latent structure.
  std::vector<std::vector<double>> centroids(static_cast<size_t>(C), std::vector<double>(static_cast<size_t>(d)));
  for (auto& c : centroids) {
    double norm = 0.0;
    for (auto& x : c) {
      x = rng::normal(eng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : c) x = 2.0 * x / std::max(norm, 1e-12);
  }

  // Fixed random projection for content vectors.
  std::vector<double> content_proj(static_cast<size_t>(d) * kContentDim);
  for (auto& x : content_proj) x = rng::normal(eng) / std::sqrt(static_cast<double>(d));

  // Shared component of every user latent. Scenario rotations act on it
  // coherently across the population, which is what makes the scenario
  // marginally predictive of item categories.
  std::vector<double> user_mean(static_cast<size_t>(d));
  {
    double norm = 0.0;
    for (auto& x : user_mean) {
      x = rng::normal(eng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : user_mean) x = 3.0 * x / std::max(norm, 1e-12);
  }

  Corpus corpus;
  corpus.seed = config.rng_seed;
  corpus.catalog.items.resize(static_cast<size_t>(config.num_items));
  std::vector<std::vector<double>> item_latents(static_cast<size_t>(config.num_items),
                                                std::vector<double>(static_cast<size_t>(d)));
  for (int i = 0; i < config.num_items; ++i) {
    auto& item = corpus.catalog.items[static_cast<size_t>(i)];
    item.raw_id = i;
    item.category_id = static_cast<int>(rng::uniform_int(eng, 0, C - 1));
    auto& lat = item_latents[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j)
      lat[static_cast<size_t>(j)] = centroids[static_cast<size_t>(item.category_id)][static_cast<size_t>(j)] +
                                    0.6 * rng::normal(eng);
    item.content.resize(kContentDim);
    for (int j = 0; j < kContentDim; ++j) {
      double s = 0.0;
      for (int p = 0; p < d; ++p)
        s += lat[static_cast<size_t>(p)] * content_proj[static_cast<size_t>(p) * kContentDim + j];
      item.content[static_cast<size_t>(j)] = static_cast<float>(s + 0.1 * rng::normal(eng));
    }
  }

  // Per-scenario preference rotations, with magnitude scaled by the
  // condition effect strength. Strength 0 leaves every scenario at the
  // identity, so item choice is then independent of scenario.
  std::vector<std::vector<GivensRotation>> rotations(static_cast<size_t>(S) + 1);
  for (int s = 1; s <= S; ++s) {
    std::vector<int> dims(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) dims[static_cast<size_t>(j)] = j;
    rng::shuffle(eng, dims);
    for (int p = 0; p + 1 < d; p += 2) {
      GivensRotation g;
      g.a = dims[static_cast<size_t>(p)];
      g.b = dims[static_cast<size_t>(p) + 1];
      g.angle = config.condition_effect_strength * (0.25 + 0.3 * rng::uniform(eng));
      rotations[static_cast<size_t>(s)].push_back(g);
    }
  }

  const double p_signal =
      config.condition_effect_strength / (1.0 + config.condition_effect_strength);
  const double logit_scale = 1.0 / std::sqrt(static_cast<double>(d));

  corpus.events_by_user.resize(static_cast<size_t>(config.num_users));
  corpus.user_raw_ids.resize(static_cast<size_t>(config.num_users));
  std::vector<int64_t> item_counts(static_cast<size_t>(config.num_items), 0);
  std::vector<double> weights(static_cast<size_t>(config.num_items));

  for (int u = 0; u < config.num_users; ++u) {
    corpus.user_raw_ids[static_cast<size_t>(u)] = u;
    std::vector<double> latent(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) latent[static_cast<size_t>(j)] = user_mean[static_cast<size_t>(j)] + rng::normal(eng);
    const int n_events =
        static_cast<int>(rng::uniform_int(eng, config.events_per_user_min, config.events_per_user_max));
    int64_t t = 1'000'000;
    auto& events = corpus.events_by_user[static_cast<size_t>(u)];
    events.reserve(static_cast<size_t>(n_events));
    for (int e = 0; e < n_events; ++e) {
      t += rng::uniform_int(eng, 60, 600);
      const int scenario = static_cast<int>(rng::uniform_int(eng, 1, S));
      const auto pref = apply_rotations(rotations[static_cast<size_t>(scenario)], latent);
      double mx = -1e300;
      for (int i = 0; i < config.num_items; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += pref[static_cast<size_t>(j)] * item_latents[static_cast<size_t>(i)][static_cast<size_t>(j)];
        weights[static_cast<size_t>(i)] = s * logit_scale;
        mx = std::max(mx, weights[static_cast<size_t>(i)]);
      }
      for (auto& w : weights) w = std::exp(w - mx);
      const int item = rng::categorical(eng, weights);
      item_counts[static_cast<size_t>(item)] += 1;

      BehaviorEvent ev;
      ev.user_id = u;
      ev.item_id = item;
      ev.scenario_id = scenario;
      ev.timestamp = t;
      const int item_cat = corpus.catalog.items[static_cast<size_t>(item)].category_id;
      ev.category_id = rng::uniform(eng) < p_signal ? item_cat
                                                    : static_cast<int>(rng::uniform_int(eng, 0, C - 1));
      if (rng::uniform(eng) < 0.6) {
        const int tok = rng::uniform(eng) < p_signal
                            ? item_cat
                            : static_cast<int>(rng::uniform_int(eng, C, C + kNoiseQueryTokens - 1));
        ev.query_terms.push_back(tok);
        if (rng::uniform(eng) < 0.3)
          ev.query_terms.push_back(static_cast<int>(rng::uniform_int(eng, C, C + kNoiseQueryTokens - 1)));
      }
      events.push_back(std::move(ev));
    }
    sort_user_events(events);
  }

  const double total_events = static_cast<double>(corpus.num_events());
  for (int i = 0; i < config.num_items; ++i)
    corpus.catalog.items[static_cast<size_t>(i)].popularity =
        static_cast<double>(item_counts[static_cast<size_t>(i)]) / std::max(total_events, 1.0);
  assign_popularity_buckets(corpus.catalog, kPopularityBuckets);

  corpus.vocab.num_users = config.num_users;
  corpus.vocab.num_items = config.num_items;
  corpus.vocab.num_scenarios = S + 1;  // id 0 reserved
  corpus.vocab.num_categories = C;
  corpus.vocab.num_query_tokens = C + kNoiseQueryTokens;
  corpus.vocab.content_dim = kContentDim;
  corpus.vocab.num_popularity_buckets = kPopularityBuckets;
  return corpus;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

int64_t parse_int(const std::string& s, int line_no, const char* field) {
  if (s.empty()) throw std::runtime_error("line " + std::to_string(line_no) + ": empty " + field);
  size_t pos = 0;
  int64_t v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("line " + std::to_string(line_no) + ": non-integer " + field + " '" + s + "'");
  }
  if (pos != s.size())
    throw std::runtime_error("line " + std::to_string(line_no) + ": non-integer " + field + " '" + s + "'");
  return v;
}

std::vector<int> parse_terms(const std::string& s, int line_no) {
  std::vector<int> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(static_cast<int>(parse_int(tok, line_no, "query term")));
  return out;
}

constexpr const char* kEventsHeader = "user_id,item_id,scenario_id,category_id,query_terms,timestamp";

struct RawEvent {
  int64_t user_raw, item_raw;
  int scenario, category;
  std::vector<int> terms;
  int64_t timestamp;
};

std::vector<RawEvent> parse_events_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open interactions file: " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty interactions file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEventsHeader)
    throw std::runtime_error("bad header in " + path + "; expected '" + kEventsHeader + "'");
  std::vector<RawEvent> events;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 6)
      throw std::runtime_error("line " + std::to_string(line_no) + ": expected 6 columns, got " +
                               std::to_string(fields.size()));
    RawEvent ev;
    ev.user_raw = parse_int(fields[0], line_no, "user_id");
    ev.item_raw = parse_int(fields[1], line_no, "item_id");
    ev.scenario = fields[2].empty() ? 0 : static_cast<int>(parse_int(fields[2], line_no, "scenario_id"));
    if (ev.scenario < 0)
      throw std::runtime_error("line " + std::to_string(line_no) + ": negative scenario_id");
    ev.category = static_cast<int>(parse_int(fields[3], line_no, "category_id"));
    if (ev.category < 0)
      throw std::runtime_error("line " + std::to_string(line_no) + ": negative category_id");
    ev.terms = parse_terms(fields[4], line_no);
    ev.timestamp = parse_int(fields[5], line_no, "timestamp");
    if (ev.timestamp < 0)
      throw std::runtime_error("line " + std::to_string(line_no) + ": negative timestamp");
    events.push_back(std::move(ev));
  }
  return events;
}

}  // namespace

Corpus load_interactions(const std::string& path) {
  const auto raw = parse_events_csv(path);

  std::vector<int64_t> user_ids, item_ids;
  for (const auto& ev : raw) {
    user_ids.push_back(ev.user_raw);
    item_ids.push_back(ev.item_raw);
  }
  auto dedupe = [](std::vector<int64_t>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  dedupe(user_ids);
  dedupe(item_ids);
  std::unordered_map<int64_t, int> user_index, item_index;
  for (size_t i = 0; i < user_ids.size(); ++i) user_index[user_ids[i]] = static_cast<int>(i);
  for (size_t i = 0; i < item_ids.size(); ++i) item_index[item_ids[i]] = static_cast<int>(i);

  Corpus corpus;
  corpus.user_raw_ids = user_ids;
  corpus.events_by_user.resize(user_ids.size());
  corpus.catalog.items.resize(item_ids.size());
  for (size_t i = 0; i < item_ids.size(); ++i) corpus.catalog.items[i].raw_id = item_ids[i];

  int max_scenario = 0, max_category = 0, max_token = -1;
  std::vector<std::map<int, int>> item_cat_counts(item_ids.size());
  std::vector<int64_t> item_counts(item_ids.size(), 0);
  for (const auto& ev : raw) {
    BehaviorEvent e;
    const int u = user_index.at(ev.user_raw);
    const int it = item_index.at(ev.item_raw);
    e.user_id = u;
    e.item_id = it;
    e.scenario_id = ev.scenario;
    e.category_id = ev.category;
    e.query_terms = ev.terms;
    e.timestamp = ev.timestamp;
    corpus.events_by_user[static_cast<size_t>(u)].push_back(std::move(e));
    max_scenario = std::max(max_scenario, ev.scenario);
    max_category = std::max(max_category, ev.category);
    for (int t : ev.terms) max_token = std::max(max_token, t);
    item_cat_counts[static_cast<size_t>(it)][ev.category] += 1;
    item_counts[static_cast<size_t>(it)] += 1;
  }
  for (auto& evs : corpus.events_by_user) sort_user_events(evs);

  // Item attributes are derived from the log: the category is the most
  // frequent event category (ties to the smallest id).
  for (size_t i = 0; i < item_ids.size(); ++i) {
    auto& item = corpus.catalog.items[i];
    int best_cat = 0, best_count = -1;
    for (const auto& [cat, cnt] : item_cat_counts[i])
      if (cnt > best_count) {
        best_cat = cat;
        best_count = cnt;
      }
    item.category_id = best_cat;
    item.popularity = static_cast<double>(item_counts[i]) / std::max<double>(1.0, static_cast<double>(raw.size()));
  }
  assign_popularity_buckets(corpus.catalog, kPopularityBuckets);

  corpus.vocab.num_users = static_cast<int>(user_ids.size());
  corpus.vocab.num_items = static_cast<int>(item_ids.size());
  corpus.vocab.num_scenarios = max_scenario + 1;
  corpus.vocab.num_categories = max_category + 1;
  corpus.vocab.num_query_tokens = max_token + 1;
  corpus.vocab.content_dim = 0;
  corpus.vocab.num_popularity_buckets = kPopularityBuckets;
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream os(dir + "/events.csv");
    if (!os) throw std::runtime_error("cannot write " + dir + "/events.csv");
    os << kEventsHeader << "\n";
    for (size_t u = 0; u < corpus.events_by_user.size(); ++u) {
      for (const auto& ev : corpus.events_by_user[u]) {
        os << corpus.user_raw_ids[u] << ',' << corpus.catalog.items[static_cast<size_t>(ev.item_id)].raw_id
           << ',' << ev.scenario_id << ',' << ev.category_id << ',';
        for (size_t t = 0; t < ev.query_terms.size(); ++t) {
          if (t) os << ' ';
          os << ev.query_terms[t];
        }
        os << ',' << ev.timestamp << "\n";
      }
    }
  }
  {
    std::ofstream os(dir + "/items.csv");
    if (!os) throw std::runtime_error("cannot write " + dir + "/items.csv");
    os << "item_id,category_id,popularity,popularity_bucket,content\n";
    for (const auto& item : corpus.catalog.items) {
      os << item.raw_id << ',' << item.category_id << ',' << fmt_g9(item.popularity) << ','
         << item.popularity_bucket << ',';
      for (size_t j = 0; j < item.content.size(); ++j) {
        if (j) os << ' ';
        os << fmt_g9(item.content[j]);
      }
      os << "\n";
    }
  }
  {
    nlohmann::json meta;
    meta["num_users"] = corpus.vocab.num_users;
    meta["num_items"] = corpus.vocab.num_items;
    meta["num_scenarios"] = corpus.vocab.num_scenarios;
    meta["num_categories"] = corpus.vocab.num_categories;
    meta["num_query_tokens"] = corpus.vocab.num_query_tokens;
    meta["content_dim"] = corpus.vocab.content_dim;
    meta["num_popularity_buckets"] = corpus.vocab.num_popularity_buckets;
    meta["seed"] = corpus.seed;
    std::ofstream os(dir + "/meta.json");
    if (!os) throw std::runtime_error("cannot write " + dir + "/meta.json");
    os << meta.dump(2) << "\n";
  }
}

Corpus load_corpus(const std::string& dir) {
  Corpus corpus = load_interactions(dir + "/events.csv");

  std::ifstream meta_is(dir + "/meta.json");
  if (!meta_is) throw std::runtime_error("cannot open " + dir + "/meta.json");
  nlohmann::json meta = nlohmann::json::parse(meta_is);
  corpus.vocab.num_users = meta.at("num_users").get<int>();
  corpus.vocab.num_items = meta.at("num_items").get<int>();
  corpus.vocab.num_scenarios = meta.at("num_scenarios").get<int>();
  corpus.vocab.num_categories = meta.at("num_categories").get<int>();
  corpus.vocab.num_query_tokens = meta.at("num_query_tokens").get<int>();
  corpus.vocab.content_dim = meta.at("content_dim").get<int>();
  corpus.vocab.num_popularity_buckets = meta.at("num_popularity_buckets").get<int>();
  corpus.seed = meta.at("seed").get<uint64_t>();

  // items.csv overrides the attributes derived from events.
  std::ifstream is(dir + "/items.csv");
  if (!is) throw std::runtime_error("cannot open " + dir + "/items.csv");
  std::string line;
  std::getline(is, line);
  std::unordered_map<int64_t, size_t> by_raw;
  for (size_t i = 0; i < corpus.catalog.items.size(); ++i)
    by_raw[corpus.catalog.items[i].raw_id] = i;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 5)
      throw std::runtime_error("items.csv line " + std::to_string(line_no) + ": expected 5 columns");
    const int64_t raw = parse_int(fields[0], line_no, "item_id");
    auto it = by_raw.find(raw);
    if (it == by_raw.end()) continue;  // item without events; attributes kept implicit
    auto& item = corpus.catalog.items[it->second];
    item.category_id = static_cast<int>(parse_int(fields[1], line_no, "category_id"));
    item.popularity = std::stod(fields[2]);
    item.popularity_bucket = static_cast<int>(parse_int(fields[3], line_no, "popularity_bucket"));
    item.content.clear();
    std::istringstream css(fields[4]);
    std::string tok;
    while (css >> tok) item.content.push_back(std::stof(tok));
  }
  return corpus;
}

std::pair<Corpus, Corpus> chronological_split(const Corpus& corpus, int holdout_last_n) {
  if (holdout_last_n < 1) throw std::invalid_argument("chronological_split: holdout_last_n must be >= 1");
  Corpus train = corpus, test = corpus;
  for (size_t u = 0; u < corpus.events_by_user.size(); ++u) {
    const auto& evs = corpus.events_by_user[u];
    auto& tr = train.events_by_user[u];
    auto& te = test.events_by_user[u];
    tr.clear();
    te.clear();
    if (static_cast<int>(evs.size()) > holdout_last_n) {
      tr.assign(evs.begin(), evs.end() - holdout_last_n);
      te.assign(evs.end() - holdout_last_n, evs.end());
    } else {
      tr = evs;
    }
  }
  return {std::move(train), std::move(test)};
}

}  // namespace lum
