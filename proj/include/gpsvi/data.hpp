/*
 * Copyright 2026 The GPSVI Lab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Impression records, synthetic long-tail populations, JSONL ingest,
// head/tail segmentation and padded minibatches.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "gpsvi/errors.hpp"
#include "gpsvi/params.hpp"
#include "gpsvi/serialize.hpp"

namespace gpsvi {

struct ExampleRecord {
  std::int64_t user_id = 0;
  std::vector<std::size_t> group;  // c(u): one id per coarse field
  std::size_t item_id = 0;
  std::size_t context_id = 0;
  std::vector<std::size_t> behaviors;  // item ids, oldest first
  int label = 0;

  std::size_t length() const { return behaviors.size(); }
  bool operator==(const ExampleRecord&) const = default;
};

struct Vocab {
  std::size_t n_items = 0;
  std::size_t n_contexts = 0;
  std::vector<std::size_t> group_sizes;  // vocabulary per coarse field

  bool operator==(const Vocab&) const = default;
};

struct Dataset {
  std::vector<ExampleRecord> records;
  Vocab vocab;
  std::size_t max_seq_len = 500;
  std::string provenance;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

// ---------------------------------------------------------------------------
// Serialization and hashing.

inline std::string record_to_json(const ExampleRecord& r) {
  JsonWriter w;
  w.begin_object();
  w.key("user_id").value(static_cast<long long>(r.user_id));
  w.key("group").begin_array();
  for (auto g : r.group) w.value(g);
  w.end_array();
  w.key("item_id").value(r.item_id);
  w.key("context_id").value(r.context_id);
  w.key("behaviors").begin_array();
  for (auto b : r.behaviors) w.value(b);
  w.end_array();
  w.key("label").value(r.label);
  w.end_object();
  std::string s = w.str();
  s.pop_back();
  return s;
}

inline std::string to_jsonl(const Dataset& ds) {
  std::string out;
  for (const auto& r : ds.records) {
    out += record_to_json(r);
    out += '\n';
  }
  return out;
}

inline void save_jsonl(const std::filesystem::path& path, const Dataset& ds) {
  write_file_atomic(path, to_jsonl(ds));
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

/// SHA-256 over the vocabulary header followed by the canonical JSONL body.
inline std::string dataset_hash(const Dataset& ds) {
  std::string header = "vocab items=" + std::to_string(ds.vocab.n_items) +
                       " contexts=" + std::to_string(ds.vocab.n_contexts) + " groups=";
  for (auto g : ds.vocab.group_sizes) header += std::to_string(g) + ",";
  header += " max_seq_len=" + std::to_string(ds.max_seq_len) + "\n";
  return sha256_hex(header + to_jsonl(ds));
}

// ---------------------------------------------------------------------------
// JSONL ingest.

struct LoadOptions {
  std::size_t max_seq_len = 500;
  std::optional<Vocab> vocab;  // inferred from the data when absent
};

inline void check_vocab(const ExampleRecord& r, const Vocab& v, std::size_t line) {
  auto fail = [line](const std::string& what) {
    throw VocabError("line " + std::to_string(line) + ": " + what);
  };
  if (r.item_id >= v.n_items) fail("item_id " + std::to_string(r.item_id) + " out of vocab");
  if (r.context_id >= v.n_contexts) fail("context_id " + std::to_string(r.context_id) + " out of vocab");
  if (r.group.size() != v.group_sizes.size()) fail("group arity " + std::to_string(r.group.size()));
  for (std::size_t f = 0; f < r.group.size(); ++f) {
    if (r.group[f] >= v.group_sizes[f]) fail("group[" + std::to_string(f) + "] out of vocab");
  }
  for (auto b : r.behaviors) {
    if (b >= v.n_items) fail("behavior item " + std::to_string(b) + " out of vocab");
  }
}

inline Dataset parse_jsonl(std::istream& in, const LoadOptions& options, const std::string& origin) {
  Dataset ds;
  ds.max_seq_len = options.max_seq_len;
  ds.provenance = origin;
  std::string line;
  std::size_t lineno = 0;
  auto ids = [](const nlohmann::json& j, const char* key) {
    std::vector<std::size_t> out;
    for (const auto& v : j.at(key)) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw std::invalid_argument(key);
      out.push_back(v.get<std::size_t>());
    }
    return out;
  };
  auto id = [](const nlohmann::json& j, const char* key) {
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw std::invalid_argument(key);
    return v.get<std::size_t>();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ExampleRecord r;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("record is not an object");
      if (!j.at("user_id").is_number_integer()) throw std::invalid_argument("user_id");
      r.user_id = j.at("user_id").get<std::int64_t>();
      r.group = ids(j, "group");
      r.item_id = id(j, "item_id");
      r.context_id = id(j, "context_id");
      r.behaviors = ids(j, "behaviors");
      const auto& label = j.at("label");
      if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1)) {
        throw std::invalid_argument("label must be 0 or 1");
      }
      r.label = label.get<int>();
    } catch (const std::exception& e) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": malformed record (" + e.what() + ")",
                       lineno);
    }
    if (r.behaviors.size() > options.max_seq_len) {
      r.behaviors.erase(r.behaviors.begin(),
                        r.behaviors.end() - static_cast<long>(options.max_seq_len));
    }
    if (options.vocab) check_vocab(r, *options.vocab, lineno);
    ds.records.push_back(std::move(r));
  }
  if (options.vocab) {
    ds.vocab = *options.vocab;
  } else {
    for (const auto& r : ds.records) {
      ds.vocab.n_items = std::max(ds.vocab.n_items, r.item_id + 1);
      ds.vocab.n_contexts = std::max(ds.vocab.n_contexts, r.context_id + 1);
      for (auto b : r.behaviors) ds.vocab.n_items = std::max(ds.vocab.n_items, b + 1);
      if (ds.vocab.group_sizes.size() < r.group.size()) ds.vocab.group_sizes.resize(r.group.size(), 0);
      for (std::size_t f = 0; f < r.group.size(); ++f) {
        ds.vocab.group_sizes[f] = std::max(ds.vocab.group_sizes[f], r.group[f] + 1);
      }
    }
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      if (ds.records[i].group.size() != ds.vocab.group_sizes.size()) {
        throw VocabError("record " + std::to_string(i + 1) + ": inconsistent group arity");
      }
    }
  }
  return ds;
}

inline Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  return parse_jsonl(in, options, path.string());
}

// ---------------------------------------------------------------------------
// Synthetic long-tail population with planted group preferences.

struct SynthConfig {
  std::size_t n_users = 10000;
  std::size_t n_items = 500;
  std::size_t n_contexts = 4;
  std::vector<std::size_t> group_sizes{4, 2, 4};
  std::size_t latent_dim = 8;
  double zipf_exponent = 1.2;
  std::size_t min_len = 1;
  std::size_t max_len = 100;
  std::size_t impressions_per_user = 6;
  double history_strength = 2.0;   // weight of the user's own interest
  double group_strength = 2.0;     // weight of the planted group preference
  double mix_length = 8.0;         // group weight = mix_length / (mix_length + l)
  double individual_scale = 1.0;   // spread of users around their group
  double behavior_sharpness = 2.0; // how strongly behaviors follow interest
  double context_effect = 0.3;
  double base_logit = 0.0;
  double label_noise = 0.05;       // probability of flipping the drawn label
};

inline void validate(const SynthConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic config: " + m); };
  if (c.n_users == 0) fail("n_users must be positive");
  if (c.n_items == 0) fail("n_items must be positive");
  if (c.n_contexts == 0) fail("n_contexts must be positive");
  if (c.group_sizes.empty()) fail("group_sizes must be non-empty");
  for (auto g : c.group_sizes) {
    if (g == 0) fail("group vocab sizes must be positive");
  }
  if (c.latent_dim == 0) fail("latent_dim must be positive");
  if (!(c.zipf_exponent > 0.0)) fail("zipf_exponent must be > 0");
  if (c.min_len > c.max_len) fail("min_len > max_len");
  if (c.max_len == 0) fail("max_len must be positive");
  if (c.impressions_per_user == 0) fail("impressions_per_user must be positive");
  if (!(c.mix_length > 0.0)) fail("mix_length must be > 0");
  if (c.label_noise < 0.0 || c.label_noise >= 0.5) fail("label_noise must be in [0, 0.5)");
  if (c.group_strength < 0.0 || c.history_strength < 0.0) fail("strengths must be >= 0");
}

/// Share of the label logit attributed to the group preference for a user
/// with `length` behaviors. Decreasing in length whenever group_strength > 0.
inline double group_signal_fraction(const SynthConfig& c, std::size_t length) {
  const double w = c.mix_length / (c.mix_length + static_cast<double>(length));
  const double group = w * c.group_strength;
  const double individual = (1.0 - w) * c.history_strength;
  if (group + individual == 0.0) return 0.0;
  return group / (group + individual);
}

inline std::size_t group_index(const std::vector<std::size_t>& group, const std::vector<std::size_t>& sizes) {
  std::size_t idx = 0;
  for (std::size_t f = 0; f < sizes.size(); ++f) idx = idx * sizes[f] + group[f];
  return idx;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "n_users",          "n_items",        "n_contexts",    "group_sizes",      "latent_dim",
      "zipf_exponent",    "min_len",        "max_len",       "impressions_per_user",
      "history_strength", "group_strength", "mix_length",    "individual_scale", "behavior_sharpness",
      "context_effect",   "base_logit",     "label_noise"};
  if (!j.is_object()) throw ConfigError("synthetic config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("synthetic config: unknown key '" + key + "'");
  }
  SynthConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("n_users", c.n_users);
    get("n_items", c.n_items);
    get("n_contexts", c.n_contexts);
    get("group_sizes", c.group_sizes);
    get("latent_dim", c.latent_dim);
    get("zipf_exponent", c.zipf_exponent);
    get("min_len", c.min_len);
    get("max_len", c.max_len);
    get("impressions_per_user", c.impressions_per_user);
    get("history_strength", c.history_strength);
    get("group_strength", c.group_strength);
    get("mix_length", c.mix_length);
    get("individual_scale", c.individual_scale);
    get("behavior_sharpness", c.behavior_sharpness);
    get("context_effect", c.context_effect);
    get("base_logit", c.base_logit);
    get("label_noise", c.label_noise);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  validate(c);
  return c;
}

inline void synth_config_to_json(JsonWriter& w, const SynthConfig& c) {
  w.begin_object();
  w.key("n_users").value(c.n_users);
  w.key("n_items").value(c.n_items);
  w.key("n_contexts").value(c.n_contexts);
  w.key("group_sizes").begin_array();
  for (auto g : c.group_sizes) w.value(g);
  w.end_array();
  w.key("latent_dim").value(c.latent_dim);
  w.key("zipf_exponent").value(c.zipf_exponent);
  w.key("min_len").value(c.min_len);
  w.key("max_len").value(c.max_len);
  w.key("impressions_per_user").value(c.impressions_per_user);
  w.key("history_strength").value(c.history_strength);
  w.key("group_strength").value(c.group_strength);
  w.key("mix_length").value(c.mix_length);
  w.key("individual_scale").value(c.individual_scale);
  w.key("behavior_sharpness").value(c.behavior_sharpness);
  w.key("context_effect").value(c.context_effect);
  w.key("base_logit").value(c.base_logit);
  w.key("label_noise").value(c.label_noise);
  w.end_object();
}

/// Draws users with truncated-Zipf history lengths, behaviors that follow
/// each user's interest (group preference plus an individual offset), and
/// labels from
///   logit = base + (1 - w(l)) * a * <interest, item>
///                + w(l) * b * <group preference, item> + context effect,
/// with w(l) = mix_length / (mix_length + l), so the group term dominates
/// for short histories. Deterministic in (cfg, seed).
inline Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const std::size_t k = cfg.latent_dim;
  const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));
  auto rng = make_stream(seed, "synthetic");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> items(cfg.n_items * k);
  for (auto& v : items) v = normal(rng);

  // Additive per-field preferences.
  std::vector<std::vector<double>> field_pref;
  const double field_scale = 1.0 / std::sqrt(static_cast<double>(cfg.group_sizes.size()));
  for (auto size : cfg.group_sizes) {
    field_pref.emplace_back(size * k);
    for (auto& v : field_pref.back()) v = field_scale * normal(rng);
  }
  std::vector<double> context_bias(cfg.n_contexts);
  for (auto& v : context_bias) v = cfg.context_effect * normal(rng);

  std::vector<double> zipf_cdf;
  double acc = 0.0;
  for (std::size_t k_rank = 1; k_rank <= cfg.max_len - cfg.min_len + 1; ++k_rank) {
    acc += std::pow(static_cast<double>(k_rank), -cfg.zipf_exponent);
    zipf_cdf.push_back(acc);
  }

  Dataset ds;
  ds.vocab = Vocab{cfg.n_items, cfg.n_contexts, cfg.group_sizes};
  ds.max_seq_len = cfg.max_len;
  ds.provenance = "synthetic seed=" + std::to_string(seed);

  std::vector<double> pref(k), interest(k), logits(cfg.n_items), cdf(cfg.n_items);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    std::vector<std::size_t> group(cfg.group_sizes.size());
    for (std::size_t f = 0; f < group.size(); ++f) {
      group[f] = static_cast<std::size_t>(rng() % cfg.group_sizes[f]);
    }
    std::fill(pref.begin(), pref.end(), 0.0);
    for (std::size_t f = 0; f < group.size(); ++f) {
      for (std::size_t j = 0; j < k; ++j) pref[j] += field_pref[f][group[f] * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) interest[j] = pref[j] + cfg.individual_scale * normal(rng);

    // Zipf rank k >= 1 maps to length min_len + k - 1.
    const double draw = unit(rng) * zipf_cdf.back();
    const auto rank = static_cast<std::size_t>(
        std::lower_bound(zipf_cdf.begin(), zipf_cdf.end(), draw) - zipf_cdf.begin());
    const std::size_t length = cfg.min_len + std::min(rank, zipf_cdf.size() - 1);

    // Behaviors ~ softmax(sharpness * <interest, item> / sqrt(k)).
    double peak = -1e300;
    for (std::size_t i = 0; i < cfg.n_items; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += interest[j] * items[i * k + j];
      logits[i] = cfg.behavior_sharpness * s * inv_sqrt_k;
      peak = std::max(peak, logits[i]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < cfg.n_items; ++i) {
      total += std::exp(logits[i] - peak);
      cdf[i] = total;
    }
    std::vector<std::size_t> behaviors(length);
    for (auto& b : behaviors) {
      const double draw = unit(rng) * total;
      b = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), draw) - cdf.begin());
      b = std::min(b, cfg.n_items - 1);
    }

    const double w = cfg.mix_length / (cfg.mix_length + static_cast<double>(length));
    for (std::size_t n = 0; n < cfg.impressions_per_user; ++n) {
      ExampleRecord r;
      r.user_id = static_cast<std::int64_t>(u);
      r.group = group;
      r.item_id = static_cast<std::size_t>(rng() % cfg.n_items);
      r.context_id = static_cast<std::size_t>(rng() % cfg.n_contexts);
      r.behaviors = behaviors;
      double own = 0.0, grp = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        own += interest[j] * items[r.item_id * k + j];
        grp += pref[j] * items[r.item_id * k + j];
      }
      own *= inv_sqrt_k;
      grp *= inv_sqrt_k;
      const double logit = cfg.base_logit + (1.0 - w) * cfg.history_strength * own +
                           w * cfg.group_strength * grp + context_bias[r.context_id];
      int y = unit(rng) < stable_sigmoid(logit) ? 1 : 0;
      if (unit(rng) < cfg.label_noise) y = 1 - y;
      r.label = y;
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

/// Seeded record-level holdout: each record lands in the second split with
/// probability `test_fraction`.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0) throw ConfigError("test_fraction must be in (0, 1)");
  Dataset train, test;
  train.vocab = test.vocab = ds.vocab;
  train.max_seq_len = test.max_seq_len = ds.max_seq_len;
  train.provenance = ds.provenance + " [train]";
  test.provenance = ds.provenance + " [test]";
  auto rng = make_stream(seed, "holdout");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& r : ds.records) {
    (unit(rng) < test_fraction ? test : train).records.push_back(r);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Head / tail segmentation.

enum class Segment { Head, Tail };

using SegmentLabel = std::map<std::int64_t, Segment>;

/// Interaction count per user: the longest behavior sequence seen for them.
inline std::map<std::int64_t, std::size_t> interaction_counts(const Dataset& ds) {
  std::map<std::int64_t, std::size_t> counts;
  for (const auto& r : ds.records) {
    auto& c = counts[r.user_id];
    c = std::max(c, r.length());
  }
  return counts;
}

/// Users ranked by interaction count (descending, ties by ascending id); the
/// first ceil(head_quantile * n_users) are Head.
inline SegmentLabel split_head_tail(const Dataset& ds, double head_quantile = 0.25) {
  if (!(head_quantile > 0.0 && head_quantile < 1.0)) throw ConfigError("head_quantile must be in (0, 1)");
  if (ds.empty()) throw EmptyDatasetError("split_head_tail on an empty dataset");
  auto counts = interaction_counts(ds);
  std::vector<std::pair<std::int64_t, std::size_t>> users(counts.begin(), counts.end());
  std::stable_sort(users.begin(), users.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const auto n_head = static_cast<std::size_t>(std::ceil(head_quantile * static_cast<double>(users.size()) - 1e-9));
  SegmentLabel out;
  for (std::size_t i = 0; i < users.size(); ++i) {
    out[users[i].first] = i < n_head ? Segment::Head : Segment::Tail;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Minibatches.

struct Batch {
  std::vector<std::size_t> rows;  // indices into the dataset
  std::size_t max_len = 1;        // padded sequence length (>= 1)
  std::vector<std::size_t> items;
  std::vector<std::size_t> contexts;
  std::vector<std::vector<std::size_t>> groups;  // [field][example]
  std::vector<std::size_t> behaviors;            // size() x max_len, padding = 0
  std::vector<double> mask;                      // 1 on real positions
  std::vector<double> lengths;
  std::vector<double> labels;

  std::size_t size() const { return rows.size(); }
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Batch b;
  b.rows = rows;
  for (auto r : rows) b.max_len = std::max(b.max_len, ds.records.at(r).length());
  b.groups.assign(ds.vocab.group_sizes.size(), {});
  b.behaviors.assign(rows.size() * b.max_len, 0);
  b.mask.assign(rows.size() * b.max_len, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& rec = ds.records[rows[i]];
    b.items.push_back(rec.item_id);
    b.contexts.push_back(rec.context_id);
    for (std::size_t f = 0; f < b.groups.size(); ++f) b.groups[f].push_back(rec.group.at(f));
    for (std::size_t l = 0; l < rec.length(); ++l) {
      b.behaviors[i * b.max_len + l] = rec.behaviors[l];
      b.mask[i * b.max_len + l] = 1.0;
    }
    b.lengths.push_back(static_cast<double>(rec.length()));
    b.labels.push_back(static_cast<double>(rec.label));
  }
  return b;
}

/// Seeded permutation cut into consecutive batches; the last may be short.
class BatchSequence {
 public:
  BatchSequence(const Dataset& ds, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed)
      : ds_(&ds) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_seed) {
      auto rng = make_stream(*shuffle_seed, "shuffle");
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
      chunks_.emplace_back(order.begin() + static_cast<long>(i),
                           order.begin() + static_cast<long>(std::min(order.size(), i + batch_size)));
    }
  }

  std::size_t size() const { return chunks_.size(); }
  const std::vector<std::size_t>& rows(std::size_t i) const { return chunks_.at(i); }
  Batch operator[](std::size_t i) const { return make_batch(*ds_, chunks_.at(i)); }

 private:
  const Dataset* ds_;
  std::vector<std::vector<std::size_t>> chunks_;
};

inline BatchSequence batch_iter(const Dataset& ds, std::size_t batch_size,
                                std::optional<std::uint64_t> shuffle_seed) {
  return BatchSequence(ds, batch_size, shuffle_seed);
}

}  // namespace gpsvi
