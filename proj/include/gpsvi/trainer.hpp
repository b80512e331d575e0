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

// Run configuration, training loop, evaluation and diagnostic reports.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsvi/data.hpp"
#include "gpsvi/errors.hpp"
#include "gpsvi/metrics.hpp"
#include "gpsvi/model.hpp"
#include "gpsvi/params.hpp"
#include "gpsvi/serialize.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

enum class SegmentSource { Eval, Train };

struct Seeds {
  std::uint64_t init = 1;
  std::uint64_t data = 1;
  std::uint64_t noise = 1;
};

struct DataSource {
  bool synthetic = true;
  SynthConfig synth;
  double test_fraction = 0.2;
  std::string train_path;  // files mode
  std::string test_path;
  std::size_t max_seq_len = 500;
};

struct RunConfig {
  ModelConfig model;
  bool use_monotonic_reg = true;
  double lr = 1e-3;
  double beta = 1.0;
  bool kl_warmup = false;
  double lambda_m = 0.1;
  std::size_t batch_size = 256;
  std::size_t epochs = 3;
  std::size_t repeats = 1;
  PairSampling pairs;
  Seeds seeds;
  DataSource data;
  double head_quantile = 0.25;
  SegmentSource segment_source = SegmentSource::Eval;
  std::size_t mc_samples = 0;

  void validate() const {
    model.validate();
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(lambda_m >= 0.0)) throw ConfigError("lambda_m must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (!(head_quantile > 0.0 && head_quantile < 1.0)) throw ConfigError("head_quantile must be in (0, 1)");
    if (data.synthetic) {
      gpsvi::validate(data.synth);
      if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
        throw ConfigError("test_fraction must be in (0, 1)");
      }
    } else if (data.train_path.empty() || data.test_path.empty()) {
      throw ConfigError("file data source needs train and test paths");
    }
  }
};

namespace detail {

// Reads object members while rejecting keys the schema does not know.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + " must be a JSON object");
  }
  ~Section() = default;

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const char* key) const { return j_.at(key); }
  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Every section and key is optional; unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& doc) {
  RunConfig c;
  detail::Section top(doc, "config");
  std::string variant = to_string(c.model.variant);
  top.get("variant", variant);
  c.model.variant = parse_variant(variant);

  if (top.has("flags")) {
    detail::Section s(top.at("flags"), "flags");
    std::string mode = to_string(c.model.projection), backbone = to_string(c.model.backbone);
    s.get("use_flow", c.model.use_flow);
    s.get("use_monotonic_reg", c.use_monotonic_reg);
    s.get("projection_mode", mode);
    s.get("kl_warmup", c.kl_warmup);
    s.get("scale_logits", c.model.scale_logits);
    s.get("kv_projection", c.model.kv_projection);
    s.get("query_context", c.model.query_context);
    s.get("backbone", backbone);
    s.finish();
    c.model.projection = parse_projection_mode(mode);
    c.model.backbone = parse_variant(backbone);
  }
  if (top.has("hyper")) {
    detail::Section s(top.at("hyper"), "hyper");
    s.get("dim", c.model.dim);
    s.get("lr", c.lr);
    s.get("beta", c.beta);
    s.get("lambda_m", c.lambda_m);
    s.get("batch_size", c.batch_size);
    s.get("epochs", c.epochs);
    s.get("repeats", c.repeats);
    s.get("flow_layers", c.model.flow_layers);
    s.get("flow_hidden", c.model.flow_hidden);
    s.get("sigma_min", c.model.sigma_min);
    s.get("sigma_max", c.model.sigma_max);
    s.get("eps_g", c.model.eps_g);
    s.get("decoder_hidden", c.model.decoder_hidden);
    s.get("group_hidden", c.model.group_hidden);
    s.get("pair_all_up_to", c.pairs.all_pairs_up_to);
    s.get("pairs_per_example", c.pairs.pairs_per_example);
    s.finish();
  }
  if (top.has("seeds")) {
    detail::Section s(top.at("seeds"), "seeds");
    s.get("init", c.seeds.init);
    s.get("data", c.seeds.data);
    s.get("noise", c.seeds.noise);
    s.finish();
  }
  if (top.has("data")) {
    detail::Section s(top.at("data"), "data");
    std::string source = "synthetic";
    s.get("source", source);
    if (source != "synthetic" && source != "files") throw ConfigError("data.source must be synthetic or files");
    c.data.synthetic = source == "synthetic";
    if (s.has("synthetic")) c.data.synth = synth_config_from_json(s.at("synthetic"));
    s.get("test_fraction", c.data.test_fraction);
    s.get("train", c.data.train_path);
    s.get("test", c.data.test_path);
    s.get("max_seq_len", c.data.max_seq_len);
    s.finish();
  }
  if (top.has("eval")) {
    detail::Section s(top.at("eval"), "eval");
    std::string source = "eval";
    s.get("head_quantile", c.head_quantile);
    s.get("segment_source", source);
    s.get("mc_samples", c.mc_samples);
    s.finish();
    if (source != "eval" && source != "train") throw ConfigError("eval.segment_source must be eval or train");
    c.segment_source = source == "eval" ? SegmentSource::Eval : SegmentSource::Train;
  }
  top.finish();
  c.validate();
  return c;
}

/// Loads a config file. When `env_override` is set and GPSVI_SEED is defined,
/// it replaces all three seeds.
inline RunConfig load_run_config(const std::filesystem::path& path, bool env_override = true) {
  RunConfig c = run_config_from_json(parse_json(read_file(path), path.string()));
  if (env_override) {
    if (const char* env = std::getenv("GPSVI_SEED"); env != nullptr && *env != '\0') {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (end == env || *end != '\0') throw ConfigError(std::string("GPSVI_SEED is not an integer: ") + env);
      c.seeds = Seeds{v, v, v};
    }
  }
  return c;
}

/// The fully resolved config, defaults included, in schema order.
inline std::string run_config_to_json(const RunConfig& c) {
  JsonWriter w;
  w.begin_object();
  w.key("variant").value(to_string(c.model.variant));
  w.key("flags").begin_object();
  w.key("use_flow").value(c.model.use_flow);
  w.key("use_monotonic_reg").value(c.use_monotonic_reg);
  w.key("projection_mode").value(to_string(c.model.projection));
  w.key("kl_warmup").value(c.kl_warmup);
  w.key("scale_logits").value(c.model.scale_logits);
  w.key("kv_projection").value(c.model.kv_projection);
  w.key("query_context").value(c.model.query_context);
  w.key("backbone").value(to_string(c.model.backbone));
  w.end_object();
  w.key("hyper").begin_object();
  w.key("dim").value(c.model.dim);
  w.key("lr").value(c.lr);
  w.key("beta").value(c.beta);
  w.key("lambda_m").value(c.lambda_m);
  w.key("batch_size").value(c.batch_size);
  w.key("epochs").value(c.epochs);
  w.key("repeats").value(c.repeats);
  w.key("flow_layers").value(c.model.flow_layers);
  w.key("flow_hidden").value(c.model.flow_hidden);
  w.key("sigma_min").value(c.model.sigma_min);
  w.key("sigma_max").value(c.model.sigma_max);
  w.key("eps_g").value(c.model.eps_g);
  w.key("decoder_hidden").begin_array();
  for (auto h : c.model.decoder_hidden) w.value(h);
  w.end_array();
  w.key("group_hidden").value(c.model.group_hidden);
  w.key("pair_all_up_to").value(c.pairs.all_pairs_up_to);
  w.key("pairs_per_example").value(c.pairs.pairs_per_example);
  w.end_object();
  w.key("seeds").begin_object();
  w.key("init").value(static_cast<std::size_t>(c.seeds.init));
  w.key("data").value(static_cast<std::size_t>(c.seeds.data));
  w.key("noise").value(static_cast<std::size_t>(c.seeds.noise));
  w.end_object();
  w.key("data").begin_object();
  w.key("source").value(c.data.synthetic ? "synthetic" : "files");
  if (c.data.synthetic) {
    w.key("synthetic");
    synth_config_to_json(w, c.data.synth);
    w.key("test_fraction").value(c.data.test_fraction);
  } else {
    w.key("train").value(c.data.train_path);
    w.key("test").value(c.data.test_path);
    w.key("max_seq_len").value(c.data.max_seq_len);
  }
  w.end_object();
  w.key("eval").begin_object();
  w.key("head_quantile").value(c.head_quantile);
  w.key("segment_source").value(c.segment_source == SegmentSource::Eval ? "eval" : "train");
  w.key("mc_samples").value(c.mc_samples);
  w.end_object();
  w.end_object();
  return w.str();
}

struct Splits {
  Dataset train;
  Dataset test;
};

/// Synthetic data is generated from the data seed and split by it; file
/// sources are read with the vocabulary inferred over both files.
inline Splits load_splits(const RunConfig& c) {
  if (c.data.synthetic) {
    auto [train, test] = split_holdout(generate_synthetic(c.data.synth, c.seeds.data), c.data.test_fraction,
                                       c.seeds.data);
    if (train.empty() || test.empty()) throw EmptyDatasetError("synthetic split left an empty side");
    return {std::move(train), std::move(test)};
  }
  LoadOptions opts;
  opts.max_seq_len = c.data.max_seq_len;
  Dataset train = load_jsonl(c.data.train_path, opts);
  Dataset test = load_jsonl(c.data.test_path, opts);
  Vocab v;
  v.n_items = std::max(train.vocab.n_items, test.vocab.n_items);
  v.n_contexts = std::max(train.vocab.n_contexts, test.vocab.n_contexts);
  if (train.vocab.group_sizes.size() != test.vocab.group_sizes.size()) {
    throw VocabError("train and test disagree on the number of group fields");
  }
  for (std::size_t f = 0; f < train.vocab.group_sizes.size(); ++f) {
    v.group_sizes.push_back(std::max(train.vocab.group_sizes[f], test.vocab.group_sizes[f]));
  }
  train.vocab = test.vocab = v;
  if (train.empty() || test.empty()) throw EmptyDatasetError("train or test file has no records");
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Objective.

struct LossTerms {
  Tensor total;  // differentiable scalar
  double total_value = 0.0;
  double bce = 0.0;
  double kl = 0.0;
  double reg = 0.0;
  double beta = 0.0;
  double lambda_m = 0.0;
};

struct LossOptions {
  double beta = 1.0;
  double lambda_m = 0.0;
  bool use_monotonic_reg = true;
  PairSampling pairs;
};

/// mean BCE + beta * mean KL + lambda_m * R_m for one forward pass. Models
/// without a latent layer contribute BCE only.
inline LossTerms assemble_loss(const ForwardResult& fwd, const Batch& b, const LossOptions& opt,
                               std::mt19937_64* pair_rng = nullptr, std::size_t* undersized = nullptr) {
  Tensor labels = Tensor::constant({b.size()}, b.labels);
  Tensor bce = mean_all(bce_with_logits(fwd.logits, labels));
  LossTerms t;
  t.beta = opt.beta;
  t.lambda_m = opt.lambda_m;
  t.total = bce;
  t.bce = bce.item();
  if (fwd.latent) {
    Tensor kl = mean_all(kl_projected(fwd.posterior, fwd.group, kDefaultEpsG));
    t.kl = kl.item();
    if (opt.beta != 0.0) t.total = add(t.total, scale(kl, opt.beta));
    if (opt.use_monotonic_reg) {
      Tensor reg = monotonic_regularizer(fwd.posterior.sigma, b.lengths, pair_rng, undersized, opt.pairs);
      t.reg = reg.item();
      if (opt.lambda_m != 0.0) t.total = add(t.total, scale(reg, opt.lambda_m));
    }
  }
  t.total_value = t.total.item();
  return t;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct SegmentAuc {
  std::optional<double> all;
  std::optional<double> head;
  std::optional<double> tail;
  std::size_t n_head_records = 0;
  std::size_t n_tail_records = 0;
};

inline std::optional<double> auc_or_absent(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty()) return std::nullopt;
  try {
    return auc(scores, labels);
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

/// Scores every record (records sorted by content first, so the result does
/// not depend on record order).
inline std::vector<double> score_dataset(const CtrModel& m, const Dataset& ds, std::size_t mc_samples = 0,
                                         std::uint64_t mc_seed = 0, std::size_t batch_size = 512) {
  std::vector<double> scores(ds.size());
  auto rng = make_stream(mc_seed, "mc-scoring");
  BatchSequence batches(ds, batch_size, std::nullopt);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    auto p = m.predict(batches[i], mc_samples, &rng);
    const auto& rows = batches.rows(i);
    for (std::size_t k = 0; k < rows.size(); ++k) scores[rows[k]] = p[k];
  }
  return scores;
}

inline SegmentAuc evaluate(const CtrModel& m, const Dataset& ds, const SegmentLabel& segments,
                           std::size_t mc_samples = 0, std::uint64_t mc_seed = 0) {
  // Canonical order makes evaluation invariant to the input order; MC scoring
  // draws noise in this order too.
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = ds.records[a];
    const auto& rb = ds.records[b];
    return std::tie(ra.user_id, ra.item_id, ra.context_id, ra.label, ra.group, ra.behaviors) <
           std::tie(rb.user_id, rb.item_id, rb.context_id, rb.label, rb.group, rb.behaviors);
  });
  Dataset sorted;
  sorted.vocab = ds.vocab;
  sorted.max_seq_len = ds.max_seq_len;
  for (auto i : order) sorted.records.push_back(ds.records[i]);
  auto scores = score_dataset(m, sorted, mc_samples, mc_seed);

  std::vector<double> s_all, s_head, s_tail;
  std::vector<int> y_all, y_head, y_tail;
  SegmentAuc out;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& r = sorted.records[i];
    s_all.push_back(scores[i]);
    y_all.push_back(r.label);
    auto it = segments.find(r.user_id);
    if (it == segments.end()) continue;
    if (it->second == Segment::Head) {
      s_head.push_back(scores[i]);
      y_head.push_back(r.label);
    } else {
      s_tail.push_back(scores[i]);
      y_tail.push_back(r.label);
    }
  }
  out.all = auc_or_absent(s_all, y_all);
  out.head = auc_or_absent(s_head, y_head);
  out.tail = auc_or_absent(s_tail, y_tail);
  out.n_head_records = s_head.size();
  out.n_tail_records = s_tail.size();
  return out;
}

inline SegmentLabel segments_for(const RunConfig& c, const Splits& s) {
  return split_head_tail(c.segment_source == SegmentSource::Eval ? s.test : s.train, c.head_quantile);
}

// ---------------------------------------------------------------------------
// Training.

struct EpochStats {
  double loss = 0.0;
  double bce = 0.0;
  double kl = 0.0;
  double reg = 0.0;
};

struct RepeatResult {
  std::vector<EpochStats> curve;
  SegmentAuc auc;
  std::size_t undersized_batches = 0;
};

struct TrainOutcome {
  std::vector<CtrModel> models;  // one per repeat
  std::vector<RepeatResult> repeats;
  SegmentLabel segments;
  std::size_t n_head_users = 0;
  std::size_t n_tail_users = 0;
  std::string train_hash;
  std::string test_hash;
  std::size_t train_records = 0;
  std::size_t test_records = 0;
};

/// Writes the offending batch to `dump` (when given) and aborts.
[[noreturn]] inline void abort_on_nan(const Batch& b, std::size_t epoch, std::size_t index, const Dataset& ds,
                                      const std::optional<std::filesystem::path>& dump,
                                      const std::string& cause = "") {
  if (dump) {
    Dataset bad;
    bad.vocab = ds.vocab;
    for (auto r : b.rows) bad.records.push_back(ds.records[r]);
    JsonWriter w;
    w.begin_object();
    w.key("epoch").value(epoch);
    w.key("batch_index").value(index);
    w.key("rows").begin_array();
    for (auto r : b.rows) w.value(r);
    w.end_array();
    w.end_object();
    write_file_atomic(*dump, w.str() + to_jsonl(bad));
  }
  throw NanLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(index) +
                         (cause.empty() ? "" : " (" + cause + ")"),
                     index);
}

/// Trains one model. Noise, pair sampling and shuffling come from streams
/// derived from the seeds, so a rerun reproduces every value bit for bit.
inline CtrModel train_model(const RunConfig& c, const Dataset& train, std::uint64_t init_seed,
                            std::uint64_t noise_seed, RepeatResult& result,
                            const std::optional<std::filesystem::path>& nan_dump = std::nullopt) {
  CtrModel model(c.model, train.vocab, init_seed);
  Adam adam(AdamOptions{c.lr, 0.9, 0.999, 1e-8});
  auto noise = make_stream(noise_seed, "latent-noise");
  auto pair_rng = make_stream(noise_seed, "regularizer-pairs");
  LossOptions opt{c.beta, c.lambda_m, c.use_monotonic_reg, c.pairs};
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    BatchSequence batches(train, c.batch_size, c.seeds.data * 1000003ULL + epoch);
    EpochStats stats;
    for (std::size_t i = 0; i < batches.size(); ++i, ++step) {
      Batch b = batches[i];
      if (c.kl_warmup) {
        opt.beta = c.beta * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(batches.size()));
      }
      Tape tape;
      Tensor xi;
      if (model.stochastic()) xi = standard_normal(noise, {b.size(), c.model.dim});
      LossTerms terms;
      try {
        ForwardResult fwd = model.forward(b, Path::Sample, model.stochastic() ? &xi : nullptr);
        terms = assemble_loss(fwd, b, opt, &pair_rng, &result.undersized_batches);
      } catch (const DomainError& e) {
        // Norm and log arguments are positive by construction; leaving the
        // domain means the parameters have overflowed.
        abort_on_nan(b, epoch, i, train, nan_dump, e.what());
      }
      if (!std::isfinite(terms.total_value)) abort_on_nan(b, epoch, i, train, nan_dump);
      tape.backward(terms.total);
      adam.step(model.params());
      model.params().zero_grad();
      const double w = static_cast<double>(b.size());
      stats.loss += w * terms.total_value;
      stats.bce += w * terms.bce;
      stats.kl += w * terms.kl;
      stats.reg += terms.reg;
    }
    const double n = static_cast<double>(train.size());
    stats.loss /= n;
    stats.bce /= n;
    stats.kl /= n;
    stats.reg /= static_cast<double>(batches.size());
    result.curve.push_back(stats);
  }
  return model;
}

inline TrainOutcome train(const RunConfig& c, const Splits& s,
                          const std::optional<std::filesystem::path>& nan_dump = std::nullopt) {
  c.validate();
  TrainOutcome out;
  out.segments = segments_for(c, s);
  for (const auto& [_, seg] : out.segments) (seg == Segment::Head ? out.n_head_users : out.n_tail_users)++;
  out.train_hash = dataset_hash(s.train);
  out.test_hash = dataset_hash(s.test);
  out.train_records = s.train.size();
  out.test_records = s.test.size();
  for (std::size_t r = 0; r < c.repeats; ++r) {
    RepeatResult rr;
    CtrModel m = train_model(c, s.train, c.seeds.init + r, c.seeds.noise + r, rr, nan_dump);
    rr.auc = evaluate(m, s.test, out.segments, c.mc_samples, c.seeds.noise + r);
    out.models.push_back(std::move(m));
    out.repeats.push_back(std::move(rr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

namespace detail {

inline void write_auc_cell(JsonWriter& w, const std::vector<std::optional<double>>& values) {
  std::vector<double> present;
  for (const auto& v : values) {
    if (v) present.push_back(*v);
  }
  w.begin_object();
  if (present.empty()) {
    w.key("mean").null();
    w.key("std").null();
  } else {
    auto ms = mean_std(present);
    w.key("mean").value(ms.mean);
    w.key("std").value(ms.std);
  }
  w.key("values").begin_array();
  for (const auto& v : values) {
    if (v) {
      w.value(*v);
    } else {
      w.null();
    }
  }
  w.end_array();
  w.end_object();
}

}  // namespace detail

/// metrics.json: fixed key order, 17 significant digits, no timing.
inline std::string metrics_json(const std::string& variant, const std::vector<SegmentAuc>& aucs,
                                const std::vector<RepeatResult>* repeats, const std::string& segment_source,
                                double head_quantile, std::size_t n_head_users, std::size_t n_tail_users,
                                const std::vector<std::pair<std::string, std::string>>& datasets) {
  JsonWriter w;
  w.begin_object();
  w.key("variant").value(variant);
  w.key("repeats").value(aucs.size());
  w.key("auc").begin_object();
  std::vector<std::optional<double>> all, head, tail;
  for (const auto& a : aucs) {
    all.push_back(a.all);
    head.push_back(a.head);
    tail.push_back(a.tail);
  }
  w.key("all");
  detail::write_auc_cell(w, all);
  w.key("head");
  detail::write_auc_cell(w, head);
  w.key("tail");
  detail::write_auc_cell(w, tail);
  w.end_object();
  w.key("segments").begin_object();
  w.key("source").value(segment_source);
  w.key("head_quantile").value(head_quantile);
  w.key("n_head_users").value(n_head_users);
  w.key("n_tail_users").value(n_tail_users);
  w.key("n_head_records").value(aucs.empty() ? std::size_t{0} : aucs.front().n_head_records);
  w.key("n_tail_records").value(aucs.empty() ? std::size_t{0} : aucs.front().n_tail_records);
  w.end_object();
  w.key("datasets").begin_object();
  for (const auto& [k, v] : datasets) w.key(k).value(v);
  w.end_object();
  if (repeats) {
    w.key("curves").begin_array();
    for (const auto& r : *repeats) {
      w.begin_array();
      for (std::size_t e = 0; e < r.curve.size(); ++e) {
        w.begin_object();
        w.key("epoch").value(e);
        w.key("loss").value(r.curve[e].loss);
        w.key("bce").value(r.curve[e].bce);
        w.key("kl").value(r.curve[e].kl);
        w.key("reg").value(r.curve[e].reg);
        w.end_object();
      }
      w.end_array();
    }
    w.end_array();
    std::size_t undersized = 0;
    for (const auto& r : *repeats) undersized += r.undersized_batches;
    w.key("warnings").begin_object();
    w.key("undersized_regularizer_batches").value(undersized);
    w.end_object();
  }
  w.end_object();
  return w.str();
}

inline std::string train_metrics_json(const RunConfig& c, const TrainOutcome& o) {
  std::vector<SegmentAuc> aucs;
  for (const auto& r : o.repeats) aucs.push_back(r.auc);
  return metrics_json(to_string(c.model.variant), aucs, &o.repeats,
                      c.segment_source == SegmentSource::Eval ? "eval" : "train", c.head_quantile, o.n_head_users,
                      o.n_tail_users,
                      {{"train_sha256", o.train_hash},
                       {"test_sha256", o.test_hash},
                       {"train_records", std::to_string(o.train_records)},
                       {"test_records", std::to_string(o.test_records)}});
}

/// Writes config.json, metrics.json and one checkpoint per repeat
/// (checkpoint.json for the first, checkpoint.<r>.json after that).
inline void write_run(const std::filesystem::path& dir, const RunConfig& c, const TrainOutcome& o) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "config.json", run_config_to_json(c));
  for (std::size_t r = 0; r < o.models.size(); ++r) {
    save_model(dir / (r == 0 ? std::string("checkpoint.json") : "checkpoint." + std::to_string(r) + ".json"),
               o.models[r]);
  }
  write_file_atomic(dir / "metrics.json", train_metrics_json(c, o));
}

struct VarianceRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::size_t n_users = 0;
  double mean_sigma = 0.0;
};

/// Log-spaced bin edges 1, 2, 4, ... covering [0, max_len].
inline std::vector<double> default_length_bins(std::size_t max_len) {
  std::vector<double> edges{0.0, 1.0};
  while (edges.back() <= static_cast<double>(max_len)) edges.push_back(edges.back() * 2.0);
  return edges;
}

/// Users binned by behavior length l_u (bins [lo, hi)); each user's sigma is
/// averaged over dimensions and their records, then over users in the bin.
/// Empty bins are omitted.
inline std::vector<VarianceRow> variance_report(const CtrModel& m, const Dataset& ds,
                                                const std::vector<double>& edges) {
  if (!m.stochastic()) throw ConfigError("variance report needs a gpsvi model");
  if (edges.size() < 2) throw ConfigError("need at least two bin edges");
  std::map<std::int64_t, std::pair<double, std::size_t>> per_user;  // sigma sum, count
  std::map<std::int64_t, std::size_t> lengths;
  BatchSequence batches(ds, 512, std::nullopt);
  const std::size_t d = m.config().dim;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Batch b = batches[i];
    Tensor v_hat = m.encode(b);
    auto p = posterior_params(v_hat, b.lengths, m.sigma_net());
    for (std::size_t k = 0; k < b.size(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += p.sigma[k * d + j];
      const auto& rec = ds.records[b.rows[k]];
      auto& acc = per_user[rec.user_id];
      acc.first += s / static_cast<double>(d);
      acc.second += 1;
      lengths[rec.user_id] = std::max(lengths[rec.user_id], rec.length());
    }
  }
  std::vector<VarianceRow> rows;
  for (std::size_t e = 0; e + 1 < edges.size(); ++e) {
    VarianceRow row{edges[e], edges[e + 1], 0, 0.0};
    for (const auto& [user, acc] : per_user) {
      const double l = static_cast<double>(lengths[user]);
      if (l >= row.bin_lo && l < row.bin_hi) {
        row.mean_sigma += acc.first / static_cast<double>(acc.second);
        ++row.n_users;
      }
    }
    if (row.n_users == 0) continue;
    row.mean_sigma /= static_cast<double>(row.n_users);
    rows.push_back(row);
  }
  return rows;
}

/// Spearman correlation between bin position and mean sigma.
inline double variance_trend(const std::vector<VarianceRow>& rows) {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    x.push_back(r.bin_lo);
    y.push_back(r.mean_sigma);
  }
  return spearman(x, y);
}

inline std::string variance_csv(const std::vector<VarianceRow>& rows) {
  std::string out = "bin_lo,bin_hi,n_users,mean_sigma\n";
  for (const auto& r : rows) {
    out += format_double(r.bin_lo) + "," + format_double(r.bin_hi) + "," + std::to_string(r.n_users) + "," +
           format_double(r.mean_sigma) + "\n";
  }
  return out;
}

struct Sensitivity {
  std::vector<double> tail;  // per-dimension mean |z(real) - z(masked)|
  std::vector<double> head;
};

/// Decoder latent on the mean path with the real history versus with every
/// behavior masked out, averaged per segment.
inline Sensitivity mask_sensitivity(const CtrModel& m, const Dataset& ds, const SegmentLabel& segments) {
  const std::size_t d = m.config().dim;
  Sensitivity out{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  std::size_t n_head = 0, n_tail = 0;
  BatchSequence batches(ds, 512, std::nullopt);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Batch b = batches[i];
    Tensor real = m.forward(b, Path::Mean).z;
    Batch masked = b;
    std::fill(masked.mask.begin(), masked.mask.end(), 0.0);
    Tensor blank = m.forward(masked, Path::Mean).z;
    for (std::size_t k = 0; k < b.size(); ++k) {
      auto it = segments.find(ds.records[b.rows[k]].user_id);
      if (it == segments.end()) continue;
      const bool head = it->second == Segment::Head;
      auto& acc = head ? out.head : out.tail;
      (head ? n_head : n_tail)++;
      for (std::size_t j = 0; j < d; ++j) acc[j] += std::abs(real[k * d + j] - blank[k * d + j]);
    }
  }
  for (auto& v : out.head) v = n_head ? v / static_cast<double>(n_head) : 0.0;
  for (auto& v : out.tail) v = n_tail ? v / static_cast<double>(n_tail) : 0.0;
  return out;
}

inline std::string sensitivity_csv(const Sensitivity& s) {
  std::string out = "dim,tail_mean_abs_diff,head_mean_abs_diff\n";
  for (std::size_t j = 0; j < s.tail.size(); ++j) {
    out += std::to_string(j) + "," + format_double(s.tail[j]) + "," + format_double(s.head[j]) + "\n";
  }
  return out;
}

}  // namespace gpsvi
