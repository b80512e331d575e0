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

// Full CTR models: an embedding layer, a behavior encoder, an optional
// stochastic latent layer with flow, and the decoder head.
//
// Parameter names are shared across variants ("emb.*", "attn.*",
// "self_attn.*", "decoder.*"), so models built from the same init seed start
// from identical weights for every parameter they have in common.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsvi/data.hpp"
#include "gpsvi/errors.hpp"
#include "gpsvi/flow.hpp"
#include "gpsvi/gpsvi.hpp"
#include "gpsvi/models.hpp"
#include "gpsvi/params.hpp"
#include "gpsvi/serialize.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

enum class Variant { Dnn, Attn, TransLite, Gpsvi };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Dnn:
      return "dnn";
    case Variant::Attn:
      return "attn";
    case Variant::TransLite:
      return "trans_lite";
    case Variant::Gpsvi:
      return "gpsvi";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "dnn") return Variant::Dnn;
  if (s == "attn") return Variant::Attn;
  if (s == "trans_lite") return Variant::TransLite;
  if (s == "gpsvi") return Variant::Gpsvi;
  throw ConfigError("unknown variant '" + s + "' (expected dnn, attn, trans_lite or gpsvi)");
}

inline std::string to_string(ProjectionMode m) {
  return m == ProjectionMode::Orthogonal ? "orthogonal" : "paper_cosine";
}

inline ProjectionMode parse_projection_mode(const std::string& s) {
  if (s == "orthogonal") return ProjectionMode::Orthogonal;
  if (s == "paper_cosine") return ProjectionMode::PaperCosine;
  throw ConfigError("unknown projection_mode '" + s + "' (expected orthogonal or paper_cosine)");
}

struct ModelConfig {
  Variant variant = Variant::Gpsvi;
  std::size_t dim = 16;
  std::vector<std::size_t> decoder_hidden{64, 32};
  std::size_t group_hidden = 32;
  bool use_flow = true;
  std::size_t flow_layers = 2;
  std::size_t flow_hidden = 0;  // 0: same as dim
  ProjectionMode projection = ProjectionMode::Orthogonal;
  double sigma_min = kDefaultSigmaMin;
  double sigma_max = kDefaultSigmaMax;
  double eps_g = kDefaultEpsG;
  bool scale_logits = false;
  bool kv_projection = false;
  bool query_context = false;
  Variant backbone = Variant::Attn;  // encoder inside gpsvi: attn or trans_lite

  void validate() const {
    if (dim == 0) throw ConfigError("dim must be positive");
    if (variant == Variant::Gpsvi && use_flow && flow_layers > 0 && dim < 2) {
      throw ConfigError("flow needs dim >= 2");
    }
    if (!(sigma_min > 0.0) || sigma_min > sigma_max) throw ConfigError("need 0 < sigma_min <= sigma_max");
    if (!(eps_g > 0.0)) throw ConfigError("eps_g must be positive");
    if (backbone != Variant::Attn && backbone != Variant::TransLite) {
      throw ConfigError("backbone must be attn or trans_lite");
    }
    if (group_hidden == 0) throw ConfigError("group_hidden must be positive");
  }
};

inline Vocab vocab_from_json(const nlohmann::json& j) {
  try {
    return Vocab{j.at("n_items").get<std::size_t>(), j.at("n_contexts").get<std::size_t>(),
                 j.at("group_sizes").get<std::vector<std::size_t>>()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("vocab: ") + e.what());
  }
}

inline void vocab_to_json(JsonWriter& w, const Vocab& v) {
  w.begin_object();
  w.key("n_items").value(v.n_items);
  w.key("n_contexts").value(v.n_contexts);
  w.key("group_sizes").begin_array();
  for (auto g : v.group_sizes) w.value(g);
  w.end_array();
  w.end_object();
}

/// Which latent the decoder sees.
enum class Path {
  Sample,  // z0 = mu + Proj_g(sigma * xi), then the flow
  Mean,    // z0 = mu, then the flow
  Bypass,  // encoder output straight into the decoder
};

struct ForwardResult {
  Tensor logits;  // [B]
  Tensor v_hat;   // encoder output [B, d]
  Tensor z;       // decoder latent [B, d]
  std::vector<bool> empty_history;
  // Latent-layer quantities; set for the gpsvi variant only.
  bool latent = false;
  PosteriorParams posterior;
  Tensor group;  // g [B, d]
  Tensor z0;     // pre-flow sample
  std::vector<double> usable;
};

class CtrModel {
 public:
  CtrModel(const ModelConfig& config, const Vocab& vocab, std::uint64_t init_seed)
      : config_(config), vocab_(vocab), store_(init_seed) {
    config_.validate();
    const std::size_t d = config_.dim;
    if (vocab.n_items == 0 || vocab.n_contexts == 0 || vocab.group_sizes.empty()) {
      throw ConfigError("model needs a non-empty vocabulary");
    }
    emb_ = EmbeddingTables(store_, d, vocab.n_items, vocab.n_contexts, vocab.group_sizes);
    const Variant encoder = encoder_kind();
    if (encoder != Variant::Dnn) {
      if (config_.query_context) query_ = Linear(store_, "attn.query", 2 * d, d);
      if (config_.kv_projection) {
        key_ = Linear(store_, "attn.key", d, d);
        value_ = Linear(store_, "attn.value", d, d);
      }
    }
    if (encoder == Variant::TransLite) self_attention_ = SelfAttentionBlock(store_, "self_attn", d);
    if (config_.variant == Variant::Gpsvi) {
      sigma_net_ = SigmaNet(store_, d, config_.sigma_min, config_.sigma_max);
      group_prior_ = GroupPriorNet(store_, d * vocab.group_sizes.size(), d, config_.group_hidden);
      if (config_.use_flow && config_.flow_layers > 0) {
        flow_ = FlowStack(store_, d, config_.flow_layers, config_.flow_hidden);
      }
    }
    decoder_ = Decoder(store_, d * (3 + vocab.group_sizes.size()), config_.decoder_hidden);
  }

  const ModelConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const SigmaNet& sigma_net() const { return sigma_net_; }
  const FlowStack& flow() const { return flow_; }
  const Decoder& decoder() const { return decoder_; }
  bool stochastic() const { return config_.variant == Variant::Gpsvi; }

  /// Encoder used for behaviors: the gpsvi variant wraps its backbone.
  Variant encoder_kind() const {
    return config_.variant == Variant::Gpsvi ? config_.backbone : config_.variant;
  }

  /// Behavior summary v_hat [B, d] (attention output or sum pool).
  Tensor encode(const Batch& b, std::vector<bool>* empty_history = nullptr) const {
    const std::size_t n = b.size(), len = b.max_len, d = config_.dim;
    Tensor mask = Tensor::constant({n, len}, b.mask);
    Tensor seq = emb_.sequence(b.behaviors, n, len);
    if (encoder_kind() == Variant::Dnn) {
      if (empty_history) {
        empty_history->assign(n, false);
        for (std::size_t i = 0; i < n; ++i) (*empty_history)[i] = b.lengths[i] == 0.0;
      }
      return sum_pool(seq, mask);
    }
    if (encoder_kind() == Variant::TransLite) seq = self_attention_(seq, mask);
    Tensor item = emb_.items(b.items);
    Tensor q = config_.query_context ? query_(concat({item, emb_.contexts(b.contexts)}, 1)) : item;
    Tensor keys = seq, values = seq;
    if (config_.kv_projection) {
      Tensor flat = reshape(seq, {n * len, d});
      keys = reshape(key_(flat), {n, len, d});
      values = reshape(value_(flat), {n, len, d});
    }
    auto out = target_attention(q, keys, values, mask, config_.scale_logits);
    if (empty_history) *empty_history = out.empty_history;
    return out.v_hat;
  }

  /// Side features for the decoder: concat(item, context, group fields).
  Tensor side_features(const Batch& b) const {
    return concat({emb_.items(b.items), emb_.contexts(b.contexts), emb_.groups(b.groups)}, 1);
  }

  Tensor group_vector(const Batch& b) const { return group_prior_(emb_.groups(b.groups), emb_.items(b.items)); }

  /// `xi` [B, d] is required on the Sample path of the gpsvi variant.
  ForwardResult forward(const Batch& b, Path path, const Tensor* xi = nullptr) const {
    ForwardResult r;
    r.v_hat = encode(b, &r.empty_history);
    r.z = r.v_hat;
    if (stochastic() && path != Path::Bypass) {
      r.latent = true;
      r.posterior = posterior_params(r.v_hat, b.lengths, sigma_net_);
      r.group = group_vector(b);
      if (path == Path::Sample) {
        if (xi == nullptr) throw ConfigError("sample path needs a noise draw");
        auto s = sample_latent(r.posterior, r.group, *xi, config_.projection, config_.eps_g);
        r.z0 = s.z;
        r.usable = std::move(s.usable);
      } else {
        r.z0 = r.posterior.mu;
        r.usable = usable_rows(r.group, config_.eps_g);
      }
      r.z = flow_.empty() ? r.z0 : flow_forward(r.z0, flow_).first;
    }
    r.logits = decoder_.logits(r.z, side_features(b));
    return r;
  }

  /// Click probabilities. `mc_samples` == 0 scores on the mean path;
  /// otherwise the sampled probabilities are averaged.
  std::vector<double> predict(const Batch& b, std::size_t mc_samples = 0, std::mt19937_64* rng = nullptr) const {
    if (!stochastic() || mc_samples == 0) return probabilities(forward(b, Path::Mean).logits);
    if (rng == nullptr) throw ConfigError("MC scoring needs an rng");
    std::vector<double> acc(b.size(), 0.0);
    for (std::size_t s = 0; s < mc_samples; ++s) {
      Tensor xi = standard_normal(*rng, {b.size(), config_.dim});
      auto p = probabilities(forward(b, Path::Sample, &xi).logits);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
    for (auto& v : acc) v /= static_cast<double>(mc_samples);
    return acc;
  }

 private:
  static std::vector<double> probabilities(const Tensor& logits) {
    Tensor p = sigmoid(logits);
    return {p.values().begin(), p.values().end()};
  }

  ModelConfig config_;
  Vocab vocab_;
  ParamStore store_;
  EmbeddingTables emb_;
  Linear query_;
  Linear key_;
  Linear value_;
  SelfAttentionBlock self_attention_;
  SigmaNet sigma_net_;
  GroupPriorNet group_prior_;
  FlowStack flow_;
  Decoder decoder_;
};

// ---------------------------------------------------------------------------
// Model config and checkpoint documents.

inline void model_config_to_json(JsonWriter& w, const ModelConfig& c) {
  w.begin_object();
  w.key("variant").value(to_string(c.variant));
  w.key("backbone").value(to_string(c.backbone));
  w.key("dim").value(c.dim);
  w.key("decoder_hidden").begin_array();
  for (auto h : c.decoder_hidden) w.value(h);
  w.end_array();
  w.key("group_hidden").value(c.group_hidden);
  w.key("use_flow").value(c.use_flow);
  w.key("flow_layers").value(c.flow_layers);
  w.key("flow_hidden").value(c.flow_hidden);
  w.key("projection_mode").value(to_string(c.projection));
  w.key("sigma_min").value(c.sigma_min);
  w.key("sigma_max").value(c.sigma_max);
  w.key("eps_g").value(c.eps_g);
  w.key("scale_logits").value(c.scale_logits);
  w.key("kv_projection").value(c.kv_projection);
  w.key("query_context").value(c.query_context);
  w.end_object();
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.backbone = parse_variant(j.at("backbone").get<std::string>());
    c.dim = j.at("dim").get<std::size_t>();
    c.decoder_hidden = j.at("decoder_hidden").get<std::vector<std::size_t>>();
    c.group_hidden = j.at("group_hidden").get<std::size_t>();
    c.use_flow = j.at("use_flow").get<bool>();
    c.flow_layers = j.at("flow_layers").get<std::size_t>();
    c.flow_hidden = j.at("flow_hidden").get<std::size_t>();
    c.projection = parse_projection_mode(j.at("projection_mode").get<std::string>());
    c.sigma_min = j.at("sigma_min").get<double>();
    c.sigma_max = j.at("sigma_max").get<double>();
    c.eps_g = j.at("eps_g").get<double>();
    c.scale_logits = j.at("scale_logits").get<bool>();
    c.kv_projection = j.at("kv_projection").get<bool>();
    c.query_context = j.at("query_context").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Self-contained checkpoint: model config, vocabulary and parameters.
inline std::string model_checkpoint_json(const CtrModel& m) {
  JsonWriter w;
  w.begin_object();
  w.key("format").value("gpsvi-checkpoint-v1");
  w.key("model");
  model_config_to_json(w, m.config());
  w.key("vocab");
  vocab_to_json(w, m.vocab());
  std::string params = checkpoint_to_json(m.params().all());
  params.pop_back();
  w.key("params").raw(params);
  w.end_object();
  return w.str();
}

inline void save_model(const std::filesystem::path& path, const CtrModel& m) {
  write_file_atomic(path, model_checkpoint_json(m));
}

inline CtrModel load_model(const std::filesystem::path& path) {
  auto doc = parse_json(read_file(path), path.string());
  if (!doc.is_object() || doc.value("format", "") != "gpsvi-checkpoint-v1") {
    throw ValidationError(path.string() + ": not a model checkpoint");
  }
  if (!doc.contains("model") || !doc.contains("vocab") || !doc.contains("params")) {
    throw ValidationError(path.string() + ": checkpoint lacks model, vocab or params");
  }
  CtrModel m(model_config_from_json(doc["model"]), vocab_from_json(doc["vocab"]), 0);
  m.params().load(checkpoint_from_json(doc["params"]), true);
  return m;
}

}  // namespace gpsvi
