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

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gpsvi/params.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

/// Per-field embedding tables sharing one width. Behaviors reuse the item
/// table.
class EmbeddingTables {
 public:
  EmbeddingTables() = default;
  EmbeddingTables(ParamStore& store, std::size_t dim, std::size_t n_items, std::size_t n_contexts,
                  const std::vector<std::size_t>& group_sizes)
      : dim_(dim),
        item_(store.declare("emb.item", {n_items, dim}, Init::Normal, 0.1)),
        context_(store.declare("emb.context", {n_contexts, dim}, Init::Normal, 0.1)) {
    for (std::size_t f = 0; f < group_sizes.size(); ++f) {
      groups_.push_back(store.declare("emb.group" + std::to_string(f), {group_sizes[f], dim}, Init::Normal, 0.1));
    }
  }

  std::size_t dim() const { return dim_; }
  std::size_t group_fields() const { return groups_.size(); }

  Tensor items(const std::vector<std::size_t>& ids) const { return gather_rows(item_, ids); }
  Tensor contexts(const std::vector<std::size_t>& ids) const { return gather_rows(context_, ids); }
  Tensor group_field(std::size_t field, const std::vector<std::size_t>& ids) const {
    return gather_rows(groups_.at(field), ids);
  }
  // [B, fields * dim]
  Tensor groups(const std::vector<std::vector<std::size_t>>& ids_per_field) const {
    std::vector<Tensor> parts;
    for (std::size_t f = 0; f < groups_.size(); ++f) parts.push_back(group_field(f, ids_per_field.at(f)));
    return parts.size() == 1 ? parts[0] : concat(parts, 1);
  }
  // [B, L, dim] for row-major ids of a [B, L] grid.
  Tensor sequence(const std::vector<std::size_t>& ids, std::size_t batch, std::size_t len) const {
    return reshape(gather_rows(item_, ids), {batch, len, dim_});
  }

 private:
  std::size_t dim_ = 0;
  Tensor item_;
  Tensor context_;
  std::vector<Tensor> groups_;
};

struct AttentionOutput {
  Tensor v_hat;                     // [B, d]
  Tensor alpha;                     // [B, L]
  std::vector<bool> empty_history;  // fully masked rows
};

/// alpha_l = softmax over unmasked l of <q, k_l>; v_hat = sum_l alpha_l v_l.
/// q: [B, d], keys/values: [B, L, d], mask: [B, L] of 0/1. Fully masked rows
/// produce v_hat = 0 and are flagged in empty_history.
inline AttentionOutput target_attention(const Tensor& q, const Tensor& keys, const Tensor& values,
                                        const Tensor& mask, bool scale_logits = false) {
  if (q.rank() != 2 || keys.rank() != 3 || values.shape() != keys.shape() || keys.dim(0) != q.dim(0) ||
      keys.dim(2) != q.dim(1) || mask.shape() != Shape{keys.dim(0), keys.dim(1)}) {
    throw ShapeError("target_attention q " + to_string(q.shape()) + " K " + to_string(keys.shape()) + " V " +
                     to_string(values.shape()) + " mask " + to_string(mask.shape()));
  }
  const std::size_t batch = keys.dim(0), len = keys.dim(1), d = keys.dim(2);
  Tensor logits = sum(mul(keys, reshape(q, {batch, 1, d})), 2);
  if (scale_logits) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor alpha = masked_softmax(logits, mask, 1);
  Tensor v_hat = sum(mul(values, reshape(alpha, {batch, len, 1})), 1);
  AttentionOutput out{v_hat, alpha, std::vector<bool>(batch, true)};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t l = 0; l < len; ++l) {
      if (mask[b * len + l] != 0.0) {
        out.empty_history[b] = false;
        break;
      }
    }
  }
  return out;
}

/// Single-sequence form: q [d], K and V [L, d], mask of length L (L may be
/// 0, in which case alpha is a single masked-out zero).
inline AttentionOutput target_attention(const Tensor& q, const Tensor& keys, const Tensor& values,
                                        const std::vector<double>& mask, bool scale_logits = false) {
  const std::size_t d = q.size();
  if (mask.empty()) {
    auto pad = Tensor::zeros({1, 1, d});
    auto out = target_attention(reshape(q, {1, d}), pad, pad, Tensor::zeros({1, 1}), scale_logits);
    return {reshape(out.v_hat, {d}), reshape(out.alpha, {1}), out.empty_history};
  }
  const std::size_t len = mask.size();
  auto out = target_attention(reshape(q, {1, d}), reshape(keys, {1, len, d}), reshape(values, {1, len, d}),
                              Tensor::constant({1, len}, mask), scale_logits);
  return {reshape(out.v_hat, {d}), reshape(out.alpha, {len}), out.empty_history};
}

/// Masked sum over the sequence axis: values [B, L, d], mask [B, L] -> [B, d].
inline Tensor sum_pool(const Tensor& values, const Tensor& mask) {
  if (values.rank() != 3 || mask.shape() != Shape{values.dim(0), values.dim(1)}) {
    throw ShapeError("sum_pool V " + to_string(values.shape()) + " mask " + to_string(mask.shape()));
  }
  return sum(mul(values, reshape(mask, {values.dim(0), values.dim(1), 1})), 1);
}

/// One residual self-attention block over a behavior sequence; padded keys are
/// excluded from every row's normalization.
class SelfAttentionBlock {
 public:
  SelfAttentionBlock() = default;
  SelfAttentionBlock(ParamStore& store, const std::string& name, std::size_t dim)
      : query_(store, name + ".query", dim, dim),
        key_(store, name + ".key", dim, dim),
        value_(store, name + ".value", dim, dim) {}

  Tensor operator()(const Tensor& x, const Tensor& mask) const {
    const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
    auto project = [&](const Linear& lin) { return reshape(lin(reshape(x, {batch * len, d})), {batch, len, d}); };
    Tensor scores = scale(bmm(project(query_), project(key_), true), 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<double> key_mask(batch * len * len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) key_mask[(b * len + i) * len + j] = mask[b * len + j];
      }
    }
    Tensor weights = masked_softmax(scores, Tensor::constant({batch, len, len}, std::move(key_mask)), 2);
    return add(x, bmm(weights, project(value_)));
  }

 private:
  Linear query_;
  Linear key_;
  Linear value_;
};

/// CTR head: MLP over concat(z, item, context, group) -> logit.
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore& store, std::size_t input_width, const std::vector<std::size_t>& hidden) {
    std::vector<std::size_t> widths{input_width};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    mlp_ = Mlp(store, "decoder", widths, Activation::Relu);
  }

  std::size_t input_width() const { return mlp_.layers.front().in(); }

  // [B] logits.
  Tensor logits(const Tensor& z, const Tensor& side) const {
    Tensor x = concat({z, side}, 1);
    Tensor out = mlp_(x);
    return reshape(out, {out.dim(0)});
  }

  const Linear& final_layer() const { return mlp_.layers.back(); }

 private:
  Mlp mlp_;
};

/// y_hat = sigmoid(decoder logit), per row.
inline Tensor predict_ctr(const Decoder& dec, const Tensor& z, const Tensor& side) {
  return sigmoid(dec.logits(z, side));
}

}  // namespace gpsvi
