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

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gpsvi/serialize.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Independent stream for (seed, label); equal labels give equal streams
/// regardless of what else was drawn before.
inline std::mt19937_64 make_stream(std::uint64_t seed, const std::string& label) {
  const std::uint64_t h = fnv1a(label);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

enum class Init { Zeros, Xavier, Normal };

// Named, sorted parameter set. Initial values depend only on (seed, name,
// shape), so two models that declare the same parameter start identical.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor declare(const std::string& name, Shape shape, Init init, double scale = 0.1) {
    if (auto it = params_.find(name); it != params_.end()) {
      if (it->second.shape() != shape) {
        throw ShapeError("parameter '" + name + "' redeclared with shape " + to_string(shape));
      }
      return it->second;
    }
    auto n = numel(shape);
    std::vector<double> values(n, 0.0);
    auto rng = make_stream(seed_, name);
    if (init == Init::Xavier) {
      const double fan_in = shape.size() > 1 ? static_cast<double>(shape[0]) : 1.0;
      const double fan_out = static_cast<double>(shape.back());
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      for (auto& v : values) v = dist(rng);
    } else if (init == Init::Normal) {
      std::normal_distribution<double> dist(0.0, scale);
      for (auto& v : values) v = dist(rng);
    }
    Tensor t = Tensor::parameter(std::move(shape), std::move(values));
    params_.emplace(name, t);
    return t;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  const TensorMap& all() const { return params_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  // Overwrites values of every parameter present in `source` (shapes must
  // agree). Returns the number of tensors copied.
  std::size_t load(const TensorMap& source, bool require_all = true) {
    std::size_t copied = 0;
    for (auto& [name, t] : params_) {
      auto it = source.find(name);
      if (it == source.end()) {
        if (require_all) throw ValidationError("checkpoint lacks parameter '" + name + "'");
        continue;
      }
      if (it->second.shape() != t.shape()) {
        throw ShapeError("checkpoint shape " + to_string(it->second.shape()) + " for '" + name +
                         "', model expects " + to_string(t.shape()));
      }
      auto dst = t.mutable_values();
      std::copy(it->second.values().begin(), it->second.values().end(), dst.begin());
      ++copied;
    }
    return copied;
  }

 private:
  std::uint64_t seed_;
  TensorMap params_;
};

/// Affine map x W + b over the last axis of a 2-D input.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         Init init = Init::Xavier)
      : weight(store.declare(name + ".weight", {in, out}, init)),
        bias(store.declare(name + ".bias", {out}, Init::Zeros)) {}

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

enum class Activation { Relu, Tanh, Identity };

inline Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::Relu:
      return relu(x);
    case Activation::Tanh:
      return tanh(x);
    case Activation::Identity:
      break;
  }
  return x;
}

struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::Relu;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
      Activation act = Activation::Relu)
      : activation(act) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(store, name + ".l" + std::to_string(i), widths[i], widths[i + 1]);
    }
  }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = activate(x, activation);
    }
    return x;
  }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void step(ParamStore& store) {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (const auto& [name, param] : store.all()) {
      auto g = param.grad();
      if (g.empty()) continue;
      auto& [m, v] = moments_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      Tensor handle = param;
      auto values = handle.mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
        v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
        values[i] -= options_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
      }
    }
  }

  std::size_t steps() const { return steps_; }

 private:
  AdamOptions options_;
  std::size_t steps_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

}  // namespace gpsvi
