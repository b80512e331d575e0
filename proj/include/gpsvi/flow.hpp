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

// Volume-preserving additive coupling flows.
//
// Each layer keeps the coordinates in A and shifts those in B:
//   forward  (z_A, z_B)   -> (z_A, z_B + h(z_A))
//   inverse  (z'_A, z'_B) -> (z'_A, z'_B - h(z'_A))
// The Jacobian is unit triangular, so log|det| is exactly zero.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gpsvi/errors.hpp"
#include "gpsvi/params.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

class CouplingLayer {
 public:
  CouplingLayer() = default;

  /// Even indices form A when `even_first`, odd indices otherwise. The
  /// coupling net is |A| -> hidden -> |B| with the given activation.
  CouplingLayer(ParamStore& store, const std::string& name, std::size_t dim, bool even_first,
                std::size_t hidden = 0, Activation activation = Activation::Tanh)
      : activation_(activation) {
    if (dim < 2) throw ConfigError("coupling layer needs dim >= 2, got " + std::to_string(dim));
    for (std::size_t i = 0; i < dim; ++i) ((i % 2 == 0) == even_first ? keep_ : shift_).push_back(i);
    if (hidden == 0) hidden = dim;
    hidden_ = Linear(store, name + ".hidden", keep_.size(), hidden, Init::Xavier);
    out_ = Linear(store, name + ".out", hidden, shift_.size(), Init::Normal);
    build_selectors(dim);
  }

  const std::vector<std::size_t>& kept() const { return keep_; }
  const std::vector<std::size_t>& shifted() const { return shift_; }

  /// h(z_A) for z [B, d], returned as [B, |B|].
  Tensor coupling(const Tensor& z) const {
    return out_(activate(hidden_(matmul(z, select_keep_)), activation_));
  }

  Tensor forward(const Tensor& z) const { return add(z, matmul(coupling(z), embed_shift_)); }
  Tensor inverse(const Tensor& z) const { return sub(z, matmul(coupling(z), embed_shift_)); }

 private:
  void build_selectors(std::size_t dim) {
    std::vector<double> sk(dim * keep_.size(), 0.0);
    for (std::size_t c = 0; c < keep_.size(); ++c) sk[keep_[c] * keep_.size() + c] = 1.0;
    select_keep_ = Tensor::constant({dim, keep_.size()}, std::move(sk));
    std::vector<double> es(shift_.size() * dim, 0.0);
    for (std::size_t r = 0; r < shift_.size(); ++r) es[r * dim + shift_[r]] = 1.0;
    embed_shift_ = Tensor::constant({shift_.size(), dim}, std::move(es));
  }

  std::vector<std::size_t> keep_;
  std::vector<std::size_t> shift_;
  Activation activation_ = Activation::Tanh;
  Linear hidden_;
  Linear out_;
  Tensor select_keep_;
  Tensor embed_shift_;
};

/// K coupling layers with alternating partitions.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(ParamStore& store, std::size_t dim, std::size_t layers, std::size_t hidden = 0,
            Activation activation = Activation::Tanh, const std::string& name = "flow") {
    if (dim < 2) throw ConfigError("flow needs dim >= 2, got " + std::to_string(dim));
    for (std::size_t k = 0; k < layers; ++k) {
      layers_.emplace_back(store, name + "." + std::to_string(k), dim, k % 2 == 0, hidden, activation);
    }
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  const CouplingLayer& layer(std::size_t k) const { return layers_.at(k); }

 private:
  std::vector<CouplingLayer> layers_;
  friend std::pair<Tensor, double> flow_forward(const Tensor& z0, const FlowStack& fs);
  friend Tensor flow_inverse(const Tensor& zk, const FlowStack& fs);
};

/// z_K = f_K(...f_1(z_0)) row-wise on [B, d] (or a single [d] vector). The
/// log-determinant is identically 0.
inline std::pair<Tensor, double> flow_forward(const Tensor& z0, const FlowStack& fs) {
  Tensor z = z0.rank() == 1 ? reshape(z0, {1, z0.size()}) : z0;
  for (const auto& layer : fs.layers_) z = layer.forward(z);
  if (z0.rank() == 1) z = reshape(z, {z0.size()});
  return {z, 0.0};
}

inline Tensor flow_inverse(const Tensor& zk, const FlowStack& fs) {
  Tensor z = zk.rank() == 1 ? reshape(zk, {1, zk.size()}) : zk;
  for (auto it = fs.layers_.rbegin(); it != fs.layers_.rend(); ++it) z = it->inverse(z);
  if (zk.rank() == 1) z = reshape(z, {zk.size()});
  return z;
}

struct VarianceReport {
  double generalized_variance_in = 0.0;   // det of sample covariance of z_0
  double generalized_variance_out = 0.0;  // same for z_K
  double log_ratio = 0.0;                 // log(out / in)
  std::vector<double> variance_in;        // per-coordinate
  std::vector<double> variance_out;
  std::size_t samples = 0;
};

namespace detail {

inline std::vector<double> sample_covariance(const std::vector<double>& x, std::size_t n, std::size_t d) {
  std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += x[s * d + i];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) {
      const double a = x[s * d + i] - mean[i];
      for (std::size_t j = 0; j <= i; ++j) cov[i * d + j] += a * (x[s * d + j] - mean[j]);
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      cov[i * d + j] /= static_cast<double>(n - 1);
      cov[j * d + i] = cov[i * d + j];
    }
  }
  return cov;
}

// Log-determinant of a symmetric positive definite matrix via Cholesky.
inline double log_det_spd(std::vector<double> a, std::size_t d) {
  double log_det = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double diag = a[j * d + j];
    for (std::size_t k = 0; k < j; ++k) diag -= a[j * d + k] * a[j * d + k];
    if (!(diag > 0.0)) throw DomainError("covariance is not positive definite");
    const double l = std::sqrt(diag);
    a[j * d + j] = l;
    log_det += 2.0 * std::log(l);
    for (std::size_t i = j + 1; i < d; ++i) {
      double v = a[i * d + j];
      for (std::size_t k = 0; k < j; ++k) v -= a[i * d + k] * a[j * d + k];
      a[i * d + j] = v / l;
    }
  }
  return log_det;
}

}  // namespace detail

/// Pushes n draws of N(mean, diag(stddev^2)) through the stack and compares
/// the generalized variance (det of sample covariance) before and after.
inline VarianceReport variance_preservation_check(const FlowStack& fs, const std::vector<double>& mean,
                                                  const std::vector<double>& stddev, std::size_t n,
                                                  std::uint64_t seed) {
  if (n < 100000) throw ConfigError("variance_preservation_check needs at least 1e5 samples");
  const std::size_t d = mean.size();
  if (stddev.size() != d) throw ShapeError("mean/stddev length mismatch");
  auto rng = make_stream(seed, "variance-check");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z0(n * d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) z0[s * d + i] = mean[i] + stddev[i] * normal(rng);
  }
  std::vector<double> zk(n * d);
  const std::size_t chunk = 4096;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t rows = std::min(chunk, n - start);
    Tensor block = Tensor::constant({rows, d}, std::vector<double>(z0.begin() + static_cast<long>(start * d),
                                                                   z0.begin() + static_cast<long>((start + rows) * d)));
    auto [out, logdet] = flow_forward(block, fs);
    std::copy(out.values().begin(), out.values().end(), zk.begin() + static_cast<long>(start * d));
  }
  auto cov_in = detail::sample_covariance(z0, n, d);
  auto cov_out = detail::sample_covariance(zk, n, d);
  VarianceReport r;
  r.samples = n;
  const double ld_in = detail::log_det_spd(cov_in, d);
  const double ld_out = detail::log_det_spd(cov_out, d);
  r.generalized_variance_in = std::exp(ld_in);
  r.generalized_variance_out = std::exp(ld_out);
  r.log_ratio = ld_out - ld_in;
  for (std::size_t i = 0; i < d; ++i) {
    r.variance_in.push_back(cov_in[i * d + i]);
    r.variance_out.push_back(cov_out[i * d + i]);
  }
  return r;
}

}  // namespace gpsvi
