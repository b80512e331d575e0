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

// Group-prior variational layer.
//
// The posterior over the latent interest z is Gaussian with mean equal to the
// attention output and per-dimension scale sigma = exp(s). Sampling only moves
// z inside the span of the group interest vector g:
//
//   z = mu + Proj_g(diag(sigma) xi),   xi ~ N(0, I),
//
// and the KL term compares the resulting one-dimensional in-span marginal with
// a standard normal on that line. All functions operate row-wise on [B, d]
// tensors.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gpsvi/errors.hpp"
#include "gpsvi/params.hpp"
#include "gpsvi/tensor.hpp"

namespace gpsvi {

enum class ProjectionMode {
  Orthogonal,   // P y with P = g g^T / |g|^2
  PaperCosine,  // (<y, g> / (|y| |g|)) y
};

inline constexpr double kDefaultEpsG = 1e-6;
inline constexpr double kDefaultSigmaMin = 1e-8;
inline constexpr double kDefaultSigmaMax = 1e3;

struct PosteriorParams {
  Tensor mu;     // [B, d], the attention output itself
  Tensor s;      // [B, d], clamped log-scale
  Tensor sigma;  // exp(s)
};

/// sigma-network: one affine layer over [v_hat, log(1 + l_u)] with exponent
/// activation, clamped to [log sigma_min, log sigma_max] before exp.
class SigmaNet {
 public:
  SigmaNet() = default;
  SigmaNet(ParamStore& store, std::size_t dim, double sigma_min = kDefaultSigmaMin,
           double sigma_max = kDefaultSigmaMax)
      : layer_(store, "posterior.sigma", dim + 1, dim, Init::Normal),
        log_min_(std::log(sigma_min)),
        log_max_(std::log(sigma_max)) {
    if (!(sigma_min > 0.0) || sigma_min > sigma_max) throw ConfigError("need 0 < sigma_min <= sigma_max");
  }

  Tensor pre_activation(const Tensor& v_hat, const std::vector<double>& lengths) const {
    std::vector<double> feature(lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) feature[i] = std::log1p(lengths[i]);
    Tensor stats = Tensor::constant({lengths.size(), 1}, std::move(feature));
    return clamp(layer_(concat({v_hat, stats}, 1)), log_min_, log_max_);
  }

  const Linear& layer() const { return layer_; }

 private:
  Linear layer_;
  double log_min_ = std::log(kDefaultSigmaMin);
  double log_max_ = std::log(kDefaultSigmaMax);
};

inline PosteriorParams posterior_params(const Tensor& v_hat, const std::vector<double>& lengths,
                                        const SigmaNet& net) {
  if (v_hat.rank() != 2 || v_hat.dim(0) != lengths.size()) {
    throw ShapeError("posterior_params v_hat " + to_string(v_hat.shape()) + " with " +
                     std::to_string(lengths.size()) + " lengths");
  }
  Tensor s = net.pre_activation(v_hat, lengths);
  return {v_hat, s, exp(s)};
}

/// g = MLP(concat(group embeddings, item embedding)).
class GroupPriorNet {
 public:
  GroupPriorNet() = default;
  GroupPriorNet(ParamStore& store, std::size_t group_width, std::size_t dim, std::size_t hidden)
      : mlp_(store, "group_prior", {group_width + dim, hidden, dim}, Activation::Relu) {}

  Tensor operator()(const Tensor& group_emb, const Tensor& item_emb) const {
    return mlp_(concat({group_emb, item_emb}, 1));
  }

 private:
  Mlp mlp_;
};

/// Rows whose group vector is too short to define a direction.
inline std::vector<double> usable_rows(const Tensor& g, double eps_g) {
  const std::size_t rows = g.dim(0), d = g.dim(1);
  std::vector<double> ok(rows, 1.0);
  for (std::size_t b = 0; b < rows; ++b) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) n2 += g[b * d + j] * g[b * d + j];
    if (!(std::sqrt(n2) >= eps_g)) ok[b] = 0.0;
  }
  return ok;
}

namespace detail {

// Unit direction g / |g| for usable rows, zero elsewhere.
inline Tensor unit_direction(const Tensor& g, const Tensor& ok) {
  Tensor n2 = sum(mul(g, g), 1, true);
  Tensor one = Tensor::scalar(1.0);
  Tensor safe = add(mul(n2, ok), sub(one, ok));
  return mul(g, div(ok, sqrt(safe)));
}

inline Tensor project_rows(const Tensor& g, const Tensor& y, const Tensor& ok, ProjectionMode mode) {
  if (mode == ProjectionMode::Orthogonal) {
    Tensor u = unit_direction(g, ok);
    return mul(u, sum(mul(u, y), 1, true));
  }
  // Cosine form; y = 0 rows map to 0.
  const std::size_t rows = y.dim(0), d = y.dim(1);
  std::vector<double> y_ok(rows, 0.0);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t j = 0; j < d; ++j) {
      if (y[b * d + j] != 0.0) {
        y_ok[b] = 1.0;
        break;
      }
    }
  }
  Tensor yk = Tensor::constant({rows, 1}, std::move(y_ok));
  Tensor one = Tensor::scalar(1.0);
  Tensor ny2 = sum(mul(y, y), 1, true);
  Tensor inv_ny = div(yk, sqrt(add(mul(ny2, yk), sub(one, yk))));
  Tensor u = unit_direction(g, ok);
  Tensor cosine = mul(sum(mul(u, y), 1, true), inv_ny);
  return mul(y, cosine);
}

inline Tensor as_rows(const Tensor& v) { return v.rank() == 1 ? reshape(v, {1, v.size()}) : v; }

}  // namespace detail

/// Row-wise projection of y onto the direction of g. Throws
/// DegenerateGroupError when any |g| < eps_g.
inline Tensor project_onto(const Tensor& g, const Tensor& y, ProjectionMode mode = ProjectionMode::Orthogonal,
                           double eps_g = kDefaultEpsG) {
  Tensor g2 = detail::as_rows(g);
  Tensor y2 = detail::as_rows(y);
  if (g2.shape() != y2.shape()) {
    throw ShapeError("project_onto g " + to_string(g.shape()) + " y " + to_string(y.shape()));
  }
  auto ok = usable_rows(g2, eps_g);
  for (double v : ok) {
    if (v == 0.0) throw DegenerateGroupError("group vector norm below eps_g");
  }
  Tensor out = detail::project_rows(g2, y2, Tensor::constant({g2.dim(0), 1}, ok), mode);
  return g.rank() == 1 ? reshape(out, {g.size()}) : out;
}

/// Explicit projector g g^T / |g|^2 for one vector (used by property tests).
inline std::vector<double> projector_matrix(const std::vector<double>& g, double eps_g = kDefaultEpsG) {
  double n2 = 0.0;
  for (double v : g) n2 += v * v;
  if (!(std::sqrt(n2) >= eps_g)) throw DegenerateGroupError("group vector norm below eps_g");
  const std::size_t d = g.size();
  std::vector<double> p(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) p[i * d + j] = g[i] * g[j] / n2;
  }
  return p;
}

struct LatentSample {
  Tensor z;                    // [B, d]
  Tensor xi;                   // noise used
  std::vector<double> usable;  // 0 where |g| < eps_g and z fell back to mu
};

/// z = mu + Proj_g(sigma * xi). Rows with a degenerate group vector use
/// z = mu.
inline LatentSample sample_latent(const PosteriorParams& p, const Tensor& g, const Tensor& xi,
                                  ProjectionMode mode = ProjectionMode::Orthogonal, double eps_g = kDefaultEpsG) {
  if (g.shape() != p.mu.shape() || xi.shape() != p.mu.shape()) {
    throw ShapeError("sample_latent mu " + to_string(p.mu.shape()) + " g " + to_string(g.shape()) + " xi " +
                     to_string(xi.shape()));
  }
  auto ok = usable_rows(g, eps_g);
  Tensor okt = Tensor::constant({g.dim(0), 1}, ok);
  Tensor z = add(p.mu, detail::project_rows(g, mul(p.sigma, xi), okt, mode));
  return {z, xi, std::move(ok)};
}

inline Tensor standard_normal(std::mt19937_64& rng, Shape shape) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

/// Closed-form KL between the in-span posterior marginal N(m, v) and N(0, 1):
///   m = <mu, u_g>,  v = u_g^T diag(sigma^2) u_g,  KL = (v + m^2 - 1 - log v) / 2.
/// Returns [B]; rows with a degenerate g contribute 0.
inline Tensor kl_projected(const PosteriorParams& p, const Tensor& g, double eps_g = kDefaultEpsG) {
  if (g.shape() != p.mu.shape()) {
    throw ShapeError("kl_projected mu " + to_string(p.mu.shape()) + " g " + to_string(g.shape()));
  }
  auto ok = usable_rows(g, eps_g);
  Tensor okt = Tensor::constant({g.dim(0), 1}, ok);
  Tensor u = detail::unit_direction(g, okt);
  Tensor m = sum(mul(u, p.mu), 1, true);
  Tensor u2 = mul(u, u);
  Tensor v = sum(mul(u2, mul(p.sigma, p.sigma)), 1, true);
  Tensor one = Tensor::scalar(1.0);
  Tensor v_safe = add(mul(v, okt), sub(one, okt));
  Tensor kl = scale(sub(add(v_safe, mul(m, m)), add_scalar(log(v_safe), 1.0)), 0.5);
  kl = mul(kl, okt);
  return reshape(kl, {g.dim(0)});
}

/// In-span mean and variance used by kl_projected, for one row.
struct InSpanMoments {
  double mean;
  double variance;
};

inline InSpanMoments in_span_moments(const std::vector<double>& mu, const std::vector<double>& sigma,
                                     const std::vector<double>& g) {
  double n2 = 0.0;
  for (double v : g) n2 += v * v;
  const double n = std::sqrt(n2);
  double m = 0.0, var = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double u = g[i] / n;
    m += u * mu[i];
    var += u * u * sigma[i] * sigma[i];
  }
  return {m, var};
}

struct PairSampling {
  std::size_t all_pairs_up_to = 64;  // batch sizes up to this use every pair
  std::size_t pairs_per_example = 64;
};

/// Hinge penalty sum over in-batch pairs of sum_m max(0, sigma_long^m -
/// sigma_short^m), where "long" has strictly more behaviors. Equal-length
/// pairs contribute nothing. Batches smaller than two return 0 and bump
/// `*undersized` when given.
inline Tensor monotonic_regularizer(const Tensor& sigma, const std::vector<double>& lengths,
                                    std::mt19937_64* rng = nullptr, std::size_t* undersized = nullptr,
                                    PairSampling sampling = {}) {
  if (sigma.rank() != 2 || sigma.dim(0) != lengths.size()) {
    throw ShapeError("monotonic_regularizer sigma " + to_string(sigma.shape()) + " with " +
                     std::to_string(lengths.size()) + " lengths");
  }
  const std::size_t n = lengths.size();
  if (n < 2) {
    if (undersized) ++*undersized;
    return Tensor::scalar(0.0);
  }
  std::vector<std::size_t> longer, shorter;
  auto consider = [&](std::size_t i, std::size_t j) {
    if (lengths[i] > lengths[j]) {
      longer.push_back(i);
      shorter.push_back(j);
    } else if (lengths[j] > lengths[i]) {
      longer.push_back(j);
      shorter.push_back(i);
    }
  };
  if (n <= sampling.all_pairs_up_to) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) consider(i, j);
    }
  } else {
    if (rng == nullptr) throw ConfigError("monotonic_regularizer needs an rng for large batches");
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t t = 0; t < sampling.pairs_per_example * n; ++t) {
      std::size_t i = pick(*rng), j = pick(*rng);
      if (i != j) consider(i, j);
    }
  }
  if (longer.empty()) return Tensor::scalar(0.0);
  return sum_all(relu(sub(gather_rows(sigma, longer), gather_rows(sigma, shorter))));
}

}  // namespace gpsvi
