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

// Independent reference computations for tests, selftest and acceptance.
// None of these reuse the code paths they check: they work on plain vectors
// and never touch the tape.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "gpsvi/errors.hpp"

namespace gpsvi::testing {

/// O(n^2) pair count: (wins + ties / 2) / (positives * negatives).
inline double auc_brute_force(std::span<const double> scores, std::span<const int> labels) {
  std::uint64_t twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1) {
      ++pos;
    } else {
      ++neg;
    }
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auc needs both classes");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j]) twice += 2;
      if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / static_cast<double>(2 * pos * neg);
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// KL(q || N(0, 1)) along the unit direction of g, where q is the law of
/// <z, g/|g|> for z = mu + (g g^T / |g|^2)(sigma * xi), xi ~ N(0, I). Draws
/// full d-dimensional samples, fits nothing: the in-span variance used for
/// the density is computed from sigma and g directly.
inline MonteCarloEstimate kl_monte_carlo(const std::vector<double>& mu, const std::vector<double>& sigma,
                                         const std::vector<double>& g, std::size_t draws, std::uint64_t seed) {
  const std::size_t d = mu.size();
  double norm = 0.0;
  for (double x : g) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<double> u(d);
  for (std::size_t i = 0; i < d; ++i) u[i] = g[i] / norm;
  // Density parameters of the in-span coordinate, by definition of a linear
  // functional of a Gaussian.
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    mean += u[i] * mu[i];
    var += u[i] * u[i] * sigma[i] * sigma[i];
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(d);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t n = 0; n < draws; ++n) {
    // y = sigma * xi, z = mu + u <u, y>.
    double along = 0.0;
    for (std::size_t i = 0; i < d; ++i) along += u[i] * sigma[i] * normal(rng);
    double t = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      z[i] = mu[i] + u[i] * along;
      t += u[i] * z[i];
    }
    const double log_q = -0.5 * std::log(2 * M_PI * var) - (t - mean) * (t - mean) / (2 * var);
    const double log_p = -0.5 * std::log(2 * M_PI) - t * t / 2;
    const double r = log_q - log_p;
    sum += r;
    sum_sq += r * r;
  }
  const double n = static_cast<double>(draws);
  MonteCarloEstimate est;
  est.mean = sum / n;
  est.standard_error = std::sqrt(std::max(0.0, sum_sq / n - est.mean * est.mean) / (n - 1));
  return est;
}

/// Determinant of the central-difference Jacobian of f at x.
inline double jacobian_determinant(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                                   const std::vector<double>& x, double eps = 1e-5) {
  const std::size_t d = x.size();
  std::vector<double> jac(d * d);
  for (std::size_t j = 0; j < d; ++j) {
    auto plus = x, minus = x;
    plus[j] += eps;
    minus[j] -= eps;
    auto fp = f(plus), fm = f(minus);
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (fp[i] - fm[i]) / (2 * eps);
  }
  // Gaussian elimination with partial pivoting.
  double det = 1.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < d; ++r) {
      if (std::abs(jac[r * d + c]) > std::abs(jac[pivot * d + c])) pivot = r;
    }
    if (jac[pivot * d + c] == 0.0) return 0.0;
    if (pivot != c) {
      for (std::size_t k = 0; k < d; ++k) std::swap(jac[c * d + k], jac[pivot * d + k]);
      det = -det;
    }
    det *= jac[c * d + c];
    for (std::size_t r = c + 1; r < d; ++r) {
      const double factor = jac[r * d + c] / jac[c * d + c];
      for (std::size_t k = c; k < d; ++k) jac[r * d + k] -= factor * jac[c * d + k];
    }
  }
  return det;
}

}  // namespace gpsvi::testing
