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
#include <functional>
#include <limits>
#include <vector>

#include "gpsvi/tensor.hpp"

namespace gpsvi {

/// Compares tape gradients against central differences.
///
/// `loss` must rebuild its graph from the current parameter values on every
/// call and be deterministic (any noise it uses is an input, not drawn). The
/// parameters are perturbed in place and restored. Returns
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|); a
/// non-finite numeric estimate yields infinity.
inline double grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                         double eps = 1e-6) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor value = loss();
    tape.backward(value);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(p.size(), 0.0);
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.back().begin());
  }
  auto evaluate = [&loss] { return loss().item(); };

  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = evaluate();
      values[i] = saved - eps;
      const double minus = evaluate();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      if (!std::isfinite(numeric)) return std::numeric_limits<double>::infinity();
      const double a = analytic[t][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Single-input form: `f` maps x to a scalar tensor.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-6) {
  Tensor leaf = Tensor::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace gpsvi
