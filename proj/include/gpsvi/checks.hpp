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

// Self-contained property checks shared by `gpsvi selftest` and the
// acceptance runner. Each returns a verdict plus a one-line measurement.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gpsvi/flow.hpp"
#include "gpsvi/grad_check.hpp"
#include "gpsvi/testing/oracles.hpp"
#include "gpsvi/trainer.hpp"

namespace gpsvi::checks {

struct CheckResult {
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

inline std::vector<double> normal_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline void randomize(const ParamStore& store, std::mt19937_64& rng, double scale) {
  for (const auto& [_, t] : store.all()) {
    Tensor handle = t;
    auto values = handle.mutable_values();
    auto fresh = normal_values(rng, values.size(), scale);
    std::copy(fresh.begin(), fresh.end(), values.begin());
  }
}

inline std::vector<std::size_t> all_rows(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace detail

/// Full training loss (BCE + KL + regularizer, flow on) against central
/// differences for every parameter, d = 8, sequences of length 6, two flow
/// layers, fresh random weights per draw.
inline CheckResult check_gradients(std::size_t draws = 20, double tolerance = 1e-4) {
  SynthConfig sc;
  sc.n_users = 12;
  sc.n_items = 15;
  sc.n_contexts = 2;
  sc.group_sizes = {3, 2};
  sc.min_len = 1;
  sc.max_len = 6;
  sc.impressions_per_user = 1;
  Dataset ds = generate_synthetic(sc, 5);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size() && rows.size() < 5; ++i) rows.push_back(i);
  Batch b = make_batch(ds, rows);

  ModelConfig mc;
  mc.variant = Variant::Gpsvi;
  mc.dim = 8;
  mc.flow_layers = 2;
  mc.decoder_hidden = {12, 6};
  mc.group_hidden = 8;
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (std::size_t draw = 0; draw < draws; ++draw) {
    CtrModel m(mc, ds.vocab, 100 + draw);
    detail::randomize(m.params(), rng, 0.5);
    Tensor xi = Tensor::constant({b.size(), mc.dim}, detail::normal_values(rng, b.size() * mc.dim));
    std::vector<Tensor> params;
    for (const auto& [_, t] : m.params().all()) params.push_back(t);
    auto loss = [&] { return assemble_loss(m.forward(b, Path::Sample, &xi), b, {1.0, 1.0, true, {}}).total; };
    worst = std::max(worst, grad_check(loss, params));
  }
  return {worst < tolerance, "max relative error " + detail::sci(worst) + " over " + std::to_string(draws) +
                                 " draws (tolerance " + detail::sci(tolerance) + ")"};
}

/// Closed-form KL against the sampled in-span estimate.
inline CheckResult check_kl_oracle(std::size_t instances = 20, std::size_t mc_draws = 1000000) {
  std::mt19937_64 rng(31);
  double worst_z = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t d = 2 + i % 7;
    auto mu = detail::normal_values(rng, d), g = detail::normal_values(rng, d);
    std::vector<double> sigma(d), log_sigma(d);
    for (std::size_t j = 0; j < d; ++j) {
      log_sigma[j] = 0.5 * detail::normal_values(rng, 1)[0];
      sigma[j] = std::exp(log_sigma[j]);
    }
    PosteriorParams p{Tensor::constant({1, d}, mu), Tensor::constant({1, d}, log_sigma),
                      Tensor::constant({1, d}, sigma)};
    const double closed = kl_projected(p, Tensor::constant({1, d}, g))[0];
    auto est = testing::kl_monte_carlo(mu, sigma, g, mc_draws, 500 + i);
    worst_z = std::max(worst_z, std::abs(closed - est.mean) / est.standard_error);
  }
  std::ostringstream os;
  os.precision(3);
  os << "worst |closed - MC| = " << worst_z << " standard errors over " << instances << " instances (bound 3)";
  return {worst_z < 3.0, os.str()};
}

/// Round trip in the sup norm, finite-difference Jacobian determinant and
/// the logged log-determinant.
inline CheckResult check_flow_exactness() {
  std::mt19937_64 rng(41);
  double worst_round_trip = 0.0, worst_det = 0.0;
  bool logdet_zero = true;
  for (std::size_t k : {1, 2, 4, 8}) {
    ParamStore store(k);
    FlowStack fs(store, 6, k);
    detail::randomize(store, rng, 1.0);
    auto z = Tensor::constant({1000, 6}, detail::normal_values(rng, 6000, 2.0));
    auto [out, logdet] = flow_forward(z, fs);
    logdet_zero = logdet_zero && logdet == 0.0;
    auto back = flow_inverse(out, fs);
    for (std::size_t i = 0; i < z.size(); ++i) {
      worst_round_trip = std::max(worst_round_trip, std::abs(back[i] - z[i]));
    }
  }
  for (std::size_t d = 2; d <= 8; ++d) {
    ParamStore store(d);
    FlowStack fs(store, d, 4);
    detail::randomize(store, rng, 0.8);
    auto x = detail::normal_values(rng, d);
    auto f = [&fs](const std::vector<double>& z) {
      auto out = flow_forward(Tensor::vector(z), fs).first;
      return std::vector<double>(out.values().begin(), out.values().end());
    };
    worst_det = std::max(worst_det, std::abs(testing::jacobian_determinant(f, x) - 1.0));
    logdet_zero = logdet_zero && flow_forward(Tensor::vector(x), fs).second == 0.0;
  }
  const bool ok = worst_round_trip < 1e-9 && worst_det <= 1e-6 && logdet_zero;
  return {ok, "round trip " + detail::sci(worst_round_trip) + ", |det - 1| " + detail::sci(worst_det) +
                  ", logdet " + (logdet_zero ? "exactly 0" : "nonzero")};
}

/// Tiny sigma, no flow: the latent model must reduce to the attention
/// baseline carrying the same weights, trained first so the weights are not
/// at their initial values.
inline CheckResult check_degeneration() {
  RunConfig c;
  c.model.variant = Variant::Gpsvi;
  c.model.dim = 8;
  c.model.use_flow = false;
  c.model.sigma_min = c.model.sigma_max = 1e-8;
  c.data.synth.n_users = 600;
  c.data.synth.n_items = 80;
  c.data.synth.max_len = 30;
  c.epochs = 1;
  c.lr = 3e-3;
  c.lambda_m = 1e-4;
  Splits s = load_splits(c);
  RepeatResult r;
  CtrModel gp = train_model(c, s.train, 7, 7, r);
  ModelConfig attn_cfg = c.model;
  attn_cfg.variant = Variant::Attn;
  CtrModel at(attn_cfg, s.train.vocab, 7);
  at.params().load(gp.params().all(), false);

  Batch b = make_batch(s.test, detail::all_rows(s.test));
  auto noise = make_stream(11, "degeneration");
  Tensor xi = standard_normal(noise, {b.size(), c.model.dim});
  Tensor sampled = sigmoid(gp.forward(b, Path::Sample, &xi).logits);
  auto base = at.predict(b);
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(sampled[i] - base[i]));
  auto segments = split_head_tail(s.test);
  auto a = evaluate(gp, s.test, segments), e = evaluate(at, s.test, segments);
  const bool same_auc = a.all == e.all && a.head == e.head && a.tail == e.tail;
  return {worst < 1e-6 && same_auc,
          "max |dy| " + detail::sci(worst) + " over " + std::to_string(b.size()) + " records, AUC " +
              (same_auc ? "identical" : "differs")};
}

/// Rank-statistic AUC against pair counting on random instances with ties.
inline CheckResult check_auc_oracle(std::size_t instances = 200) {
  std::mt19937_64 rng(51);
  std::size_t mismatches = 0, with_ties = 0;
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = 2 + rng() % 999;
    // Every fourth instance is all ties; others draw from few or many levels.
    const std::uint64_t levels = t % 4 == 0 ? 1 : t % 4 == 1 ? 1 + rng() % 6 : 1000000007ULL;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % levels) * 0.125;
      labels[i] = static_cast<int>(rng() % 2);
    }
    labels[0] = 0;
    labels[1] = 1;
    if (levels < 1000) ++with_ties;
    if (auc(scores, labels) != testing::auc_brute_force(scores, labels)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches on " + std::to_string(instances) +
                               " instances (" + std::to_string(with_ties) + " tie-heavy)"};
}

}  // namespace gpsvi::checks
