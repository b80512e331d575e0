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

// Acceptance runner: one PASS/FAIL line per criterion. Exit 0 only when every
// selected criterion passes.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gpsvi/checks.hpp"
#include "gpsvi/cli.hpp"
#include "gpsvi/trainer.hpp"

#ifndef GPSVI_CONFIG_DIR
#define GPSVI_CONFIG_DIR "configs"
#endif

namespace {

using gpsvi::checks::CheckResult;

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << std::fixed << v;
  return os.str();
}

struct ArmResult {
  double all = 0.0, head = 0.0, tail = 0.0;
  double trend = 0.0;
  bool has_trend = false;
};

struct Arm {
  std::string name;
  gpsvi::RunConfig config;
};

std::vector<Arm> benchmark_arms(const gpsvi::RunConfig& base) {
  Arm attn{"attn", base}, full{"gpsvi", base}, no_flow{"gpsvi_wo_flow", base}, no_reg{"gpsvi_wo_reg", base};
  attn.config.model.variant = gpsvi::Variant::Attn;
  full.config.model.variant = no_flow.config.model.variant = no_reg.config.model.variant = gpsvi::Variant::Gpsvi;
  no_flow.config.model.use_flow = false;
  no_reg.config.use_monotonic_reg = false;
  return {attn, full, no_flow, no_reg};
}

ArmResult run_arm(const gpsvi::RunConfig& c, const gpsvi::Splits& s) {
  auto outcome = gpsvi::train(c, s);
  const auto& auc = outcome.repeats.front().auc;
  ArmResult r;
  r.all = auc.all.value_or(NAN);
  r.head = auc.head.value_or(NAN);
  r.tail = auc.tail.value_or(NAN);
  const auto& m = outcome.models.front();
  if (m.stochastic()) {
    r.trend = gpsvi::variance_trend(
        gpsvi::variance_report(m, s.test, gpsvi::default_length_bins(c.data.synth.max_len)));
    r.has_trend = true;
  }
  return r;
}

// seed -> arm -> result
using Benchmark = std::map<std::uint64_t, std::map<std::string, ArmResult>>;

Benchmark run_benchmark(const gpsvi::RunConfig& base, std::size_t n_seeds) {
  Benchmark out;
  for (std::uint64_t seed = 1; seed <= n_seeds; ++seed) {
    gpsvi::RunConfig seeded = base;
    seeded.seeds = {seed, seed, seed};
    seeded.repeats = 1;
    const gpsvi::Splits splits = gpsvi::load_splits(seeded);
    for (const auto& arm : benchmark_arms(seeded)) {
      const auto start = std::chrono::steady_clock::now();
      auto r = run_arm(arm.config, splits);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      out[seed][arm.name] = r;
      std::cerr << "  seed " << seed << " " << arm.name << ": all " << fixed(r.all) << " head " << fixed(r.head)
                << " tail " << fixed(r.tail);
      if (r.has_trend) std::cerr << " spearman " << fixed(r.trend, 3);
      std::cerr << " (" << fixed(secs, 1) << " s)\n";
    }
  }
  return out;
}

double mean_delta(const Benchmark& b, const std::string& lhs, const std::string& rhs, double ArmResult::*field) {
  double total = 0.0;
  for (const auto& [_, arms] : b) total += arms.at(lhs).*field - arms.at(rhs).*field;
  return total / static_cast<double>(b.size());
}

CheckResult criterion_variance_trend(const Benchmark& b) {
  double worst = -1.0;
  std::string values;
  for (const auto& [seed, arms] : b) {
    const double rho = arms.at("gpsvi").trend;
    worst = std::max(worst, rho);
    values += (values.empty() ? "" : ", ") + fixed(rho, 3);
  }
  return {worst <= -0.8, "spearman per seed [" + values + "], bound <= -0.8"};
}

CheckResult criterion_tail_lift(const Benchmark& b) {
  const double tail = mean_delta(b, "gpsvi", "attn", &ArmResult::tail);
  const double head = mean_delta(b, "gpsvi", "attn", &ArmResult::head);
  return {tail >= 0.005 && std::abs(head) <= 0.003,
          "mean tail delta " + fixed(tail) + " (need >= +0.005), mean head delta " + fixed(head) +
              " (need |.| <= 0.003)"};
}

CheckResult criterion_ablation(const Benchmark& b) {
  const double flow_gain = mean_delta(b, "gpsvi", "gpsvi_wo_flow", &ArmResult::tail);
  double loosest = -1.0;
  for (const auto& [_, arms] : b) loosest = std::max(loosest, arms.at("gpsvi_wo_reg").trend);
  const bool reg_breaks = loosest > -0.8;
  return {flow_gain > 0.0 && reg_breaks,
          "tail(gpsvi) - tail(wo_flow) = " + fixed(flow_gain) + " (need > 0); wo_reg max spearman " +
              fixed(loosest, 3) + " (need > -0.8 in some seed)"};
}

CheckResult criterion_determinism(const std::string& config) {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "gpsvi_acceptance_determinism";
  fs::remove_all(root);
  std::ostringstream sink;
  auto train_into = [&](const std::string& dir) {
    const std::string out = (root / dir).string();
    const char* argv[] = {"gpsvi", "train", "--config", config.c_str(), "--out", out.c_str()};
    return gpsvi::cli::run(6, argv, sink, sink);
  };
  if (train_into("a") != 0 || train_into("b") != 0) return {false, "train failed: " + sink.str()};
  const auto a = gpsvi::read_file(root / "a" / "metrics.json");
  const auto b = gpsvi::read_file(root / "b" / "metrics.json");
  fs::remove_all(root);
  return {a == b, std::string("metrics.json ") + (a == b ? "byte-identical" : "differs") + " across two runs (" +
                      std::to_string(a.size()) + " bytes)"};
}

std::set<int> parse_selection(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const int n = std::stoi(item);
    if (n < 1 || n > 9) throw gpsvi::ConfigError("criterion numbers run from 1 to 9");
    out.insert(n);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria and prints one line per criterion", "acceptance"};
  std::string benchmark_config = std::string(GPSVI_CONFIG_DIR) + "/benchmark.json";
  std::string quick_config = std::string(GPSVI_CONFIG_DIR) + "/quickstart.json";
  std::string only = "1,2,3,4,5,6,7,8,9";
  std::size_t seeds = 5;
  app.add_option("--benchmark-config", benchmark_config, "Run config for criteria 6-8");
  app.add_option("--determinism-config", quick_config, "Run config trained twice for criterion 9");
  app.add_option("--only", only, "Comma-separated criterion numbers");
  app.add_option("--seeds", seeds, "Seeds for the benchmark criteria")->check(CLI::Range(1, 100));
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  try {
    selected = parse_selection(only);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  std::map<int, std::pair<std::string, CheckResult>> results;
  auto record = [&](int n, const std::string& name, auto&& run) {
    if (!selected.count(n)) return;
    const auto start = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.detail += " [" + fixed(secs, 1) + " s]";
    results[n] = {name, r};
    std::cout << "criterion " << n << " " << (r.passed ? "PASS" : "FAIL") << " " << name << ": " << r.detail
              << std::endl;
  };

  record(1, "gradient integrity", [] { return gpsvi::checks::check_gradients(); });
  record(2, "KL oracle", [] { return gpsvi::checks::check_kl_oracle(); });
  record(3, "flow exactness", [] { return gpsvi::checks::check_flow_exactness(); });
  record(4, "degeneration to attention", [] { return gpsvi::checks::check_degeneration(); });
  record(5, "AUC oracle", [] { return gpsvi::checks::check_auc_oracle(); });

  if (selected.count(6) || selected.count(7) || selected.count(8)) {
    Benchmark bench;
    std::string failure;
    const auto start = std::chrono::steady_clock::now();
    try {
      const auto base = gpsvi::load_run_config(benchmark_config, false);
      std::cerr << "benchmark: " << seeds << " seeds, 4 arms, " << base.data.synth.n_users << " users\n";
      bench = run_benchmark(base, seeds);
    } catch (const std::exception& e) {
      failure = std::string("benchmark error: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "benchmark took " << fixed(secs, 1) << " s\n";
    auto bench_criterion = [&](int n, const std::string& name, CheckResult (*judge)(const Benchmark&)) {
      record(n, name, [&] { return failure.empty() ? judge(bench) : CheckResult{false, failure}; });
    };
    bench_criterion(6, "monotone variance trend", criterion_variance_trend);
    bench_criterion(7, "tail lift over attention", criterion_tail_lift);
    bench_criterion(8, "ablation direction", criterion_ablation);
  }

  record(9, "determinism", [&] { return criterion_determinism(quick_config); });

  std::size_t passed = 0;
  for (const auto& [_, r] : results) passed += r.second.passed ? 1 : 0;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
