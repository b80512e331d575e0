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

// Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
// 2 runtime abort.

#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gpsvi/checks.hpp"
#include "gpsvi/trainer.hpp"

namespace gpsvi::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitAbort = 2;

namespace detail {

inline Dataset load_for_model(const CtrModel& m, const std::filesystem::path& path) {
  LoadOptions opts;
  opts.vocab = m.vocab();
  Dataset ds = load_jsonl(path, opts);
  if (ds.empty()) throw EmptyDatasetError(path.string() + " has no records");
  return ds;
}

inline std::size_t longest_history(const Dataset& ds) {
  std::size_t l = 0;
  for (const auto& r : ds.records) l = std::max(l, r.behaviors.size());
  return l;
}

}  // namespace detail

inline int generate_data(const std::string& config_path, std::uint64_t seed, const std::string& out_path,
                         const std::string& test_out, std::ostream& out) {
  RunConfig c = load_run_config(config_path, false);
  if (!c.data.synthetic) throw ConfigError(config_path + ": generate-data needs a synthetic data source");
  Dataset ds = generate_synthetic(c.data.synth, seed);
  if (test_out.empty()) {
    save_jsonl(out_path, ds);
    out << "wrote " << ds.size() << " records to " << out_path << " (sha256 " << dataset_hash(ds) << ")\n";
    return kExitOk;
  }
  auto [train, test] = split_holdout(ds, c.data.test_fraction, seed);
  save_jsonl(out_path, train);
  save_jsonl(test_out, test);
  out << "wrote " << train.size() << " training records to " << out_path << " and " << test.size()
      << " held-out records to " << test_out << "\n";
  return kExitOk;
}

inline int train_command(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
  RunConfig c = load_run_config(config_path);
  c.validate();
  Splits s = load_splits(c);
  const std::filesystem::path dir(out_dir);
  TrainOutcome o = train(c, s, dir / "nan_batch.jsonl");
  write_run(dir, c, o);
  for (std::size_t r = 0; r < o.repeats.size(); ++r) {
    const auto& a = o.repeats[r].auc;
    auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("absent"); };
    out << "repeat " << r << ": auc all " << cell(a.all) << " head " << cell(a.head) << " tail " << cell(a.tail)
        << "\n";
  }
  out << "wrote " << (dir / "metrics.json").string() << "\n";
  return kExitOk;
}

inline int evaluate_command(const std::string& checkpoint, const std::string& data, const std::string& out_dir,
                            double head_quantile, std::size_t mc_samples, std::uint64_t seed, std::ostream& out) {
  CtrModel m = load_model(checkpoint);
  Dataset ds = detail::load_for_model(m, data);
  auto segments = split_head_tail(ds, head_quantile);
  std::size_t n_head = 0, n_tail = 0;
  for (const auto& [_, seg] : segments) (seg == Segment::Head ? n_head : n_tail)++;
  SegmentAuc a = evaluate(m, ds, segments, mc_samples, seed);
  auto text = metrics_json(to_string(m.config().variant), {a}, nullptr, "eval", head_quantile, n_head, n_tail,
                           {{"data_sha256", dataset_hash(ds)}, {"data_records", std::to_string(ds.size())}});
  const auto path = std::filesystem::path(out_dir) / "metrics.json";
  write_file_atomic(path, text);
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

inline int report_command(const std::string& kind, const std::string& checkpoint, const std::string& data,
                          const std::string& out_dir, double head_quantile, std::ostream& out) {
  CtrModel m = load_model(checkpoint);
  Dataset ds = detail::load_for_model(m, data);
  const std::filesystem::path dir(out_dir);
  if (kind == "variance") {
    if (!m.stochastic()) throw ConfigError("variance report needs a model with a sigma network");
    auto rows = variance_report(m, ds, default_length_bins(detail::longest_history(ds)));
    write_file_atomic(dir / "variance_report.csv", variance_csv(rows));
    out << "wrote " << (dir / "variance_report.csv").string() << " (" << rows.size()
        << " bins, spearman " << format_double(variance_trend(rows)) << ")\n";
  } else {
    auto s = mask_sensitivity(m, ds, split_head_tail(ds, head_quantile));
    write_file_atomic(dir / "sensitivity.csv", sensitivity_csv(s));
    out << "wrote " << (dir / "sensitivity.csv").string() << "\n";
  }
  return kExitOk;
}

inline int selftest_command(std::ostream& out) {
  struct Named {
    const char* name;
    checks::CheckResult (*run)();
  };
  const Named suites[] = {
      {"grad_check", [] { return checks::check_gradients(); }},
      {"kl_monte_carlo", [] { return checks::check_kl_oracle(); }},
      {"flow_round_trip", [] { return checks::check_flow_exactness(); }},
      {"auc_brute_force", [] { return checks::check_auc_oracle(); }},
  };
  bool all = true;
  for (const auto& s : suites) {
    auto r = s.run();
    all = all && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << s.name << ": " << r.detail << "\n";
  }
  return all ? kExitOk : kExitAbort;
}

/// Parses argv and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Group-prior variational CTR models: data generation, training, evaluation, reports", "gpsvi"};
  app.require_subcommand(1);

  std::string config, out_path, test_out, checkpoint, data, out_dir, kind;
  std::uint64_t seed = 1;
  double head_quantile = 0.25;
  std::size_t mc_samples = 0;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset as JSONL");
  gen->add_option("--config", config, "Run config whose data.synthetic section is used")->required();
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--out", out_path, "Output JSONL path")->required();
  gen->add_option("--test-out", test_out, "Also split off a held-out JSONL here");

  auto* tr = app.add_subcommand("train", "Train every repeat and write checkpoints and metrics.json");
  tr->add_option("--config", config, "Run config JSON")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Score a JSONL dataset with a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required();
  ev->add_option("--data", data, "JSONL dataset")->required();
  ev->add_option("--out", out_dir, "Output directory")->required();
  ev->add_option("--head-quantile", head_quantile, "Fraction of users in the head segment");
  ev->add_option("--mc-samples", mc_samples, "Average this many latent samples instead of the mean path");
  ev->add_option("--seed", seed, "Noise seed for --mc-samples");

  auto* rep = app.add_subcommand("report", "Write the variance or mask-sensitivity CSV");
  rep->add_option("kind", kind, "variance or sensitivity")
      ->required()
      ->check(CLI::IsMember({"variance", "sensitivity"}));
  rep->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required();
  rep->add_option("--data", data, "JSONL dataset")->required();
  rep->add_option("--out", out_dir, "Output directory")->required();
  rep->add_option("--head-quantile", head_quantile, "Fraction of users in the head segment");

  auto* self = app.add_subcommand("selftest", "Run the built-in oracle checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitInvalid;
  }

  try {
    if (gen->parsed()) return generate_data(config, seed, out_path, test_out, out);
    if (tr->parsed()) return train_command(config, out_dir, out);
    if (ev->parsed()) return evaluate_command(checkpoint, data, out_dir, head_quantile, mc_samples, seed, out);
    if (rep->parsed()) return report_command(kind, checkpoint, data, out_dir, head_quantile, out);
    if (self->parsed()) return selftest_command(out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "aborted: " << e.what() << "\n";
    return kExitAbort;
  }
  return kExitInvalid;
}

}  // namespace gpsvi::cli
