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

#include "gpsvi/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "gpsvi/grad_check.hpp"
#include "gpsvi/testing/oracles.hpp"

namespace gpsvi {
namespace {

RunConfig tiny_config(Variant variant = Variant::Gpsvi) {
  RunConfig c;
  c.model.variant = variant;
  c.model.dim = 4;
  c.model.decoder_hidden = {8};
  c.model.group_hidden = 8;
  c.data.synth.n_users = 120;
  c.data.synth.n_items = 30;
  c.data.synth.max_len = 20;
  c.data.synth.impressions_per_user = 3;
  c.batch_size = 32;
  c.epochs = 2;
  c.lr = 1e-2;
  c.beta = 0.1;
  c.lambda_m = 1e-3;
  return c;
}

std::vector<double> params_snapshot(const CtrModel& m) {
  std::vector<double> out;
  for (const auto& [_, t] : m.params().all()) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

TEST(AucTest, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
}

TEST(AucTest, SingleClassIsUndefined) {
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
}

TEST(AucTest, MatchesBruteForceExactly) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 999;
    const int levels = trial % 3 == 0 ? 1 + static_cast<int>(rng() % 5) : 1000000;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % static_cast<unsigned>(levels)) / 7.0;
      labels[i] = static_cast<int>(rng() % 2);
    }
    labels[0] = 0;
    labels[1] = 1;
    EXPECT_EQ(auc(scores, labels), testing::auc_brute_force(scores, labels)) << "trial " << trial;
  }
}

TEST(SpearmanTest, Basics) {
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 25, 100}), 1.0, 1e-15);
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_EQ(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{5, 5, 5}), 0.0);
}

TEST(RunConfigTest, DefaultsAndRoundTrip) {
  auto c = run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.model.variant, Variant::Gpsvi);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.beta, 1.0);
  EXPECT_EQ(c.model.flow_layers, 2u);
  auto text = run_config_to_json(c);
  EXPECT_EQ(run_config_to_json(run_config_from_json(nlohmann::json::parse(text))), text);
}

TEST(RunConfigTest, AblationFlags) {
  auto c = run_config_from_json(nlohmann::json::parse(R"({"flags":{"use_flow":false,"use_monotonic_reg":false}})"));
  EXPECT_FALSE(c.model.use_flow);
  EXPECT_FALSE(c.use_monotonic_reg);
  CtrModel m(c.model, Vocab{5, 2, {2}}, 1);
  EXPECT_TRUE(m.flow().empty());
}

TEST(RunConfigTest, UnknownKeyRejected) {
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"hyper":{"learning_rate":1}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"variant":"din"})")), ConfigError);
}

TEST(RunConfigTest, MalformedJsonReportsLineAndColumn) {
  auto path = std::filesystem::temp_directory_path() / "gpsvi_bad_config.json";
  write_file_atomic(path, "{\n  \"variant\": \"gpsvi\",\n  \"hyper\": {,}\n}\n");
  try {
    load_run_config(path, false);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
  }
}

TEST(RunConfigTest, SeedEnvironmentOverride) {
  auto path = std::filesystem::temp_directory_path() / "gpsvi_seed_config.json";
  write_file_atomic(path, R"({"seeds":{"init":1,"data":2,"noise":3}})");
  ::setenv("GPSVI_SEED", "99", 1);
  auto c = load_run_config(path);
  ::unsetenv("GPSVI_SEED");
  EXPECT_EQ(c.seeds.init, 99u);
  EXPECT_EQ(c.seeds.data, 99u);
  EXPECT_EQ(c.seeds.noise, 99u);
  EXPECT_EQ(load_run_config(path).seeds.data, 2u);
}

class TrainerFixture : public ::testing::Test {
 protected:
  void SetUp() override { splits_ = load_splits(tiny_config()); }
  Splits splits_;
};

TEST_F(TrainerFixture, LossDecomposes) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 3);
  auto noise = make_stream(1, "n");
  auto pairs = make_stream(1, "p");
  BatchSequence batches(splits_.train, 100, 5);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    Batch b = batches[i];
    Tensor xi = standard_normal(noise, {b.size(), c.model.dim});
    auto t = assemble_loss(m.forward(b, Path::Sample, &xi), b, {0.3, 0.02, true, {}}, &pairs);
    EXPECT_NEAR(t.bce + 0.3 * t.kl + 0.02 * t.reg, t.total_value, 1e-10);
    EXPECT_GT(t.reg, 0.0);
  }
}

TEST_F(TrainerFixture, DegenerateSigmaMatchesAttention) {
  auto c = tiny_config();
  c.model.sigma_min = c.model.sigma_max = 1e-8;
  c.model.use_flow = false;
  CtrModel gp(c.model, splits_.train.vocab, 4);
  auto attn_cfg = c.model;
  attn_cfg.variant = Variant::Attn;
  CtrModel at(attn_cfg, splits_.train.vocab, 4);
  at.params().load(gp.params().all(), false);

  auto noise = make_stream(2, "n");
  Batch b = make_batch(splits_.train, [&] {
    std::vector<std::size_t> rows(splits_.train.size());
    std::iota(rows.begin(), rows.end(), 0);
    return rows;
  }());
  Tensor xi = standard_normal(noise, {b.size(), c.model.dim});
  auto sampled = gp.forward(b, Path::Sample, &xi);
  auto baseline = at.forward(b, Path::Mean);
  Tensor p1 = sigmoid(sampled.logits), p2 = sigmoid(baseline.logits);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_LT(std::abs(p1[i] - p2[i]), 1e-6);

  auto t = assemble_loss(sampled, b, {0.0, 0.0, false, {}}, nullptr);
  auto t_attn = assemble_loss(baseline, b, {0.0, 0.0, false, {}}, nullptr);
  EXPECT_NEAR(t.total_value, t_attn.bce, 1e-6);

  auto segments = split_head_tail(splits_.test);
  auto a = evaluate(gp, splits_.test, segments), e = evaluate(at, splits_.test, segments);
  EXPECT_EQ(a.all, e.all);
  EXPECT_EQ(a.head, e.head);
  EXPECT_EQ(a.tail, e.tail);
}

TEST_F(TrainerFixture, PerfectPredictionsHaveNearZeroBce) {
  ForwardResult fwd;
  fwd.logits = Tensor::constant({3}, {40, -40, 40});
  Batch b;
  b.rows = {0, 1, 2};
  b.labels = {1, 0, 1};
  b.lengths = {1, 1, 1};
  EXPECT_LT(assemble_loss(fwd, b, {}).bce, 1e-15);
}

TEST_F(TrainerFixture, SingleExampleBatchWarns) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 3);
  Batch b = make_batch(splits_.train, {0});
  Tensor xi = Tensor::zeros({1, c.model.dim});
  std::size_t undersized = 0;
  auto t = assemble_loss(m.forward(b, Path::Sample, &xi), b, {1.0, 1.0, true, {}}, nullptr, &undersized);
  EXPECT_EQ(t.reg, 0.0);
  EXPECT_EQ(undersized, 1u);
}

TEST_F(TrainerFixture, FullLossPassesGradCheck) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 8);
  Batch b = make_batch(splits_.train, {0, 5, 9, 20});
  auto noise = make_stream(3, "n");
  Tensor xi = standard_normal(noise, {b.size(), c.model.dim});
  std::vector<Tensor> params;
  for (const auto& [name, t] : m.params().all()) {
    if (name.rfind("emb.", 0) != 0) params.push_back(t);
  }
  auto loss = [&] { return assemble_loss(m.forward(b, Path::Sample, &xi), b, {0.5, 0.1, true, {}}).total; };
  EXPECT_LT(grad_check(loss, params), 1e-4);
}

TEST_F(TrainerFixture, ZeroLearningRateKeepsParameters) {
  auto c = tiny_config();
  c.lr = 0.0;
  c.epochs = 1;
  RepeatResult r;
  CtrModel fresh(c.model, splits_.train.vocab, 5);
  CtrModel trained = train_model(c, splits_.train, 5, 5, r);
  EXPECT_EQ(params_snapshot(fresh), params_snapshot(trained));
}

TEST_F(TrainerFixture, TrainingIsBitReproducible) {
  auto c = tiny_config();
  auto a = train(c, splits_);
  auto b = train(c, splits_);
  EXPECT_EQ(train_metrics_json(c, a), train_metrics_json(c, b));
  EXPECT_EQ(std::bit_cast<std::uint64_t>(a.repeats[0].curve.back().loss),
            std::bit_cast<std::uint64_t>(b.repeats[0].curve.back().loss));
}

TEST_F(TrainerFixture, TrainingReducesLoss) {
  auto c = tiny_config();
  c.epochs = 6;
  auto out = train(c, splits_);
  EXPECT_LT(out.repeats[0].curve.back().bce, out.repeats[0].curve.front().bce);
  for (const auto& cell : {out.repeats[0].auc.all, out.repeats[0].auc.head, out.repeats[0].auc.tail}) {
    ASSERT_TRUE(cell.has_value());
    EXPECT_GE(*cell, 0.0);
    EXPECT_LE(*cell, 1.0);
  }
}

TEST_F(TrainerFixture, NanLossAbortsWithBatchIndex) {
  auto c = tiny_config(Variant::Attn);
  c.epochs = 1;
  c.lr = std::numeric_limits<double>::quiet_NaN();
  RepeatResult r;
  auto dump = std::filesystem::temp_directory_path() / "gpsvi_nan_batch.jsonl";
  std::filesystem::remove(dump);
  // NaN parameters after the first update make the second batch diverge.
  try {
    train_model(c, splits_.train, 1, 1, r, dump);
    FAIL() << "expected NanLossError";
  } catch (const NanLossError& e) {
    EXPECT_EQ(e.batch_index(), 1u);
  }
  std::ifstream in(dump);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(nlohmann::json::parse(header).at("batch_index"), 1);
  std::size_t records = 0;
  while (std::getline(in, line)) ++records;
  EXPECT_EQ(records, c.batch_size);
}

TEST_F(TrainerFixture, DivergentLatentModelAbortsInsteadOfDomainError) {
  auto c = tiny_config();
  c.epochs = 1;
  c.lr = 1e300;
  RepeatResult r;
  EXPECT_THROW(train_model(c, splits_.train, 1, 1, r), NanLossError);
}

TEST_F(TrainerFixture, EvaluateIgnoresRecordOrderAndDuplication) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 6);
  auto segments = split_head_tail(splits_.test);
  auto base = evaluate(m, splits_.test, segments);
  Dataset shuffled = splits_.test;
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.records.begin(), shuffled.records.end(), rng);
  auto again = evaluate(m, shuffled, segments);
  EXPECT_EQ(base.all, again.all);
  EXPECT_EQ(base.tail, again.tail);
  Dataset doubled = splits_.test;
  doubled.records.insert(doubled.records.end(), splits_.test.records.begin(), splits_.test.records.end());
  auto dup = evaluate(m, doubled, segments);
  EXPECT_NEAR(*base.all, *dup.all, 1e-15);
  EXPECT_NEAR(*base.head, *dup.head, 1e-15);
}

TEST_F(TrainerFixture, SingleClassSegmentIsAbsent) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 6);
  Dataset ds = splits_.test;
  for (auto& r : ds.records) r.label = 1;
  auto out = evaluate(m, ds, split_head_tail(ds));
  EXPECT_FALSE(out.all.has_value());
  EXPECT_FALSE(out.tail.has_value());
  auto json = metrics_json("gpsvi", {out}, nullptr, "eval", 0.25, 1, 2, {});
  EXPECT_NE(json.find("\"mean\":null"), std::string::npos);
}

TEST_F(TrainerFixture, CheckpointRoundTrip) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 9);
  auto path = std::filesystem::temp_directory_path() / "gpsvi_ckpt_test.json";
  save_model(path, m);
  CtrModel back = load_model(path);
  Batch b = make_batch(splits_.test, {0, 1, 2, 3});
  EXPECT_EQ(m.predict(b), back.predict(b));
  EXPECT_EQ(model_checkpoint_json(m), model_checkpoint_json(back));
}

TEST_F(TrainerFixture, UntrainedVarianceHasNoTrendOnAverage) {
  auto c = tiny_config();
  double total = 0.0;
  const int inits = 20;
  for (int seed = 0; seed < inits; ++seed) {
    CtrModel m(c.model, splits_.train.vocab, static_cast<std::uint64_t>(seed));
    total += variance_trend(variance_report(m, splits_.test, default_length_bins(20)));
  }
  EXPECT_LT(std::abs(total / inits), 0.5);
}

TEST_F(TrainerFixture, VarianceCsvColumns) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 1);
  auto rows = variance_report(m, splits_.test, default_length_bins(20));
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) EXPECT_GT(r.n_users, 0u);
  EXPECT_TRUE(variance_csv(rows).starts_with("bin_lo,bin_hi,n_users,mean_sigma\n"));
}

TEST_F(TrainerFixture, SensitivityVanishesWithoutBehaviorValues) {
  auto c = tiny_config(Variant::Attn);
  c.model.kv_projection = true;
  CtrModel m(c.model, splits_.train.vocab, 2);
  for (const char* name : {"attn.value.weight", "attn.value.bias"}) {
    Tensor t = m.params().at(name);
    for (auto& v : t.mutable_values()) v = 0.0;
  }
  auto s = mask_sensitivity(m, splits_.test, split_head_tail(splits_.test));
  ASSERT_EQ(s.tail.size(), c.model.dim);
  for (std::size_t j = 0; j < c.model.dim; ++j) {
    EXPECT_NEAR(s.tail[j], 0.0, 1e-15);
    EXPECT_NEAR(s.head[j], 0.0, 1e-15);
  }
}

TEST_F(TrainerFixture, SensitivityIsNonNegative) {
  auto c = tiny_config();
  CtrModel m(c.model, splits_.train.vocab, 2);
  auto s = mask_sensitivity(m, splits_.test, split_head_tail(splits_.test));
  ASSERT_EQ(s.head.size(), c.model.dim);
  double total = 0.0;
  for (std::size_t j = 0; j < c.model.dim; ++j) {
    EXPECT_GE(s.tail[j], 0.0);
    EXPECT_GE(s.head[j], 0.0);
    total += s.tail[j];
  }
  EXPECT_GT(total, 0.0);
  EXPECT_TRUE(sensitivity_csv(s).starts_with("dim,tail_mean_abs_diff,head_mean_abs_diff\n"));
}

TEST_F(TrainerFixture, AllVariantsTrain) {
  for (auto v : {Variant::Dnn, Variant::Attn, Variant::TransLite, Variant::Gpsvi}) {
    auto c = tiny_config(v);
    c.epochs = 1;
    auto out = train(c, splits_);
    EXPECT_TRUE(out.repeats[0].auc.all.has_value()) << to_string(v);
  }
  auto c = tiny_config();
  c.model.backbone = Variant::TransLite;
  c.model.projection = ProjectionMode::PaperCosine;
  c.epochs = 1;
  EXPECT_TRUE(train(c, splits_).repeats[0].auc.all.has_value());
}

}  // namespace
}  // namespace gpsvi
