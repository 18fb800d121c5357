#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "factorix/checkpoint.hpp"
#include "factorix/trainer.hpp"
#include "test_util.hpp"

using namespace factorix;
using train::OptimizerSettings;
using train::TrainOptions;
using train::cosine_lr;
using train::make_schedule;
using train::mean_nll;
using train::warmup_steps;
using factorix::testing::TempDir;
using factorix::testing::throws_with;
using ordering::Permutation;

namespace {

model::ModelConfig tiny() {
  model::ModelConfig c;
  c.layers = 1;
  c.heads = 1;
  c.dim = 8;
  c.window = 8;
  c.vocab_size = 11;
  c.init_std = 0.3;
  c.seed = 5;
  return c;
}

tokenize::PackedDataset random_rows(std::size_t rows, int window, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<tokenize::TokenId> stream(rows * static_cast<std::size_t>(window - 1));
  for (auto& t : stream) t = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(vocab - 1));
  return tokenize::pack_corpus(stream, static_cast<std::uint32_t>(window), static_cast<std::uint32_t>(vocab), "tok")
      .dataset;
}

OptimizerSettings quick(int epochs) {
  OptimizerSettings s;
  s.batch_size = 4;
  s.accumulation = 2;
  s.epochs = epochs;
  s.learning_rate = 3e-3;
  return s;
}

}  // namespace

TEST(Schedule, VisitsEveryRowOncePerEpoch) {
  OptimizerSettings s;
  s.batch_size = 4;
  s.accumulation = 3;
  s.epochs = 2;
  const auto sched = make_schedule(30, s, 9);
  // 8 micro-batches per epoch (the last holds 2 rows), 3 steps per epoch.
  EXPECT_EQ(sched.micro_batches.size(), 16u);
  EXPECT_EQ(sched.optimizer_steps, 6);
  EXPECT_EQ(sched.micro_batches[7].size(), 2u);
  for (int e = 0; e < 2; ++e) {
    std::multiset<std::size_t> seen;
    for (std::size_t i = 0; i < sched.micro_batches.size(); ++i)
      if (sched.epoch_of[i] == e) seen.insert(sched.micro_batches[i].begin(), sched.micro_batches[i].end());
    EXPECT_EQ(seen.size(), 30u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 30u);
  }
  // Steps never straddle an epoch boundary.
  for (std::size_t i = 1; i < sched.micro_batches.size(); ++i)
    if (sched.step_of[i] == sched.step_of[i - 1]) {
      EXPECT_EQ(sched.epoch_of[i], sched.epoch_of[i - 1]);
    }
}

TEST(Schedule, DependsOnlyOnRowsSettingsAndSeed) {
  OptimizerSettings s;
  EXPECT_EQ(make_schedule(100, s, 1).hash(), make_schedule(100, s, 1).hash());
  EXPECT_NE(make_schedule(100, s, 1).hash(), make_schedule(100, s, 2).hash());
  EXPECT_NE(make_schedule(100, s, 1).hash(), make_schedule(101, s, 1).hash());
}

TEST(CosineLr, WarmupThenHalfCosine) {
  EXPECT_EQ(warmup_steps(100, 0.03), 3);
  EXPECT_EQ(warmup_steps(10, 0.03), 1);
  EXPECT_EQ(warmup_steps(10, 0.0), 0);
  const double base = 1e-3;
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 3, base), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(1, 100, 3, base), base / 3);
  EXPECT_DOUBLE_EQ(cosine_lr(3, 100, 3, base), base);
  // Oracle: 0.5 * (1 + cos(pi * progress)) after warm-up.
  for (int step : {10, 51, 99}) {
    const double progress = (step - 3) / 97.0;
    EXPECT_NEAR(cosine_lr(step, 100, 3, base), base * 0.5 * (1 + std::cos(std::numbers::pi * progress)), 1e-15);
  }
}

TEST(Settings, PresetsAndValidation) {
  EXPECT_DOUBLE_EQ(OptimizerSettings::desk().learning_rate, 3e-4);
  EXPECT_DOUBLE_EQ(OptimizerSettings::paper().learning_rate, 2e-5);
  EXPECT_EQ(OptimizerSettings::desk().accumulation, 8);
  OptimizerSettings s;
  s.batch_size = 0;
  EXPECT_THROW(s.validate(), Error);
}

OptimizerSettings overfit_settings() {
  OptimizerSettings s;
  s.batch_size = 4;
  s.accumulation = 1;
  s.epochs = 500;
  s.learning_rate = 1e-2;
  s.weight_decay = 0.0;
  return s;
}

TEST(Train, OverfitsOneBatchOfFourSequences) {
  // Four copies of one row: a memorisable batch, so the loss can approach 0.
  auto one = random_rows(1, 8, 11, 3);
  std::vector<tokenize::TokenId> stream;
  for (int copy = 0; copy < 4; ++copy) stream.insert(stream.end(), one.sequence(0).begin() + 1, one.sequence(0).end());
  const auto data = tokenize::pack_corpus(stream, 8, 11, "tok").dataset;
  ASSERT_EQ(data.size(), 4u);
  const auto r = train::train(tiny(), data, Permutation::forward(7), overfit_settings());
  EXPECT_EQ(r.checkpoint.meta.step, 500);
  EXPECT_LT(r.log.entries.back().nll, 0.1);
  EXPECT_LT(mean_nll(r.checkpoint, data, Permutation::forward(7)), 0.1);
}

TEST(Train, DistinctRowsApproachTheirEntropyFloor) {
  // A causal model assigns four distinct rows at most 1/4 each, so the mean
  // per-token loss is bounded below by ln(4) / 7.
  const auto data = random_rows(4, 8, 11, 3);
  const double floor = std::log(4.0) / 7.0;
  const auto r = train::train(tiny(), data, Permutation::forward(7), overfit_settings());
  const double nll = mean_nll(r.checkpoint, data, Permutation::forward(7));
  EXPECT_GE(nll, floor - 1e-9);
  EXPECT_LT(nll, floor + 0.01);
}

TEST(Train, IsBitReproducible) {
  TempDir dir;
  const auto data = random_rows(24, 8, 11, 4);
  const auto val = random_rows(4, 8, 11, 5);
  TrainOptions o;
  o.validation = &val;
  const auto a = train::train(tiny(), data, Permutation::fixed(7, 2), quick(2), o);
  const auto b = train::train(tiny(), data, Permutation::fixed(7, 2), quick(2), o);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  model::save_checkpoint(a.checkpoint, dir / "a");
  model::save_checkpoint(b.checkpoint, dir / "b");
  EXPECT_EQ(model::checkpoint_file_hash(dir / "a"), model::checkpoint_file_hash(dir / "b"));
  EXPECT_EQ(a.log.epoch_validation_ppl.size(), 2u);
}

TEST(Train, OrderingsShareTheBatchSchedule) {
  const auto data = random_rows(24, 8, 11, 4);
  const auto f = train::train(tiny(), data, Permutation::forward(7), quick(1));
  const auto b = train::train(tiny(), data, Permutation::backward(7), quick(1));
  EXPECT_EQ(f.schedule_hash, b.schedule_hash);
  EXPECT_NE(f.checkpoint.params, b.checkpoint.params);
  EXPECT_EQ(f.checkpoint.meta.ordering, "forward");
  EXPECT_EQ(b.checkpoint.meta.ordering, "backward");
  EXPECT_EQ(f.checkpoint.meta.tokenizer_hash, "tok");
}

TEST(Train, LogIsMonotoneAndWritesCsv) {
  TempDir dir;
  const auto data = random_rows(24, 8, 11, 4);
  const auto r = train::train(tiny(), data, Permutation::forward(7), quick(2));
  for (std::size_t i = 1; i < r.log.entries.size(); ++i) EXPECT_GE(r.log.entries[i].step, r.log.entries[i - 1].step);
  r.log.write_csv(dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,split,nll,lr");
}

TEST(Train, DivergenceReportsTheStep) {
  const auto data = random_rows(24, 8, 11, 4);
  OptimizerSettings s = quick(3);
  s.learning_rate = 1e30;
  s.warmup_fraction = 0.0;
  EXPECT_TRUE(throws_with([&] { train::train(tiny(), data, Permutation::forward(7), s); }, "training diverged at step"));
}

TEST(Train, RejectsMismatchedInputs) {
  const auto data = random_rows(8, 8, 11, 4);
  EXPECT_THROW(train::train(tiny(), data, Permutation::forward(6), quick(1)), Error);
  const auto wide = random_rows(8, 9, 11, 4);
  EXPECT_THROW(train::train(tiny(), wide, Permutation::forward(8), quick(1)), Error);
  const auto other = tokenize::pack_corpus(std::vector<tokenize::TokenId>(7, 1), 8, 11, "other").dataset;
  TrainOptions o;
  o.validation = &other;
  EXPECT_TRUE(throws_with([&] { train::train(tiny(), data, Permutation::forward(7), quick(1), o); },
                          "tokenizer provenance mismatch"));
}
