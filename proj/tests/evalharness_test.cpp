#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "factorix/evalharness.hpp"
#include "factorix/stats.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace factorix;
using namespace factorix::eval;
namespace oracle = factorix::testing::oracle;
using factorix::testing::TempDir;
using factorix::testing::throws_with;
using ordering::Permutation;
using probcore::TabularDistribution;

namespace {

model::Checkpoint small_model(double init_std = 0.3) {
  model::ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 8;
  c.window = 6;
  c.vocab_size = 13;
  c.init_std = init_std;
  auto ck = model::init_model(c);
  ck.meta.tokenizer_hash = "tok";
  ck.meta.ordering = "forward";
  return ck;
}

std::vector<std::vector<TokenId>> random_rows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<TokenId>> rows(n, std::vector<TokenId>(5));
  for (auto& r : rows)
    for (auto& t : r) t = 1 + static_cast<int>(rng() % 12);
  return rows;
}

tokenize::PackedDataset pack_rows(const std::vector<std::vector<TokenId>>& rows, const std::string& hash = "tok") {
  std::vector<TokenId> stream;
  for (const auto& r : rows) stream.insert(stream.end(), r.begin(), r.end());
  return tokenize::pack_corpus(stream, 6, 13, hash).dataset;
}

}  // namespace

TEST(SequencePerplexity, TabularOracleWorkedValue) {
  const std::vector<double> raw{0.4, 0.1, 0.2, 0.3};
  const TabularScorer scorer(TabularDistribution::normalize(raw, 2, 2));
  const std::vector<TokenId> seq{0, 1};
  for (const auto& sigma : {Permutation::forward(2), Permutation::backward(2)}) {
    const auto rec = sequence_perplexity(scorer, seq, sigma, "x");
    EXPECT_NEAR(rec.perplexity, std::pow(0.1, -0.5), 1e-12);
    EXPECT_NEAR(rec.perplexity, 3.16228, 5e-6);
    EXPECT_NEAR(rec.perplexity, std::exp(rec.mean_nll), 1e-12);
    EXPECT_FALSE(rec.flagged);
  }
}

TEST(SequencePerplexity, UniformModelGivesRealVocab) {
  const ModelScorer scorer(small_model(0.0));
  const std::vector<TokenId> seq{3, 1, 4, 1, 5};
  const auto rec = sequence_perplexity(scorer, seq, Permutation::backward(5));
  EXPECT_NEAR(rec.perplexity, 12.0, 1e-5);
}

TEST(SequencePerplexity, ShortAndLongInputsAreFlagged) {
  const ModelScorer scorer(small_model());
  const std::vector<TokenId> full{3, 1, 4, 1, 5}, shorter{3, 1, 4}, longer{3, 1, 4, 1, 5, 9, 2};
  EXPECT_FALSE(sequence_perplexity(scorer, full, Permutation::forward(5)).flagged);
  EXPECT_TRUE(sequence_perplexity(scorer, shorter, Permutation::backward(5)).flagged);
  const auto truncated = sequence_perplexity(scorer, longer, Permutation::forward(5));
  EXPECT_TRUE(truncated.flagged);
  EXPECT_DOUBLE_EQ(truncated.perplexity, sequence_perplexity(scorer, full, Permutation::forward(5)).perplexity);
  EXPECT_TRUE(throws_with([&] { sequence_perplexity(scorer, shorter, Permutation::fixed(5, 7)); },
                          "only defined on full-window items"));
}

TEST(EvalDatasetPpl, MatchesPerSequenceScoring) {
  const auto ck = small_model();
  const auto rows = random_rows(21, 1);
  const auto data = pack_rows(rows);
  const ModelScorer scorer(ck);
  for (const auto& perm : {Permutation::forward(5), Permutation::fixed(5, 7)}) {
    const auto recs = eval_dataset_ppl(ck, data, perm, 4);
    ASSERT_EQ(recs.size(), rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      EXPECT_EQ(recs[r].id, std::to_string(r));
      EXPECT_EQ(recs[r].ordering, perm.label());
      EXPECT_NEAR(recs[r].perplexity, sequence_perplexity(scorer, rows[r], perm).perplexity,
                  1e-5 * recs[r].perplexity);
      EXPECT_NEAR(recs[r].perplexity, std::exp(recs[r].mean_nll), 1e-12 * recs[r].perplexity);
    }
  }
}

TEST(EvalDatasetPpl, EmptyPermutedAndMismatchedDatasets) {
  const auto ck = small_model();
  EXPECT_TRUE(eval_dataset_ppl(ck, pack_rows({}), Permutation::forward(5)).empty());

  auto rows = random_rows(9, 2);
  const auto before = eval_dataset_ppl(ck, pack_rows(rows), Permutation::forward(5));
  std::vector<std::size_t> order{4, 0, 8, 1, 7, 2, 6, 3, 5};
  std::vector<std::vector<TokenId>> shuffled;
  for (std::size_t i : order) shuffled.push_back(rows[i]);
  const auto after = eval_dataset_ppl(ck, pack_rows(shuffled), Permutation::forward(5));
  for (std::size_t k = 0; k < order.size(); ++k) EXPECT_EQ(after[k].perplexity, before[order[k]].perplexity);

  EXPECT_TRUE(throws_with([&] { eval_dataset_ppl(ck, pack_rows(rows, "other"), Permutation::forward(5)); },
                          "tokenizer provenance mismatch"));
}

TEST(EvalDatasetPpl, PairedRecordsFeedStatisticsById) {
  // Forward and backward records of one dataset line up by id, so paired
  // statistics need no reindexing.
  const auto ck = small_model();
  const auto data = pack_rows(random_rows(12, 3));
  const auto f = eval_dataset_ppl(ck, data, Permutation::forward(5));
  const auto b = eval_dataset_ppl(ck, data, Permutation::backward(5));
  std::vector<double> x, y;
  for (std::size_t i = 0; i < f.size(); ++i) {
    ASSERT_EQ(f[i].id, b[i].id);
    x.push_back(f[i].perplexity);
    y.push_back(b[i].perplexity);
  }
  EXPECT_NEAR(stats::paired_t(x, y).t, oracle::paired_t(x, y), 1e-10);
  EXPECT_NEAR(stats::pearson(x, y).r, oracle::pearson(x, y), 1e-10);
}

TEST(PplCsv, RoundTrips) {
  TempDir dir;
  const auto recs = eval_dataset_ppl(small_model(), pack_rows(random_rows(5, 4)), Permutation::backward(5));
  write_ppl_csv(recs, dir / "p.csv");
  const auto back = read_ppl_csv(dir / "p.csv");
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_EQ(back[i].perplexity, recs[i].perplexity);
    EXPECT_EQ(back[i].mean_nll, recs[i].mean_nll);
    EXPECT_EQ(back[i].ordering, "backward");
  }
}

TEST(TwoAFCItem, RejectsIdenticalOrEmptySequences) {
  EXPECT_TRUE(throws_with([] { TwoAFCItem("a", {1, 2}, {1, 2}); }, "identical"));
  EXPECT_TRUE(throws_with([] { TwoAFCItem("a", {}, {1, 2}); }, "empty"));
}

TEST(TwoAFC, HigherJointProbabilityWins) {
  // Joint 0.3 at (1,1) versus 0.1 at (0,1).
  const std::vector<double> raw{0.4, 0.1, 0.2, 0.3};
  const TabularScorer scorer(TabularDistribution::normalize(raw, 2, 2));
  const std::vector<TwoAFCItem> items{{"x", {1, 1}, {0, 1}}};
  const auto res = two_afc(scorer, items, Permutation::forward(2));
  EXPECT_TRUE(res.rows[0].correct);
  EXPECT_GT(res.rows[0].signed_diff, 0.0);
  EXPECT_NEAR(res.rows[0].signed_diff, std::pow(0.1, -0.5) - std::pow(0.3, -0.5), 1e-12);
  EXPECT_EQ(res.accuracy, 1.0);

  const std::vector<TwoAFCItem> swapped{{"x", {0, 1}, {1, 1}}};
  const auto flipped = two_afc(scorer, swapped, Permutation::forward(2));
  EXPECT_FALSE(flipped.rows[0].correct);
  EXPECT_DOUBLE_EQ(flipped.rows[0].signed_diff, -res.rows[0].signed_diff);
}

TEST(TwoAFC, TiesGoToTheOriginalAndAreFlagged) {
  const std::vector<double> raw(4, 0.25);
  const TabularScorer scorer(TabularDistribution::normalize(raw, 2, 2));
  const std::vector<TwoAFCItem> items{{"t", {0, 0}, {1, 1}}};
  const auto res = two_afc(scorer, items, Permutation::forward(2));
  EXPECT_TRUE(res.rows[0].correct);
  EXPECT_TRUE(res.rows[0].flagged);
  EXPECT_EQ(res.flagged, 1u);
}

TEST(TwoAFC, OracleItemsScorePerfectlyUnderAnyOrdering) {
  const auto dist = TabularDistribution::random(3, 4, 11);
  const auto items = make_oracle_items(dist, 100, 5);
  ASSERT_EQ(items.size(), 100u);
  const TabularScorer scorer(dist);
  const auto fwd = two_afc(scorer, items, Permutation::forward(4));
  const auto bwd = two_afc(scorer, items, Permutation::backward(4));
  const auto fix = two_afc(scorer, items, Permutation::fixed(4, 7));
  EXPECT_EQ(fwd.accuracy, 1.0);
  EXPECT_EQ(fwd.flagged, 0u);
  for (const auto* other : {&bwd, &fix}) {
    EXPECT_EQ(other->accuracy, 1.0);
    for (std::size_t i = 0; i < items.size(); ++i) {
      EXPECT_EQ(other->rows[i].correct, fwd.rows[i].correct);
      EXPECT_NEAR(other->rows[i].signed_diff, fwd.rows[i].signed_diff, 1e-9 * fwd.rows[i].pp_altered);
    }
  }
}

TEST(TwoAFC, CsvOutputs) {
  TempDir dir;
  const auto dist = TabularDistribution::random(2, 3, 1);
  const TabularScorer scorer(dist);
  const auto res = two_afc(scorer, make_oracle_items(dist, 5, 1), Permutation::forward(3));
  res.write_csv(dir / "rows.csv");
  res.write_summary_csv(dir / "summary.csv");
  std::ifstream rows(dir / "rows.csv"), summary(dir / "summary.csv");
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line, "item_id,pp_original,pp_altered,signed_diff,correct,flagged");
  std::getline(summary, line);
  EXPECT_EQ(line, "accuracy,n_items,n_flagged");
  std::getline(summary, line);
  EXPECT_EQ(line, "1,5,0");
}

TEST(Items, SaveLoadRoundTripAndTokenizerEncoding) {
  TempDir dir;
  const auto items = make_oracle_items(TabularDistribution::random(3, 3, 2), 10, 3);
  save_items(items, dir / "items.tsv");
  const auto back = load_items(dir / "items.tsv", nullptr);
  ASSERT_EQ(back.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(back[i].id, items[i].id);
    EXPECT_EQ(back[i].original, items[i].original);
    EXPECT_EQ(back[i].altered, items[i].altered);
    EXPECT_EQ(back[i].tag, "oracle");
  }
  const auto tok = tokenize::Tokenizer::train("the cat sat on the mat", 260);
  std::ofstream(dir / "text.tsv") << "a\tthe cat\tthe mat\n";
  const auto text = load_items(dir / "text.tsv", &tok);
  EXPECT_EQ(text[0].original, tok.encode("the cat"));
  std::ofstream(dir / "bad.tsv") << "a\tonly two\n";
  EXPECT_TRUE(throws_with([&] { load_items(dir / "bad.tsv", &tok); }, "expected item_id"));
}

TEST(DifficultyCorrelation, SelfNegatedAndReference) {
  const NamedVector a{"a", {1, 3, 2, 5, 4}};
  const NamedVector neg{"neg", {-1, -3, -2, -5, -4}};
  const std::vector<NamedVector> vs{a, neg};
  const auto m = difficulty_correlation(vs, NamedVector{"human", {1, 3, 2, 5, 4}});
  ASSERT_EQ(m.names, (std::vector<std::string>{"a", "neg", "human"}));
  EXPECT_NEAR(m.r[0][0], 1.0, 1e-15);
  EXPECT_NEAR(m.r[0][1], -1.0, 1e-15);
  EXPECT_NEAR(m.r[0][2], 1.0, 1e-15);
  const std::vector<NamedVector> flat{a, {"flat", {1, 1, 1, 1, 1}}};
  EXPECT_TRUE(throws_with([&] { difficulty_correlation(flat); }, "zero variance"));
}

TEST(DifficultyCorrelation, IndependentNoiseIsNearlyUncorrelated) {
  int within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist;
    NamedVector x{"x", {}}, y{"y", {}};
    for (int i = 0; i < 200; ++i) {
      x.values.push_back(dist(rng));
      y.values.push_back(dist(rng));
    }
    const std::vector<NamedVector> vs{x, y};
    if (std::abs(difficulty_correlation(vs).r[0][1]) < 0.2) ++within;
  }
  EXPECT_GE(within, 99);
}

TEST(Reference, MissingIdsAreListed) {
  TempDir dir;
  std::ofstream(dir / "ref.csv") << "item_id,value\nitem1,0.5\nitem3,0.25\n";
  const auto ref = read_reference_csv(dir / "ref.csv");
  const auto items = make_oracle_items(TabularDistribution::random(2, 3, 4), 3, 1);
  EXPECT_TRUE(throws_with([&] { align_reference(ref, items); }, "missing item ids: item2"));
  std::ofstream(dir / "ref2.csv") << "item_id,value\nitem1,0.5\nitem2,1\nitem3,0.25\n";
  const auto aligned = align_reference(read_reference_csv(dir / "ref2.csv"), items);
  EXPECT_EQ(aligned.values, (std::vector<double>{0.5, 1, 0.25}));
}
