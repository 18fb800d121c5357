#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "factorix/diagnostics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace factorix;
using namespace factorix::diagnostics;
namespace oracle = factorix::testing::oracle;
using factorix::testing::TempDir;
using factorix::testing::throws_with;
using ordering::Permutation;
using Vec = std::vector<double>;

namespace {

model::AttentionRecord random_attention(int layers, int heads, int length, oracle::Fuzz& fuzz) {
  model::AttentionRecord r;
  r.layers = static_cast<std::uint32_t>(layers);
  r.heads = static_cast<std::uint32_t>(heads);
  r.length = static_cast<std::uint32_t>(length);
  r.weights.assign(static_cast<std::size_t>(layers * heads * length * length), 0.0f);
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < length; ++i) {
        const Vec row = fuzz.probability_row(static_cast<std::size_t>(i) + 1, (l + h + i) % 3 == 0);
        for (int j = 0; j <= i; ++j)
          r.weights[((static_cast<std::size_t>(l) * heads + h) * length + i) * length + j] =
              static_cast<float>(row[static_cast<std::size_t>(j)]);
      }
  return r;
}

Vec row_of(const model::AttentionRecord& r, int l, int h, int i) {
  Vec row;
  for (int j = 0; j <= i; ++j) row.push_back(r.at(l, h, i, j));
  return row;
}

std::vector<double> gaussian(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST(NormalizedEntropy, WorkedValues) {
  EXPECT_NEAR(normalized_entropy(Vec{0.25, 0.25, 0.25, 0.25}), 1.0, 1e-15);
  EXPECT_EQ(normalized_entropy(Vec{0, 1, 0}), 0.0);
  EXPECT_EQ(normalized_entropy(Vec{1}), 0.0);
  EXPECT_NEAR(normalized_entropy(Vec{0.7, 0.1, 0.1, 0.1}), 0.6784, 5e-5);
  EXPECT_NEAR(normalized_entropy(Vec{0.7, 0.1, 0.1, 0.1}), oracle::normalized_entropy(Vec{0.7, 0.1, 0.1, 0.1}), 1e-15);
  EXPECT_TRUE(throws_with([] { normalized_entropy(Vec{0.5, 0.4}); }, "not stochastic"));
  EXPECT_TRUE(throws_with([] { normalized_entropy(Vec{1.5, -0.5}); }, "negative"));
}

TEST(NormalizedRanks, WorkedValues) {
  const auto r = normalized_ranks(Vec{0.7, 0.1, 0.15, 0.05});
  EXPECT_DOUBLE_EQ(r[0], 1.0);
  EXPECT_DOUBLE_EQ(r[1], 1.0 / 3);
  EXPECT_DOUBLE_EQ(r[2], 2.0 / 3);
  EXPECT_DOUBLE_EQ(r[3], 0.0);
  EXPECT_EQ(normalized_ranks(Vec{0.25, 0.25, 0.25, 0.25}), (Vec{0.5, 0.5, 0.5, 0.5}));
  EXPECT_EQ(normalized_ranks(Vec{1.0}), (Vec{0.0}));
}

TEST(RowMetrics, FuzzAgainstBruteForce) {
  oracle::Fuzz fuzz(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec row = fuzz.probability_row(1 + fuzz.rng() % 64, trial % 3 == 0);
    SCOPED_TRACE(trial);
    const double h = normalized_entropy(row);
    ASSERT_NEAR(h, oracle::normalized_entropy(row), 1e-10);
    ASSERT_GE(h, 0.0);
    ASSERT_LE(h, 1.0);
    const auto ranks = normalized_ranks(row);
    const auto expect = oracle::normalized_ranks(row);
    for (std::size_t j = 0; j < row.size(); ++j) ASSERT_NEAR(ranks[j], expect[j], 1e-10);
    // Entropy is symmetric; ranks only see the order of the weights.
    Vec shuffled = row;
    std::shuffle(shuffled.begin(), shuffled.end(), fuzz.rng);
    ASSERT_NEAR(normalized_entropy(shuffled), h, 1e-12);
    Vec squared = row;
    double s = 0;
    for (double& p : squared) s += (p = p * p);
    for (double& p : squared) p /= s;
    ASSERT_EQ(normalized_ranks(squared), ranks);
  }
}

TEST(AttentionEntropy, AveragesHeadsThenSequences) {
  oracle::Fuzz fuzz(3);
  std::vector<model::AttentionRecord> recs;
  for (int s = 0; s < 3; ++s) recs.push_back(random_attention(2, 3, 6, fuzz));
  const auto profile = attention_entropy(recs);
  ASSERT_EQ(profile.layers, (std::vector<int>{0, 1}));
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 6; ++i) {
      long double over_seq = 0;
      for (const auto& r : recs) {
        long double over_heads = 0;
        for (int h = 0; h < 3; ++h) over_heads += oracle::normalized_entropy(row_of(r, l, h, i));
        over_seq += over_heads / 3;
      }
      EXPECT_NEAR(profile.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)],
                  static_cast<double>(over_seq / 3), 1e-10);
    }
  EXPECT_EQ(profile.values[0][0], 0.0);
  const auto only = attention_entropy(recs, {1});
  EXPECT_EQ(only.values[0], profile.values[1]);
  EXPECT_NEAR(mean_entropy(profile, 0, 3), (profile.values[0][2] + profile.values[0][3] + profile.values[0][4] +
                                            profile.values[0][5]) / 4, 1e-15);
  EXPECT_TRUE(throws_with([&] { attention_entropy(recs, {2}); }, "out of range"));
}

TEST(AttentionRankBias, AveragesPairsByDistance) {
  oracle::Fuzz fuzz(4);
  std::vector<model::AttentionRecord> recs;
  for (int s = 0; s < 2; ++s) recs.push_back(random_attention(1, 2, 7, fuzz));
  const auto profile = attention_rank_bias(recs);
  for (int d = 0; d < 7; ++d) {
    long double over_seq = 0;
    for (const auto& r : recs) {
      long double over_heads = 0;
      for (int h = 0; h < 2; ++h) {
        long double sum = 0;
        int count = 0;
        for (int i = d; i < 7; ++i) {
          sum += oracle::normalized_ranks(row_of(r, 0, h, i))[static_cast<std::size_t>(i - d)];
          ++count;
        }
        over_heads += sum / count;
      }
      over_seq += over_heads / 2;
    }
    EXPECT_NEAR(profile.values[0][static_cast<std::size_t>(d)], static_cast<double>(over_seq / 2), 1e-10);
  }
}

TEST(AttentionProfiles, RejectNonStochasticRows) {
  oracle::Fuzz fuzz(5);
  auto r = random_attention(1, 1, 4, fuzz);
  r.weights[5] += 0.1f;
  const std::vector<model::AttentionRecord> recs{r};
  EXPECT_TRUE(throws_with([&] { attention_entropy(recs); }, "not stochastic"));
  EXPECT_TRUE(throws_with([&] { attention_rank_bias(recs); }, "not stochastic"));
}

TEST(AttentionProfiles, CsvHeaders) {
  TempDir dir;
  oracle::Fuzz fuzz(6);
  const std::vector<model::AttentionRecord> recs{random_attention(1, 1, 4, fuzz)};
  attention_entropy(recs).write_csv(dir / "e.csv", "fwd");
  attention_rank_bias(recs).write_csv(dir / "r.csv");
  EXPECT_EQ(first_line(dir / "e.csv"), "run,layer,context_size,h_norm");
  EXPECT_EQ(first_line(dir / "r.csv"), "layer,distance,r_norm");
}

TEST(BuildRdm, WorkedValues) {
  const std::vector<double> same{1, 2, 1, 2, 1, 2};
  for (double v : build_rdm(same, 3, 2).values) EXPECT_NEAR(v, 0.0, 1e-12);
  const std::vector<double> ortho{1, 0, 0, 1};
  EXPECT_NEAR(build_rdm(ortho, 2, 2).at(0, 1), 1.0, 1e-15);
  const std::vector<double> anti{1, 2, -1, -2};
  EXPECT_NEAR(build_rdm(anti, 2, 2).at(0, 1), 2.0, 1e-15);
  const std::vector<double> zero{1, 2, 0, 0};
  EXPECT_TRUE(throws_with([&] { build_rdm(zero, 2, 2); }, "zero-norm"));
}

TEST(BuildRdm, SymmetricBoundedAndScaleInvariant) {
  auto h = gaussian(20 * 8, 1);
  const auto rdm = build_rdm(h, 20, 8);
  for (int i = 0; i < 20; ++i) {
    EXPECT_NEAR(rdm.at(i, i), 0.0, 1e-6);
    for (int j = 0; j < 20; ++j) {
      EXPECT_EQ(rdm.at(i, j), rdm.at(j, i));
      EXPECT_GE(rdm.at(i, j), 0.0);
      EXPECT_LE(rdm.at(i, j), 2.0);
    }
  }
  for (int i = 0; i < 20; ++i)
    for (int k = 0; k < 8; ++k) h[static_cast<std::size_t>(i * 8 + k)] *= 0.5 + i;
  const auto scaled = build_rdm(h, 20, 8);
  for (std::size_t k = 0; k < rdm.values.size(); ++k) EXPECT_NEAR(scaled.values[k], rdm.values[k], 1e-12);
}

TEST(ReorderHidden, ForwardAndBackward) {
  std::vector<double> h = gaussian(6 * 3, 2);
  EXPECT_EQ(reorder_hidden<double>(h, 6, 3, Permutation::forward(5)), h);
  const auto once = reorder_hidden<double>(h, 6, 3, Permutation::backward(5));
  EXPECT_NE(once, h);
  EXPECT_EQ(reorder_hidden<double>(once, 6, 3, Permutation::backward(5)), h);
  EXPECT_TRUE(throws_with([&] { reorder_hidden<double>(h, 6, 3, Permutation::forward(4)); }, "permutation covers"));
}

TEST(ReorderHidden, TagTrackingRestoresForwardAlignment) {
  // Tag each "hidden state" with the token it was computed at: after reordering
  // a permuted window, row p must carry the token at forward position p.
  const auto perm = Permutation::fixed(9, 7);
  tokenize::PackedSequence window{{0}};
  for (int i = 1; i <= 9; ++i) window.tokens.push_back(100 + i);
  const auto permuted = ordering::apply_to_window(perm, window);
  std::vector<int> tags(permuted.tokens.begin(), permuted.tokens.end());
  EXPECT_NE(tags, window.tokens);
  EXPECT_EQ(reorder_hidden<int>(tags, 10, 1, perm), window.tokens);
}

TEST(Rsa, WorkedValues) {
  const auto h = gaussian(10 * 4, 3);
  const auto rdm = build_rdm(h, 10, 4);
  EXPECT_NEAR(rsa(rdm, rdm), 1.0, 1e-15);
  RDM flipped = rdm;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      if (i != j) flipped.values[static_cast<std::size_t>(i * 10 + j)] = 2 - rdm.at(i, j);
  EXPECT_NEAR(rsa(rdm, flipped), -1.0, 1e-15);
  const RDM a{3, {0, 1, 2, 1, 0, 3, 2, 3, 0}};
  const RDM b{3, {0, 3, 1, 3, 0, 2, 1, 2, 0}};
  EXPECT_DOUBLE_EQ(rsa(a, b), -0.5);
  EXPECT_DOUBLE_EQ(rsa(b, a), rsa(a, b));
  const RDM flat{3, {0, 1, 1, 1, 0, 1, 1, 1, 0}};
  EXPECT_TRUE(throws_with([&] { rsa(flat, a); }, "zero-variance rank vector"));
  EXPECT_TRUE(throws_with([&] { rsa(RDM{2, {0, 1, 1, 0}}, RDM{2, {0, 1, 1, 0}}); }, "at least 3"));
}

TEST(Rsa, IndependentGaussianStatesAreNearlyUncorrelated) {
  int within = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto a = build_rdm(gaussian(64 * 32, 1000 + 2 * seed), 64, 32);
    const auto b = build_rdm(gaussian(64 * 32, 1001 + 2 * seed), 64, 32);
    if (std::abs(rsa(a, b)) < 0.1) ++within;
  }
  EXPECT_GE(within, 99);
}

TEST(RsaByLayer, UndoesEachOrderingBeforeComparing) {
  // Two records holding the same states in different orders compare as identical.
  const auto base = gaussian(2 * 8 * 4, 9);
  model::HiddenRecord fwd{2, 8, 4, std::vector<float>(base.begin(), base.end())};
  const auto perm = Permutation::fixed(7, 3);
  model::HiddenRecord shuffled = fwd;
  for (int l = 0; l < 2; ++l) {
    const auto inv = ordering::invert(perm);
    const auto moved = reorder_hidden<float>(fwd.layer(l), 8, 4, inv);
    std::copy(moved.begin(), moved.end(), shuffled.states.begin() + l * 32);
  }
  for (double rho : rsa_by_layer(fwd, Permutation::forward(7), shuffled, perm)) EXPECT_NEAR(rho, 1.0, 1e-12);
}

TEST(DiagnosticsCsv, RsaAndStatsHeaders) {
  TempDir dir;
  const std::vector<RsaRow> rows{{0, "fwd~bwd", 0.5}};
  write_rsa_csv(rows, dir / "rsa.csv");
  EXPECT_EQ(first_line(dir / "rsa.csv"), "layer,pair,rho");
  const std::vector<StatsRow> stats_rows{{"fwd~bwd", {}}};
  write_stats_csv(stats_rows, dir / "stats.csv");
  EXPECT_EQ(first_line(dir / "stats.csv"), "pair,pearson_r,p_r,t,p_t,d");
}
