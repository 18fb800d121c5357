#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "factorix/checkpoint.hpp"
#include "factorix/ordering.hpp"
#include "factorix/stats.hpp"

namespace factorix::diagnostics {

// Row entropy divided by ln(i) for a row of i weights; 0 when i == 1.  Throws
// when the row is not a probability vector within `tolerance`.
double normalized_entropy(std::span<const double> row, double tolerance = 1e-5);

// Midranks minus one, divided by (i - 1): 0 for the smallest weight, 1 for the
// largest.  A single weight gets 0.
std::vector<double> normalized_ranks(std::span<const double> row);

// values[l][i - 1] is the mean normalized entropy of rows with context size i
// in layers[l], averaged over heads, then over sequences.
struct EntropyProfile {
  std::vector<int> layers;
  int length = 0;
  std::vector<std::vector<double>> values;

  void write_csv(const std::filesystem::path& path, const std::string& label = {}) const;
};

// values[l][d] is the mean normalized rank over pairs (i, j) with j <= i and
// i - j = d, averaged over pairs, then heads, then sequences.
struct RankProfile {
  std::vector<int> layers;
  int length = 0;
  std::vector<std::vector<double>> values;

  void write_csv(const std::filesystem::path& path, const std::string& label = {}) const;
};

// Empty `layers` selects every layer.  All records must share L, H and T.
EntropyProfile attention_entropy(std::span<const model::AttentionRecord> records, std::vector<int> layers = {},
                                 double tolerance = 1e-4);
RankProfile attention_rank_bias(std::span<const model::AttentionRecord> records, std::vector<int> layers = {},
                                double tolerance = 1e-4);

// Mean of the profile over its context sizes >= min_context.
double mean_entropy(const EntropyProfile& profile, int layer_index, int min_context = 1);

struct RDM {
  int size = 0;
  std::vector<double> values;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * size + j]; }
  std::vector<double> upper_triangle() const;
};

// RDM_ij = 1 - cos(H_i, H_j) over a T x D row-major block.
RDM build_rdm(std::span<const float> hidden, int rows, int dim);
RDM build_rdm(std::span<const double> hidden, int rows, int dim);

// Undoes an ordering on a T x D block whose row 0 is BOS: the row that sits at
// permuted position p returns to its forward position.
template <typename T>
std::vector<T> reorder_hidden(std::span<const T> hidden, int rows, int dim, const ordering::Permutation& perm);

// Spearman correlation of the strict upper triangles.
double rsa(const RDM& a, const RDM& b);

// Layer-wise RSA between two HIDN records of the same sequence, each first put
// back in forward order with its own ordering.
std::vector<double> rsa_by_layer(const model::HiddenRecord& a, const ordering::Permutation& order_a,
                                 const model::HiddenRecord& b, const ordering::Permutation& order_b);

struct RsaRow {
  int layer = 0;
  std::string pair;
  double rho = 0.0;
};
void write_rsa_csv(std::span<const RsaRow> rows, const std::filesystem::path& path);

struct StatsRow {
  std::string pair;
  stats::Comparison stats;
};
void write_stats_csv(std::span<const StatsRow> rows, const std::filesystem::path& path);

}  // namespace factorix::diagnostics
