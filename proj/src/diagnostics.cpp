#include "factorix/diagnostics.hpp"

#include <cmath>
#include <fstream>

#include "factorix/error.hpp"

namespace factorix::diagnostics {

double normalized_entropy(std::span<const double> row, double tolerance) {
  require(!row.empty(), "entropy of an empty row");
  double sum = 0.0;
  for (double p : row) {
    require(std::isfinite(p) && p >= -tolerance, "attention row has a negative or non-finite weight");
    sum += p;
  }
  require(std::abs(sum - 1.0) <= tolerance, "attention row is not stochastic (sums to " + std::to_string(sum) + ")");
  if (row.size() == 1) return 0.0;
  double h = 0.0;
  for (double p : row) {
    if (p > 0) h -= p * std::log(p);
  }
  return std::clamp(h / std::log(static_cast<double>(row.size())), 0.0, 1.0);
}

std::vector<double> normalized_ranks(std::span<const double> row) {
  if (row.size() <= 1) return std::vector<double>(row.size(), 0.0);
  std::vector<double> r = stats::midranks(row);
  const double denom = static_cast<double>(row.size()) - 1.0;
  for (double& v : r) v = (v - 1.0) / denom;
  return r;
}

namespace {

std::vector<int> resolve_layers(std::span<const model::AttentionRecord> records, std::vector<int> layers) {
  require(!records.empty(), "no attention records");
  const auto& first = records.front();
  for (const auto& r : records) {
    require(r.layers == first.layers && r.heads == first.heads && r.length == first.length,
            "attention records disagree on L, H or T");
  }
  if (layers.empty()) {
    for (std::uint32_t l = 0; l < first.layers; ++l) layers.push_back(static_cast<int>(l));
  }
  for (int l : layers) {
    require(l >= 0 && l < static_cast<int>(first.layers), "layer " + std::to_string(l) + " out of range");
  }
  return layers;
}

std::vector<double> attention_row(const model::AttentionRecord& r, int layer, int head, int i) {
  std::vector<double> row(static_cast<std::size_t>(i) + 1);
  for (int j = 0; j <= i; ++j) row[static_cast<std::size_t>(j)] = r.at(layer, head, i, j);
  return row;
}

}  // namespace

EntropyProfile attention_entropy(std::span<const model::AttentionRecord> records, std::vector<int> layers,
                                 double tolerance) {
  EntropyProfile out;
  out.layers = resolve_layers(records, std::move(layers));
  const int t = static_cast<int>(records.front().length);
  const int heads = static_cast<int>(records.front().heads);
  out.length = t;
  out.values.assign(out.layers.size(), std::vector<double>(static_cast<std::size_t>(t), 0.0));
  for (std::size_t li = 0; li < out.layers.size(); ++li) {
    const int l = out.layers[li];
    for (int i = 0; i < t; ++i) {
      double over_sequences = 0.0;
      for (const auto& r : records) {
        double over_heads = 0.0;
        for (int h = 0; h < heads; ++h) over_heads += normalized_entropy(attention_row(r, l, h, i), tolerance);
        over_sequences += over_heads / heads;
      }
      out.values[li][static_cast<std::size_t>(i)] = over_sequences / static_cast<double>(records.size());
    }
  }
  return out;
}

RankProfile attention_rank_bias(std::span<const model::AttentionRecord> records, std::vector<int> layers,
                                double tolerance) {
  RankProfile out;
  out.layers = resolve_layers(records, std::move(layers));
  const int t = static_cast<int>(records.front().length);
  const int heads = static_cast<int>(records.front().heads);
  out.length = t;
  out.values.assign(out.layers.size(), std::vector<double>(static_cast<std::size_t>(t), 0.0));
  const auto tt = static_cast<std::size_t>(t);
  for (std::size_t li = 0; li < out.layers.size(); ++li) {
    const int l = out.layers[li];
    std::vector<double> over_sequences(tt, 0.0);
    for (const auto& r : records) {
      std::vector<double> over_heads(tt, 0.0);
      for (int h = 0; h < heads; ++h) {
        std::vector<double> sum(tt, 0.0);
        std::vector<int> count(tt, 0);
        for (int i = 0; i < t; ++i) {
          const auto row = attention_row(r, l, h, i);
          normalized_entropy(row, tolerance);  // validates the row
          const auto ranks = normalized_ranks(row);
          for (int j = 0; j <= i; ++j) {
            sum[static_cast<std::size_t>(i - j)] += ranks[static_cast<std::size_t>(j)];
            ++count[static_cast<std::size_t>(i - j)];
          }
        }
        for (std::size_t d = 0; d < tt; ++d) over_heads[d] += sum[d] / count[d];
      }
      for (std::size_t d = 0; d < tt; ++d) over_sequences[d] += over_heads[d] / heads;
    }
    for (std::size_t d = 0; d < tt; ++d) out.values[li][d] = over_sequences[d] / static_cast<double>(records.size());
  }
  return out;
}

double mean_entropy(const EntropyProfile& profile, int layer_index, int min_context) {
  require(layer_index >= 0 && layer_index < static_cast<int>(profile.layers.size()), "layer index out of range");
  require(min_context >= 1 && min_context <= profile.length, "min_context out of range");
  double s = 0.0;
  for (int i = min_context; i <= profile.length; ++i) s += profile.values[static_cast<std::size_t>(layer_index)][i - 1];
  return s / (profile.length - min_context + 1);
}

void EntropyProfile::write_csv(const std::filesystem::path& path, const std::string& label) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << (label.empty() ? "" : "run,") << "layer,context_size,h_norm\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (int i = 1; i <= length; ++i) {
      if (!label.empty()) out << label << ',';
      out << layers[l] << ',' << i << ',' << values[l][static_cast<std::size_t>(i) - 1] << '\n';
    }
  }
}

void RankProfile::write_csv(const std::filesystem::path& path, const std::string& label) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << (label.empty() ? "" : "run,") << "layer,distance,r_norm\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (int d = 0; d < length; ++d) {
      if (!label.empty()) out << label << ',';
      out << layers[l] << ',' << d << ',' << values[l][static_cast<std::size_t>(d)] << '\n';
    }
  }
}

std::vector<double> RDM::upper_triangle() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(size) * (size - 1) / 2);
  for (int i = 0; i < size; ++i) {
    for (int j = i + 1; j < size; ++j) out.push_back(at(i, j));
  }
  return out;
}

namespace {

template <typename T>
RDM build_rdm_impl(std::span<const T> hidden, int rows, int dim) {
  require(rows >= 1 && dim >= 1, "build_rdm: empty hidden block");
  require(hidden.size() == static_cast<std::size_t>(rows) * dim, "build_rdm: hidden block has the wrong size");
  const auto d = static_cast<std::size_t>(dim);
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t e = 0; e < d; ++e) s += static_cast<double>(hidden[i * d + e]) * hidden[i * d + e];
    require(s > 0.0, "build_rdm: zero-norm hidden state at row " + std::to_string(i));
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  RDM rdm;
  rdm.size = rows;
  rdm.values.assign(static_cast<std::size_t>(rows) * rows, 0.0);
  for (int i = 0; i < rows; ++i) {
    for (int j = i + 1; j < rows; ++j) {
      double dot = 0.0;
      for (std::size_t e = 0; e < d; ++e) dot += static_cast<double>(hidden[i * d + e]) * hidden[j * d + e];
      const double cos = std::clamp(dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]),
                                    -1.0, 1.0);
      rdm.values[static_cast<std::size_t>(i) * rows + j] = 1.0 - cos;
      rdm.values[static_cast<std::size_t>(j) * rows + i] = 1.0 - cos;
    }
  }
  return rdm;
}

}  // namespace

RDM build_rdm(std::span<const float> hidden, int rows, int dim) { return build_rdm_impl(hidden, rows, dim); }
RDM build_rdm(std::span<const double> hidden, int rows, int dim) { return build_rdm_impl(hidden, rows, dim); }

template <typename T>
std::vector<T> reorder_hidden(std::span<const T> hidden, int rows, int dim, const ordering::Permutation& perm) {
  require(hidden.size() == static_cast<std::size_t>(rows) * dim, "reorder_hidden: hidden block has the wrong size");
  require(perm.size() == rows - 1, "reorder_hidden: permutation covers " + std::to_string(perm.size()) +
                                       " positions but the block has " + std::to_string(rows) + " rows with BOS");
  const auto d = static_cast<std::size_t>(dim);
  std::vector<T> out(hidden.size());
  std::copy_n(hidden.begin(), d, out.begin());
  for (int p = 0; p < perm.size(); ++p) {
    const auto src = static_cast<std::size_t>(p + 1);
    const auto dst = static_cast<std::size_t>(perm[p] + 1);
    std::copy_n(hidden.begin() + static_cast<std::ptrdiff_t>(src * d), d, out.begin() + static_cast<std::ptrdiff_t>(dst * d));
  }
  return out;
}

template std::vector<float> reorder_hidden<float>(std::span<const float>, int, int, const ordering::Permutation&);
template std::vector<double> reorder_hidden<double>(std::span<const double>, int, int, const ordering::Permutation&);
template std::vector<int> reorder_hidden<int>(std::span<const int>, int, int, const ordering::Permutation&);

double rsa(const RDM& a, const RDM& b) {
  require(a.size == b.size, "rsa: RDM shapes differ");
  require(a.size >= 3, "rsa: need at least 3 states");
  const auto ua = a.upper_triangle();
  const auto ub = b.upper_triangle();
  return stats::spearman(ua, ub).r;
}

std::vector<double> rsa_by_layer(const model::HiddenRecord& a, const ordering::Permutation& order_a,
                                 const model::HiddenRecord& b, const ordering::Permutation& order_b) {
  require(a.layers_plus_one == b.layers_plus_one && a.length == b.length,
          "rsa_by_layer: hidden records disagree on layer count or length");
  std::vector<double> out;
  for (std::uint32_t l = 0; l < a.layers_plus_one; ++l) {
    const int t = static_cast<int>(a.length);
    const auto ha = reorder_hidden<float>(a.layer(static_cast<int>(l)), t, static_cast<int>(a.dim), order_a);
    const auto hb = reorder_hidden<float>(b.layer(static_cast<int>(l)), t, static_cast<int>(b.dim), order_b);
    out.push_back(rsa(build_rdm(std::span<const float>(ha), t, static_cast<int>(a.dim)),
                      build_rdm(std::span<const float>(hb), t, static_cast<int>(b.dim))));
  }
  return out;
}

void write_rsa_csv(std::span<const RsaRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "layer,pair,rho\n";
  for (const auto& r : rows) out << r.layer << ',' << r.pair << ',' << r.rho << '\n';
}

void write_stats_csv(std::span<const StatsRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "pair,pearson_r,p_r,t,p_t,d\n";
  for (const auto& r : rows) {
    out << r.pair << ',' << r.stats.pearson_r << ',' << r.stats.p_r << ',' << r.stats.t << ',' << r.stats.p_t << ','
        << r.stats.d << '\n';
  }
}

}  // namespace factorix::diagnostics
