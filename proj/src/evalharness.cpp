#include "factorix/evalharness.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "factorix/error.hpp"
#include "factorix/stats.hpp"

namespace factorix::eval {

ModelScorer::ModelScorer(model::Checkpoint ckpt) : ckpt_(std::move(ckpt)) {}

double ModelScorer::nll(std::span<const TokenId> tokens, const ordering::Permutation& sigma) const {
  require(!tokens.empty() && static_cast<int>(tokens.size()) <= max_length(), "ModelScorer: sequence length " +
                                                                                  std::to_string(tokens.size()) +
                                                                                  " outside the window");
  require(sigma.size() == static_cast<int>(tokens.size()), "ModelScorer: ordering length does not match the sequence");
  std::vector<TokenId> window(tokens.size() + 1);
  window[0] = tokenize::kBosId;
  for (int i = 0; i < sigma.size(); ++i) window[static_cast<std::size_t>(i) + 1] = tokens[static_cast<std::size_t>(sigma[i])];
  model::Transformer<float> net(ckpt_.config);
  net.forward(ckpt_.params, window, 1, static_cast<int>(window.size()));
  return net.row_nll()[0];
}

double TabularScorer::nll(std::span<const TokenId> tokens, const ordering::Permutation& sigma) const {
  require(static_cast<int>(tokens.size()) == dist_.seq_len(), "TabularScorer: sequence length must equal n");
  probcore::SequenceAssignment seq{std::vector<int>(tokens.begin(), tokens.end())};
  const probcore::Real pp = probcore::perplexity_via_factorization(dist_, seq, sigma);
  return static_cast<double>(static_cast<probcore::Real>(tokens.size()) * std::log(pp));
}

ordering::Permutation fit_ordering(const ordering::Permutation& ordering, int length) {
  if (ordering.size() == length) return ordering;
  switch (ordering.kind()) {
    case ordering::OrderingKind::forward: return ordering::Permutation::forward(length);
    case ordering::OrderingKind::backward: return ordering::Permutation::backward(length);
    default:
      fail("ordering " + ordering.label() + " covers " + std::to_string(ordering.size()) +
           " positions; permuted orderings are only defined on full-window items (got " + std::to_string(length) +
           " tokens)");
  }
}

PerplexityRecord sequence_perplexity(const SequenceScorer& scorer, std::span<const TokenId> tokens,
                                     const ordering::Permutation& ordering, std::string id) {
  require(!tokens.empty(), "sequence_perplexity: empty sequence");
  PerplexityRecord rec;
  rec.id = std::move(id);
  rec.ordering = ordering.label();
  const int limit = scorer.max_length();
  if (static_cast<int>(tokens.size()) != limit) rec.flagged = true;
  if (static_cast<int>(tokens.size()) > limit) tokens = tokens.first(static_cast<std::size_t>(limit));
  const auto sigma = fit_ordering(ordering, static_cast<int>(tokens.size()));
  const double total = scorer.nll(tokens, sigma);
  require(std::isfinite(total), "sequence_perplexity: non-finite NLL for item '" + rec.id + "'");
  rec.mean_nll = total / static_cast<double>(tokens.size());
  rec.perplexity = std::exp(rec.mean_nll);
  return rec;
}

std::vector<PerplexityRecord> eval_dataset_ppl(const model::Checkpoint& ckpt, const tokenize::PackedDataset& data,
                                               const ordering::Permutation& ordering, int batch_size) {
  require(data.tokenizer_hash() == ckpt.meta.tokenizer_hash,
          "tokenizer provenance mismatch: dataset " + data.tokenizer_hash() + " vs checkpoint " +
              ckpt.meta.tokenizer_hash);
  std::vector<PerplexityRecord> out;
  if (data.empty()) return out;
  require(data.window() == static_cast<std::uint32_t>(ckpt.config.window), "dataset window does not match the model");
  require(ordering.size() == ckpt.config.window - 1, "ordering does not cover the model window");
  const int w = ckpt.config.window;
  model::Transformer<float> net(ckpt.config);
  std::vector<TokenId> tokens;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    tokens.resize((end - start) * static_cast<std::size_t>(w));
    for (std::size_t r = start; r < end; ++r) {
      ordering::apply_to_span<TokenId>(ordering, data.sequence(r),
                                       std::span<TokenId>(tokens).subspan((r - start) * w, static_cast<std::size_t>(w)));
    }
    net.forward(ckpt.params, tokens, static_cast<int>(end - start), w);
    const auto nll = net.row_nll();
    for (std::size_t r = start; r < end; ++r) {
      PerplexityRecord rec;
      rec.id = std::to_string(r);
      rec.ordering = ordering.label();
      rec.mean_nll = nll[r - start] / (w - 1);
      require(std::isfinite(rec.mean_nll), "eval_dataset_ppl: non-finite NLL at row " + std::to_string(r));
      rec.perplexity = std::exp(rec.mean_nll);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

void write_ppl_csv(std::span<const PerplexityRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "sequence_id,perplexity,mean_nll,ordering,flagged\n";
  for (const auto& r : records) {
    out << r.id << ',' << r.perplexity << ',' << r.mean_nll << ',' << r.ordering << ',' << (r.flagged ? 1 : 0) << '\n';
  }
}

std::vector<PerplexityRecord> read_ppl_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "sequence_id,perplexity,mean_nll,ordering,flagged",
          path.string() + ": not a perplexity CSV");
  std::vector<PerplexityRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    PerplexityRecord r;
    std::string pp, nll, flagged;
    std::getline(fields, r.id, ',');
    std::getline(fields, pp, ',');
    std::getline(fields, nll, ',');
    std::getline(fields, r.ordering, ',');
    std::getline(fields, flagged, ',');
    try {
      r.perplexity = std::stod(pp);
      r.mean_nll = std::stod(nll);
    } catch (const std::exception&) {
      fail(path.string() + ": malformed row '" + line + "'");
    }
    r.flagged = flagged == "1";
    out.push_back(std::move(r));
  }
  return out;
}

TwoAFCItem::TwoAFCItem(std::string id_, std::vector<TokenId> original_, std::vector<TokenId> altered_,
                       std::string tag_)
    : id(std::move(id_)), original(std::move(original_)), altered(std::move(altered_)), tag(std::move(tag_)) {
  require(!original.empty() && !altered.empty(), "2AFC item '" + id + "' has an empty sequence");
  require(original != altered, "2AFC item '" + id + "': original and altered sequences are identical");
}

std::vector<double> TwoAFCResult::difficulty() const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.signed_diff);
  return out;
}

void TwoAFCResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "item_id,pp_original,pp_altered,signed_diff,correct,flagged\n";
  for (const auto& r : rows) {
    out << r.id << ',' << r.pp_original << ',' << r.pp_altered << ',' << r.signed_diff << ',' << (r.correct ? 1 : 0)
        << ',' << (r.flagged ? 1 : 0) << '\n';
  }
}

void TwoAFCResult::write_summary_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "accuracy,n_items,n_flagged\n" << accuracy << ',' << rows.size() << ',' << flagged << '\n';
}

TwoAFCResult two_afc(const SequenceScorer& scorer, std::span<const TwoAFCItem> items,
                     const ordering::Permutation& ordering) {
  require(!items.empty(), "two_afc: no items");
  TwoAFCResult res;
  std::size_t correct = 0;
  for (const auto& item : items) {
    const auto a = sequence_perplexity(scorer, item.original, ordering, item.id);
    const auto b = sequence_perplexity(scorer, item.altered, ordering, item.id);
    TwoAFCRow row;
    row.id = item.id;
    row.pp_original = a.perplexity;
    row.pp_altered = b.perplexity;
    row.signed_diff = b.perplexity - a.perplexity;
    row.correct = a.perplexity <= b.perplexity;
    row.flagged = a.perplexity == b.perplexity || a.flagged || b.flagged;
    correct += row.correct ? 1 : 0;
    res.flagged += row.flagged ? 1 : 0;
    res.rows.push_back(std::move(row));
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
  return res;
}

void CorrelationMatrix::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "a,b,pearson_r\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t j = 0; j < names.size(); ++j) out << names[i] << ',' << names[j] << ',' << r[i][j] << '\n';
  }
}

CorrelationMatrix difficulty_correlation(std::span<const NamedVector> vectors,
                                         const std::optional<NamedVector>& reference) {
  std::vector<NamedVector> all(vectors.begin(), vectors.end());
  if (reference) all.push_back(*reference);
  require(!all.empty(), "difficulty_correlation: no vectors");
  for (const auto& v : all) {
    require(v.values.size() == all.front().values.size(), "difficulty_correlation: vectors differ in length");
    require(v.values.size() >= 3, "difficulty_correlation: need at least 3 items");
  }
  CorrelationMatrix m;
  for (const auto& v : all) m.names.push_back(v.name);
  m.r.assign(all.size(), std::vector<double>(all.size(), 1.0));
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = 0; j < all.size(); ++j) {
      m.r[i][j] = stats::pearson(all[i].values, all[j].values).r;
    }
  }
  return m;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::vector<TokenId> parse_ids(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::vector<TokenId> ids;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      require(used == tok.size() && v >= 0, "");
      ids.push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      fail(where + ": '" + tok + "' is not a token id");
    }
  }
  return ids;
}

}  // namespace

std::vector<TwoAFCItem> load_items(const std::filesystem::path& path, const tokenize::Tokenizer* tokenizer) {
  std::ifstream in(path);
  require(in.good(), "cannot open items file " + path.string());
  std::vector<TwoAFCItem> items;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    require(cols.size() == 3 || cols.size() == 4, where + ": expected item_id, original, altered[, tag]");
    auto encode = [&](const std::string& text) {
      return tokenizer != nullptr ? tokenizer->encode(text) : parse_ids(text, where);
    };
    items.emplace_back(cols[0], encode(cols[1]), encode(cols[2]), cols.size() == 4 ? cols[3] : "");
  }
  require(!items.empty(), "items file " + path.string() + " holds no items");
  return items;
}

void save_items(std::span<const TwoAFCItem> items, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  auto ids = [&](const std::vector<TokenId>& seq) {
    std::string s;
    for (std::size_t i = 0; i < seq.size(); ++i) s += (i ? " " : "") + std::to_string(seq[i]);
    return s;
  };
  for (const auto& item : items) {
    out << item.id << '\t' << ids(item.original) << '\t' << ids(item.altered);
    if (!item.tag.empty()) out << '\t' << item.tag;
    out << '\n';
  }
}

std::vector<TwoAFCItem> make_oracle_items(const probcore::TabularDistribution& dist, std::size_t count,
                                          std::uint64_t seed) {
  require(dist.entries() >= 2, "make_oracle_items: distribution has a single sequence");
  std::mt19937_64 rng(seed);
  std::vector<TwoAFCItem> items;
  const auto probs = dist.probs();
  for (std::size_t attempts = 0; items.size() < count; ++attempts) {
    require(attempts < 1000 * count + 1000, "make_oracle_items: distribution has too few distinguishable pairs");
    std::size_t a = rng() % dist.entries();
    std::size_t b = rng() % dist.entries();
    if (probs[a] < probs[b]) std::swap(a, b);
    if (a == b || !(probs[a] > probs[b] * (1 + 1e-6))) continue;
    auto tokens = [&](std::size_t index) {
      const auto values = dist.sequence_at(index).values;
      return std::vector<TokenId>(values.begin(), values.end());
    };
    items.emplace_back("item" + std::to_string(items.size() + 1), tokens(a), tokens(b), "oracle");
  }
  return items;
}

std::map<std::string, double> read_reference_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open reference " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), path.string() + ": empty reference file");
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, path.string() + ": malformed row '" + line + "'");
    try {
      out[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      fail(path.string() + ": malformed value in row '" + line + "'");
    }
  }
  return out;
}

NamedVector align_reference(const std::map<std::string, double>& reference, std::span<const TwoAFCItem> items,
                            std::string name) {
  NamedVector v{std::move(name), {}};
  std::string missing;
  for (const auto& item : items) {
    const auto it = reference.find(item.id);
    if (it == reference.end()) {
      missing += (missing.empty() ? "" : ", ") + item.id;
      continue;
    }
    v.values.push_back(it->second);
  }
  require(missing.empty(), "reference is missing item ids: " + missing);
  return v;
}

}  // namespace factorix::eval
