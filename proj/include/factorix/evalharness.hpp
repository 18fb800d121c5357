#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "factorix/model.hpp"
#include "factorix/ordering.hpp"
#include "factorix/probcore.hpp"
#include "factorix/tokenize.hpp"

namespace factorix::eval {

using tokenize::TokenId;

// Something that assigns a negative log-likelihood to a sequence of real
// tokens (no BOS) under a chosen factorization order.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  // Sum over all tokens of -ln P(X_sigma(i) | BOS, X_sigma(<i)); sigma.size()
  // equals tokens.size().
  virtual double nll(std::span<const TokenId> tokens, const ordering::Permutation& sigma) const = 0;
  // Longest sequence the scorer accepts without truncation.
  virtual int max_length() const = 0;
  virtual std::string describe() const = 0;
};

// Scores with a trained transformer: BOS + reordered tokens, one forward pass.
class ModelScorer : public SequenceScorer {
 public:
  explicit ModelScorer(model::Checkpoint ckpt);
  double nll(std::span<const TokenId> tokens, const ordering::Permutation& sigma) const override;
  int max_length() const override { return ckpt_.config.window - 1; }
  std::string describe() const override { return "model:" + ckpt_.meta.ordering; }
  const model::Checkpoint& checkpoint() const { return ckpt_; }

 private:
  model::Checkpoint ckpt_;
};

// Ground-truth scorer: token ids are the distribution's values and every
// conditional is exact.
class TabularScorer : public SequenceScorer {
 public:
  explicit TabularScorer(probcore::TabularDistribution dist) : dist_(std::move(dist)) {}
  double nll(std::span<const TokenId> tokens, const ordering::Permutation& sigma) const override;
  int max_length() const override { return dist_.seq_len(); }
  std::string describe() const override { return "tabular"; }

 private:
  probcore::TabularDistribution dist_;
};

struct PerplexityRecord {
  std::string id;
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::string ordering;
  bool flagged = false;  // shorter than, or truncated to, the scorer's window
};

// Adapts a window ordering to a sequence of `length` tokens.  Forward and
// backward shrink to the length; any other ordering needs the full length.
ordering::Permutation fit_ordering(const ordering::Permutation& ordering, int length);

// tokens exclude BOS.  Longer inputs are truncated to the scorer's window and
// flagged, shorter ones are scored as they are and flagged.
PerplexityRecord sequence_perplexity(const SequenceScorer& scorer, std::span<const TokenId> tokens,
                                     const ordering::Permutation& ordering, std::string id = {});

// One record per dataset row, in row order.  Requires the dataset's tokenizer
// hash to match the checkpoint's.
std::vector<PerplexityRecord> eval_dataset_ppl(const model::Checkpoint& ckpt, const tokenize::PackedDataset& data,
                                               const ordering::Permutation& ordering, int batch_size = 16);

void write_ppl_csv(std::span<const PerplexityRecord> records, const std::filesystem::path& path);
std::vector<PerplexityRecord> read_ppl_csv(const std::filesystem::path& path);

struct TwoAFCItem {
  std::string id;
  std::vector<TokenId> original;
  std::vector<TokenId> altered;
  std::string tag;

  // Throws when the two sequences are identical or either is empty.
  TwoAFCItem(std::string id, std::vector<TokenId> original, std::vector<TokenId> altered, std::string tag = {});
};

struct TwoAFCRow {
  std::string id;
  double pp_original = 0.0;
  double pp_altered = 0.0;
  double signed_diff = 0.0;  // pp_altered - pp_original
  bool correct = false;
  bool flagged = false;      // tie, short or truncated
};

struct TwoAFCResult {
  std::vector<TwoAFCRow> rows;
  double accuracy = 0.0;
  std::size_t flagged = 0;

  std::vector<double> difficulty() const;
  void write_csv(const std::filesystem::path& path) const;
  void write_summary_csv(const std::filesystem::path& path) const;
};

// Lower perplexity wins; ties go to the original and are flagged.
TwoAFCResult two_afc(const SequenceScorer& scorer, std::span<const TwoAFCItem> items,
                     const ordering::Permutation& ordering);

struct NamedVector {
  std::string name;
  std::vector<double> values;
};

struct CorrelationMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> r;

  void write_csv(const std::filesystem::path& path) const;
};

// Pairwise Pearson among the vectors, with the reference appended last.
CorrelationMatrix difficulty_correlation(std::span<const NamedVector> vectors,
                                         const std::optional<NamedVector>& reference = std::nullopt);

// "item_id<TAB>original<TAB>altered[<TAB>tag]" per line.  Text columns are
// encoded with the tokenizer, or parsed as space-separated ids when it is null.
std::vector<TwoAFCItem> load_items(const std::filesystem::path& path, const tokenize::Tokenizer* tokenizer);

// Writes items as token ids in the format load_items reads with a null tokenizer.
void save_items(std::span<const TwoAFCItem> items, const std::filesystem::path& path);

// `count` items drawn from `dist` whose original has strictly higher joint
// probability than its altered sequence (relative margin > 1e-6).  Token ids
// are the distribution's values.
std::vector<TwoAFCItem> make_oracle_items(const probcore::TabularDistribution& dist, std::size_t count,
                                          std::uint64_t seed);

// CSV "item_id,value" with a header row.
std::map<std::string, double> read_reference_csv(const std::filesystem::path& path);
// Values in item order; throws listing every item id the reference lacks.
NamedVector align_reference(const std::map<std::string, double>& reference, std::span<const TwoAFCItem> items,
                            std::string name = "reference");

}  // namespace factorix::eval
