#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "factorix/ordering.hpp"

// Exact finite probability models and the perplexity-invariance checks built
// on them.  All arithmetic is long double; products are accumulated as logs.
namespace factorix::probcore {

using Real = long double;
using ordering::Permutation;

inline constexpr std::size_t kDefaultTableCap = std::size_t{1} << 24;

// One value per position X_1..X_n, each in [0, V).
struct SequenceAssignment {
  std::vector<int> values;
};

// Values for a subset of positions; unassigned slots hold kUnassigned.
class PartialAssignment {
 public:
  static constexpr int kUnassigned = -1;

  explicit PartialAssignment(int seq_len) : slots_(static_cast<std::size_t>(seq_len), kUnassigned) {}

  PartialAssignment& assign(int position, int value);
  bool assigned(int position) const { return slots_.at(static_cast<std::size_t>(position)) != kUnassigned; }
  int operator[](int position) const { return slots_.at(static_cast<std::size_t>(position)); }
  int size() const { return static_cast<int>(slots_.size()); }

 private:
  std::vector<int> slots_;
};

// Joint mass over V^n sequences, row-major with position 0 most significant.
class TabularDistribution {
 public:
  // Divides by the total; rejects all-zero, negative or non-finite input.
  static TabularDistribution normalize(std::span<const double> raw, int vocab_size, int seq_len,
                                       std::size_t cap = kDefaultTableCap);
  // Entries drawn uniformly from [floor, 1) and then normalized.
  static TabularDistribution random(int vocab_size, int seq_len, std::uint64_t seed, double floor = 0.0);

  int vocab_size() const { return vocab_size_; }
  int seq_len() const { return seq_len_; }
  std::size_t entries() const { return probs_.size(); }
  std::span<const Real> probs() const { return probs_; }

  std::size_t index_of(std::span<const int> values) const;
  SequenceAssignment sequence_at(std::size_t index) const;

  // Mass of all sequences consistent with the partial assignment.
  Real marginal(const PartialAssignment& context) const;

 private:
  TabularDistribution(int vocab_size, int seq_len, std::vector<Real> probs);

  int vocab_size_;
  int seq_len_;
  std::vector<Real> probs_;
};

// Order-k Markov chain over a finite vocabulary.
class MarkovSource {
 public:
  // transition: V^k rows of V next-token probabilities; initial: V^k k-gram masses.
  MarkovSource(int order, int vocab_size, std::vector<double> transition, std::vector<double> initial);

  // Rows drawn from a symmetric Dirichlet(alpha); the initial k-gram law is uniform.
  static MarkovSource random(int order, int vocab_size, double alpha, std::uint64_t seed);

  int order() const { return order_; }
  int vocab_size() const { return vocab_size_; }
  std::span<const double> transition() const { return transition_; }
  std::span<const double> initial() const { return initial_; }
  double transition_prob(std::span<const int> context, int next) const;

  // Natural-log probability of a whole sequence (length >= order).
  double log_prob(std::span<const int> seq) const;

  // Exact joint table over sequences of the given length.
  TabularDistribution to_tabular(int length) const;

  std::string hash() const;

 private:
  std::size_t context_index(std::span<const int> context) const;

  int order_;
  int vocab_size_;
  std::vector<double> transition_;
  std::vector<double> initial_;
};

// Deterministic given seed.  Sequences are independent draws.
std::vector<std::vector<int>> sample_sequences(const MarkovSource& source, std::size_t count, std::size_t length,
                                               std::uint64_t seed);

TabularDistribution normalize_table(std::span<const double> raw, int vocab_size, int seq_len,
                                    std::size_t cap = kDefaultTableCap);

Real joint_probability(const TabularDistribution& dist, const SequenceAssignment& seq);

// P(X_position = value | context) as a ratio of exhaustive marginals.
Real conditional(const TabularDistribution& dist, int position, int value, const PartialAssignment& context);

// Chain-rule product in the order given by sigma (BOS contributes a factor 1).
Real perplexity_via_factorization(const TabularDistribution& dist, const SequenceAssignment& seq,
                                  const Permutation& sigma);

Real perplexity_via_joint(const TabularDistribution& dist, const SequenceAssignment& seq);

// exp(-(1/n) ln joint); exposed for callers that already hold the joint mass.
Real perplexity_from_joint(Real joint, int n);

struct SigmaCheck {
  std::size_t sigma_id = 0;
  Permutation sigma;
  Real pp_factorized = 0;
  Real pp_joint = 0;
  Real rel_dev = 0;
  bool pass = false;
};

struct InvarianceReport {
  std::vector<SigmaCheck> checks;
  Real max_rel_dev = 0;
  Real tolerance = 0;
  bool passed = false;

  const SigmaCheck* first_failure() const;
  // Columns: sigma_id, pp_factorized, pp_joint, rel_dev, pass.
  void write_csv(std::ostream& out) const;
};

InvarianceReport verify_invariance(const TabularDistribution& dist, const SequenceAssignment& seq,
                                   std::span<const Permutation> sigmas, Real tolerance);

// All n! permutations when n! <= cap, otherwise cap distinct ones drawn by a
// seeded Fisher-Yates shuffle, always including forward and backward.
std::vector<Permutation> enumerate_permutations(int n, std::size_t cap, std::uint64_t seed = 0);

struct PartialProducts {
  Real forward = 0;   // P(X_2|X_1) ... P(X_n|X_1..X_{n-1})
  Real backward = 0;  // P(X_{n-1}|X_n) ... P(X_1|X_2..X_n)

  Real relative_gap() const;
};

// The two partial factorizations left when BOS is dropped.  They differ
// whenever P(X_1 = x_1) != P(X_n = x_n).
PartialProducts negative_control_drop_bos(const TabularDistribution& dist, const SequenceAssignment& seq);

// Draws one sequence from the table (always of positive mass).
SequenceAssignment sample_from(const TabularDistribution& dist, std::uint64_t seed);

// Text format: "V n" then V^n non-negative reals, row-major; reading normalizes.
TabularDistribution read_distribution(const std::filesystem::path& path);
void write_distribution(const TabularDistribution& dist, const std::filesystem::path& path);

}  // namespace factorix::probcore
