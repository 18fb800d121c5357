#include "factorix/probcore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "factorix/error.hpp"
#include "factorix/hash.hpp"

namespace factorix::probcore {
namespace {

std::size_t checked_power(int base, int exponent, std::size_t cap) {
  require(base >= 1 && exponent >= 1, "vocab_size and seq_len must be positive");
  std::size_t total = 1;
  for (int i = 0; i < exponent; ++i) {
    require(total <= cap / static_cast<std::size_t>(base),
            "table of " + std::to_string(base) + "^" + std::to_string(exponent) + " entries exceeds cap " +
                std::to_string(cap));
    total *= static_cast<std::size_t>(base);
  }
  return total;
}

template <typename Rng>
std::size_t draw_index(std::span<const double> probs, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double total = 0.0;
  for (double p : probs) total += p;
  const double u = unit(rng) * total;
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    cumulative += probs[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;
}

}  // namespace

PartialAssignment& PartialAssignment::assign(int position, int value) {
  require(position >= 0 && position < size(), "assignment position out of range");
  require(value >= 0, "assignment value must be non-negative");
  slots_[static_cast<std::size_t>(position)] = value;
  return *this;
}

TabularDistribution::TabularDistribution(int vocab_size, int seq_len, std::vector<Real> probs)
    : vocab_size_(vocab_size), seq_len_(seq_len), probs_(std::move(probs)) {}

TabularDistribution TabularDistribution::normalize(std::span<const double> raw, int vocab_size, int seq_len,
                                                   std::size_t cap) {
  const std::size_t expected = checked_power(vocab_size, seq_len, cap);
  require(raw.size() == expected, "length mismatch: expected " + std::to_string(expected) + " entries, got " +
                                      std::to_string(raw.size()));
  Real total = 0;
  for (double v : raw) {
    require(std::isfinite(v) && v >= 0.0, "negative or non-finite entry in distribution table");
    total += static_cast<Real>(v);
  }
  require(total > 0, "all-zero mass");
  std::vector<Real> probs(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) probs[i] = static_cast<Real>(raw[i]) / total;
  Real check = 0;
  for (Real p : probs) check += p;
  require(std::fabs(check - 1) <= 1e-12L, "normalized table does not sum to 1");
  return TabularDistribution(vocab_size, seq_len, std::move(probs));
}

TabularDistribution TabularDistribution::random(int vocab_size, int seq_len, std::uint64_t seed, double floor) {
  const std::size_t n = checked_power(vocab_size, seq_len, kDefaultTableCap);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(floor, 1.0);
  std::vector<double> raw(n);
  for (double& v : raw) v = unit(rng);
  return normalize(raw, vocab_size, seq_len);
}

std::size_t TabularDistribution::index_of(std::span<const int> values) const {
  require(static_cast<int>(values.size()) == seq_len_, "sequence length " + std::to_string(values.size()) +
                                                           " != seq_len " + std::to_string(seq_len_));
  std::size_t index = 0;
  for (int v : values) {
    require(v >= 0 && v < vocab_size_, "out-of-range token id " + std::to_string(v));
    index = index * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(v);
  }
  return index;
}

SequenceAssignment TabularDistribution::sequence_at(std::size_t index) const {
  require(index < probs_.size(), "table index out of range");
  SequenceAssignment seq{std::vector<int>(static_cast<std::size_t>(seq_len_))};
  for (int p = seq_len_ - 1; p >= 0; --p) {
    seq.values[static_cast<std::size_t>(p)] = static_cast<int>(index % static_cast<std::size_t>(vocab_size_));
    index /= static_cast<std::size_t>(vocab_size_);
  }
  return seq;
}

Real TabularDistribution::marginal(const PartialAssignment& context) const {
  require(context.size() == seq_len_, "context length does not match seq_len");
  std::vector<std::pair<std::size_t, int>> fixed;  // (stride, value)
  std::size_t stride = 1;
  for (int p = seq_len_ - 1; p >= 0; --p) {
    if (context.assigned(p)) {
      require(context[p] < vocab_size_, "out-of-range token id " + std::to_string(context[p]));
      fixed.emplace_back(stride, context[p]);
    }
    stride *= static_cast<std::size_t>(vocab_size_);
  }
  const auto v = static_cast<std::size_t>(vocab_size_);
  Real mass = 0;
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    bool match = true;
    for (const auto& [s, value] : fixed) {
      if ((i / s) % v != static_cast<std::size_t>(value)) {
        match = false;
        break;
      }
    }
    if (match) mass += probs_[i];
  }
  return mass;
}

MarkovSource::MarkovSource(int order, int vocab_size, std::vector<double> transition, std::vector<double> initial)
    : order_(order), vocab_size_(vocab_size), transition_(std::move(transition)), initial_(std::move(initial)) {
  require(order_ >= 1, "Markov order must be >= 1");
  require(vocab_size_ >= 1, "Markov vocab_size must be >= 1");
  const std::size_t contexts = checked_power(vocab_size_, order_, kDefaultTableCap);
  require(transition_.size() == contexts * static_cast<std::size_t>(vocab_size_), "transition table has wrong size");
  require(initial_.size() == contexts, "initial distribution has wrong size");
  auto check_row = [](std::span<const double> row, const std::string& what) {
    long double sum = 0;
    for (double p : row) {
      require(std::isfinite(p) && p >= 0.0, what + " holds a negative or non-finite entry");
      sum += p;
    }
    require(std::fabs(sum - 1.0L) <= 1e-12L, what + " does not sum to 1");
  };
  for (std::size_t c = 0; c < contexts; ++c) {
    check_row(std::span<const double>(transition_).subspan(c * static_cast<std::size_t>(vocab_size_),
                                                           static_cast<std::size_t>(vocab_size_)),
              "transition row " + std::to_string(c));
  }
  check_row(initial_, "initial distribution");
}

MarkovSource MarkovSource::random(int order, int vocab_size, double alpha, std::uint64_t seed) {
  require(alpha > 0.0, "Dirichlet concentration must be positive");
  const std::size_t contexts = checked_power(vocab_size, order, kDefaultTableCap);
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const auto v = static_cast<std::size_t>(vocab_size);
  std::vector<double> transition(contexts * v);
  for (std::size_t c = 0; c < contexts; ++c) {
    const std::span<double> row(transition.data() + c * v, v);
    long double sum = 0;
    for (double& p : row) {
      p = gamma(rng);
      sum += p;
    }
    if (sum <= 0) {
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(v));
      continue;
    }
    for (double& p : row) p = static_cast<double>(p / sum);
    // Fold the rounding residue into the largest entry so the row sums to 1.
    long double again = 0;
    for (double p : row) again += p;
    *std::max_element(row.begin(), row.end()) += static_cast<double>(1.0L - again);
  }
  std::vector<double> initial(contexts, 1.0 / static_cast<double>(contexts));
  return MarkovSource(order, vocab_size, std::move(transition), std::move(initial));
}

std::size_t MarkovSource::context_index(std::span<const int> context) const {
  std::size_t index = 0;
  for (int t : context) {
    require(t >= 0 && t < vocab_size_, "out-of-range token id " + std::to_string(t));
    index = index * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(t);
  }
  return index;
}

double MarkovSource::transition_prob(std::span<const int> context, int next) const {
  require(static_cast<int>(context.size()) == order_, "context length must equal the Markov order");
  require(next >= 0 && next < vocab_size_, "out-of-range token id " + std::to_string(next));
  return transition_[context_index(context) * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(next)];
}

double MarkovSource::log_prob(std::span<const int> seq) const {
  require(static_cast<int>(seq.size()) >= order_, "sequence shorter than the Markov order");
  const auto k = static_cast<std::size_t>(order_);
  long double lp = std::log(static_cast<long double>(initial_[context_index(seq.first(k))]));
  for (std::size_t t = k; t < seq.size(); ++t) {
    lp += std::log(static_cast<long double>(transition_prob(seq.subspan(t - k, k), seq[t])));
  }
  return static_cast<double>(lp);
}

TabularDistribution MarkovSource::to_tabular(int length) const {
  require(length >= order_, "tabular length must be >= Markov order");
  const std::size_t n = checked_power(vocab_size_, length, kDefaultTableCap);
  std::vector<double> raw(n);
  std::vector<int> seq(static_cast<std::size_t>(length), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rest = i;
    for (int p = length - 1; p >= 0; --p) {
      seq[static_cast<std::size_t>(p)] = static_cast<int>(rest % static_cast<std::size_t>(vocab_size_));
      rest /= static_cast<std::size_t>(vocab_size_);
    }
    raw[i] = std::exp(log_prob(seq));
  }
  return TabularDistribution::normalize(raw, vocab_size_, length);
}

std::string MarkovSource::hash() const {
  Sha256 h;
  h.update("MARKOV").update_pod(order_).update_pod(vocab_size_);
  h.update(std::as_bytes(std::span<const double>(transition_)));
  h.update(std::as_bytes(std::span<const double>(initial_)));
  return h.hex();
}

std::vector<std::vector<int>> sample_sequences(const MarkovSource& source, std::size_t count, std::size_t length,
                                               std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(source.order());
  require(length >= k, "sample_sequences: length must be >= Markov order");
  const auto v = static_cast<std::size_t>(source.vocab_size());
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<int> seq(length);
    std::size_t gram = draw_index(source.initial(), rng);
    for (std::size_t p = k; p-- > 0;) {
      seq[p] = static_cast<int>(gram % v);
      gram /= v;
    }
    // Rolling context index over the last k tokens.
    std::size_t context = 0;
    for (std::size_t p = 0; p < k; ++p) context = context * v + static_cast<std::size_t>(seq[p]);
    std::size_t modulus = 1;  // v^(k-1)
    for (std::size_t i = 1; i < k; ++i) modulus *= v;
    for (std::size_t t = k; t < length; ++t) {
      const auto next = draw_index(source.transition().subspan(context * v, v), rng);
      seq[t] = static_cast<int>(next);
      context = (context % modulus) * v + next;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

TabularDistribution normalize_table(std::span<const double> raw, int vocab_size, int seq_len, std::size_t cap) {
  return TabularDistribution::normalize(raw, vocab_size, seq_len, cap);
}

Real joint_probability(const TabularDistribution& dist, const SequenceAssignment& seq) {
  return dist.probs()[dist.index_of(seq.values)];
}

Real conditional(const TabularDistribution& dist, int position, int value, const PartialAssignment& context) {
  require(position >= 0 && position < dist.seq_len(), "conditional: position out of range");
  require(value >= 0 && value < dist.vocab_size(), "out-of-range token id " + std::to_string(value));
  require(!context.assigned(position), "conditional: target position is already in the context");
  const Real denominator = dist.marginal(context);
  require(denominator > 0, "conditioning on null event");
  PartialAssignment joint = context;
  joint.assign(position, value);
  return dist.marginal(joint) / denominator;
}

Real perplexity_from_joint(Real joint, int n) {
  require(joint > 0, "zero-probability sequence");
  require(n >= 1, "perplexity needs at least one token");
  return std::exp(-std::log(joint) / static_cast<Real>(n));
}

Real perplexity_via_factorization(const TabularDistribution& dist, const SequenceAssignment& seq,
                                  const Permutation& sigma) {
  const int n = dist.seq_len();
  require(sigma.size() == n, "sigma covers " + std::to_string(sigma.size()) + " positions, sequence has " +
                                 std::to_string(n));
  dist.index_of(seq.values);  // range check
  PartialAssignment context(n);
  Real log_sum = 0;
  for (int i = 0; i < n; ++i) {
    const int position = sigma[i];
    const Real c = conditional(dist, position, seq.values[static_cast<std::size_t>(position)], context);
    require(c > 0, "zero-probability sequence");
    log_sum += std::log(c);
    context.assign(position, seq.values[static_cast<std::size_t>(position)]);
  }
  return std::exp(-log_sum / static_cast<Real>(n));
}

Real perplexity_via_joint(const TabularDistribution& dist, const SequenceAssignment& seq) {
  return perplexity_from_joint(joint_probability(dist, seq), dist.seq_len());
}

const SigmaCheck* InvarianceReport::first_failure() const {
  for (const SigmaCheck& c : checks) {
    if (!c.pass) return &c;
  }
  return nullptr;
}

void InvarianceReport::write_csv(std::ostream& out) const {
  out << "sigma_id,pp_factorized,pp_joint,rel_dev,pass\n";
  out << std::setprecision(17);
  for (const SigmaCheck& c : checks) {
    out << c.sigma_id << ',' << static_cast<double>(c.pp_factorized) << ',' << static_cast<double>(c.pp_joint) << ','
        << static_cast<double>(c.rel_dev) << ',' << (c.pass ? "true" : "false") << '\n';
  }
}

InvarianceReport verify_invariance(const TabularDistribution& dist, const SequenceAssignment& seq,
                                   std::span<const Permutation> sigmas, Real tolerance) {
  require(!sigmas.empty(), "verify_invariance: empty sigma set");
  InvarianceReport report;
  report.tolerance = tolerance;
  const Real pp_joint = perplexity_via_joint(dist, seq);
  for (std::size_t id = 0; id < sigmas.size(); ++id) {
    const Real pp = perplexity_via_factorization(dist, seq, sigmas[id]);
    const Real dev = std::fabs(pp - pp_joint) / pp_joint;
    report.checks.push_back({id, sigmas[id], pp, pp_joint, dev, dev <= tolerance});
    report.max_rel_dev = std::max(report.max_rel_dev, dev);
  }
  report.passed = report.max_rel_dev <= tolerance;
  return report;
}

std::vector<Permutation> enumerate_permutations(int n, std::size_t cap, std::uint64_t seed) {
  require(n >= 1, "enumerate_permutations: n must be >= 1");
  require(cap >= 1, "enumerate_permutations: cap must be >= 1");
  auto tag = [n](std::vector<int> map) {
    const Permutation fwd = Permutation::forward(n);
    const Permutation bwd = Permutation::backward(n);
    if (std::ranges::equal(map, fwd.map())) return fwd;
    if (std::ranges::equal(map, bwd.map())) return bwd;
    return Permutation::from_map(std::move(map));
  };
  std::size_t factorial = 1;
  bool fits = true;
  for (int k = 2; k <= n; ++k) {
    if (factorial > cap / static_cast<std::size_t>(k)) {
      fits = false;
      break;
    }
    factorial *= static_cast<std::size_t>(k);
  }
  std::vector<Permutation> out;
  if (fits && factorial <= cap) {
    std::vector<int> map(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) map[static_cast<std::size_t>(i)] = i;
    do {
      out.push_back(tag(map));
    } while (std::next_permutation(map.begin(), map.end()));
    return out;
  }
  require(cap >= 2, "enumerate_permutations: sampling mode needs cap >= 2 to hold forward and backward");
  std::set<std::vector<int>> seen;
  auto add = [&](const Permutation& p) {
    std::vector<int> key(p.map().begin(), p.map().end());
    if (seen.insert(key).second) out.push_back(p);
  };
  add(Permutation::forward(n));
  add(Permutation::backward(n));
  std::mt19937_64 rng(seed);
  std::vector<int> map(static_cast<std::size_t>(n));
  while (out.size() < cap) {
    for (int i = 0; i < n; ++i) map[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = map.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(map[i - 1], map[pick(rng)]);
    }
    add(tag(map));
  }
  return out;
}

Real PartialProducts::relative_gap() const {
  const Real scale = std::max(forward, backward);
  return scale > 0 ? std::fabs(forward - backward) / scale : 0;
}

PartialProducts negative_control_drop_bos(const TabularDistribution& dist, const SequenceAssignment& seq) {
  const int n = dist.seq_len();
  require(n >= 2, "negative_control_drop_bos: needs n >= 2");
  dist.index_of(seq.values);
  auto value = [&](int p) { return seq.values[static_cast<std::size_t>(p)]; };
  auto product = [&](auto&& positions) {
    // The first position in the order only conditions; it is never predicted.
    PartialAssignment context(n);
    context.assign(positions[0], value(positions[0]));
    Real log_sum = 0;
    for (std::size_t i = 1; i < positions.size(); ++i) {
      const Real c = conditional(dist, positions[i], value(positions[i]), context);
      require(c > 0, "zero-probability sequence");
      log_sum += std::log(c);
      context.assign(positions[i], value(positions[i]));
    }
    return std::exp(log_sum);
  };
  std::vector<int> forward_order(static_cast<std::size_t>(n));
  std::vector<int> backward_order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    forward_order[static_cast<std::size_t>(i)] = i;
    backward_order[static_cast<std::size_t>(i)] = n - 1 - i;
  }
  return {product(forward_order), product(backward_order)};
}

SequenceAssignment sample_from(const TabularDistribution& dist, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Real u = static_cast<Real>(unit(rng));
  Real cumulative = 0;
  std::size_t chosen = 0;
  for (std::size_t i = 0; i < dist.entries(); ++i) {
    if (dist.probs()[i] <= 0) continue;
    cumulative += dist.probs()[i];
    chosen = i;
    if (u < cumulative) break;
  }
  return dist.sequence_at(chosen);
}

TabularDistribution read_distribution(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open distribution " + path.string());
  int v = 0;
  int n = 0;
  in >> v >> n;
  require(static_cast<bool>(in), "distribution file: bad header (expected \"V n\")");
  std::vector<double> raw;
  std::string token;
  while (in >> token) {
    std::size_t used = 0;
    double value = 0;
    try {
      value = std::stod(token, &used);
    } catch (const std::exception&) {
      fail("distribution file: not a number: " + token);
    }
    require(used == token.size(), "distribution file: not a number: " + token);
    raw.push_back(value);
  }
  return TabularDistribution::normalize(raw, v, n);
}

void write_distribution(const TabularDistribution& dist, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write distribution " + path.string());
  out << dist.vocab_size() << ' ' << dist.seq_len() << '\n' << std::setprecision(21);
  for (std::size_t i = 0; i < dist.entries(); ++i) out << (i ? " " : "") << dist.probs()[i];
  out << '\n';
}

}  // namespace factorix::probcore
