#include "factorix/ordering.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "factorix/error.hpp"

namespace factorix::ordering {

std::string to_string(OrderingKind kind) {
  switch (kind) {
    case OrderingKind::forward:
      return "forward";
    case OrderingKind::backward:
      return "backward";
    case OrderingKind::fixed:
      return "fixed";
    case OrderingKind::explicit_map:
      return "explicit";
  }
  return "?";
}

OrderingKind parse_kind(std::string_view text) {
  if (text == "forward") return OrderingKind::forward;
  if (text == "backward") return OrderingKind::backward;
  if (text == "fixed") return OrderingKind::fixed;
  if (text == "explicit") return OrderingKind::explicit_map;
  fail("unknown ordering kind '" + std::string(text) + "'");
}

Permutation::Permutation(std::vector<int> map, OrderingKind kind, std::optional<std::uint64_t> seed)
    : map_(std::move(map)), kind_(kind), seed_(seed) {}

Permutation Permutation::forward(int n) {
  require(n >= 1, "permutation size must be >= 1");
  std::vector<int> map(static_cast<std::size_t>(n));
  std::iota(map.begin(), map.end(), 0);
  return Permutation(std::move(map), OrderingKind::forward, std::nullopt);
}

Permutation Permutation::backward(int n) {
  require(n >= 1, "permutation size must be >= 1");
  std::vector<int> map(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) map[static_cast<std::size_t>(i)] = n - 1 - i;
  return Permutation(std::move(map), OrderingKind::backward, std::nullopt);
}

Permutation Permutation::fixed(int n, std::uint64_t seed) {
  require(n >= 1, "permutation size must be >= 1");
  std::vector<int> map(static_cast<std::size_t>(n));
  std::iota(map.begin(), map.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = map.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(map[i - 1], map[pick(rng)]);
  }
  return Permutation(std::move(map), OrderingKind::fixed, seed);
}

Permutation Permutation::from_map(std::vector<int> map, OrderingKind kind, std::optional<std::uint64_t> seed) {
  const int n = static_cast<int>(map.size());
  require(n >= 1, "permutation size must be >= 1");
  std::vector<char> seen(map.size(), 0);
  for (int target : map) {
    require(target >= 0 && target < n, "permutation entry " + std::to_string(target) + " out of range");
    require(!seen[static_cast<std::size_t>(target)], "permutation is not a bijection: duplicate target " +
                                                         std::to_string(target));
    seen[static_cast<std::size_t>(target)] = 1;
  }
  if (kind == OrderingKind::forward) require(map == forward(n).map_, "forward permutation must be the identity");
  if (kind == OrderingKind::backward) require(map == backward(n).map_, "backward permutation must be the reversal");
  if (kind == OrderingKind::fixed) {
    require(seed.has_value(), "fixed permutation requires a seed");
    require(map == fixed(n, *seed).map_, "fixed permutation does not match its seed");
  }
  return Permutation(std::move(map), kind, seed);
}

Permutation Permutation::from_one_based(std::span<const int> one_based, OrderingKind kind,
                                        std::optional<std::uint64_t> seed) {
  std::vector<int> map(one_based.begin(), one_based.end());
  for (int& v : map) --v;
  return from_map(std::move(map), kind, seed);
}

bool Permutation::is_identity() const {
  for (int i = 0; i < size(); ++i) {
    if (map_[static_cast<std::size_t>(i)] != i) return false;
  }
  return true;
}

std::string Permutation::label() const {
  if (kind_ == OrderingKind::fixed) return "fixed:" + std::to_string(*seed_);
  return to_string(kind_);
}

Permutation make_permutation(OrderingKind kind, int n, std::optional<std::uint64_t> seed) {
  switch (kind) {
    case OrderingKind::forward:
      return Permutation::forward(n);
    case OrderingKind::backward:
      return Permutation::backward(n);
    case OrderingKind::fixed:
      require(seed.has_value(), "make_permutation: fixed ordering requires a seed");
      return Permutation::fixed(n, *seed);
    case OrderingKind::explicit_map:
      fail("make_permutation: explicit permutations are built from a map");
  }
  fail("make_permutation: unknown kind");
}

Permutation parse_ordering(std::string_view spec, int n) {
  const auto colon = spec.find(':');
  const OrderingKind kind = parse_kind(spec.substr(0, colon));
  std::optional<std::uint64_t> seed;
  if (colon != std::string_view::npos) {
    const std::string_view digits = spec.substr(colon + 1);
    std::uint64_t value = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
    require(!digits.empty() && ec == std::errc{} && ptr == digits.data() + digits.size(),
            "bad ordering seed in '" + std::string(spec) + "'");
    seed = value;
  }
  return make_permutation(kind, n, seed);
}

Permutation invert(const Permutation& perm) {
  std::vector<int> inverse(static_cast<std::size_t>(perm.size()));
  for (int i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = i;
  switch (perm.kind()) {
    case OrderingKind::forward:
    case OrderingKind::backward:
      return Permutation::from_map(std::move(inverse), perm.kind());
    default:
      return Permutation::from_map(std::move(inverse));
  }
}

Permutation compose(const Permutation& p, const Permutation& q) {
  require(p.size() == q.size(), "compose: size mismatch");
  std::vector<int> map(static_cast<std::size_t>(p.size()));
  for (int i = 0; i < p.size(); ++i) map[static_cast<std::size_t>(i)] = p[q[i]];
  return Permutation::from_map(std::move(map));
}

tokenize::PackedSequence apply_to_window(const Permutation& perm, const tokenize::PackedSequence& seq) {
  tokenize::PackedSequence out{std::vector<tokenize::TokenId>(seq.tokens.size())};
  apply_to_span<tokenize::TokenId>(perm, seq.tokens, out.tokens);
  return out;
}

std::string serialize(const Permutation& perm) {
  std::ostringstream out;
  out << "PERM v1 " << perm.size() << ' ' << to_string(perm.kind());
  if (perm.seed()) out << ' ' << *perm.seed();
  out << '\n';
  for (int i = 0; i < perm.size(); ++i) out << (i ? " " : "") << perm[i] + 1;
  out << '\n';
  return out.str();
}

Permutation parse_permutation(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string header;
  std::getline(in, header);
  std::istringstream head(header);
  std::string magic, version, kind_text;
  int n = 0;
  head >> magic >> version >> n >> kind_text;
  require(head && magic == "PERM" && version == "v1" && n >= 1, "permutation file: bad header");
  std::optional<std::uint64_t> seed;
  std::uint64_t s = 0;
  if (head >> s) seed = s;
  std::vector<int> one_based;
  int v = 0;
  while (in >> v) one_based.push_back(v);
  require(static_cast<int>(one_based.size()) == n, "permutation file: map length does not match n");
  return Permutation::from_one_based(one_based, parse_kind(kind_text), seed);
}

void save_permutation(const Permutation& perm, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write permutation " + path.string());
  out << serialize(perm);
}

Permutation load_permutation(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open permutation " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_permutation(buffer.str());
}

}  // namespace factorix::ordering
