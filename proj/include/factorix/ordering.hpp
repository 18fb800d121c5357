#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factorix/error.hpp"
#include "factorix/tokenize.hpp"

namespace factorix::ordering {

enum class OrderingKind { forward, backward, fixed, explicit_map };

std::string to_string(OrderingKind kind);
OrderingKind parse_kind(std::string_view text);

// A reordering of the n in-window token positions.  BOS is never part of it.
//
// map()[i] is the zero-based source position of the i-th factor, i.e. σ(i+1)-1
// in one-based notation.  The permuted stream is X_0, X_σ(1), ..., X_σ(n).
class Permutation {
 public:
  static Permutation forward(int n);
  static Permutation backward(int n);
  // One seeded Fisher-Yates draw; reused for every sequence in an experiment.
  static Permutation fixed(int n, std::uint64_t seed);
  // Validates bijectivity and, for forward/backward tags, the shape.
  static Permutation from_map(std::vector<int> map, OrderingKind kind = OrderingKind::explicit_map,
                              std::optional<std::uint64_t> seed = std::nullopt);
  static Permutation from_one_based(std::span<const int> one_based, OrderingKind kind = OrderingKind::explicit_map,
                                    std::optional<std::uint64_t> seed = std::nullopt);

  int size() const { return static_cast<int>(map_.size()); }
  std::span<const int> map() const { return map_; }
  int operator[](int i) const { return map_[static_cast<std::size_t>(i)]; }
  OrderingKind kind() const { return kind_; }
  std::optional<std::uint64_t> seed() const { return seed_; }
  bool is_identity() const;

  // "forward", "backward", "fixed:<seed>" or "explicit".
  std::string label() const;

  friend bool operator==(const Permutation& a, const Permutation& b) { return a.map_ == b.map_; }

 private:
  Permutation(std::vector<int> map, OrderingKind kind, std::optional<std::uint64_t> seed);

  std::vector<int> map_;
  OrderingKind kind_;
  std::optional<std::uint64_t> seed_;
};

Permutation make_permutation(OrderingKind kind, int n, std::optional<std::uint64_t> seed = std::nullopt);

// Parses "forward", "backward", "fixed:<seed>" for a window of n real tokens.
Permutation parse_ordering(std::string_view spec, int n);

Permutation invert(const Permutation& perm);

// (p ∘ q)(i) = p(q(i)) on zero-based maps.
Permutation compose(const Permutation& p, const Permutation& q);

// Output position j > 0 holds input position 1 + map[j-1]; position 0 (BOS)
// is a fixed point.
tokenize::PackedSequence apply_to_window(const Permutation& perm, const tokenize::PackedSequence& seq);

template <typename T>
void apply_to_span(const Permutation& perm, std::span<const T> window, std::span<T> out) {
  require(window.size() == static_cast<std::size_t>(perm.size()) + 1 && out.size() == window.size(),
          "apply_to_window: permutation covers " + std::to_string(perm.size()) + " positions but window holds " +
              std::to_string(window.size()) + " tokens including BOS");
  out[0] = window[0];
  for (int j = 0; j < perm.size(); ++j) out[static_cast<std::size_t>(j) + 1] = window[1 + static_cast<std::size_t>(perm[j])];
}

// "PERM v1 <n> <kind> [seed]" then the one-based map.
std::string serialize(const Permutation& perm);
Permutation parse_permutation(std::string_view text);
void save_permutation(const Permutation& perm, const std::filesystem::path& path);
Permutation load_permutation(const std::filesystem::path& path);

}  // namespace factorix::ordering
