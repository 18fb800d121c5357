#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace factorix::tokenize {

using TokenId = std::int32_t;

inline constexpr TokenId kBosId = 0;
inline constexpr int kByteAlphabet = 256;
// BOS plus the 256 byte tokens.
inline constexpr int kBaseVocab = kByteAlphabet + 1;

inline constexpr TokenId byte_token(unsigned char b) { return static_cast<TokenId>(b) + 1; }

// Byte-level BPE tokenizer.  Id 0 is BOS, ids 1..256 are raw bytes, and each
// merge rule adds one id above that in rank order.
class Tokenizer {
 public:
  struct Merge {
    TokenId left;
    TokenId right;
  };

  // Trains on forward text only.  Whitespace is an ordinary byte.
  static Tokenizer train(std::string_view corpus, int vocab_size);

  static Tokenizer parse(std::string_view text);
  static Tokenizer load(const std::filesystem::path& path);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  TokenId bos_id() const { return kBosId; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token_bytes(TokenId id) const;

  // "BPETOK v1 <vocab_size> <bos_id>" followed by one hex-escaped merge per line.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  std::string hash() const;

 private:
  Tokenizer();
  void add_merge(TokenId left, TokenId right);

  std::vector<std::string> vocab_;
  std::vector<Merge> merges_;
};

// One BOS-prefixed context window.
struct PackedSequence {
  std::vector<TokenId> tokens;

  // Throws unless tokens[0] is BOS, no other slot is BOS and the size is window.
  void validate(std::size_t window) const;
};

enum class Split { train, validation };

std::string to_string(Split split);
Split parse_split(std::string_view text);

// Fixed-window sequences stored row-major.  tokenizer_hash records provenance.
class PackedDataset {
 public:
  PackedDataset() = default;
  PackedDataset(std::uint32_t window, std::uint32_t vocab_size, std::vector<TokenId> tokens, Split split,
                std::string tokenizer_hash);

  std::uint32_t window() const { return window_; }
  std::uint32_t vocab_size() const { return vocab_size_; }
  std::size_t size() const { return window_ == 0 ? 0 : tokens_.size() / window_; }
  bool empty() const { return size() == 0; }
  std::span<const TokenId> sequence(std::size_t i) const;
  PackedSequence packed(std::size_t i) const;
  std::span<const TokenId> tokens() const { return tokens_; }
  Split split() const { return split_; }
  const std::string& tokenizer_hash() const { return tokenizer_hash_; }
  void set_provenance(Split split, std::string tokenizer_hash);

  // Rows selected by index, in the given order.
  PackedDataset subset(std::span<const std::size_t> rows, Split split) const;

  // Hash over window, vocab, token content and tokenizer hash.
  std::string content_hash() const;

 private:
  std::uint32_t window_ = 0;
  std::uint32_t vocab_size_ = 0;
  std::vector<TokenId> tokens_;
  Split split_ = Split::train;
  std::string tokenizer_hash_;
};

struct PackResult {
  PackedDataset dataset;
  std::size_t discarded_tokens = 0;
  std::vector<std::string> warnings;
};

// Each window is BOS followed by window-1 stream tokens; the short tail is dropped.
PackResult pack_corpus(std::span<const TokenId> stream, std::uint32_t window, std::uint32_t vocab_size,
                       std::string tokenizer_hash = {}, TokenId bos_id = kBosId);

// Splits packed rows into train / validation by a seeded shuffle of row indices.
std::pair<PackedDataset, PackedDataset> split_dataset(const PackedDataset& all, double validation_fraction,
                                                      std::uint64_t seed);

// Throws when datasets were produced under different tokenizers or windows.
void require_same_provenance(const PackedDataset& a, const PackedDataset& b);

// PKDS binary format; provenance goes to a JSON sidecar "<path>.json".
void save_dataset(const PackedDataset& dataset, const std::filesystem::path& path);
PackedDataset load_dataset(const std::filesystem::path& path);

// Regular files under each path (directories expanded recursively), sorted
// lexicographically and concatenated.
std::string read_corpus(std::span<const std::filesystem::path> paths);

std::string hex_escape(std::string_view bytes);
std::string hex_unescape(std::string_view hex);

}  // namespace factorix::tokenize
