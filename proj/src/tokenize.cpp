#include "factorix/tokenize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "factorix/binary_io.hpp"
#include "factorix/error.hpp"
#include "factorix/hash.hpp"

namespace factorix::tokenize {
namespace {

std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

// Replaces every non-overlapping (left, right) occurrence, scanning left to right.
void apply_merge(std::vector<TokenId>& seq, TokenId left, TokenId right, TokenId merged) {
  if (seq.size() < 2) return;
  std::size_t out = 0;
  std::size_t i = 0;
  while (i < seq.size()) {
    if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
      seq[out++] = merged;
      i += 2;
    } else {
      seq[out++] = seq[i++];
    }
  }
  seq.resize(out);
}

std::vector<TokenId> to_byte_tokens(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(byte_token(static_cast<unsigned char>(c)));
  return ids;
}

}  // namespace

std::string hex_escape(std::string_view bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * bytes.size());
  for (char c : bytes) {
    const auto b = static_cast<unsigned char>(c);
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xF]);
  }
  return out;
}

std::string hex_unescape(std::string_view hex) {
  require(hex.size() % 2 == 0 && !hex.empty(), "hex string has odd or zero length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    fail(std::string("invalid hex digit '") + c + "'");
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    out.push_back(static_cast<char>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
  }
  return out;
}

Tokenizer::Tokenizer() {
  vocab_.reserve(kBaseVocab);
  vocab_.emplace_back();  // BOS has no surface bytes
  for (int b = 0; b < kByteAlphabet; ++b) vocab_.emplace_back(1, static_cast<char>(b));
}

void Tokenizer::add_merge(TokenId left, TokenId right) {
  merges_.push_back({left, right});
  vocab_.push_back(vocab_[left] + vocab_[right]);
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  require(id >= 0 && id < vocab_size(), "unknown token id " + std::to_string(id));
  return vocab_[id];
}

Tokenizer Tokenizer::train(std::string_view corpus, int vocab_size) {
  require(!corpus.empty(), "train_bpe: empty corpus");
  require(vocab_size > kBaseVocab, "train_bpe: vocab_size must exceed " + std::to_string(kBaseVocab) +
                                       " (256 bytes + BOS), got " + std::to_string(vocab_size));
  Tokenizer tok;
  std::unordered_set<std::string> surfaces(tok.vocab_.begin() + 1, tok.vocab_.end());
  std::vector<TokenId> seq = to_byte_tokens(corpus);
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  while (tok.vocab_size() < vocab_size) {
    counts.clear();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pair_key(seq[i], seq[i + 1])];
    // Highest count wins; ties go to the smallest (left, right).  Pairs whose
    // surface already exists are skipped so byte strings identify ids uniquely.
    std::int64_t best_count = 0;
    std::uint64_t best_key = 0;
    for (const auto& [key, count] : counts) {
      if (count < best_count || (count == best_count && key > best_key)) continue;
      const auto left = static_cast<TokenId>(key >> 32);
      const auto right = static_cast<TokenId>(key & 0xFFFFFFFFu);
      if (surfaces.contains(tok.vocab_[left] + tok.vocab_[right])) continue;
      best_count = count;
      best_key = key;
    }
    require(best_count > 0, "train_bpe: corpus too small for vocab_size " + std::to_string(vocab_size));
    const auto left = static_cast<TokenId>(best_key >> 32);
    const auto right = static_cast<TokenId>(best_key & 0xFFFFFFFFu);
    tok.add_merge(left, right);
    surfaces.insert(tok.vocab_.back());
    apply_merge(seq, left, right, static_cast<TokenId>(tok.vocab_size() - 1));
  }
  return tok;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> seq = to_byte_tokens(text);
  // Applying ranks in order equals lowest-rank-first merging: a merge can only
  // create pairs whose rank is higher than its own.
  for (std::size_t r = 0; r < merges_.size() && seq.size() >= 2; ++r) {
    apply_merge(seq, merges_[r].left, merges_[r].right, static_cast<TokenId>(kBaseVocab + r));
  }
  return seq;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    require(id != kBosId, "decode: BOS must be stripped before decoding");
    require(id > 0 && id < vocab_size(), "decode: unknown token id " + std::to_string(id));
    out += vocab_[id];
  }
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream out;
  out << "BPETOK v1 " << vocab_size() << ' ' << kBosId << '\n';
  for (const Merge& m : merges_) out << hex_escape(vocab_[m.left]) << ' ' << hex_escape(vocab_[m.right]) << '\n';
  return out.str();
}

Tokenizer Tokenizer::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string magic, version;
  int vocab_size = 0;
  int bos = -1;
  in >> magic >> version >> vocab_size >> bos;
  require(in && magic == "BPETOK" && version == "v1", "tokenizer file: bad header");
  require(bos == kBosId, "tokenizer file: BOS id must be " + std::to_string(kBosId));
  require(vocab_size >= kBaseVocab, "tokenizer file: vocab_size too small");
  Tokenizer tok;
  std::unordered_map<std::string, TokenId> ids;
  for (TokenId id = 1; id < kBaseVocab; ++id) ids.emplace(tok.vocab_[id], id);
  std::string left_hex, right_hex;
  while (in >> left_hex >> right_hex) {
    const auto left = ids.find(hex_unescape(left_hex));
    const auto right = ids.find(hex_unescape(right_hex));
    require(left != ids.end() && right != ids.end(), "tokenizer file: merge references unknown token");
    tok.add_merge(left->second, right->second);
    require(ids.emplace(tok.vocab_.back(), tok.vocab_size() - 1).second, "tokenizer file: duplicate merge surface");
  }
  require(tok.vocab_size() == vocab_size, "tokenizer file: merge count does not match vocab_size");
  return tok;
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open tokenizer " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write tokenizer " + path.string());
  out << serialize();
}

std::string Tokenizer::hash() const { return sha256_hex(serialize()); }

void PackedSequence::validate(std::size_t window) const {
  require(tokens.size() == window, "packed sequence length " + std::to_string(tokens.size()) +
                                       " != window " + std::to_string(window));
  require(!tokens.empty() && tokens[0] == kBosId, "packed sequence must start with BOS");
  require(std::find(tokens.begin() + 1, tokens.end(), kBosId) == tokens.end(),
          "packed sequence holds BOS after position 0");
}

std::string to_string(Split split) { return split == Split::train ? "train" : "validation"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "validation") return Split::validation;
  fail("unknown split '" + std::string(text) + "'");
}

PackedDataset::PackedDataset(std::uint32_t window, std::uint32_t vocab_size, std::vector<TokenId> tokens,
                             Split split, std::string tokenizer_hash)
    : window_(window),
      vocab_size_(vocab_size),
      tokens_(std::move(tokens)),
      split_(split),
      tokenizer_hash_(std::move(tokenizer_hash)) {
  require(window_ >= 2, "dataset window must be >= 2");
  require(tokens_.size() % window_ == 0, "dataset token count is not a multiple of the window");
  for (std::size_t row = 0; row < size(); ++row) {
    const auto seq = sequence(row);
    require(seq[0] == kBosId, "dataset row " + std::to_string(row) + " does not start with BOS");
    for (std::size_t j = 1; j < seq.size(); ++j) {
      require(seq[j] != kBosId && seq[j] > 0 && static_cast<std::uint32_t>(seq[j]) < vocab_size_,
              "dataset row " + std::to_string(row) + " holds an invalid token");
    }
  }
}

std::span<const TokenId> PackedDataset::sequence(std::size_t i) const {
  require(i < size(), "dataset row out of range");
  return std::span<const TokenId>(tokens_).subspan(i * window_, window_);
}

PackedSequence PackedDataset::packed(std::size_t i) const {
  const auto seq = sequence(i);
  return PackedSequence{{seq.begin(), seq.end()}};
}

void PackedDataset::set_provenance(Split split, std::string tokenizer_hash) {
  split_ = split;
  tokenizer_hash_ = std::move(tokenizer_hash);
}

PackedDataset PackedDataset::subset(std::span<const std::size_t> rows, Split split) const {
  std::vector<TokenId> tokens;
  tokens.reserve(rows.size() * window_);
  for (std::size_t r : rows) {
    const auto seq = sequence(r);
    tokens.insert(tokens.end(), seq.begin(), seq.end());
  }
  PackedDataset out;
  out.window_ = window_;
  out.vocab_size_ = vocab_size_;
  out.tokens_ = std::move(tokens);
  out.split_ = split;
  out.tokenizer_hash_ = tokenizer_hash_;
  return out;
}

std::string PackedDataset::content_hash() const {
  Sha256 h;
  h.update("PKDS").update_pod(window_).update_pod(vocab_size_);
  h.update(std::as_bytes(std::span<const TokenId>(tokens_)));
  h.update(tokenizer_hash_);
  return h.hex();
}

PackResult pack_corpus(std::span<const TokenId> stream, std::uint32_t window, std::uint32_t vocab_size,
                       std::string tokenizer_hash, TokenId bos_id) {
  require(window >= 2, "pack_corpus: window must be >= 2");
  require(bos_id == kBosId, "pack_corpus: BOS id is fixed at 0");
  const std::size_t body = window - 1;
  const std::size_t count = stream.size() / body;
  PackResult result;
  result.discarded_tokens = stream.size() - count * body;
  if (count == 0) {
    result.warnings.push_back("token stream of " + std::to_string(stream.size()) +
                              " tokens is shorter than window-1 = " + std::to_string(body) + "; dataset is empty");
  }
  std::vector<TokenId> tokens;
  tokens.reserve(count * window);
  for (std::size_t s = 0; s < count; ++s) {
    tokens.push_back(bos_id);
    tokens.insert(tokens.end(), stream.begin() + static_cast<std::ptrdiff_t>(s * body),
                  stream.begin() + static_cast<std::ptrdiff_t>((s + 1) * body));
  }
  result.dataset = PackedDataset(window, vocab_size, std::move(tokens), Split::train, std::move(tokenizer_hash));
  return result;
}

std::pair<PackedDataset, PackedDataset> split_dataset(const PackedDataset& all, double validation_fraction,
                                                      std::uint64_t seed) {
  require(validation_fraction >= 0.0 && validation_fraction < 1.0, "validation fraction must be in [0, 1)");
  std::vector<std::size_t> rows(all.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = rows.size(); i > 1; --i) {
    std::swap(rows[i - 1], rows[static_cast<std::size_t>(rng() % i)]);
  }
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(rows.size())));
  std::vector<std::size_t> val(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
  // Each split keeps corpus order.
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {all.subset(train, Split::train), all.subset(val, Split::validation)};
}

void require_same_provenance(const PackedDataset& a, const PackedDataset& b) {
  require(a.tokenizer_hash() == b.tokenizer_hash(),
          "tokenizer provenance mismatch: " + a.tokenizer_hash() + " vs " + b.tokenizer_hash());
  require(a.window() == b.window(), "dataset window mismatch");
  require(a.vocab_size() == b.vocab_size(), "dataset vocab_size mismatch");
}

void save_dataset(const PackedDataset& dataset, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write dataset " + path.string());
    binio::write_magic(out, "PKDS");
    binio::write<std::uint32_t>(out, dataset.window());
    binio::write<std::uint32_t>(out, dataset.vocab_size());
    binio::write<std::uint64_t>(out, dataset.size());
    std::vector<std::uint32_t> ids(dataset.tokens().begin(), dataset.tokens().end());
    binio::write_array<std::uint32_t>(out, ids);
  }
  nlohmann::json side = {{"split", to_string(dataset.split())},
                         {"tokenizer_hash", dataset.tokenizer_hash()},
                         {"content_hash", dataset.content_hash()}};
  std::ofstream meta(path.string() + ".json");
  meta << side.dump(2) << '\n';
}

PackedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open dataset " + path.string());
  binio::expect_magic(in, "PKDS");
  const auto window = binio::read<std::uint32_t>(in, "PKDS window");
  const auto vocab = binio::read<std::uint32_t>(in, "PKDS vocab_size");
  const auto count = binio::read<std::uint64_t>(in, "PKDS count");
  require(window >= 2 && count < (std::uint64_t{1} << 40) / window, "PKDS header is implausible");
  std::vector<std::uint32_t> ids(count * window);
  binio::read_array<std::uint32_t>(in, ids, "PKDS tokens");
  std::vector<TokenId> tokens(ids.begin(), ids.end());
  Split split = Split::train;
  std::string tokenizer_hash;
  const std::filesystem::path side = path.string() + ".json";
  if (std::filesystem::exists(side)) {
    std::ifstream meta(side);
    const auto j = nlohmann::json::parse(meta);
    split = parse_split(j.at("split").get<std::string>());
    tokenizer_hash = j.at("tokenizer_hash").get<std::string>();
  }
  return PackedDataset(window, vocab, std::move(tokens), split, std::move(tokenizer_hash));
}

std::string read_corpus(std::span<const std::filesystem::path> paths) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  for (const fs::path& p : paths) {
    require(fs::exists(p), "corpus path does not exist: " + p.string());
    if (fs::is_directory(p)) {
      for (const auto& entry : fs::recursive_directory_iterator(p)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
      }
    } else {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.string() < b.string(); });
  std::string corpus;
  for (const fs::path& f : files) {
    std::ifstream in(f, std::ios::binary);
    require(in.good(), "cannot read corpus file " + f.string());
    corpus.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return corpus;
}

}  // namespace factorix::tokenize
