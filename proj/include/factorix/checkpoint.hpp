#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "factorix/model.hpp"

namespace factorix::model {

// A checkpoint is a directory holding manifest.txt (config, metadata and one
// "tensor <name> <shape> <offset> f32" line per tensor) and weights.bin ("NTCK",
// u32 version, the 64-character config hash, u64 float count, then the raw
// little-endian floats in manifest order).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Hash of the manifest and blob bytes as written.
std::string checkpoint_file_hash(const std::filesystem::path& dir);

// "ATTN" + u32 L, H, T + float32 [L][H][T][T]; "HIDN" + u32 L+1, T, D + float32
// [L+1][T][D].  A file may hold several records back to back.
struct AttentionRecord {
  std::uint32_t layers = 0, heads = 0, length = 0;
  std::vector<float> weights;

  float at(int layer, int head, int i, int j) const {
    return weights[((static_cast<std::size_t>(layer) * heads + head) * length + i) * length + j];
  }
  friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

struct HiddenRecord {
  std::uint32_t layers_plus_one = 0, length = 0, dim = 0;
  std::vector<float> states;

  std::span<const float> layer(int l) const {
    return std::span<const float>(states).subspan(static_cast<std::size_t>(l) * length * dim,
                                                  static_cast<std::size_t>(length) * dim);
  }
  friend bool operator==(const HiddenRecord&, const HiddenRecord&) = default;
};

AttentionRecord attention_record(const ForwardTrace<float>& trace);
HiddenRecord hidden_record(const ForwardTrace<float>& trace);

void save_attention(const std::vector<AttentionRecord>& records, const std::filesystem::path& path);
std::vector<AttentionRecord> load_attention(const std::filesystem::path& path);
void save_hidden(const std::vector<HiddenRecord>& records, const std::filesystem::path& path);
std::vector<HiddenRecord> load_hidden(const std::filesystem::path& path);

}  // namespace factorix::model
