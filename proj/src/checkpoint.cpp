#include "factorix/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "factorix/binary_io.hpp"
#include "factorix/error.hpp"
#include "factorix/hash.hpp"

namespace factorix::model {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kManifestName = "manifest.txt";
constexpr const char* kBlobName = "weights.bin";

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string shape_text(const std::vector<int>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& key) {
  T value{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  require(res.ec == std::errc() && res.ptr == text.data() + text.size(),
          "corrupt manifest: bad value '" + text + "' for " + key);
  return value;
}

struct Manifest {
  std::map<std::string, std::string> values;
  std::vector<std::string> tensor_lines;

  const std::string& get(const std::string& key) const {
    const auto it = values.find(key);
    require(it != values.end(), "corrupt manifest: missing key " + key);
    return it->second;
  }
};

Manifest parse_manifest(std::istream& in) {
  Manifest m;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "NTCK manifest v1",
          "corrupt manifest: missing 'NTCK manifest v1' header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.starts_with("tensor ")) {
      m.tensor_lines.push_back(line);
      continue;
    }
    const auto eq = line.find(" = ");
    require(eq != std::string::npos, "corrupt manifest: cannot parse line '" + line + "'");
    m.values[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  const ParamLayout layout(ckpt.config);
  require(ckpt.params.size() == layout.total(), "save_checkpoint: parameter count does not match the config");
  for (float v : ckpt.params) require(std::isfinite(v), "save_checkpoint: non-finite weight");
  std::filesystem::create_directories(dir);
  const ModelConfig& c = ckpt.config;
  const std::string config_hash = c.hash();
  {
    std::ofstream blob(dir / kBlobName, std::ios::binary);
    require(blob.good(), "cannot write " + (dir / kBlobName).string());
    binio::write_magic(blob, "NTCK");
    binio::write<std::uint32_t>(blob, kCheckpointVersion);
    blob.write(config_hash.data(), static_cast<std::streamsize>(config_hash.size()));
    binio::write<std::uint64_t>(blob, ckpt.params.size());
    binio::write_array<float>(blob, ckpt.params);
    require(blob.good(), "failed writing " + (dir / kBlobName).string());
  }
  std::ofstream out(dir / kManifestName);
  require(out.good(), "cannot write " + (dir / kManifestName).string());
  out << "NTCK manifest v1\n";
  out << "config.layers = " << c.layers << '\n';
  out << "config.heads = " << c.heads << '\n';
  out << "config.dim = " << c.dim << '\n';
  out << "config.window = " << c.window << '\n';
  out << "config.vocab_size = " << c.vocab_size << '\n';
  out << "config.init_std = " << format_double(c.init_std) << '\n';
  out << "config.seed = " << c.seed << '\n';
  out << "config.bos_masking = " << to_string(c.bos_masking) << '\n';
  out << "config_hash = " << config_hash << '\n';
  out << "meta.step = " << ckpt.meta.step << '\n';
  out << "meta.ordering = " << ckpt.meta.ordering << '\n';
  out << "meta.tokenizer_hash = " << ckpt.meta.tokenizer_hash << '\n';
  out << "meta.seed = " << ckpt.meta.seed << '\n';
  for (const TensorInfo& t : layout.tensors()) {
    out << "tensor " << t.name << ' ' << shape_text(t.shape) << ' ' << t.offset << " f32\n";
  }
  require(out.good(), "failed writing " + (dir / kManifestName).string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream min(dir / kManifestName);
  require(min.good(), "cannot open checkpoint manifest " + (dir / kManifestName).string());
  const Manifest m = parse_manifest(min);

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.layers = parse_number<int>(m.get("config.layers"), "config.layers");
  c.heads = parse_number<int>(m.get("config.heads"), "config.heads");
  c.dim = parse_number<int>(m.get("config.dim"), "config.dim");
  c.window = parse_number<int>(m.get("config.window"), "config.window");
  c.vocab_size = parse_number<int>(m.get("config.vocab_size"), "config.vocab_size");
  c.init_std = parse_number<double>(m.get("config.init_std"), "config.init_std");
  c.seed = parse_number<std::uint64_t>(m.get("config.seed"), "config.seed");
  c.bos_masking = parse_bos_masking(m.get("config.bos_masking"));
  c.validate();
  ckpt.meta.step = parse_number<std::int64_t>(m.get("meta.step"), "meta.step");
  ckpt.meta.ordering = m.get("meta.ordering");
  ckpt.meta.tokenizer_hash = m.values.contains("meta.tokenizer_hash") ? m.get("meta.tokenizer_hash") : "";
  ckpt.meta.seed = parse_number<std::uint64_t>(m.get("meta.seed"), "meta.seed");
  const std::string config_hash = c.hash();
  require(m.get("config_hash") == config_hash, "config hash mismatch: manifest records " + m.get("config_hash") +
                                                   " but its config hashes to " + config_hash);

  const ParamLayout layout(c);
  require(m.tensor_lines.size() == layout.tensors().size(),
          "shape mismatch: manifest lists " + std::to_string(m.tensor_lines.size()) + " tensors, config implies " +
              std::to_string(layout.tensors().size()));
  for (std::size_t i = 0; i < m.tensor_lines.size(); ++i) {
    const TensorInfo& t = layout.tensors()[i];
    std::istringstream fields(m.tensor_lines[i]);
    std::string tag, name, shape, offset, dtype;
    fields >> tag >> name >> shape >> offset >> dtype;
    require(name == t.name, "shape mismatch: expected tensor " + t.name + ", manifest has " + name);
    require(shape == shape_text(t.shape), "shape mismatch for " + t.name + ": manifest " + shape + ", config " +
                                              shape_text(t.shape));
    require(offset == std::to_string(t.offset), "shape mismatch: bad offset for " + t.name);
    require(dtype == "f32", "corrupt manifest: unsupported dtype " + dtype);
  }

  std::ifstream blob(dir / kBlobName, std::ios::binary);
  require(blob.good(), "cannot open checkpoint blob " + (dir / kBlobName).string());
  binio::expect_magic(blob, "NTCK");
  const auto version = binio::read<std::uint32_t>(blob, "NTCK version");
  require(version == kCheckpointVersion, "unsupported NTCK version " + std::to_string(version));
  std::string blob_hash(64, '\0');
  blob.read(blob_hash.data(), 64);
  require(blob.gcount() == 64, "truncated file while reading NTCK config hash");
  require(blob_hash == config_hash, "config hash mismatch between manifest and blob");
  const auto count = binio::read<std::uint64_t>(blob, "NTCK count");
  require(count == layout.total(), "shape mismatch: blob holds " + std::to_string(count) + " floats, config implies " +
                                       std::to_string(layout.total()));
  ckpt.params.resize(count);
  binio::read_array<float>(blob, ckpt.params, "NTCK weights");
  require(!binio::more(blob), "corrupt checkpoint: trailing bytes after weights");
  for (const TensorInfo& t : layout.tensors()) {
    for (std::size_t i = 0; i < t.size; ++i) {
      require(std::isfinite(ckpt.params[t.offset + i]), "non-finite value in tensor " + t.name);
    }
  }
  return ckpt;
}

std::string checkpoint_file_hash(const std::filesystem::path& dir) {
  Sha256 h;
  h.update(sha256_file(dir / kManifestName));
  h.update(sha256_file(dir / kBlobName));
  return h.hex();
}

AttentionRecord attention_record(const ForwardTrace<float>& trace) {
  return {static_cast<std::uint32_t>(trace.layers), static_cast<std::uint32_t>(trace.heads),
          static_cast<std::uint32_t>(trace.length), trace.attention};
}

HiddenRecord hidden_record(const ForwardTrace<float>& trace) {
  return {static_cast<std::uint32_t>(trace.layers + 1), static_cast<std::uint32_t>(trace.length),
          static_cast<std::uint32_t>(trace.dim), trace.hidden};
}

namespace {

void write_record(std::ostream& out, const char* magic, std::uint32_t a, std::uint32_t b, std::uint32_t c,
                  std::span<const float> payload, std::size_t expected) {
  require(payload.size() == expected, std::string(magic) + ": record size does not match its dims");
  binio::write_magic(out, magic);
  binio::write<std::uint32_t>(out, a);
  binio::write<std::uint32_t>(out, b);
  binio::write<std::uint32_t>(out, c);
  binio::write_array<float>(out, payload);
}

}  // namespace

void save_attention(const std::vector<AttentionRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  for (const AttentionRecord& r : records) {
    write_record(out, "ATTN", r.layers, r.heads, r.length, r.weights,
                 static_cast<std::size_t>(r.layers) * r.heads * r.length * r.length);
  }
  require(out.good(), "failed writing " + path.string());
}

std::vector<AttentionRecord> load_attention(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path.string());
  std::vector<AttentionRecord> out;
  do {
    binio::expect_magic(in, "ATTN");
    AttentionRecord r;
    r.layers = binio::read<std::uint32_t>(in, "ATTN L");
    r.heads = binio::read<std::uint32_t>(in, "ATTN H");
    r.length = binio::read<std::uint32_t>(in, "ATTN T");
    require(r.layers > 0 && r.heads > 0 && r.length > 0 && r.length <= 65536, "ATTN header is implausible");
    r.weights.resize(static_cast<std::size_t>(r.layers) * r.heads * r.length * r.length);
    binio::read_array<float>(in, r.weights, "ATTN weights");
    out.push_back(std::move(r));
  } while (binio::more(in));
  return out;
}

void save_hidden(const std::vector<HiddenRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  for (const HiddenRecord& r : records) {
    write_record(out, "HIDN", r.layers_plus_one, r.length, r.dim, r.states,
                 static_cast<std::size_t>(r.layers_plus_one) * r.length * r.dim);
  }
  require(out.good(), "failed writing " + path.string());
}

std::vector<HiddenRecord> load_hidden(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path.string());
  std::vector<HiddenRecord> out;
  do {
    binio::expect_magic(in, "HIDN");
    HiddenRecord r;
    r.layers_plus_one = binio::read<std::uint32_t>(in, "HIDN L+1");
    r.length = binio::read<std::uint32_t>(in, "HIDN T");
    r.dim = binio::read<std::uint32_t>(in, "HIDN D");
    require(r.layers_plus_one > 0 && r.length > 0 && r.dim > 0 && r.length <= 65536 && r.dim <= 65536,
            "HIDN header is implausible");
    r.states.resize(static_cast<std::size_t>(r.layers_plus_one) * r.length * r.dim);
    binio::read_array<float>(in, r.states, "HIDN states");
    out.push_back(std::move(r));
  } while (binio::more(in));
  return out;
}

}  // namespace factorix::model
