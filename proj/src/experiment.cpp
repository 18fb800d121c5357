#include "factorix/experiment.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "factorix/error.hpp"
#include "factorix/hash.hpp"

#ifndef FACTORIX_VERSION
#define FACTORIX_VERSION "0.0.0"
#endif

namespace factorix::experiment {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Shortest decimal that reads back to the same double.
std::string fmt_double(double v) {
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <typename T>
T parse_number(const std::string& section, const std::string& key, const std::string& text) {
  T value{};
  const std::string t = boost::trim_copy(text);
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    value = static_cast<T>(std::strtod(t.c_str(), &end));
    if (t.empty() || end != t.c_str() + t.size())
      fail("config: [" + section + "] " + key + ": expected a number, got '" + text + "'");
  } else {
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size())
      fail("config: [" + section + "] " + key + ": expected an integer, got '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& section, const std::string& key, const std::string& text) {
  const std::string t = boost::to_lower_copy(boost::trim_copy(text));
  if (t == "true" || t == "yes" || t == "on" || t == "1") return true;
  if (t == "false" || t == "no" || t == "off" || t == "0") return false;
  fail("config: [" + section + "] " + key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  boost::split(parts, text, boost::is_any_of(","));
  std::vector<std::string> out;
  for (auto& p : parts) {
    boost::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

std::string now_utc() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Exclusive advisory lock held for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    require(fd_ >= 0, "cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      fail("cannot lock " + path.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), "cannot write " + tmp.string());
    out << text;
    require(static_cast<bool>(out), "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail("corrupt json in " + path.string() + ": " + e.what());
  }
}

void check_keys(const std::string& section, const boost::property_tree::ptree& tree,
                const std::set<std::string>& known) {
  for (const auto& [key, _] : tree)
    require(known.contains(key), "config: unknown key '" + key + "' in [" + section + "]");
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(std::string_view ini, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(ini)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    fail(std::string("config: ") + e.what());
  }

  ExperimentConfig c;
  const std::set<std::string> sections = {"corpus", "tokenizer", "data", "model", "optimizer", "experiment",
                                          "diagnostics"};
  for (const auto& [name, child] : tree) {
    require(sections.contains(name), "config: unknown section [" + name + "]");
    require(!child.empty() || child.data().empty(), "config: top-level key '" + name + "' outside a section");
  }
  auto section = [&](const std::string& name) -> const pt::ptree& {
    static const pt::ptree empty;
    const auto it = tree.find(name);
    return it == tree.not_found() ? empty : it->second;
  };

  {
    const auto& s = section("corpus");
    check_keys("corpus", s,
               {"kind", "paths", "markov_order", "markov_vocab", "markov_alpha", "markov_tokens", "markov_doc_length",
                "markov_seed"});
    for (const auto& [key, v] : s) {
      const std::string& text = v.data();
      if (key == "kind") c.corpus.kind = boost::trim_copy(text);
      else if (key == "paths") {
        c.corpus.paths.clear();
        for (const auto& p : split_list(text)) {
          fs::path path(p);
          if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
          c.corpus.paths.push_back(path.lexically_normal());
        }
      } else if (key == "markov_order") c.corpus.markov_order = parse_number<int>("corpus", key, text);
      else if (key == "markov_vocab") c.corpus.markov_vocab = parse_number<int>("corpus", key, text);
      else if (key == "markov_alpha") c.corpus.markov_alpha = parse_number<double>("corpus", key, text);
      else if (key == "markov_tokens") c.corpus.markov_tokens = parse_number<std::size_t>("corpus", key, text);
      else if (key == "markov_doc_length") c.corpus.markov_doc_length = parse_number<std::size_t>("corpus", key, text);
      else if (key == "markov_seed") c.corpus.markov_seed = parse_number<std::uint64_t>("corpus", key, text);
    }
  }
  {
    const auto& s = section("tokenizer");
    check_keys("tokenizer", s, {"vocab_size"});
    for (const auto& [key, v] : s) c.data.tokenizer_vocab = parse_number<int>("tokenizer", key, v.data());
  }
  {
    const auto& s = section("data");
    check_keys("data", s, {"window", "validation_fraction", "split_seed"});
    for (const auto& [key, v] : s) {
      if (key == "window") c.data.window = parse_number<int>("data", key, v.data());
      else if (key == "validation_fraction") c.data.validation_fraction = parse_number<double>("data", key, v.data());
      else if (key == "split_seed") c.data.split_seed = parse_number<std::uint64_t>("data", key, v.data());
    }
  }
  {
    const auto& s = section("model");
    check_keys("model", s, {"layers", "heads", "dim", "init_std", "bos_masking"});
    for (const auto& [key, v] : s) {
      if (key == "layers") c.model.layers = parse_number<int>("model", key, v.data());
      else if (key == "heads") c.model.heads = parse_number<int>("model", key, v.data());
      else if (key == "dim") c.model.dim = parse_number<int>("model", key, v.data());
      else if (key == "init_std") c.model.init_std = parse_number<double>("model", key, v.data());
      else if (key == "bos_masking") c.model.bos_masking = model::parse_bos_masking(boost::trim_copy(v.data()));
    }
  }
  {
    const auto& s = section("optimizer");
    check_keys("optimizer", s,
               {"preset", "learning_rate", "warmup_fraction", "weight_decay", "beta1", "beta2", "epsilon",
                "batch_size", "accumulation", "epochs"});
    if (const auto it = s.find("preset"); it != s.not_found()) {
      c.optimizer_preset = boost::trim_copy(it->second.data());
      if (c.optimizer_preset == "desk") c.optimizer = train::OptimizerSettings::desk();
      else if (c.optimizer_preset == "paper") c.optimizer = train::OptimizerSettings::paper();
      else fail("config: [optimizer] preset must be desk or paper, got '" + c.optimizer_preset + "'");
    }
    auto& o = c.optimizer;
    for (const auto& [key, v] : s) {
      const std::string& t = v.data();
      if (key == "learning_rate") o.learning_rate = parse_number<double>("optimizer", key, t);
      else if (key == "warmup_fraction") o.warmup_fraction = parse_number<double>("optimizer", key, t);
      else if (key == "weight_decay") o.weight_decay = parse_number<double>("optimizer", key, t);
      else if (key == "beta1") o.beta1 = parse_number<double>("optimizer", key, t);
      else if (key == "beta2") o.beta2 = parse_number<double>("optimizer", key, t);
      else if (key == "epsilon") o.epsilon = parse_number<double>("optimizer", key, t);
      else if (key == "batch_size") o.batch_size = parse_number<int>("optimizer", key, t);
      else if (key == "accumulation") o.accumulation = parse_number<int>("optimizer", key, t);
      else if (key == "epochs") o.epochs = parse_number<int>("optimizer", key, t);
    }
  }
  {
    const auto& s = section("experiment");
    check_keys("experiment", s, {"orderings", "seeds", "output_root"});
    for (const auto& [key, v] : s) {
      if (key == "orderings") c.orderings = split_list(v.data());
      else if (key == "seeds") {
        c.seeds.clear();
        for (const auto& p : split_list(v.data())) c.seeds.push_back(parse_number<std::uint64_t>("experiment", key, p));
      } else if (key == "output_root") {
        fs::path p(boost::trim_copy(v.data()));
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        c.output_root = p.lexically_normal();
      }
    }
  }
  {
    const auto& s = section("diagnostics");
    check_keys("diagnostics", s, {"sequences", "entropy", "rank", "rsa", "stats"});
    for (const auto& [key, v] : s) {
      if (key == "sequences") c.diagnostics.sequences = parse_number<int>("diagnostics", key, v.data());
      else if (key == "entropy") c.diagnostics.entropy = parse_bool("diagnostics", key, v.data());
      else if (key == "rank") c.diagnostics.rank = parse_bool("diagnostics", key, v.data());
      else if (key == "rsa") c.diagnostics.rsa = parse_bool("diagnostics", key, v.data());
      else if (key == "stats") c.diagnostics.stats = parse_bool("diagnostics", key, v.data());
    }
  }
  c.validate(false);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "config: cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path.parent_path());
}

namespace {

std::string render_hashed_sections(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "[corpus]\n";
  out << "# text: BPE over the files under `paths`; markov: seeded order-k chain emitting token ids directly\n";
  out << "kind = " << c.corpus.kind << "\n";
  out << "paths = ";
  for (std::size_t i = 0; i < c.corpus.paths.size(); ++i) out << (i ? ", " : "") << c.corpus.paths[i].string();
  out << "\n";
  out << "markov_order = " << c.corpus.markov_order << "\n";
  out << "markov_vocab = " << c.corpus.markov_vocab << "\n";
  out << "markov_alpha = " << fmt_double(c.corpus.markov_alpha) << "\n";
  out << "markov_tokens = " << c.corpus.markov_tokens << "\n";
  out << "markov_doc_length = " << c.corpus.markov_doc_length << "\n";
  out << "markov_seed = " << c.corpus.markov_seed << "\n\n";
  out << "[tokenizer]\n";
  out << "# text corpora only; markov corpora use markov_vocab + 1 ids\n";
  out << "vocab_size = " << c.data.tokenizer_vocab << "\n\n";
  out << "[data]\n";
  out << "# window counts BOS\n";
  out << "window = " << c.data.window << "\n";
  out << "validation_fraction = " << fmt_double(c.data.validation_fraction) << "\n";
  out << "split_seed = " << c.data.split_seed << "\n\n";
  out << "[model]\n";
  out << "layers = " << c.model.layers << "\n";
  out << "heads = " << c.model.heads << "\n";
  out << "dim = " << c.model.dim << "\n";
  out << "init_std = " << fmt_double(c.model.init_std) << "\n";
  out << "# softmax or drop_term\n";
  out << "bos_masking = " << model::to_string(c.model.bos_masking) << "\n\n";
  const auto& o = c.optimizer;
  out << "[optimizer]\n";
  out << "# desk or paper; explicit keys below override the preset\n";
  out << "preset = " << c.optimizer_preset << "\n";
  out << "learning_rate = " << fmt_double(o.learning_rate) << "\n";
  out << "warmup_fraction = " << fmt_double(o.warmup_fraction) << "\n";
  out << "weight_decay = " << fmt_double(o.weight_decay) << "\n";
  out << "beta1 = " << fmt_double(o.beta1) << "\n";
  out << "beta2 = " << fmt_double(o.beta2) << "\n";
  out << "epsilon = " << fmt_double(o.epsilon) << "\n";
  out << "batch_size = " << o.batch_size << "\n";
  out << "accumulation = " << o.accumulation << "\n";
  out << "epochs = " << o.epochs << "\n";
  return out.str();
}

}  // namespace

std::string ExperimentConfig::render() const {
  std::ostringstream out;
  out << render_hashed_sections(*this) << "\n";
  out << "[experiment]\n";
  out << "# forward, backward, fixed:<seed>\n";
  out << "orderings = " << boost::join(orderings, ", ") << "\n";
  out << "seeds = ";
  for (std::size_t i = 0; i < seeds.size(); ++i) out << (i ? ", " : "") << seeds[i];
  out << "\n";
  out << "# FACTORIX_OUT overrides this\n";
  out << "output_root = " << output_root.string() << "\n\n";
  out << "[diagnostics]\n";
  out << "# validation rows traced per run\n";
  out << "sequences = " << diagnostics.sequences << "\n";
  out << "entropy = " << (diagnostics.entropy ? "true" : "false") << "\n";
  out << "rank = " << (diagnostics.rank ? "true" : "false") << "\n";
  out << "rsa = " << (diagnostics.rsa ? "true" : "false") << "\n";
  out << "stats = " << (diagnostics.stats ? "true" : "false") << "\n";
  return out.str();
}

std::string ExperimentConfig::hash() const { return sha256_hex(render_hashed_sections(*this)); }

void ExperimentConfig::validate(bool check_paths) const {
  require(corpus.kind == "text" || corpus.kind == "markov",
          "config: [corpus] kind must be text or markov, got '" + corpus.kind + "'");
  if (corpus.kind == "text") {
    if (check_paths) {
      require(!corpus.paths.empty(), "config: [corpus] paths is empty for a text corpus");
      for (const auto& p : corpus.paths) require(fs::exists(p), "config: corpus path does not exist: " + p.string());
    }
    require(data.tokenizer_vocab >= tokenize::kBaseVocab,
            "config: [tokenizer] vocab_size must be >= " + std::to_string(tokenize::kBaseVocab));
  } else {
    require(corpus.markov_order >= 1, "config: [corpus] markov_order must be >= 1");
    require(corpus.markov_vocab >= 2, "config: [corpus] markov_vocab must be >= 2");
    require(corpus.markov_alpha > 0, "config: [corpus] markov_alpha must be positive");
    require(corpus.markov_doc_length >= static_cast<std::size_t>(corpus.markov_order) &&
                corpus.markov_tokens >= corpus.markov_doc_length,
            "config: [corpus] markov_tokens >= markov_doc_length >= markov_order required");
  }
  require(data.window >= 2, "config: [data] window must be >= 2");
  require(data.validation_fraction > 0 && data.validation_fraction < 1,
          "config: [data] validation_fraction must be in (0, 1)");
  model_for(corpus.kind == "markov" ? corpus.markov_vocab + 1 : data.tokenizer_vocab, 1).validate();
  optimizer.validate();
  require(!orderings.empty(), "config: [experiment] needs at least one ordering");
  require(!seeds.empty(), "config: [experiment] needs at least one seed");
  for (const auto& o : orderings) ordering::parse_ordering(o, data.window - 1);
  require(diagnostics.sequences >= 1, "config: [diagnostics] sequences must be >= 1");
}

model::ModelConfig ExperimentConfig::model_for(int vocab_size, std::uint64_t seed) const {
  model::ModelConfig m = model;
  m.window = data.window;
  m.vocab_size = vocab_size;
  m.seed = seed;
  return m;
}

fs::path ExperimentConfig::root() const {
  if (const char* env = std::getenv("FACTORIX_OUT"); env != nullptr && *env != '\0') return env;
  return output_root;
}

std::string markov_tokenizer_hash(const probcore::MarkovSource& source) {
  return sha256_hex("markov-identity v1 " + source.hash());
}

namespace {

json data_record(const ExperimentConfig& config, const DataBundle& b, std::size_t discarded) {
  json j;
  j["config_hash"] = config.hash();
  j["corpus_kind"] = config.corpus.kind;
  j["tokenizer_hash"] = b.tokenizer_hash;
  j["vocab_size"] = b.vocab_size;
  j["window"] = config.data.window;
  j["train_hash"] = b.train.content_hash();
  j["validation_hash"] = b.validation.content_hash();
  j["train_rows"] = b.train.size();
  j["validation_rows"] = b.validation.size();
  j["discarded_tokens"] = discarded;
  json files = json::object();
  for (const char* name : {"train.pkds", "validation.pkds", "tokenizer.txt"})
    if (fs::exists(b.dir / name)) files[name] = sha256_file(b.dir / name);
  j["files"] = files;
  return j;
}

std::optional<DataBundle> reuse_data(const ExperimentConfig& config, const fs::path& dir) {
  const fs::path record = dir / "data.json";
  if (!fs::exists(record)) return std::nullopt;
  const json j = read_json(record);
  if (j.value("config_hash", "") != config.hash()) return std::nullopt;
  for (const auto& [name, digest] : j.at("files").items())
    if (!fs::exists(dir / name) || sha256_file(dir / name) != digest.get<std::string>()) return std::nullopt;
  DataBundle b;
  b.dir = dir;
  b.tokenizer_hash = j.at("tokenizer_hash").get<std::string>();
  b.vocab_size = j.at("vocab_size").get<int>();
  if (fs::exists(dir / "tokenizer.txt")) {
    b.tokenizer = tokenize::Tokenizer::load(dir / "tokenizer.txt");
    if (b.tokenizer->hash() != b.tokenizer_hash) return std::nullopt;
  }
  b.train = tokenize::load_dataset(dir / "train.pkds");
  b.validation = tokenize::load_dataset(dir / "validation.pkds");
  if (b.train.content_hash() != j.at("train_hash").get<std::string>() ||
      b.validation.content_hash() != j.at("validation_hash").get<std::string>() ||
      b.train.tokenizer_hash() != b.tokenizer_hash)
    return std::nullopt;
  return b;
}

}  // namespace

DataBundle prepare_data(const ExperimentConfig& config) {
  config.validate(true);
  const fs::path dir = config.experiment_dir() / "data";
  fs::create_directories(dir);
  FileLock lock(dir / ".lock");
  if (auto reused = reuse_data(config, dir)) return std::move(*reused);

  DataBundle b;
  b.dir = dir;
  std::vector<tokenize::TokenId> stream;
  if (config.corpus.kind == "markov") {
    const auto& c = config.corpus;
    const auto source = probcore::MarkovSource::random(c.markov_order, c.markov_vocab, c.markov_alpha, c.markov_seed);
    const std::size_t docs = c.markov_tokens / c.markov_doc_length;
    const auto seqs = probcore::sample_sequences(source, docs, c.markov_doc_length, c.markov_seed + 1);
    stream.reserve(docs * c.markov_doc_length);
    for (const auto& s : seqs)
      for (int t : s) stream.push_back(static_cast<tokenize::TokenId>(t + 1));
    b.tokenizer_hash = markov_tokenizer_hash(source);
    b.vocab_size = c.markov_vocab + 1;
    fs::remove(dir / "tokenizer.txt");
  } else {
    const std::string text = tokenize::read_corpus(config.corpus.paths);
    require(!text.empty(), "corpus is empty");
    b.tokenizer = tokenize::Tokenizer::train(text, config.data.tokenizer_vocab);
    b.tokenizer->save(dir / "tokenizer.txt");
    b.tokenizer_hash = b.tokenizer->hash();
    b.vocab_size = b.tokenizer->vocab_size();
    stream = b.tokenizer->encode(text);
  }
  auto packed = tokenize::pack_corpus(stream, static_cast<std::uint32_t>(config.data.window),
                                      static_cast<std::uint32_t>(b.vocab_size), b.tokenizer_hash);
  require(packed.dataset.size() >= 2, "corpus too small: fewer than two windows of " +
                                          std::to_string(config.data.window) + " tokens");
  std::tie(b.train, b.validation) =
      tokenize::split_dataset(packed.dataset, config.data.validation_fraction, config.data.split_seed);
  tokenize::save_dataset(b.train, dir / "train.pkds");
  tokenize::save_dataset(b.validation, dir / "validation.pkds");
  write_text_atomic(dir / "data.json", data_record(config, b, packed.discarded_tokens).dump(2) + "\n");
  return b;
}

std::string ordering_dir_name(const ordering::Permutation& perm) {
  switch (perm.kind()) {
    case ordering::OrderingKind::forward: return "forward";
    case ordering::OrderingKind::backward: return "backward";
    case ordering::OrderingKind::fixed: return "fixed" + std::to_string(perm.seed().value_or(0));
    case ordering::OrderingKind::explicit_map: return "explicit";
  }
  return "explicit";
}

namespace {

void add_artifact(json& artifacts, const fs::path& run_dir, const fs::path& rel) {
  artifacts[rel.generic_string()] = sha256_file(run_dir / rel);
}

}  // namespace

nlohmann::json load_manifest(const fs::path& run_dir, bool verify) {
  const json m = read_json(run_dir / "manifest.json");
  if (verify) {
    require(m.contains("artifacts"), "manifest " + (run_dir / "manifest.json").string() + " lists no artifacts");
    for (const auto& [rel, digest] : m.at("artifacts").items()) {
      const fs::path p = run_dir / rel;
      require(fs::exists(p), "manifest artifact missing: " + p.string());
      require(sha256_file(p) == digest.get<std::string>(), "manifest artifact hash mismatch: " + p.string());
    }
  }
  return m;
}

RunInfo run_training(const ExperimentConfig& config, const std::string& ordering_spec, std::uint64_t seed,
                     bool force, const ProgressFn& progress) {
  config.validate(true);
  const auto perm = ordering::parse_ordering(ordering_spec, config.data.window - 1);
  const fs::path dir = config.experiment_dir() / (ordering_dir_name(perm) + "-seed" + std::to_string(seed));
  fs::create_directories(dir);
  FileLock lock(dir / ".lock");

  if (!force && fs::exists(dir / "manifest.json")) {
    try {
      return RunInfo{dir, load_manifest(dir, true), true};
    } catch (const Error&) {
      // Incomplete or damaged; retrain below.
    }
  }
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().filename() != ".lock") fs::remove_all(entry.path());

  const DataBundle data = prepare_data(config);
  const std::string started = now_utc();
  const auto model_config = config.model_for(data.vocab_size, seed);
  const auto init = model::init_model(model_config);
  model::save_checkpoint(init, dir / "checkpoint-init");

  train::TrainOptions options;
  options.validation = &data.validation;
  if (progress) options.progress = progress;
  auto result = train::train(model_config, data.train, perm, config.optimizer, options);

  model::save_checkpoint(result.checkpoint, dir / "checkpoint");
  result.log.write_csv(dir / "trainlog.csv");
  {
    std::ofstream out(dir / "validation_ppl.csv");
    out << "epoch,perplexity\n";
    for (std::size_t e = 0; e < result.log.epoch_validation_ppl.size(); ++e)
      out << e + 1 << ',' << fmt_double(result.log.epoch_validation_ppl[e]) << '\n';
  }
  ordering::save_permutation(perm, dir / "ordering.perm");
  {
    std::ofstream out(dir / "config.ini");
    out << config.render();
  }

  json m;
  m["tool_version"] = FACTORIX_VERSION;
  m["config_hash"] = config.hash();
  m["model_config_hash"] = model_config.hash();
  m["ordering"] = perm.label();
  m["seed"] = seed;
  m["tokenizer_hash"] = data.tokenizer_hash;
  m["train_dataset_hash"] = data.train.content_hash();
  m["validation_dataset_hash"] = data.validation.content_hash();
  m["data_dir"] = fs::relative(data.dir, dir).generic_string();
  m["schedule_hash"] = result.schedule_hash;
  m["init_hash"] = model::checkpoint_file_hash(dir / "checkpoint-init");
  m["checkpoint_hash"] = model::checkpoint_file_hash(dir / "checkpoint");
  m["optimizer_steps"] = result.checkpoint.meta.step;
  m["final_validation_ppl"] =
      result.log.epoch_validation_ppl.empty() ? json(nullptr) : json(result.log.epoch_validation_ppl.back());
  json artifacts = json::object();
  for (const char* rel : {"checkpoint/manifest.txt", "checkpoint/weights.bin", "checkpoint-init/manifest.txt",
                          "checkpoint-init/weights.bin", "trainlog.csv", "validation_ppl.csv", "ordering.perm",
                          "config.ini"})
    add_artifact(artifacts, dir, rel);
  m["artifacts"] = artifacts;
  m["started_at"] = started;
  m["finished_at"] = now_utc();
  write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
  return RunInfo{dir, m, false};
}

std::vector<std::string> ManifestDiff::differing_inputs() const {
  std::vector<std::string> out;
  for (const auto& f : fields)
    if (f.is_input && !f.equal()) out.push_back(f.name);
  return out;
}

std::string ManifestDiff::render() const {
  std::ostringstream out;
  out << "field,kind,status,a,b\n";
  for (const auto& f : fields)
    out << f.name << ',' << (f.is_input ? "input" : "output") << ',' << (f.equal() ? "same" : "differs") << ','
        << f.a << ',' << f.b << '\n';
  return out.str();
}

ManifestDiff diff_manifests(const json& a, const json& b) {
  auto text = [](const json& m, const std::string& key) -> std::string {
    if (!m.contains(key)) return "";
    const json& v = m.at(key);
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  ManifestDiff d;
  for (const char* key : {"tool_version", "config_hash", "model_config_hash", "tokenizer_hash", "train_dataset_hash",
                          "validation_dataset_hash", "schedule_hash", "init_hash", "seed", "ordering"})
    d.fields.push_back({key, text(a, key), text(b, key), true});
  for (const char* key : {"checkpoint_hash", "optimizer_steps", "final_validation_ppl"})
    d.fields.push_back({key, text(a, key), text(b, key), false});
  return d;
}

LoadedRun load_run(const fs::path& run_dir, bool init_checkpoint) {
  LoadedRun r;
  r.dir = run_dir;
  r.manifest = load_manifest(run_dir, true);
  r.checkpoint = model::load_checkpoint(run_dir / (init_checkpoint ? "checkpoint-init" : "checkpoint"));
  r.ordering = ordering::load_permutation(run_dir / "ordering.perm");
  r.label = fs::path(run_dir).lexically_normal().filename().string();
  if (r.label.empty()) r.label = fs::path(run_dir).lexically_normal().parent_path().filename().string();
  if (init_checkpoint) r.label += "-init";
  require(r.ordering.size() == r.checkpoint.config.window - 1,
          "run " + run_dir.string() + ": ordering size does not match the model window");
  return r;
}

tokenize::PackedDataset load_run_dataset(const LoadedRun& run, tokenize::Split split) {
  const fs::path data_dir = run.dir / run.manifest.at("data_dir").get<std::string>();
  const bool val = split == tokenize::Split::validation;
  auto ds = tokenize::load_dataset(data_dir / (val ? "validation.pkds" : "train.pkds"));
  const std::string expected = run.manifest.at(val ? "validation_dataset_hash" : "train_dataset_hash");
  require(ds.content_hash() == expected,
          "provenance mismatch: dataset in " + data_dir.string() + " differs from the one recorded for " +
              run.dir.string());
  return ds;
}

std::vector<model::ForwardTrace<float>> trace_rows(const model::Checkpoint& ckpt,
                                                   const tokenize::PackedDataset& data,
                                                   const ordering::Permutation& ordering, int count) {
  require(data.window() == static_cast<std::uint32_t>(ckpt.config.window),
          "trace_rows: dataset window differs from the model window");
  const int rows = std::min<int>(count, static_cast<int>(data.size()));
  const int w = ckpt.config.window;
  constexpr int kChunk = 16;
  std::vector<model::ForwardTrace<float>> traces;
  traces.reserve(static_cast<std::size_t>(rows));
  for (int start = 0; start < rows; start += kChunk) {
    const int n = std::min(kChunk, rows - start);
    std::vector<tokenize::TokenId> tokens(static_cast<std::size_t>(n) * w);
    for (int r = 0; r < n; ++r)
      ordering::apply_to_span<tokenize::TokenId>(
          ordering, data.sequence(static_cast<std::size_t>(start + r)),
          std::span<tokenize::TokenId>(tokens).subspan(static_cast<std::size_t>(r) * w, w));
    for (auto& t : model::forward(ckpt, tokens, n, w)) traces.push_back(std::move(t));
  }
  return traces;
}

}  // namespace factorix::experiment
