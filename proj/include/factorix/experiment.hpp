#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "factorix/checkpoint.hpp"
#include "factorix/evalharness.hpp"
#include "factorix/ordering.hpp"
#include "factorix/probcore.hpp"
#include "factorix/tokenize.hpp"
#include "factorix/trainer.hpp"

// Config-driven orchestration shared by the command-line tool and the
// acceptance suite.
namespace factorix::experiment {

struct CorpusSettings {
  std::string kind = "text";  // "text" or "markov"
  std::vector<std::filesystem::path> paths;
  int markov_order = 2;
  int markov_vocab = 32;
  double markov_alpha = 0.1;
  std::size_t markov_tokens = 2'000'000;
  std::size_t markov_doc_length = 2000;
  std::uint64_t markov_seed = 42;
};

struct DataSettings {
  int window = 64;
  int tokenizer_vocab = 512;
  double validation_fraction = 0.1;
  std::uint64_t split_seed = 1;
};

struct DiagnosticsSettings {
  int sequences = 64;
  bool entropy = true;
  bool rank = true;
  bool rsa = true;
  bool stats = true;
};

struct ExperimentConfig {
  CorpusSettings corpus;
  DataSettings data;
  // layers, heads, dim, init_std and bos_masking come from here; window,
  // vocab_size and seed are filled in per run.
  model::ModelConfig model;
  std::string optimizer_preset = "desk";
  train::OptimizerSettings optimizer = train::OptimizerSettings::desk();
  std::vector<std::string> orderings = {"forward", "backward", "fixed:7"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::filesystem::path output_root = "runs";
  DiagnosticsSettings diagnostics;

  static ExperimentConfig defaults() { return {}; }
  // INI text: [section] headers and key = value lines; '#' or ';' comments.
  static ExperimentConfig parse(std::string_view ini, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);

  // Full INI rendering of every setting, defaults included.
  std::string render() const;
  // SHA-256 over everything that determines data and weights (the
  // [experiment] grid lists and output root are excluded).
  std::string hash() const;
  // With check_paths, corpus paths must exist.
  void validate(bool check_paths) const;

  model::ModelConfig model_for(int vocab_size, std::uint64_t seed) const;
  // FACTORIX_OUT overrides output_root.
  std::filesystem::path root() const;
  std::filesystem::path experiment_dir() const { return root() / hash().substr(0, 16); }
};

struct DataBundle {
  std::filesystem::path dir;
  std::string tokenizer_hash;
  std::optional<tokenize::Tokenizer> tokenizer;  // absent for markov corpora
  tokenize::PackedDataset train;
  tokenize::PackedDataset validation;
  int vocab_size = 0;
};

// Hash recorded as tokenizer provenance for a markov corpus, whose symbols map
// straight to ids 1..V.
std::string markov_tokenizer_hash(const probcore::MarkovSource& source);

// Builds, or reuses when hashes match, the tokenizer and packed splits under
// <experiment_dir>/data.
DataBundle prepare_data(const ExperimentConfig& config);

// Directory name for an ordering: forward, backward, fixed7, explicit.
std::string ordering_dir_name(const ordering::Permutation& perm);

struct RunInfo {
  std::filesystem::path dir;
  nlohmann::json manifest;
  bool reused = false;
};

using ProgressFn = std::function<void(int step, int total, double nll)>;

// Trains one (ordering, seed) cell into <experiment_dir>/<ordering>-seed<k>.
// A complete run directory whose artifacts verify is reused unless force.
RunInfo run_training(const ExperimentConfig& config, const std::string& ordering_spec, std::uint64_t seed,
                     bool force = false, const ProgressFn& progress = {});

// Loads manifest.json and checks every listed artifact hash.
nlohmann::json load_manifest(const std::filesystem::path& run_dir, bool verify = true);

struct ManifestDiff {
  struct Field {
    std::string name;
    std::string a, b;
    bool is_input = true;
    bool equal() const { return a == b; }
  };
  std::vector<Field> fields;

  std::vector<std::string> differing_inputs() const;
  std::string render() const;
};

ManifestDiff diff_manifests(const nlohmann::json& a, const nlohmann::json& b);

// What a command needs to evaluate a finished run.
struct LoadedRun {
  std::filesystem::path dir;
  nlohmann::json manifest;
  model::Checkpoint checkpoint;
  ordering::Permutation ordering = ordering::Permutation::forward(1);
  std::string label;  // "<ordering>-seed<k>"
};

LoadedRun load_run(const std::filesystem::path& run_dir, bool init_checkpoint = false);
// Validation (or training) split the run was trained against, checked against
// the manifest hashes.
tokenize::PackedDataset load_run_dataset(const LoadedRun& run, tokenize::Split split = tokenize::Split::validation);

// Forward traces of the first `count` rows of `data` under the run's ordering.
std::vector<model::ForwardTrace<float>> trace_rows(const model::Checkpoint& ckpt, const tokenize::PackedDataset& data,
                                                   const ordering::Permutation& ordering, int count);

}  // namespace factorix::experiment
