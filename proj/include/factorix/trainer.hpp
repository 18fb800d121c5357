#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "factorix/model.hpp"
#include "factorix/ordering.hpp"
#include "factorix/tokenize.hpp"

namespace factorix::train {

struct OptimizerSettings {
  double learning_rate = 3e-4;
  double warmup_fraction = 0.03;
  double weight_decay = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 16;
  int accumulation = 8;
  int epochs = 5;

  // Desk-scale learning rate; everything else as in the paper's setup.
  static OptimizerSettings desk();
  // lr 2e-5, the value used for the GPT-2 runs.
  static OptimizerSettings paper();
  void validate() const;
};

// One micro-batch is a list of dataset rows; `accumulation` consecutive
// micro-batches form an optimizer step.
struct BatchSchedule {
  std::vector<std::vector<std::size_t>> micro_batches;
  std::vector<int> step_of;        // optimizer step index of each micro-batch
  std::vector<int> epoch_of;       // epoch of each micro-batch
  int optimizer_steps = 0;

  std::string hash() const;
};

// Depends only on (rows, settings, seed).  Each epoch visits every row once in
// a seeded shuffled order; a trailing partial micro-batch is kept.
BatchSchedule make_schedule(std::size_t rows, const OptimizerSettings& settings, std::uint64_t seed);

// Linear warm-up from 0 over warmup_steps, then half-cosine decay to 0.
double cosine_lr(int step, int total_steps, int warmup_steps, double base_lr);
int warmup_steps(int total_steps, double warmup_fraction);

struct LogEntry {
  std::int64_t step = 0;
  std::string split;  // "train" or "validation"
  double nll = 0.0;   // mean NLL per predicted token
  double lr = 0.0;
  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

struct TrainLog {
  std::vector<LogEntry> entries;
  std::vector<double> epoch_validation_ppl;

  // CSV with header step,split,nll,lr.
  void write_csv(const std::filesystem::path& path) const;
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct TrainResult {
  model::Checkpoint checkpoint;
  TrainLog log;
  std::string schedule_hash;
};

struct TrainOptions {
  const tokenize::PackedDataset* validation = nullptr;
  // Called after every optimizer step with (step, total steps, mean train NLL).
  std::function<void(int, int, double)> progress;
  // Stops after this many optimizer steps when set; the LR schedule still
  // spans the full run.
  std::optional<int> max_steps;
};

// Trains from init_model(config).  Each row is reordered by `ordering` before
// the forward pass.  Throws with the step index when the loss goes non-finite.
TrainResult train(const model::ModelConfig& config, const tokenize::PackedDataset& data,
                  const ordering::Permutation& ordering, const OptimizerSettings& settings,
                  const TrainOptions& options = {});

// Mean NLL per predicted token of `data` under `ordering`.
double mean_nll(const model::Checkpoint& ckpt, const tokenize::PackedDataset& data,
                const ordering::Permutation& ordering, int batch_size = 16);

}  // namespace factorix::train
