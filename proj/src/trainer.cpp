#include "factorix/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "factorix/error.hpp"
#include "factorix/hash.hpp"

namespace factorix::train {

OptimizerSettings OptimizerSettings::desk() { return OptimizerSettings{}; }

OptimizerSettings OptimizerSettings::paper() {
  OptimizerSettings s;
  s.learning_rate = 2e-5;
  return s;
}

void OptimizerSettings::validate() const {
  require(std::isfinite(learning_rate) && learning_rate > 0, "optimizer: learning_rate must be positive");
  require(warmup_fraction >= 0 && warmup_fraction < 1, "optimizer: warmup_fraction must be in [0, 1)");
  require(weight_decay >= 0, "optimizer: weight_decay must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "optimizer: betas must be in [0, 1)");
  require(epsilon > 0, "optimizer: epsilon must be positive");
  require(batch_size >= 1 && accumulation >= 1 && epochs >= 1,
          "optimizer: batch_size, accumulation and epochs must be >= 1");
}

std::string BatchSchedule::hash() const {
  Sha256 h;
  h.update_pod(static_cast<std::uint64_t>(optimizer_steps));
  for (std::size_t i = 0; i < micro_batches.size(); ++i) {
    h.update_pod(static_cast<std::uint64_t>(step_of[i]));
    h.update_pod(static_cast<std::uint64_t>(micro_batches[i].size()));
    for (std::size_t r : micro_batches[i]) h.update_pod(static_cast<std::uint64_t>(r));
  }
  return h.hex();
}

BatchSchedule make_schedule(std::size_t rows, const OptimizerSettings& settings, std::uint64_t seed) {
  settings.validate();
  require(rows > 0, "make_schedule: empty dataset");
  BatchSchedule s;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(rows);
  const auto bs = static_cast<std::size_t>(settings.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    for (std::size_t i = 0; i < rows; ++i) order[i] = i;
    // Fisher-Yates with explicit index draws, identical across standard libraries.
    for (std::size_t i = rows - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
      std::swap(order[i], order[j]);
    }
    int in_step = 0;
    for (std::size_t b = 0; b < rows; b += bs) {
      s.micro_batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(rows, b + bs)));
      s.step_of.push_back(step);
      s.epoch_of.push_back(epoch);
      if (++in_step == settings.accumulation) {
        in_step = 0;
        ++step;
      }
    }
    if (in_step > 0) ++step;
  }
  s.optimizer_steps = step;
  return s;
}

int warmup_steps(int total_steps, double warmup_fraction) {
  return static_cast<int>(std::ceil(warmup_fraction * total_steps));
}

double cosine_lr(int step, int total_steps, int warmup, double base_lr) {
  if (step < warmup) return base_lr * static_cast<double>(step) / std::max(1, warmup);
  const double progress = static_cast<double>(step - warmup) / std::max(1, total_steps - warmup);
  return base_lr * std::max(0.0, 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path.string());
  out.precision(17);
  out << "step,split,nll,lr\n";
  for (const LogEntry& e : entries) out << e.step << ',' << e.split << ',' << e.nll << ',' << e.lr << '\n';
}

namespace {

// Gathers rows, applying the ordering to each.
void gather(const tokenize::PackedDataset& data, std::span<const std::size_t> rows,
            const ordering::Permutation& ordering, std::vector<tokenize::TokenId>& out) {
  const std::size_t w = data.window();
  out.resize(rows.size() * w);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    ordering::apply_to_span<tokenize::TokenId>(ordering, data.sequence(rows[b]),
                                               std::span<tokenize::TokenId>(out).subspan(b * w, w));
  }
}

void check_inputs(const model::ModelConfig& config, const tokenize::PackedDataset& data,
                  const ordering::Permutation& ordering) {
  require(data.window() == static_cast<std::uint32_t>(config.window),
          "dataset window " + std::to_string(data.window()) + " does not match model window " +
              std::to_string(config.window));
  require(ordering.size() == config.window - 1, "ordering covers " + std::to_string(ordering.size()) +
                                                    " positions but the window holds " +
                                                    std::to_string(config.window - 1) + " real tokens");
  require(static_cast<int>(data.vocab_size()) <= config.vocab_size,
          "dataset vocabulary exceeds the model vocabulary");
}

}  // namespace

double mean_nll(const model::Checkpoint& ckpt, const tokenize::PackedDataset& data,
                const ordering::Permutation& ordering, int batch_size) {
  check_inputs(ckpt.config, data, ordering);
  require(!data.empty(), "mean_nll: empty dataset");
  model::Transformer<float> net(ckpt.config);
  std::vector<tokenize::TokenId> tokens;
  std::vector<std::size_t> rows;
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    rows.clear();
    for (std::size_t r = start; r < std::min(data.size(), start + batch_size); ++r) rows.push_back(r);
    gather(data, rows, ordering, tokens);
    net.forward(ckpt.params, tokens, static_cast<int>(rows.size()), ckpt.config.window);
    for (double x : net.row_nll()) total += x;
  }
  return total / (static_cast<double>(data.size()) * (ckpt.config.window - 1));
}

TrainResult train(const model::ModelConfig& config, const tokenize::PackedDataset& data,
                  const ordering::Permutation& ordering, const OptimizerSettings& settings,
                  const TrainOptions& options) {
  check_inputs(config, data, ordering);
  if (options.validation != nullptr) {
    tokenize::require_same_provenance(data, *options.validation);
    check_inputs(config, *options.validation, ordering);
  }
  const BatchSchedule schedule = make_schedule(data.size(), settings, config.seed);
  const int total = schedule.optimizer_steps;
  const int warmup = warmup_steps(total, settings.warmup_fraction);
  const int stop = options.max_steps ? std::min(total, *options.max_steps) : total;

  TrainResult result;
  result.schedule_hash = schedule.hash();
  result.checkpoint = model::init_model(config);
  result.checkpoint.meta.ordering = ordering.label();
  result.checkpoint.meta.tokenizer_hash = data.tokenizer_hash();
  result.checkpoint.meta.seed = config.seed;
  std::vector<float>& params = result.checkpoint.params;

  model::Transformer<float> net(config);
  const model::ParamLayout& layout = net.layout();
  std::vector<float> grads(params.size(), 0.0f);
  std::vector<float> m1(params.size(), 0.0f);
  std::vector<float> m2(params.size(), 0.0f);
  std::vector<unsigned char> decays(params.size(), 0);
  for (const model::TensorInfo& t : layout.tensors()) {
    if (t.decays) std::fill_n(decays.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, 1);
  }

  std::vector<tokenize::TokenId> tokens;
  std::size_t mb = 0;
  for (int step = 0; step < stop; ++step) {
    std::size_t end = mb;
    std::size_t rows_in_step = 0;
    while (end < schedule.micro_batches.size() && schedule.step_of[end] == step) {
      rows_in_step += schedule.micro_batches[end].size();
      ++end;
    }
    const double tokens_in_step = static_cast<double>(rows_in_step) * (config.window - 1);
    std::fill(grads.begin(), grads.end(), 0.0f);
    double nll_sum = 0.0;
    for (; mb < end; ++mb) {
      const auto& rows = schedule.micro_batches[mb];
      gather(data, rows, ordering, tokens);
      try {
        net.forward(params, tokens, static_cast<int>(rows.size()), config.window);
      } catch (const Error& e) {
        fail("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      for (double x : net.row_nll()) nll_sum += x;
      net.backward(params, grads, 1.0 / tokens_in_step);
    }
    const double mean = nll_sum / tokens_in_step;
    if (!std::isfinite(mean)) fail("training diverged at step " + std::to_string(step) + ": non-finite loss");
    for (float g : grads) {
      if (!std::isfinite(g)) fail("training diverged at step " + std::to_string(step) + ": non-finite gradient");
    }

    const double lr = cosine_lr(step, total, warmup, settings.learning_rate);
    const double t = step + 1;
    const double bc1 = 1.0 - std::pow(settings.beta1, t);
    const double bc2 = 1.0 - std::pow(settings.beta2, t);
    const auto b1 = static_cast<float>(settings.beta1);
    const auto b2 = static_cast<float>(settings.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<float>(settings.epsilon);
    const auto decay = static_cast<float>(lr * settings.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (decays[i]) params[i] -= decay * params[i];
      m1[i] = b1 * m1[i] + (1.0f - b1) * grads[i];
      m2[i] = b2 * m2[i] + (1.0f - b2) * grads[i] * grads[i];
      params[i] -= step_size * m1[i] / (std::sqrt(m2[i]) * inv_sqrt_bc2 + eps);
    }
    result.log.entries.push_back({step, "train", mean, lr});
    if (options.progress) options.progress(step, total, mean);

    const bool epoch_done = mb == schedule.micro_batches.size() || schedule.epoch_of[mb] != schedule.epoch_of[mb - 1];
    if (options.validation != nullptr && epoch_done) {
      result.checkpoint.meta.step = step + 1;
      const double v = mean_nll(result.checkpoint, *options.validation, ordering);
      result.log.entries.push_back({step, "validation", v, lr});
      result.log.epoch_validation_ppl.push_back(std::exp(v));
    }
  }
  result.checkpoint.meta.step = stop;
  return result;
}

}  // namespace factorix::train
