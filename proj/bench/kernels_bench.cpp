// OpenMP kernels against the serial reference at desk-model shapes
// (batch 16, window 64, dim 64, 2 heads).  Run with OMP_NUM_THREADS to vary
// the thread count.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "factorix/kernels.hpp"
#include "factorix/model.hpp"

namespace k = factorix::kernels;

namespace {

constexpr int kBatch = 16, kWindow = 64, kDim = 64, kHeads = 2;
constexpr int kRows = kBatch * kWindow;

std::vector<float> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <bool Ref>
void BM_Gemm(benchmark::State& state) {
  const int m = kRows, kk = kDim, n = static_cast<int>(state.range(0));
  const auto a = randn(static_cast<std::size_t>(m) * kk, 1), b = randn(static_cast<std::size_t>(kk) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    if constexpr (Ref) k::ref::gemm<float>(c, a, b, m, kk, n, false);
    else k::gemm<float>(c, a, b, m, kk, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * m * kk * n);
}

template <bool Ref>
void BM_LinearBackward(benchmark::State& state) {
  const int m = kRows, kk = kDim, n = 4 * kDim;
  const auto in = randn(static_cast<std::size_t>(m) * kk, 3), w = randn(static_cast<std::size_t>(kk) * n, 4);
  const auto dout = randn(static_cast<std::size_t>(m) * n, 5);
  std::vector<float> din(in.size()), dw(w.size()), db(static_cast<std::size_t>(n));
  for (auto _ : state) {
    if constexpr (Ref) k::ref::linear_backward<float>(din, dw, db, dout, in, w, m, kk, n);
    else k::linear_backward<float>(din, dw, db, dout, in, w, m, kk, n);
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Ref>
void BM_LayerNorm(benchmark::State& state) {
  const auto in = randn(static_cast<std::size_t>(kRows) * kDim, 6), g = randn(kDim, 7), b = randn(kDim, 8);
  std::vector<float> out(in.size()), mean(kRows), rstd(kRows);
  for (auto _ : state) {
    if constexpr (Ref) k::ref::layernorm_forward<float>(out, mean, rstd, in, g, b, kRows, kDim);
    else k::layernorm_forward<float>(out, mean, rstd, in, g, b, kRows, kDim);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_Gelu(benchmark::State& state) {
  const auto in = randn(static_cast<std::size_t>(kRows) * 4 * kDim, 9);
  std::vector<float> out(in.size());
  for (auto _ : state) {
    if constexpr (Ref) k::ref::gelu_forward<float>(out, in);
    else k::gelu_forward<float>(out, in);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_AttentionForward(benchmark::State& state) {
  const auto qkv = randn(static_cast<std::size_t>(kRows) * 3 * kDim, 10);
  std::vector<float> out(static_cast<std::size_t>(kRows) * kDim);
  std::vector<float> att(static_cast<std::size_t>(kBatch) * kHeads * kWindow * kWindow);
  for (auto _ : state) {
    if constexpr (Ref) k::ref::attention_forward<float>(out, att, qkv, kBatch, kWindow, kDim, kHeads);
    else k::attention_forward<float>(out, att, qkv, kBatch, kWindow, kDim, kHeads);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_AttentionBackward(benchmark::State& state) {
  const auto qkv = randn(static_cast<std::size_t>(kRows) * 3 * kDim, 11);
  const auto dout = randn(static_cast<std::size_t>(kRows) * kDim, 12);
  std::vector<float> out(dout.size()), att(static_cast<std::size_t>(kBatch) * kHeads * kWindow * kWindow);
  k::ref::attention_forward<float>(out, att, qkv, kBatch, kWindow, kDim, kHeads);
  std::vector<float> dqkv(qkv.size());
  for (auto _ : state) {
    if constexpr (Ref) k::ref::attention_backward<float>(dqkv, dout, qkv, att, kBatch, kWindow, kDim, kHeads);
    else k::attention_backward<float>(dqkv, dout, qkv, att, kBatch, kWindow, kDim, kHeads);
    benchmark::DoNotOptimize(dqkv.data());
  }
}

// Whole training micro-batch: forward plus backward of the desk model.
void BM_TrainStep(benchmark::State& state) {
  factorix::model::ModelConfig c;
  c.vocab_size = 33;
  const auto ckpt = factorix::model::init_model(c);
  std::mt19937_64 rng(13);
  std::vector<factorix::tokenize::TokenId> tokens(static_cast<std::size_t>(kRows));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = i % kWindow == 0 ? 0 : 1 + static_cast<int>(rng() % 32);
  factorix::model::Transformer<float> net(c);
  std::vector<float> grads(ckpt.params.size());
  for (auto _ : state) {
    net.forward(ckpt.params, tokens, kBatch, kWindow);
    net.backward(ckpt.params, grads, 1.0);
    benchmark::DoNotOptimize(grads.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/ref")->Arg(3 * kDim)->Arg(4 * kDim);
BENCHMARK(BM_Gemm<false>)->Name("gemm/omp")->Arg(3 * kDim)->Arg(4 * kDim);
BENCHMARK(BM_LinearBackward<true>)->Name("linear_backward/ref");
BENCHMARK(BM_LinearBackward<false>)->Name("linear_backward/omp");
BENCHMARK(BM_LayerNorm<true>)->Name("layernorm/ref");
BENCHMARK(BM_LayerNorm<false>)->Name("layernorm/omp");
BENCHMARK(BM_Gelu<true>)->Name("gelu/ref");
BENCHMARK(BM_Gelu<false>)->Name("gelu/omp");
BENCHMARK(BM_AttentionForward<true>)->Name("attention_forward/ref");
BENCHMARK(BM_AttentionForward<false>)->Name("attention_forward/omp");
BENCHMARK(BM_AttentionBackward<true>)->Name("attention_backward/ref");
BENCHMARK(BM_AttentionBackward<false>)->Name("attention_backward/omp");
BENCHMARK(BM_TrainStep)->Name("train_micro_batch/omp")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
