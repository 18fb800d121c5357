#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "factorix/tokenize.hpp"

namespace factorix::model {

using tokenize::TokenId;

// How BOS is kept out of the predicted distribution.  softmax: the BOS logit is
// -inf in every output softmax.  drop_term: BOS stays in the softmax and is only
// excluded as a loss target (it never is one with BOS-prefixed windows).
enum class BosMasking { softmax, drop_term };

std::string to_string(BosMasking masking);
BosMasking parse_bos_masking(std::string_view text);

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int dim = 64;
  int window = 64;
  int vocab_size = 512;
  double init_std = 0.02;
  std::uint64_t seed = 1;
  BosMasking bos_masking = BosMasking::softmax;

  void validate() const;
  int head_dim() const { return dim / heads; }
  // Stable "key=value;..." rendering; the config hash is its SHA-256.
  std::string canonical() const;
  std::string hash() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decays = false;  // rank-2 weights get weight decay
};

// Names, shapes and flat offsets of every parameter, fixed by the config.
class ParamLayout {
 public:
  struct Block {
    std::size_t ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    std::size_t ln2_w, ln2_b, fc_w, fc_b, mlp_proj_w, mlp_proj_b;
  };

  explicit ParamLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& find(std::string_view name) const;
  std::size_t total() const { return total_; }

  std::size_t wte = 0, wpe = 0, lnf_w = 0, lnf_b = 0, head_w = 0;
  std::vector<Block> blocks;

 private:
  std::size_t add(std::string name, std::vector<int> shape, bool decays);

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

struct TrainingMetadata {
  std::int64_t step = 0;
  std::string ordering = "forward";
  std::string tokenizer_hash;
  std::uint64_t seed = 0;
  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<float> params;
  TrainingMetadata meta;

  std::span<const float> tensor(std::string_view name) const;
  std::string content_hash() const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Seeded N(0, init_std) weights; LayerNorm gains 1, biases 0.  Depends only on
// the config, so every ordering trained from one seed starts identically.
Checkpoint init_model(const ModelConfig& config);

template <typename T>
std::vector<T> widen(std::span<const float> params) {
  return std::vector<T>(params.begin(), params.end());
}

// Per-sequence record of one forward pass.
template <typename T>
struct ForwardTrace {
  int layers = 0, heads = 0, length = 0, dim = 0, vocab = 0;
  std::vector<T> logits;     // length x vocab, BOS column -inf under softmax masking
  std::vector<T> attention;  // layers x heads x length x length
  std::vector<T> hidden;     // (layers + 1) x length x dim, post-block residual stream

  T attn(int layer, int head, int i, int j) const {
    return attention[((static_cast<std::size_t>(layer) * heads + head) * length + i) * length + j];
  }
  std::span<const T> hidden_layer(int layer) const {
    return std::span<const T>(hidden).subspan(static_cast<std::size_t>(layer) * length * dim,
                                              static_cast<std::size_t>(length) * dim);
  }
};

// Batched forward / backward with cached activations.  Not thread-safe; the
// kernels it calls parallelize internally.
template <typename T>
class Transformer {
 public:
  explicit Transformer(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }

  // tokens holds batch rows of `length` ids, length <= window.
  void forward(std::span<const T> params, std::span<const TokenId> tokens, int batch, int length);

  // Negative log-likelihood sum of each row over its length-1 next-token
  // predictions.  BOS is never a target.
  std::vector<double> row_nll() const;

  // Log-probability of token[t+1] given the prefix, per row and position.
  std::vector<double> target_log_probs(int row) const;

  // grads += d(scale * sum of all row NLLs) / d(params).
  void backward(std::span<const T> params, std::span<T> grads, double scale);

  ForwardTrace<T> trace(int row) const;

 private:
  void resize(int batch, int length);

  ModelConfig config_;
  ParamLayout layout_;
  int batch_ = 0;
  int length_ = 0;
  std::vector<TokenId> tokens_;
  std::vector<std::vector<T>> resid_, resid_mid_;
  std::vector<std::vector<T>> ln1_, ln1_mean_, ln1_rstd_, qkv_, att_, attn_out_;
  std::vector<std::vector<T>> ln2_, ln2_mean_, ln2_rstd_, fc_, gelu_;
  std::vector<T> lnf_, lnf_mean_, lnf_rstd_, logits_, probs_;
  std::vector<double> logsumexp_;
};

template <typename T>
std::vector<ForwardTrace<T>> forward(const ModelConfig& config, std::span<const T> params,
                                     std::span<const TokenId> tokens, int batch, int length);

std::vector<ForwardTrace<float>> forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, int batch,
                                         int length);

// Mean NLL (nats/token) over the length-1 predictions recorded in a trace.
// targets are the trace's input tokens; targets[t+1] is predicted at t.
template <typename T>
double loss(const ForwardTrace<T>& trace, std::span<const TokenId> targets);

template <typename T>
struct GradientMap {
  ParamLayout layout;
  std::vector<T> values;
  double loss = 0.0;  // mean NLL over the batch

  std::span<const T> operator[](std::string_view name) const;
  double norm() const;
};

// Exact gradients of the batch-mean NLL.  Throws on a non-finite gradient.
template <typename T>
GradientMap<T> gradients(const ModelConfig& config, std::span<const T> params, std::span<const TokenId> tokens,
                         int batch, int length);

GradientMap<float> gradients(const Checkpoint& ckpt, std::span<const TokenId> tokens, int batch, int length);

}  // namespace factorix::model
