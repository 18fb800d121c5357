#include "factorix/model.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "factorix/error.hpp"
#include "factorix/hash.hpp"
#include "factorix/kernels.hpp"

namespace factorix::model {

std::string to_string(BosMasking masking) { return masking == BosMasking::softmax ? "softmax" : "drop_term"; }

BosMasking parse_bos_masking(std::string_view text) {
  if (text == "softmax") return BosMasking::softmax;
  if (text == "drop_term") return BosMasking::drop_term;
  fail("unknown bos_masking '" + std::string(text) + "' (expected softmax or drop_term)");
}

void ModelConfig::validate() const {
  require(layers >= 1, "model: layers must be >= 1");
  require(heads >= 1, "model: heads must be >= 1");
  require(dim >= 1 && dim % heads == 0, "model: dim must be a positive multiple of heads");
  require(window >= 2, "model: window must be >= 2");
  require(vocab_size >= 2, "model: vocab_size must be >= 2");
  require(std::isfinite(init_std) && init_std >= 0.0, "model: init_std must be finite and >= 0");
}

std::string ModelConfig::canonical() const {
  std::ostringstream out;
  out << std::setprecision(17) << "layers=" << layers << ";heads=" << heads << ";dim=" << dim
      << ";window=" << window << ";vocab_size=" << vocab_size << ";init_std=" << init_std << ";seed=" << seed
      << ";bos_masking=" << to_string(bos_masking);
  return out.str();
}

std::string ModelConfig::hash() const { return sha256_hex(canonical()); }

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int d = c.dim;
  wte = add("wte", {c.vocab_size, d}, true);
  wpe = add("wpe", {c.window, d}, true);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Block b{};
    b.ln1_w = add(p + "ln1.weight", {d}, false);
    b.ln1_b = add(p + "ln1.bias", {d}, false);
    b.qkv_w = add(p + "attn.qkv.weight", {d, 3 * d}, true);
    b.qkv_b = add(p + "attn.qkv.bias", {3 * d}, false);
    b.proj_w = add(p + "attn.proj.weight", {d, d}, true);
    b.proj_b = add(p + "attn.proj.bias", {d}, false);
    b.ln2_w = add(p + "ln2.weight", {d}, false);
    b.ln2_b = add(p + "ln2.bias", {d}, false);
    b.fc_w = add(p + "mlp.fc.weight", {d, 4 * d}, true);
    b.fc_b = add(p + "mlp.fc.bias", {4 * d}, false);
    b.mlp_proj_w = add(p + "mlp.proj.weight", {4 * d, d}, true);
    b.mlp_proj_b = add(p + "mlp.proj.bias", {d}, false);
    blocks.push_back(b);
  }
  lnf_w = add("lnf.weight", {d}, false);
  lnf_b = add("lnf.bias", {d}, false);
  head_w = add("head.weight", {d, c.vocab_size}, true);
}

std::size_t ParamLayout::add(std::string name, std::vector<int> shape, bool decays) {
  std::size_t size = 1;
  for (int s : shape) size *= static_cast<std::size_t>(s);
  tensors_.push_back({std::move(name), std::move(shape), total_, size, decays});
  const std::size_t offset = total_;
  total_ += size;
  return offset;
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const TensorInfo& t : tensors_) {
    if (t.name == name) return t;
  }
  fail("unknown tensor '" + std::string(name) + "'");
}

std::span<const float> Checkpoint::tensor(std::string_view name) const {
  const TensorInfo& info = ParamLayout(config).find(name);
  return std::span<const float>(params).subspan(info.offset, info.size);
}

std::string Checkpoint::content_hash() const {
  Sha256 h;
  h.update(config.canonical());
  h.update(std::as_bytes(std::span<const float>(params)));
  return h.hex();
}

Checkpoint init_model(const ModelConfig& config) {
  const ParamLayout layout(config);
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.meta.seed = config.seed;
  ckpt.params.assign(layout.total(), 0.0f);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const TensorInfo& t : layout.tensors()) {
    const bool is_norm_gain = t.name.ends_with("ln1.weight") || t.name.ends_with("ln2.weight") || t.name == "lnf.weight";
    const bool is_bias = t.name.ends_with(".bias");
    for (std::size_t i = 0; i < t.size; ++i) {
      float& p = ckpt.params[t.offset + i];
      if (is_norm_gain) {
        p = 1.0f;
      } else if (is_bias) {
        p = 0.0f;
      } else {
        p = static_cast<float>(config.init_std * normal(rng));
      }
    }
  }
  return ckpt;
}

namespace {

template <typename T>
std::span<const T> view(std::span<const T> params, std::size_t offset, std::size_t size) {
  return params.subspan(offset, size);
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(ModelConfig config) : config_(std::move(config)), layout_(config_) {}

template <typename T>
void Transformer<T>::resize(int batch, int length) {
  if (batch == batch_ && length == length_) return;
  batch_ = batch;
  length_ = length;
  const auto L = static_cast<std::size_t>(config_.layers);
  const auto bt = static_cast<std::size_t>(batch) * length;
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto att = static_cast<std::size_t>(batch) * config_.heads * length * length;
  auto make = [&](std::vector<std::vector<T>>& v, std::size_t count, std::size_t size) {
    v.assign(count, std::vector<T>(size));
  };
  make(resid_, L + 1, bt * d);
  make(resid_mid_, L, bt * d);
  make(ln1_, L, bt * d);
  make(ln1_mean_, L, bt);
  make(ln1_rstd_, L, bt);
  make(qkv_, L, bt * 3 * d);
  make(att_, L, att);
  make(attn_out_, L, bt * d);
  make(ln2_, L, bt * d);
  make(ln2_mean_, L, bt);
  make(ln2_rstd_, L, bt);
  make(fc_, L, bt * 4 * d);
  make(gelu_, L, bt * 4 * d);
  lnf_.assign(bt * d, T(0));
  lnf_mean_.assign(bt, T(0));
  lnf_rstd_.assign(bt, T(0));
  logits_.assign(bt * static_cast<std::size_t>(config_.vocab_size), T(0));
  probs_.assign(logits_.size(), T(0));
  logsumexp_.assign(bt, 0.0);
}

template <typename T>
void Transformer<T>::forward(std::span<const T> params, std::span<const TokenId> tokens, int batch, int length) {
  namespace k = kernels;
  require(params.size() == layout_.total(), "forward: parameter count does not match the config");
  require(batch >= 1, "forward: empty batch");
  require(length >= 1 && length <= config_.window,
          "forward: sequence length " + std::to_string(length) + " outside [1, " + std::to_string(config_.window) + "]");
  require(tokens.size() == static_cast<std::size_t>(batch) * length, "forward: token buffer has the wrong shape");
  for (TokenId t : tokens) {
    if (t < 0 || t >= config_.vocab_size) fail("forward: token id " + std::to_string(t) + " out of range");
  }
  resize(batch, length);
  tokens_.assign(tokens.begin(), tokens.end());
  const int d = config_.dim;
  const int v = config_.vocab_size;
  const int bt = batch * length;

  std::vector<T>& x0 = resid_[0];
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < length; ++t) {
      const auto tok = static_cast<std::size_t>(tokens[static_cast<std::size_t>(b) * length + t]);
      const T* we = params.data() + layout_.wte + tok * d;
      const T* pe = params.data() + layout_.wpe + static_cast<std::size_t>(t) * d;
      T* dst = x0.data() + (static_cast<std::size_t>(b) * length + t) * d;
      for (int e = 0; e < d; ++e) dst[e] = we[e] + pe[e];
    }
  }

  std::vector<T> tmp(static_cast<std::size_t>(bt) * d);
  for (int l = 0; l < config_.layers; ++l) {
    const auto& blk = layout_.blocks[static_cast<std::size_t>(l)];
    const auto D = static_cast<std::size_t>(d);
    k::layernorm_forward<T>(ln1_[l], ln1_mean_[l], ln1_rstd_[l], resid_[l], view(params, blk.ln1_w, D),
                            view(params, blk.ln1_b, D), bt, d);
    k::linear_forward<T>(qkv_[l], ln1_[l], view(params, blk.qkv_w, D * 3 * D), view(params, blk.qkv_b, 3 * D), bt,
                         d, 3 * d);
    k::attention_forward<T>(attn_out_[l], att_[l], qkv_[l], batch, length, d, config_.heads);
    k::linear_forward<T>(tmp, attn_out_[l], view(params, blk.proj_w, D * D), view(params, blk.proj_b, D), bt, d, d);
    for (std::size_t i = 0; i < tmp.size(); ++i) resid_mid_[l][i] = resid_[l][i] + tmp[i];
    k::layernorm_forward<T>(ln2_[l], ln2_mean_[l], ln2_rstd_[l], resid_mid_[l], view(params, blk.ln2_w, D),
                            view(params, blk.ln2_b, D), bt, d);
    k::linear_forward<T>(fc_[l], ln2_[l], view(params, blk.fc_w, D * 4 * D), view(params, blk.fc_b, 4 * D), bt, d,
                         4 * d);
    k::gelu_forward<T>(gelu_[l], fc_[l]);
    k::linear_forward<T>(tmp, gelu_[l], view(params, blk.mlp_proj_w, 4 * D * D), view(params, blk.mlp_proj_b, D),
                         bt, 4 * d, d);
    for (std::size_t i = 0; i < tmp.size(); ++i) resid_[l + 1][i] = resid_mid_[l][i] + tmp[i];
    if (!all_finite<T>(resid_[l + 1])) fail("forward: non-finite activation in layer " + std::to_string(l));
  }

  const auto D = static_cast<std::size_t>(d);
  k::layernorm_forward<T>(lnf_, lnf_mean_, lnf_rstd_, resid_[config_.layers], view(params, layout_.lnf_w, D),
                          view(params, layout_.lnf_b, D), bt, d);
  k::linear_forward<T>(logits_, lnf_, view(params, layout_.head_w, D * v), std::span<const T>(), bt, d, v);
  const bool mask_bos = config_.bos_masking == BosMasking::softmax;
  for (int r = 0; r < bt; ++r) {
    T* row = logits_.data() + static_cast<std::size_t>(r) * v;
    if (mask_bos) row[tokenize::kBosId] = -std::numeric_limits<T>::infinity();
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    require(std::isfinite(mx), "forward: non-finite logits at output layer");
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(sum);
    logsumexp_[static_cast<std::size_t>(r)] = lse;
    T* p = probs_.data() + static_cast<std::size_t>(r) * v;
    for (int j = 0; j < v; ++j) p[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
  }
}

template <typename T>
std::vector<double> Transformer<T>::target_log_probs(int row) const {
  require(row >= 0 && row < batch_, "target_log_probs: row out of range");
  const int v = config_.vocab_size;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(length_ > 0 ? length_ - 1 : 0));
  for (int t = 0; t + 1 < length_; ++t) {
    const std::size_t r = static_cast<std::size_t>(row) * length_ + t;
    const TokenId target = tokens_[r + 1];
    require(target != tokenize::kBosId, "BOS can never be a prediction target");
    out.push_back(static_cast<double>(logits_[r * v + static_cast<std::size_t>(target)]) - logsumexp_[r]);
  }
  return out;
}

template <typename T>
std::vector<double> Transformer<T>::row_nll() const {
  std::vector<double> out(static_cast<std::size_t>(batch_), 0.0);
  for (int b = 0; b < batch_; ++b) {
    double s = 0.0;
    for (double lp : target_log_probs(b)) s -= lp;
    out[static_cast<std::size_t>(b)] = s;
  }
  return out;
}

template <typename T>
void Transformer<T>::backward(std::span<const T> params, std::span<T> grads, double scale) {
  namespace k = kernels;
  require(grads.size() == layout_.total(), "backward: gradient buffer has the wrong size");
  require(batch_ > 0, "backward: forward has not run");
  const int d = config_.dim;
  const int v = config_.vocab_size;
  const int bt = batch_ * length_;
  const auto D = static_cast<std::size_t>(d);
  auto g = [&](std::size_t offset, std::size_t size) { return grads.subspan(offset, size); };

  std::vector<T> d_logits(static_cast<std::size_t>(bt) * v, T(0));
  for (int b = 0; b < batch_; ++b) {
    for (int t = 0; t + 1 < length_; ++t) {
      const std::size_t r = static_cast<std::size_t>(b) * length_ + t;
      const T* p = probs_.data() + r * v;
      T* dl = d_logits.data() + r * v;
      for (int j = 0; j < v; ++j) dl[j] = static_cast<T>(scale * p[j]);
      dl[tokens_[r + 1]] -= static_cast<T>(scale);
    }
  }
  if (config_.bos_masking == BosMasking::softmax) {
    for (int r = 0; r < bt; ++r) d_logits[static_cast<std::size_t>(r) * v + tokenize::kBosId] = T(0);
  }

  std::vector<T> d_lnf(static_cast<std::size_t>(bt) * d);
  k::linear_backward<T>(d_lnf, g(layout_.head_w, D * v), std::span<T>(), d_logits, lnf_,
                        view(params, layout_.head_w, D * v), bt, d, v);
  std::vector<T> d_resid(static_cast<std::size_t>(bt) * d, T(0));
  k::layernorm_backward<T>(d_resid, g(layout_.lnf_w, D), g(layout_.lnf_b, D), d_lnf, resid_[config_.layers],
                           lnf_mean_, lnf_rstd_, view(params, layout_.lnf_w, D), bt, d);

  std::vector<T> d_mid(d_resid.size());
  std::vector<T> d_gelu(static_cast<std::size_t>(bt) * 4 * d);
  std::vector<T> d_fc(d_gelu.size());
  std::vector<T> d_norm(d_resid.size());
  std::vector<T> d_attn(d_resid.size());
  std::vector<T> d_qkv(static_cast<std::size_t>(bt) * 3 * d);
  for (int l = config_.layers - 1; l >= 0; --l) {
    const auto& blk = layout_.blocks[static_cast<std::size_t>(l)];
    k::linear_backward<T>(d_gelu, g(blk.mlp_proj_w, 4 * D * D), g(blk.mlp_proj_b, D), d_resid, gelu_[l],
                          view(params, blk.mlp_proj_w, 4 * D * D), bt, 4 * d, d);
    k::gelu_backward<T>(d_fc, d_gelu, fc_[l]);
    k::linear_backward<T>(d_norm, g(blk.fc_w, D * 4 * D), g(blk.fc_b, 4 * D), d_fc, ln2_[l],
                          view(params, blk.fc_w, D * 4 * D), bt, d, 4 * d);
    d_mid = d_resid;
    k::layernorm_backward<T>(d_mid, g(blk.ln2_w, D), g(blk.ln2_b, D), d_norm, resid_mid_[l], ln2_mean_[l],
                             ln2_rstd_[l], view(params, blk.ln2_w, D), bt, d);
    k::linear_backward<T>(d_attn, g(blk.proj_w, D * D), g(blk.proj_b, D), d_mid, attn_out_[l],
                          view(params, blk.proj_w, D * D), bt, d, d);
    k::attention_backward<T>(d_qkv, d_attn, qkv_[l], att_[l], batch_, length_, d, config_.heads);
    k::linear_backward<T>(d_norm, g(blk.qkv_w, D * 3 * D), g(blk.qkv_b, 3 * D), d_qkv, ln1_[l],
                          view(params, blk.qkv_w, D * 3 * D), bt, d, 3 * d);
    d_resid = d_mid;
    k::layernorm_backward<T>(d_resid, g(blk.ln1_w, D), g(blk.ln1_b, D), d_norm, resid_[l], ln1_mean_[l],
                             ln1_rstd_[l], view(params, blk.ln1_w, D), bt, d);
  }

  for (int b = 0; b < batch_; ++b) {
    for (int t = 0; t < length_; ++t) {
      const std::size_t r = static_cast<std::size_t>(b) * length_ + t;
      const auto tok = static_cast<std::size_t>(tokens_[r]);
      const T* src = d_resid.data() + r * D;
      T* dwte = grads.data() + layout_.wte + tok * D;
      T* dwpe = grads.data() + layout_.wpe + static_cast<std::size_t>(t) * D;
      for (int e = 0; e < d; ++e) {
        dwte[e] += src[e];
        dwpe[e] += src[e];
      }
    }
  }
}

template <typename T>
ForwardTrace<T> Transformer<T>::trace(int row) const {
  require(row >= 0 && row < batch_, "trace: row out of range");
  ForwardTrace<T> tr;
  tr.layers = config_.layers;
  tr.heads = config_.heads;
  tr.length = length_;
  tr.dim = config_.dim;
  tr.vocab = config_.vocab_size;
  const auto len = static_cast<std::size_t>(length_);
  const auto d = static_cast<std::size_t>(config_.dim);
  const auto v = static_cast<std::size_t>(config_.vocab_size);
  const auto r = static_cast<std::size_t>(row);
  tr.logits.assign(logits_.begin() + static_cast<std::ptrdiff_t>(r * len * v),
                   logits_.begin() + static_cast<std::ptrdiff_t>((r + 1) * len * v));
  const std::size_t per_layer_att = static_cast<std::size_t>(config_.heads) * len * len;
  for (int l = 0; l < config_.layers; ++l) {
    const auto& a = att_[static_cast<std::size_t>(l)];
    tr.attention.insert(tr.attention.end(), a.begin() + static_cast<std::ptrdiff_t>(r * per_layer_att),
                        a.begin() + static_cast<std::ptrdiff_t>((r + 1) * per_layer_att));
  }
  for (int l = 0; l <= config_.layers; ++l) {
    const auto& h = resid_[static_cast<std::size_t>(l)];
    tr.hidden.insert(tr.hidden.end(), h.begin() + static_cast<std::ptrdiff_t>(r * len * d),
                     h.begin() + static_cast<std::ptrdiff_t>((r + 1) * len * d));
  }
  return tr;
}

template <typename T>
std::vector<ForwardTrace<T>> forward(const ModelConfig& config, std::span<const T> params,
                                     std::span<const TokenId> tokens, int batch, int length) {
  Transformer<T> net(config);
  net.forward(params, tokens, batch, length);
  std::vector<ForwardTrace<T>> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) out.push_back(net.trace(b));
  return out;
}

std::vector<ForwardTrace<float>> forward(const Checkpoint& ckpt, std::span<const TokenId> tokens, int batch,
                                         int length) {
  return forward<float>(ckpt.config, ckpt.params, tokens, batch, length);
}

template <typename T>
double loss(const ForwardTrace<T>& trace, std::span<const TokenId> targets) {
  require(targets.size() == static_cast<std::size_t>(trace.length), "loss: targets do not match the trace length");
  require(trace.length >= 2, "loss: need at least one prediction");
  const auto v = static_cast<std::size_t>(trace.vocab);
  double total = 0.0;
  for (int t = 0; t + 1 < trace.length; ++t) {
    const TokenId target = targets[static_cast<std::size_t>(t) + 1];
    require(target != tokenize::kBosId, "BOS can never be a prediction target");
    const T* row = trace.logits.data() + static_cast<std::size_t>(t) * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    total += mx + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(target)]);
  }
  return total / (trace.length - 1);
}

template <typename T>
std::span<const T> GradientMap<T>::operator[](std::string_view name) const {
  const TensorInfo& info = layout.find(name);
  return std::span<const T>(values).subspan(info.offset, info.size);
}

template <typename T>
double GradientMap<T>::norm() const {
  double s = 0.0;
  for (T g : values) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

template <typename T>
GradientMap<T> gradients(const ModelConfig& config, std::span<const T> params, std::span<const TokenId> tokens,
                         int batch, int length) {
  require(length >= 2, "gradients: need at least one prediction per row");
  Transformer<T> net(config);
  net.forward(params, tokens, batch, length);
  const auto nll = net.row_nll();
  double total = 0.0;
  for (double x : nll) total += x;
  const double count = static_cast<double>(batch) * (length - 1);
  GradientMap<T> out{net.layout(), std::vector<T>(net.layout().total(), T(0)), total / count};
  net.backward(params, out.values, 1.0 / count);
  require(all_finite<T>(out.values), "gradients: non-finite gradient");
  return out;
}

GradientMap<float> gradients(const Checkpoint& ckpt, std::span<const TokenId> tokens, int batch, int length) {
  return gradients<float>(ckpt.config, ckpt.params, tokens, batch, length);
}

template class Transformer<float>;
template class Transformer<double>;
template struct GradientMap<float>;
template struct GradientMap<double>;
template std::vector<ForwardTrace<float>> forward<float>(const ModelConfig&, std::span<const float>,
                                                         std::span<const TokenId>, int, int);
template std::vector<ForwardTrace<double>> forward<double>(const ModelConfig&, std::span<const double>,
                                                           std::span<const TokenId>, int, int);
template double loss<float>(const ForwardTrace<float>&, std::span<const TokenId>);
template double loss<double>(const ForwardTrace<double>&, std::span<const TokenId>);
template GradientMap<float> gradients<float>(const ModelConfig&, std::span<const float>, std::span<const TokenId>,
                                             int, int);
template GradientMap<double> gradients<double>(const ModelConfig&, std::span<const double>,
                                               std::span<const TokenId>, int, int);

}  // namespace factorix::model
