#pragma once

#include <span>

// Dense row-major kernels for the transformer.  The top-level namespace holds
// the OpenMP versions; kernels::ref holds the serial reference versions that
// tests and the benchmark compare against.
//
// Parallel loops only ever split over independent output elements, and every
// reduction runs in a fixed index order, so results do not depend on the
// thread count.
namespace factorix::kernels {

// c[m,n] = a[m,k] * b[k,n]  (or += when accumulate).
template <typename T>
void gemm(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int k, int n, bool accumulate);

// out[n,k] = in[k,n]^T
template <typename T>
void transpose(std::span<T> out, std::span<const T> in, int rows, int cols);

// out[m,n] = in[m,k] * w[k,n] + bias[n]; bias may be empty.
template <typename T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    int m, int k, int n);

// d_in = d_out * w^T (skipped when d_in is empty); d_weight += in^T * d_out;
// d_bias += column sums of d_out (skipped when empty).
template <typename T>
void linear_backward(std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> weight, int m, int k, int n);

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int m, int d);

// d_in += ..., d_gamma += ..., d_beta += ...
template <typename T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int m, int d);

// tanh approximation used by GPT-2.
template <typename T>
void gelu_forward(std::span<T> out, std::span<const T> in);

// d_in = d_out * gelu'(in)
template <typename T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in);

// Causal multi-head self-attention.  qkv is [b, t, 3d] (q | k | v), att is
// [b, heads, t, t] with explicit zeros above the diagonal, out is [b, t, d].
template <typename T>
void attention_forward(std::span<T> out, std::span<T> att, std::span<const T> qkv, int b, int t, int d, int heads);

// d_qkv is overwritten.
template <typename T>
void attention_backward(std::span<T> d_qkv, std::span<const T> d_out, std::span<const T> qkv, std::span<const T> att,
                        int b, int t, int d, int heads);

namespace ref {

template <typename T>
void gemm(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int k, int n, bool accumulate);
template <typename T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    int m, int k, int n);
template <typename T>
void linear_backward(std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> weight, int m, int k, int n);
template <typename T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int m, int d);
template <typename T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int m, int d);
template <typename T>
void gelu_forward(std::span<T> out, std::span<const T> in);
template <typename T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in);
template <typename T>
void attention_forward(std::span<T> out, std::span<T> att, std::span<const T> qkv, int b, int t, int d, int heads);
template <typename T>
void attention_backward(std::span<T> d_qkv, std::span<const T> d_out, std::span<const T> qkv, std::span<const T> att,
                        int b, int t, int d, int heads);

}  // namespace ref

}  // namespace factorix::kernels
