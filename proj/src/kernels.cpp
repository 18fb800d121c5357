#include "factorix/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>
#include <vector>

namespace factorix::kernels {
namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

// Rational minimax tanh for float; branch-free so the GELU loops vectorize.
// Accurate to a few ulp, saturating to +-1 beyond |x| ~ 7.9.
inline float tanh_approx(float x) {
  constexpr float kClamp = 7.90531110763549805f;
  x = x > kClamp ? kClamp : x;
  x = x < -kClamp ? -kClamp : x;
  const float x2 = x * x;
  float p = -2.76076847742355e-16f;
  p = p * x2 + 2.00018790482477e-13f;
  p = p * x2 + -8.60467152213735e-11f;
  p = p * x2 + 5.12229709037114e-08f;
  p = p * x2 + 1.48572235717979e-05f;
  p = p * x2 + 6.37261928875436e-04f;
  p = p * x2 + 4.89352455891786e-03f;
  p = p * x;
  float q = 1.19825839466702e-06f;
  q = q * x2 + 1.18534705686654e-04f;
  q = q * x2 + 2.26843463243900e-03f;
  q = q * x2 + 4.89352518554385e-03f;
  return p / q;
}
inline double tanh_approx(double x) { return std::tanh(x); }

// Polynomial expf with range reduction by powers of two; relative error about
// 2e-7 and vectorizable.  Inputs below -87 flush to a tiny positive value.
inline float exp_approx(float x) {
  x = x > 88.3762626647949f ? 88.3762626647949f : x;
  x = x < -87.3365447504019f ? -87.3365447504019f : x;
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f - n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::int32_t>(n + 127.0f) << 23;
  return y * std::bit_cast<float>(bits);
}
inline double exp_approx(double x) { return std::exp(x); }

// Register tile: kRows rows of C times kCols<T> columns, accumulated over all of k.
constexpr int kRows = 4;
template <typename T>
constexpr int kCols = 64 / static_cast<int>(sizeof(T)) * 2;

template <typename T>
void gemm_tile_full(T* __restrict c, const T* __restrict a, const T* __restrict b, int k, int n, int a_rs,
                    int a_cs, bool accumulate) {
  constexpr int NC = kCols<T>;
  T acc[kRows][NC];
  for (int r = 0; r < kRows; ++r) {
#pragma omp simd
    for (int j = 0; j < NC; ++j) acc[r][j] = accumulate ? c[r * n + j] : T(0);
  }
  for (int p = 0; p < k; ++p) {
    const T* brow = b + static_cast<std::ptrdiff_t>(p) * n;
    for (int r = 0; r < kRows; ++r) {
      const T av = a[r * a_rs + p * a_cs];
#pragma omp simd
      for (int j = 0; j < NC; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < kRows; ++r) {
#pragma omp simd
    for (int j = 0; j < NC; ++j) c[r * n + j] = acc[r][j];
  }
}

template <typename T>
void gemm_tile_edge(T* c, const T* a, const T* b, int rows, int cols, int k, int n, int a_rs, int a_cs,
                    bool accumulate) {
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) {
      T acc = accumulate ? c[r * n + j] : T(0);
      for (int p = 0; p < k; ++p) acc += a[r * a_rs + p * a_cs] * b[static_cast<std::ptrdiff_t>(p) * n + j];
      c[r * n + j] = acc;
    }
  }
}

// c[m,n] (+)= A[m,k] * b[k,n] where A(i,p) = a[i * a_rs + p * a_cs], so a
// transposed operand needs no copy.
template <typename T>
void gemm_strided(T* c, const T* a, int a_rs, int a_cs, const T* b, int m, int k, int n, bool accumulate) {
  constexpr int NC = kCols<T>;
  const int row_blocks = (m + kRows - 1) / kRows;
#pragma omp parallel for schedule(static)
  for (int blk = 0; blk < row_blocks; ++blk) {
    const int i0 = blk * kRows;
    const int rows = std::min(kRows, m - i0);
    T* crow = c + static_cast<std::ptrdiff_t>(i0) * n;
    const T* arow = a + static_cast<std::ptrdiff_t>(i0) * a_rs;
    for (int j0 = 0; j0 < n; j0 += NC) {
      const int cols = std::min(NC, n - j0);
      if (rows == kRows && cols == NC) {
        gemm_tile_full(crow + j0, arow, b + j0, k, n, a_rs, a_cs, accumulate);
      } else {
        gemm_tile_edge(crow + j0, arow, b + j0, rows, cols, k, n, a_rs, a_cs, accumulate);
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int k, int n, bool accumulate) {
  gemm_strided(c.data(), a.data(), k, 1, b.data(), m, k, n, accumulate);
}

template <typename T>
void transpose(std::span<T> out, std::span<const T> in, int rows, int cols) {
  constexpr int kBlock = 32;
#pragma omp parallel for schedule(static)
  for (int i0 = 0; i0 < rows; i0 += kBlock) {
    for (int j0 = 0; j0 < cols; j0 += kBlock) {
      const int i1 = std::min(rows, i0 + kBlock);
      const int j1 = std::min(cols, j0 + kBlock);
      for (int i = i0; i < i1; ++i) {
        for (int j = j0; j < j1; ++j) {
          out[static_cast<std::size_t>(j) * rows + i] = in[static_cast<std::size_t>(i) * cols + j];
        }
      }
    }
  }
}

template <typename T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    int m, int k, int n) {
  if (!bias.empty()) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) std::copy(bias.begin(), bias.end(), out.begin() + static_cast<std::ptrdiff_t>(i) * n);
  }
  gemm<T>(out, in, weight, m, k, n, !bias.empty());
}

template <typename T>
void linear_backward(std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> weight, int m, int k, int n) {
  if (!d_in.empty()) {
    std::vector<T> weight_t(static_cast<std::size_t>(k) * n);
    transpose<T>(weight_t, weight, k, n);
    gemm<T>(d_in, d_out, weight_t, m, n, k, false);
  }
  gemm_strided(d_weight.data(), in.data(), 1, k, d_out.data(), k, m, n, true);
  if (!d_bias.empty()) {
    for (int i = 0; i < m; ++i) {
      const T* row = d_out.data() + static_cast<std::ptrdiff_t>(i) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) d_bias[static_cast<std::size_t>(j)] += row[j];
    }
  }
}

template <typename T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int m, int d) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const T* x = in.data() + static_cast<std::ptrdiff_t>(i) * d;
    T* y = out.data() + static_cast<std::ptrdiff_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j) y[j] = static_cast<T>((x[j] - mu) * rs) * gamma[static_cast<std::size_t>(j)] + beta[static_cast<std::size_t>(j)];
    mean[static_cast<std::size_t>(i)] = static_cast<T>(mu);
    rstd[static_cast<std::size_t>(i)] = static_cast<T>(rs);
  }
}

template <typename T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int m, int d) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const T* x = in.data() + static_cast<std::ptrdiff_t>(i) * d;
    const T* dy = d_out.data() + static_cast<std::ptrdiff_t>(i) * d;
    T* dx = d_in.data() + static_cast<std::ptrdiff_t>(i) * d;
    const T mu = mean[static_cast<std::size_t>(i)];
    const T rs = rstd[static_cast<std::size_t>(i)];
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int j = 0; j < d; ++j) {
      const double g = static_cast<double>(dy[j]) * gamma[static_cast<std::size_t>(j)];
      sum_g += g;
      sum_gx += g * (x[j] - mu) * rs;
    }
    sum_g /= d;
    sum_gx /= d;
    for (int j = 0; j < d; ++j) {
      const double xhat = static_cast<double>(x[j] - mu) * rs;
      const double g = static_cast<double>(dy[j]) * gamma[static_cast<std::size_t>(j)];
      dx[j] += static_cast<T>((g - sum_g - xhat * sum_gx) * rs);
    }
  }
  // Parameter gradients reduce over rows; kept serial for a fixed order.
  for (int i = 0; i < m; ++i) {
    const T* x = in.data() + static_cast<std::ptrdiff_t>(i) * d;
    const T* dy = d_out.data() + static_cast<std::ptrdiff_t>(i) * d;
    const T mu = mean[static_cast<std::size_t>(i)];
    const T rs = rstd[static_cast<std::size_t>(i)];
#pragma omp simd
    for (int j = 0; j < d; ++j) {
      d_gamma[static_cast<std::size_t>(j)] += dy[j] * (x[j] - mu) * rs;
      d_beta[static_cast<std::size_t>(j)] += dy[j];
    }
  }
}

template <typename T>
void gelu_forward(std::span<T> out, std::span<const T> in) {
  const auto n = static_cast<std::ptrdiff_t>(in.size());
  const T* __restrict x = in.data();
  T* __restrict y = out.data();
  const T scale = static_cast<T>(kGeluScale);
  const T cubic = static_cast<T>(kGeluCubic);
#pragma omp parallel for simd schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const T u = scale * (x[i] + cubic * x[i] * x[i] * x[i]);
    y[i] = T(0.5) * x[i] * (T(1) + tanh_approx(u));
  }
}

template <typename T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in) {
  const auto n = static_cast<std::ptrdiff_t>(in.size());
  const T* __restrict x = in.data();
  const T* __restrict dy = d_out.data();
  T* __restrict dx = d_in.data();
  const T scale = static_cast<T>(kGeluScale);
  const T cubic = static_cast<T>(kGeluCubic);
#pragma omp parallel for simd schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const T u = scale * (x[i] + cubic * x[i] * x[i] * x[i]);
    const T th = tanh_approx(u);
    const T du = scale * (T(1) + T(3) * cubic * x[i] * x[i]);
    dx[i] = dy[i] * (T(0.5) * (T(1) + th) + T(0.5) * x[i] * (T(1) - th * th) * du);
  }
}

namespace {

// One (sequence, head) slice of qkv copied into contiguous q[t,hd], k[t,hd],
// k^T[hd,t] and v[t,hd] buffers.
template <typename T>
struct HeadSlice {
  std::vector<T> q, k, kt, v;

  HeadSlice(const T* base, int t, int d, int hd, int h)
      : q(static_cast<std::size_t>(t) * hd),
        k(static_cast<std::size_t>(t) * hd),
        kt(static_cast<std::size_t>(t) * hd),
        v(static_cast<std::size_t>(t) * hd) {
    const int d3 = 3 * d;
    for (int i = 0; i < t; ++i) {
      const T* row = base + static_cast<std::ptrdiff_t>(i) * d3 + h * hd;
      for (int e = 0; e < hd; ++e) {
        q[static_cast<std::size_t>(i) * hd + e] = row[e];
        k[static_cast<std::size_t>(i) * hd + e] = row[d + e];
        kt[static_cast<std::size_t>(e) * t + i] = row[d + e];
        v[static_cast<std::size_t>(i) * hd + e] = row[2 * d + e];
      }
    }
  }
};

template <typename T, int HD>
void attention_head_forward(T* __restrict out, T* __restrict att, const T* qkv, int t, int d, int hd_runtime, int h) {
  const int hd = HD > 0 ? HD : hd_runtime;
  const HeadSlice<T> s(qkv, t, d, hd, h);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (int i = 0; i < t; ++i) {
    T* __restrict row = att + static_cast<std::ptrdiff_t>(i) * t;
    const int n = i + 1;
    for (int j = 0; j < t; ++j) row[j] = T(0);
    for (int e = 0; e < hd; ++e) {
      const T qe = s.q[static_cast<std::size_t>(i) * hd + e] * scale;
      const T* __restrict kt = s.kt.data() + static_cast<std::ptrdiff_t>(e) * t;
#pragma omp simd
      for (int j = 0; j < n; ++j) row[j] += qe * kt[j];
    }
    T max_score = row[0];
    for (int j = 1; j < n; ++j) max_score = row[j] > max_score ? row[j] : max_score;
#pragma omp simd
    for (int j = 0; j < n; ++j) row[j] = exp_approx(row[j] - max_score);
    T sum = 0;
    for (int j = 0; j < n; ++j) sum += row[j];
    const T inv = T(1) / sum;
#pragma omp simd
    for (int j = 0; j < n; ++j) row[j] *= inv;
    T* __restrict o = out + static_cast<std::ptrdiff_t>(i) * d + h * hd;
    for (int e = 0; e < hd; ++e) o[e] = T(0);
    for (int j = 0; j < n; ++j) {
      const T p = row[j];
      const T* __restrict v = s.v.data() + static_cast<std::ptrdiff_t>(j) * hd;
#pragma omp simd
      for (int e = 0; e < hd; ++e) o[e] += p * v[e];
    }
  }
}

template <typename T, int HD>
void attention_head_backward(T* __restrict d_qkv, const T* __restrict d_out, const T* qkv, const T* __restrict att,
                             int t, int d, int hd_runtime, int h) {
  const int hd = HD > 0 ? HD : hd_runtime;
  const HeadSlice<T> s(qkv, t, d, hd, h);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const auto th = static_cast<std::size_t>(t) * hd;
  // v^T for the dP = dO v^T product.
  std::vector<T> vt(th);
  for (int j = 0; j < t; ++j) {
    for (int e = 0; e < hd; ++e) vt[static_cast<std::size_t>(e) * t + j] = s.v[static_cast<std::size_t>(j) * hd + e];
  }
  std::vector<T> dq(th, T(0)), dk(th, T(0)), dv(th, T(0)), ds(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    const int n = i + 1;
    const T* __restrict row = att + static_cast<std::ptrdiff_t>(i) * t;
    const T* __restrict dout = d_out + static_cast<std::ptrdiff_t>(i) * d + h * hd;
    T* __restrict dp = ds.data();
    for (int j = 0; j < n; ++j) dp[j] = T(0);
    for (int e = 0; e < hd; ++e) {
      const T g = dout[e];
      const T* __restrict vte = vt.data() + static_cast<std::ptrdiff_t>(e) * t;
#pragma omp simd
      for (int j = 0; j < n; ++j) dp[j] += g * vte[j];
    }
    T weighted = 0;
    for (int j = 0; j < n; ++j) weighted += row[j] * dp[j];
#pragma omp simd
    for (int j = 0; j < n; ++j) dp[j] = row[j] * (dp[j] - weighted) * scale;
    T* __restrict dqi = dq.data() + static_cast<std::ptrdiff_t>(i) * hd;
    const T* __restrict qi = s.q.data() + static_cast<std::ptrdiff_t>(i) * hd;
    for (int j = 0; j < n; ++j) {
      const T p = row[j];
      const T g = dp[j];
      T* __restrict dvj = dv.data() + static_cast<std::ptrdiff_t>(j) * hd;
      T* __restrict dkj = dk.data() + static_cast<std::ptrdiff_t>(j) * hd;
      const T* __restrict kj = s.k.data() + static_cast<std::ptrdiff_t>(j) * hd;
#pragma omp simd
      for (int e = 0; e < hd; ++e) {
        dvj[e] += p * dout[e];
        dkj[e] += g * qi[e];
        dqi[e] += g * kj[e];
      }
    }
  }
  const int d3 = 3 * d;
  for (int i = 0; i < t; ++i) {
    T* dst = d_qkv + static_cast<std::ptrdiff_t>(i) * d3 + h * hd;
    for (int e = 0; e < hd; ++e) {
      dst[e] = dq[static_cast<std::size_t>(i) * hd + e];
      dst[d + e] = dk[static_cast<std::size_t>(i) * hd + e];
      dst[2 * d + e] = dv[static_cast<std::size_t>(i) * hd + e];
    }
  }
}

}  // namespace

template <typename T>
void attention_forward(std::span<T> out, std::span<T> att, std::span<const T> qkv, int b, int t, int d, int heads) {
  const int hd = d / heads;
#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      auto* fn = &attention_head_forward<T, 0>;
      if (hd == 8) fn = &attention_head_forward<T, 8>;
      if (hd == 16) fn = &attention_head_forward<T, 16>;
      if (hd == 32) fn = &attention_head_forward<T, 32>;
      if (hd == 64) fn = &attention_head_forward<T, 64>;
      fn(out.data() + static_cast<std::ptrdiff_t>(bi) * t * d,
         att.data() + (static_cast<std::ptrdiff_t>(bi) * heads + h) * t * t,
         qkv.data() + static_cast<std::ptrdiff_t>(bi) * t * 3 * d, t, d, hd, h);
    }
  }
}

template <typename T>
void attention_backward(std::span<T> d_qkv, std::span<const T> d_out, std::span<const T> qkv, std::span<const T> att,
                        int b, int t, int d, int heads) {
  const int hd = d / heads;
#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      auto* fn = &attention_head_backward<T, 0>;
      if (hd == 8) fn = &attention_head_backward<T, 8>;
      if (hd == 16) fn = &attention_head_backward<T, 16>;
      if (hd == 32) fn = &attention_head_backward<T, 32>;
      if (hd == 64) fn = &attention_head_backward<T, 64>;
      fn(d_qkv.data() + static_cast<std::ptrdiff_t>(bi) * t * 3 * d,
         d_out.data() + static_cast<std::ptrdiff_t>(bi) * t * d,
         qkv.data() + static_cast<std::ptrdiff_t>(bi) * t * 3 * d,
         att.data() + (static_cast<std::ptrdiff_t>(bi) * heads + h) * t * t, t, d, hd, h);
    }
  }
}

#define FACTORIX_INSTANTIATE(T)                                                                                     \
  template void gemm<T>(std::span<T>, std::span<const T>, std::span<const T>, int, int, int, bool);               \
  template void transpose<T>(std::span<T>, std::span<const T>, int, int);                                         \
  template void linear_forward<T>(std::span<T>, std::span<const T>, std::span<const T>, std::span<const T>, int,  \
                                  int, int);                                                                      \
  template void linear_backward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,                  \
                                   std::span<const T>, std::span<const T>, int, int, int);                        \
  template void layernorm_forward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,                \
                                     std::span<const T>, std::span<const T>, int, int);                           \
  template void layernorm_backward<T>(std::span<T>, std::span<T>, std::span<T>, std::span<const T>,               \
                                      std::span<const T>, std::span<const T>, std::span<const T>,                 \
                                      std::span<const T>, int, int);                                              \
  template void gelu_forward<T>(std::span<T>, std::span<const T>);                                                \
  template void gelu_backward<T>(std::span<T>, std::span<const T>, std::span<const T>);                           \
  template void attention_forward<T>(std::span<T>, std::span<T>, std::span<const T>, int, int, int, int);         \
  template void attention_backward<T>(std::span<T>, std::span<const T>, std::span<const T>, std::span<const T>,   \
                                      int, int, int, int);

FACTORIX_INSTANTIATE(float)
FACTORIX_INSTANTIATE(double)
#undef FACTORIX_INSTANTIATE

}  // namespace factorix::kernels
