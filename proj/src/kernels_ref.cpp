// Serial reference kernels: the obvious loops, no blocking, no pragmas.
#include <cmath>
#include <limits>
#include <vector>

#include "factorix/kernels.hpp"

namespace factorix::kernels::ref {
namespace {

constexpr double kGeluScale = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

std::size_t at(int row, int col, int cols) { return static_cast<std::size_t>(row) * cols + col; }

}  // namespace

template <typename T>
void gemm(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = accumulate ? c[at(i, j, n)] : T(0);
      for (int p = 0; p < k; ++p) sum += a[at(i, p, k)] * b[at(p, j, n)];
      c[at(i, j, n)] = sum;
    }
  }
}

template <typename T>
void linear_forward(std::span<T> out, std::span<const T> in, std::span<const T> weight, std::span<const T> bias,
                    int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T sum = bias.empty() ? T(0) : bias[static_cast<std::size_t>(j)];
      for (int p = 0; p < k; ++p) sum += in[at(i, p, k)] * weight[at(p, j, n)];
      out[at(i, j, n)] = sum;
    }
  }
}

template <typename T>
void linear_backward(std::span<T> d_in, std::span<T> d_weight, std::span<T> d_bias, std::span<const T> d_out,
                     std::span<const T> in, std::span<const T> weight, int m, int k, int n) {
  if (!d_in.empty()) {
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        T sum = 0;
        for (int j = 0; j < n; ++j) sum += d_out[at(i, j, n)] * weight[at(p, j, n)];
        d_in[at(i, p, k)] = sum;
      }
    }
  }
  for (int p = 0; p < k; ++p) {
    for (int j = 0; j < n; ++j) {
      T sum = d_weight[at(p, j, n)];
      for (int i = 0; i < m; ++i) sum += in[at(i, p, k)] * d_out[at(i, j, n)];
      d_weight[at(p, j, n)] = sum;
    }
  }
  if (!d_bias.empty()) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < m; ++i) d_bias[static_cast<std::size_t>(j)] += d_out[at(i, j, n)];
    }
  }
}

template <typename T>
void layernorm_forward(std::span<T> out, std::span<T> mean, std::span<T> rstd, std::span<const T> in,
                       std::span<const T> gamma, std::span<const T> beta, int m, int d) {
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += in[at(i, j, d)];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (in[at(i, j, d)] - mu) * (in[at(i, j, d)] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j) {
      out[at(i, j, d)] = static_cast<T>((in[at(i, j, d)] - mu) * rs * gamma[static_cast<std::size_t>(j)] +
                                        beta[static_cast<std::size_t>(j)]);
    }
    mean[static_cast<std::size_t>(i)] = static_cast<T>(mu);
    rstd[static_cast<std::size_t>(i)] = static_cast<T>(rs);
  }
}

template <typename T>
void layernorm_backward(std::span<T> d_in, std::span<T> d_gamma, std::span<T> d_beta, std::span<const T> d_out,
                        std::span<const T> in, std::span<const T> mean, std::span<const T> rstd,
                        std::span<const T> gamma, int m, int d) {
  for (int i = 0; i < m; ++i) {
    const double mu = mean[static_cast<std::size_t>(i)];
    const double rs = rstd[static_cast<std::size_t>(i)];
    std::vector<double> xhat(static_cast<std::size_t>(d));
    std::vector<double> g(static_cast<std::size_t>(d));
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (int j = 0; j < d; ++j) {
      xhat[static_cast<std::size_t>(j)] = (in[at(i, j, d)] - mu) * rs;
      g[static_cast<std::size_t>(j)] = static_cast<double>(d_out[at(i, j, d)]) * gamma[static_cast<std::size_t>(j)];
      mean_g += g[static_cast<std::size_t>(j)] / d;
      mean_gx += g[static_cast<std::size_t>(j)] * xhat[static_cast<std::size_t>(j)] / d;
    }
    for (int j = 0; j < d; ++j) {
      d_in[at(i, j, d)] += static_cast<T>(
          (g[static_cast<std::size_t>(j)] - mean_g - xhat[static_cast<std::size_t>(j)] * mean_gx) * rs);
      d_gamma[static_cast<std::size_t>(j)] += static_cast<T>(d_out[at(i, j, d)] * xhat[static_cast<std::size_t>(j)]);
      d_beta[static_cast<std::size_t>(j)] += d_out[at(i, j, d)];
    }
  }
}

template <typename T>
void gelu_forward(std::span<T> out, std::span<const T> in) {
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x))));
  }
}

template <typename T>
void gelu_backward(std::span<T> d_in, std::span<const T> d_out, std::span<const T> in) {
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    const double th = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
    const double grad =
        0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
    d_in[i] = static_cast<T>(d_out[i] * grad);
  }
}

template <typename T>
void attention_forward(std::span<T> out, std::span<T> att, std::span<const T> qkv, int b, int t, int d, int heads) {
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  auto q = [&](int bi, int i, int h, int e) { return qkv[at(bi * t + i, h * hd + e, 3 * d)]; };
  auto k = [&](int bi, int i, int h, int e) { return qkv[at(bi * t + i, d + h * hd + e, 3 * d)]; };
  auto v = [&](int bi, int i, int h, int e) { return qkv[at(bi * t + i, 2 * d + h * hd + e, 3 * d)]; };
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < t; ++i) {
        std::vector<double> s(static_cast<std::size_t>(i) + 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int e = 0; e < hd; ++e) dot += static_cast<double>(q(bi, i, h, e)) * k(bi, j, h, e);
          s[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, s[static_cast<std::size_t>(j)]);
        }
        double sum = 0.0;
        for (double& x : s) {
          x = std::exp(x - mx);
          sum += x;
        }
        const std::size_t row = (static_cast<std::size_t>(bi) * heads + h) * t + i;
        for (int j = 0; j < t; ++j) {
          att[row * t + j] = j <= i ? static_cast<T>(s[static_cast<std::size_t>(j)] / sum) : T(0);
        }
        for (int e = 0; e < hd; ++e) {
          double o = 0.0;
          for (int j = 0; j <= i; ++j) o += static_cast<double>(att[row * t + j]) * v(bi, j, h, e);
          out[at(bi * t + i, h * hd + e, d)] = static_cast<T>(o);
        }
      }
    }
  }
}

template <typename T>
void attention_backward(std::span<T> d_qkv, std::span<const T> d_out, std::span<const T> qkv, std::span<const T> att,
                        int b, int t, int d, int heads) {
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int d3 = 3 * d;
  std::fill(d_qkv.begin(), d_qkv.end(), T(0));
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < t; ++i) {
        const std::size_t row = ((static_cast<std::size_t>(bi) * heads + h) * t + i) * t;
        std::vector<double> da(static_cast<std::size_t>(i) + 1);
        double weighted = 0.0;
        for (int j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int e = 0; e < hd; ++e) {
            dot += static_cast<double>(d_out[at(bi * t + i, h * hd + e, d)]) * qkv[at(bi * t + j, 2 * d + h * hd + e, d3)];
          }
          da[static_cast<std::size_t>(j)] = dot;
          weighted += att[row + j] * dot;
          for (int e = 0; e < hd; ++e) {
            d_qkv[at(bi * t + j, 2 * d + h * hd + e, d3)] += att[row + j] * d_out[at(bi * t + i, h * hd + e, d)];
          }
        }
        for (int j = 0; j <= i; ++j) {
          const double ds = att[row + j] * (da[static_cast<std::size_t>(j)] - weighted) * scale;
          for (int e = 0; e < hd; ++e) {
            d_qkv[at(bi * t + i, h * hd + e, d3)] += static_cast<T>(ds * qkv[at(bi * t + j, d + h * hd + e, d3)]);
            d_qkv[at(bi * t + j, d + h * hd + e, d3)] += static_cast<T>(ds * qkv[at(bi * t + i, h * hd + e, d3)]);
          }
        }
      }
    }
  }
}

#define FACTORIX_INSTANTIATE(T)                                                                                     \
  template void gemm<T>(std::span<T>, std::span<const T>, std::span<const T>, int, int, int, bool);               \
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

}  // namespace factorix::kernels::ref
