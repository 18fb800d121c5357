#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "factorix/kernels.hpp"

using namespace factorix;
namespace k = factorix::kernels;

namespace {

template <typename T>
std::vector<T> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
double tol() {
  return std::is_same_v<T, double> ? 1e-11 : 2e-5;
}

template <typename T>
void expect_close(const std::vector<T>& a, const std::vector<T>& b, double rel) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    ASSERT_NEAR(static_cast<double>(a[i]), static_cast<double>(b[i]),
                rel * std::max(1.0, std::abs(static_cast<double>(b[i]))))
        << "index " << i;
}

template <typename T>
class KernelsMatchReference : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelsMatchReference, Precisions);

}  // namespace

TYPED_TEST(KernelsMatchReference, Gemm) {
  using T = TypeParam;
  for (auto [m, kk, n] : {std::tuple{1, 1, 1}, {5, 7, 3}, {64, 64, 192}, {33, 17, 65}, {128, 256, 64}}) {
    const auto a = randn<T>(static_cast<std::size_t>(m * kk), 1);
    const auto b = randn<T>(static_cast<std::size_t>(kk * n), 2);
    for (bool acc : {false, true}) {
      auto c1 = randn<T>(static_cast<std::size_t>(m * n), 3);
      auto c2 = c1;
      k::gemm<T>(c1, a, b, m, kk, n, acc);
      k::ref::gemm<T>(c2, a, b, m, kk, n, acc);
      expect_close(c1, c2, tol<T>() * std::sqrt(kk));
    }
  }
}

TYPED_TEST(KernelsMatchReference, Transpose) {
  using T = TypeParam;
  const auto in = randn<T>(6 * 11, 4);
  std::vector<T> out(in.size());
  k::transpose<T>(out, in, 6, 11);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 11; ++c) EXPECT_EQ(out[static_cast<std::size_t>(c * 6 + r)], in[static_cast<std::size_t>(r * 11 + c)]);
}

TYPED_TEST(KernelsMatchReference, Linear) {
  using T = TypeParam;
  const int m = 37, kk = 24, n = 96;
  const auto in = randn<T>(m * kk, 5), w = randn<T>(kk * n, 6), bias = randn<T>(n, 7), dout = randn<T>(m * n, 8);
  std::vector<T> o1(m * n), o2(m * n);
  k::linear_forward<T>(o1, in, w, bias, m, kk, n);
  k::ref::linear_forward<T>(o2, in, w, bias, m, kk, n);
  expect_close(o1, o2, tol<T>() * 5);
  k::linear_forward<T>(o1, in, w, {}, m, kk, n);
  k::ref::linear_forward<T>(o2, in, w, {}, m, kk, n);
  expect_close(o1, o2, tol<T>() * 5);

  auto din1 = randn<T>(m * kk, 9), din2 = din1;
  auto dw1 = randn<T>(kk * n, 10), dw2 = dw1;
  auto db1 = randn<T>(n, 11), db2 = db1;
  k::linear_backward<T>(din1, dw1, db1, dout, in, w, m, kk, n);
  k::ref::linear_backward<T>(din2, dw2, db2, dout, in, w, m, kk, n);
  expect_close(din1, din2, tol<T>() * 10);
  expect_close(dw1, dw2, tol<T>() * 10);
  expect_close(db1, db2, tol<T>() * 10);
}

TYPED_TEST(KernelsMatchReference, LayerNorm) {
  using T = TypeParam;
  const int m = 19, d = 64;
  const auto in = randn<T>(m * d, 12, 3.0), g = randn<T>(d, 13), b = randn<T>(d, 14), dout = randn<T>(m * d, 15);
  std::vector<T> o1(m * d), o2(m * d), mu1(m), mu2(m), rs1(m), rs2(m);
  k::layernorm_forward<T>(o1, mu1, rs1, in, g, b, m, d);
  k::ref::layernorm_forward<T>(o2, mu2, rs2, in, g, b, m, d);
  expect_close(o1, o2, tol<T>());
  expect_close(mu1, mu2, tol<T>());
  expect_close(rs1, rs2, tol<T>());
  auto di1 = randn<T>(m * d, 16), di2 = di1;
  auto dg1 = randn<T>(d, 17), dg2 = dg1;
  auto db1 = randn<T>(d, 18), db2 = db1;
  k::layernorm_backward<T>(di1, dg1, db1, dout, in, mu2, rs2, g, m, d);
  k::ref::layernorm_backward<T>(di2, dg2, db2, dout, in, mu2, rs2, g, m, d);
  expect_close(di1, di2, tol<T>() * 10);
  expect_close(dg1, dg2, tol<T>() * 10);
  expect_close(db1, db2, tol<T>() * 10);
}

TYPED_TEST(KernelsMatchReference, Gelu) {
  using T = TypeParam;
  auto in = randn<T>(4099, 19, 4.0);
  in[0] = T(30);
  in[1] = T(-30);
  in[2] = T(0);
  const auto dout = randn<T>(in.size(), 20);
  std::vector<T> o1(in.size()), o2(in.size()), d1(in.size()), d2(in.size());
  k::gelu_forward<T>(o1, in);
  k::ref::gelu_forward<T>(o2, in);
  expect_close(o1, o2, tol<T>());
  k::gelu_backward<T>(d1, dout, in);
  k::ref::gelu_backward<T>(d2, dout, in);
  expect_close(d1, d2, tol<T>());
}

TYPED_TEST(KernelsMatchReference, Attention) {
  using T = TypeParam;
  // Head dims 8, 16, 32 and 64 take specialized paths; 12 takes the generic one.
  for (auto [b, t, d, h] : {std::tuple{2, 9, 16, 2}, {1, 64, 64, 2}, {3, 17, 64, 1}, {2, 33, 64, 8}, {2, 8, 24, 2}}) {
    const auto qkv = randn<T>(static_cast<std::size_t>(b * t * 3 * d), 21);
    const auto dout = randn<T>(static_cast<std::size_t>(b * t * d), 22);
    std::vector<T> o1(b * t * d), o2(b * t * d), a1(b * h * t * t), a2(b * h * t * t);
    k::attention_forward<T>(o1, a1, qkv, b, t, d, h);
    k::ref::attention_forward<T>(o2, a2, qkv, b, t, d, h);
    expect_close(o1, o2, tol<T>() * 5);
    expect_close(a1, a2, tol<T>() * 5);
    for (int bb = 0; bb < b * h; ++bb)
      for (int i = 0; i < t; ++i) {
        double s = 0;
        for (int j = 0; j < t; ++j) {
          const T v = a1[(static_cast<std::size_t>(bb) * t + i) * t + j];
          if (j > i) ASSERT_EQ(v, T(0));
          s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
    std::vector<T> g1(qkv.size()), g2(qkv.size());
    k::attention_backward<T>(g1, dout, qkv, a2, b, t, d, h);
    k::ref::attention_backward<T>(g2, dout, qkv, a2, b, t, d, h);
    expect_close(g1, g2, tol<T>() * 10);
  }
}
