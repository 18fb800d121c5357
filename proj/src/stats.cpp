#include "factorix/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "factorix/error.hpp"

namespace factorix::stats {
namespace {

// Continued fraction for I_x(a, b), modified Lentz.
double beta_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) return h;
  }
  fail("incomplete_beta: continued fraction did not converge");
}

void require_paired(std::span<const double> x, std::span<const double> y, std::size_t min_n, const char* what) {
  require(x.size() == y.size(), std::string(what) + ": inputs differ in length");
  require(x.size() >= min_n, std::string(what) + ": need at least " + std::to_string(min_n) + " pairs");
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(std::isfinite(x[i]) && std::isfinite(y[i]), std::string(what) + ": non-finite input");
  }
}

std::vector<double> differences(std::span<const double> x, std::span<const double> y) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  return d;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  require(a > 0 && b > 0, "incomplete_beta: parameters must be positive");
  require(x >= 0 && x <= 1, "incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  // Extended precision: the lgamma terms nearly cancel for large a + b.
  const long double la = a, lb = b, lx = x;
  const long double log_front =
      std::lgamma(la + lb) - std::lgamma(la) - std::lgamma(lb) + la * std::log(lx) + lb * std::log1p(-lx);
  const double front = static_cast<double>(std::exp(log_front));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(a, b, x) / a;
  return 1.0 - front * beta_fraction(b, a, 1.0 - x) / b;
}

double t_two_sided_p(double t, double dof) {
  require(dof > 0, "t distribution needs positive degrees of freedom");
  if (std::isinf(t)) return 0.0;
  require(std::isfinite(t), "t statistic is NaN");
  return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

namespace {

// Moments accumulate in long double so that exact textbook inputs round to
// their exact results.
long double mean_ld(std::span<const double> x) {
  require(!x.empty(), "mean of an empty sample");
  long double s = 0.0L;
  for (double v : x) s += v;
  return s / static_cast<long double>(x.size());
}

long double sample_sd_ld(std::span<const double> x) {
  require(x.size() >= 2, "standard deviation needs at least 2 values");
  const long double m = mean_ld(x);
  long double ss = 0.0L;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<long double>(x.size() - 1));
}

}  // namespace

double mean(std::span<const double> x) { return static_cast<double>(mean_ld(x)); }

double sample_sd(std::span<const double> x) { return static_cast<double>(sample_sd_ld(x)); }

std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 3, "pearson");
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0 && syy > 0, "pearson: zero variance");
  Correlation c;
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double dof = static_cast<double>(x.size()) - 2.0;
  if (std::abs(c.r) >= 1.0) {
    c.p = 0.0;
  } else {
    c.p = t_two_sided_p(c.r * std::sqrt(dof / (1.0 - c.r * c.r)), dof);
  }
  return c;
}

Correlation spearman(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 3, "spearman");
  const auto rx = midranks(x);
  const auto ry = midranks(y);
  require(sample_sd(rx) > 0 && sample_sd(ry) > 0, "spearman: zero-variance rank vector");
  return pearson(rx, ry);
}

TTest paired_t(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 2, "paired_t");
  const auto d = differences(x, y);
  const long double sd = sample_sd_ld(d);
  require(sd > 0, "zero-variance differences");
  TTest out;
  out.dof = static_cast<double>(d.size()) - 1.0;
  out.t = static_cast<double>(mean_ld(d) * std::sqrt(static_cast<long double>(d.size())) / sd);
  out.p = t_two_sided_p(out.t, out.dof);
  return out;
}

double cohens_d(std::span<const double> x, std::span<const double> y) {
  require_paired(x, y, 2, "cohens_d");
  const auto d = differences(x, y);
  const long double sd = sample_sd_ld(d);
  require(sd > 0, "zero-variance differences");
  return static_cast<double>(std::abs(mean_ld(d)) / sd);
}

Comparison compare(std::span<const double> x, std::span<const double> y) {
  Comparison c;
  const Correlation r = pearson(x, y);
  const TTest t = paired_t(x, y);
  c.pearson_r = r.r;
  c.p_r = r.p;
  c.t = t.t;
  c.p_t = t.p;
  c.d = cohens_d(x, y);
  return c;
}

}  // namespace factorix::stats
