#pragma once

// Independent brute-force implementations used to cross-check the library.
// Everything here is written from the textbook definitions in long double
// and shares no code with src/.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

namespace factorix::testing::oracle {

using Vec = std::vector<double>;

inline long double mean(const Vec& x) {
  long double s = 0;
  for (double v : x) s += v;
  return s / static_cast<long double>(x.size());
}

inline long double sd(const Vec& x) {
  const long double m = mean(x);
  long double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<long double>(x.size() - 1));
}

inline double pearson(const Vec& x, const Vec& y) {
  const long double mx = mean(x), my = mean(y);
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

inline double t_p_value(double t, double dof) {
  boost::math::students_t dist(dof);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

inline double pearson_p(const Vec& x, const Vec& y) {
  const double r = pearson(x, y);
  const double n = static_cast<double>(x.size());
  return t_p_value(r * std::sqrt((n - 2) / (1 - r * r)), n - 2);
}

inline Vec differences(const Vec& x, const Vec& y) {
  Vec d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  return d;
}

inline double paired_t(const Vec& x, const Vec& y) {
  const Vec d = differences(x, y);
  return static_cast<double>(mean(d) / (sd(d) / std::sqrt(static_cast<long double>(d.size()))));
}

inline double cohens_d(const Vec& x, const Vec& y) {
  const Vec d = differences(x, y);
  return static_cast<double>(std::abs(mean(d)) / sd(d));
}

// Rank of x[i] = 1 + #{x_j < x_i} + (#{x_j == x_i, j != i}) / 2, in O(n^2).
inline Vec midranks(const Vec& x) {
  Vec r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++less;
      if (j != i && x[j] == x[i]) ++equal;
    }
    r[i] = 1 + less + equal / 2;
  }
  return r;
}

inline double spearman(const Vec& x, const Vec& y) { return pearson(midranks(x), midranks(y)); }

// Textbook formula, valid only without ties.
inline double spearman_no_ties(const Vec& x, const Vec& y) {
  const Vec rx = midranks(x), ry = midranks(y);
  long double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const long double n = static_cast<long double>(x.size());
  return static_cast<double>(1 - 6 * s / (n * (n * n - 1)));
}

inline double normalized_entropy(const Vec& row) {
  if (row.size() == 1) return 0.0;
  long double h = 0;
  for (double p : row)
    if (p > 0) h -= static_cast<long double>(p) * std::log(static_cast<long double>(p));
  // Float-rounded rows can overshoot ln(i) by an ulp; the ratio is defined on [0, 1].
  const long double r = h / std::log(static_cast<long double>(row.size()));
  return static_cast<double>(std::clamp(r, 0.0L, 1.0L));
}

inline Vec normalized_ranks(const Vec& row) {
  if (row.size() == 1) return {0.0};
  Vec r = midranks(row);
  for (double& v : r) v = (v - 1) / static_cast<double>(row.size() - 1);
  return r;
}

// Random inputs: lengths 3..60, Gaussian values, sometimes rounded to force ties.
struct Fuzz {
  std::mt19937_64 rng;
  explicit Fuzz(std::uint64_t seed) : rng(seed) {}

  std::size_t length() { return 3 + rng() % 58; }

  Vec vector(std::size_t n, bool ties) {
    std::normal_distribution<double> dist(0.0, 1.0 + static_cast<double>(rng() % 10));
    Vec v(n);
    for (double& x : v) x = ties ? std::round(dist(rng)) : dist(rng);
    return v;
  }

  Vec correlated(const Vec& x) {
    std::normal_distribution<double> noise(0.0, 1.0);
    const double slope = noise(rng);
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = slope * x[i] + noise(rng);
    return y;
  }

  Vec probability_row(std::size_t n, bool ties) {
    std::exponential_distribution<double> dist(1.0);
    Vec v(n);
    double s = 0;
    for (double& x : v) {
      x = ties ? static_cast<double>(1 + rng() % 3) : dist(rng);
      if (rng() % 7 == 0) x = 0;
      s += x;
    }
    if (s == 0) {
      v[0] = 1;
      s = 1;
    }
    for (double& x : v) x /= s;
    return v;
  }
};

}  // namespace factorix::testing::oracle
