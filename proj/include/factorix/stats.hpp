#pragma once

#include <span>
#include <vector>

// Paired-sample statistics in double precision.
namespace factorix::stats {

// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);

// Two-sided p-value of a Student t statistic with `dof` degrees of freedom.
double t_two_sided_p(double t, double dof);

double mean(std::span<const double> x);
// Sample standard deviation (n - 1 denominator).
double sample_sd(std::span<const double> x);

// Ranks 1..n with ties sharing the average of the ranks they span.
std::vector<double> midranks(std::span<const double> x);

struct Correlation {
  double r = 0.0;
  double p = 1.0;  // two-sided, t transform with n-2 dof
};

Correlation pearson(std::span<const double> x, std::span<const double> y);
// Pearson correlation of midranks.
Correlation spearman(std::span<const double> x, std::span<const double> y);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  double dof = 0.0;
};

// t = mean(x - y) / (sd(x - y) / sqrt(n)).
TTest paired_t(std::span<const double> x, std::span<const double> y);
// |mean(x - y)| / sd(x - y).
double cohens_d(std::span<const double> x, std::span<const double> y);

struct Comparison {
  double pearson_r = 0.0, p_r = 1.0;
  double t = 0.0, p_t = 1.0;
  double d = 0.0;
};

Comparison compare(std::span<const double> x, std::span<const double> y);

}  // namespace factorix::stats
