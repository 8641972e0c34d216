#pragma once

#include <span>
#include <vector>

namespace moebal::stats {

double mean(std::span<const double> x);
/// Sample standard deviation (n - 1 denominator).
double stddev(std::span<const double> x);

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;  // one-sided
};

/// One-sided paired t test of H1: mean(a - b) > 0.
TestResult paired_t_greater(std::span<const double> a, std::span<const double> b);

/// Average ranks (ties share the mean rank), 1-based.
std::vector<double> ranks(std::span<const double> x);

struct Correlation {
  double rho = 0.0;
  double p_negative = 1.0;  // one-sided, H1: rho < 0
  double p_two_sided = 1.0;
};

/// Spearman rank correlation with the Student-t approximation for p.
Correlation spearman(std::span<const double> x, std::span<const double> y);

}  // namespace moebal::stats
