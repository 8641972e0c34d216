#include "moebal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "moebal/errors.hpp"

namespace moebal::stats {

double mean(std::span<const double> x) {
  if (x.empty()) throw ContractError("mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

TestResult paired_t_greater(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("paired t test needs >= 2 pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double m = mean(d), s = stddev(d);
  const double n = static_cast<double>(d.size());
  TestResult r;
  if (s == 0.0) {
    r.statistic = m > 0 ? INFINITY : (m < 0 ? -INFINITY : 0.0);
    r.p_value = m > 0 ? 0.0 : 1.0;
    return r;
  }
  r.statistic = m / (s / std::sqrt(n));
  boost::math::students_t dist(n - 1.0);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

Correlation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3) throw ContractError("spearman needs >= 3 pairs");
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = mean(rx), my = mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  Correlation c;
  if (sxx == 0.0 || syy == 0.0) return c;
  c.rho = sxy / std::sqrt(sxx * syy);
  const double n = static_cast<double>(x.size());
  if (std::abs(c.rho) >= 1.0) {
    c.p_negative = c.rho < 0 ? 0.0 : 1.0;
    c.p_two_sided = 0.0;
    return c;
  }
  const double t = c.rho * std::sqrt((n - 2.0) / (1.0 - c.rho * c.rho));
  boost::math::students_t dist(n - 2.0);
  c.p_negative = boost::math::cdf(dist, t);
  c.p_two_sided = 2.0 * std::min(c.p_negative, 1.0 - c.p_negative);
  return c;
}

}  // namespace moebal::stats
