#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace advrsa {

inline constexpr double nan_value = std::numeric_limits<double>::quiet_NaN();

inline double mean(std::span<const double> v) {
  if (v.empty()) return nan_value;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Pearson correlation; NaN when either vector has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  if (a.size() < 2) return nan_value;
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return nan_value;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// 1-based ranks; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i + 1;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

struct MannKendallResult {
  long long s = 0;
  double variance = 0.0;
  double z = 0.0;
  double p_two_sided = 1.0;
  double p_increasing = 0.5;  // one-sided, H1: upward trend
  double p_decreasing = 0.5;  // one-sided, H1: downward trend
};

namespace detail {
inline void mk_finish(MannKendallResult& r) {
  if (r.variance <= 0.0 || r.s == 0) {
    r.z = 0.0;
  } else {
    const double s = static_cast<double>(r.s);
    r.z = (s > 0 ? s - 1.0 : s + 1.0) / std::sqrt(r.variance);
  }
  r.p_two_sided = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::abs(r.z))));
  r.p_increasing = 1.0 - normal_cdf(r.z);
  r.p_decreasing = normal_cdf(r.z);
}
}  // namespace detail

/// Mann-Kendall trend test with tie-corrected variance and unit continuity correction.
inline MannKendallResult mann_kendall(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4) throw std::invalid_argument("mann_kendall: need at least 4 observations");
  MannKendallResult r;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) r.s += (x[j] > x[i]) - (x[j] < x[i]);
  }
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const double nn = static_cast<double>(n);
  double ties = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * (t - 1.0) * (2.0 * t + 5.0);
    i = j;
  }
  r.variance = (nn * (nn - 1.0) * (2.0 * nn + 5.0) - ties) / 18.0;
  detail::mk_finish(r);
  return r;
}

/// Blocked Mann-Kendall: S and Var(S) are summed over independent sequences
/// (e.g. replicates), then tested as one statistic.
inline MannKendallResult mann_kendall_blocked(const std::vector<std::vector<double>>& blocks) {
  if (blocks.empty()) throw std::invalid_argument("mann_kendall_blocked: no blocks");
  MannKendallResult r;
  for (const auto& b : blocks) {
    const MannKendallResult one = mann_kendall(b);
    r.s += one.s;
    r.variance += one.variance;
  }
  detail::mk_finish(r);
  return r;
}

/// Linear-interpolation quantile (R type 7) of already sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return nan_value;
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(q, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Interval {
  double level = 0.95;
  double lower = nan_value;
  double upper = nan_value;
};

/// Two-sided percentile interval; NaN samples are ignored.
inline Interval percentile_interval(std::vector<double> samples, double level) {
  std::erase_if(samples, [](double v) { return std::isnan(v); });
  std::sort(samples.begin(), samples.end());
  const double tail = 0.5 * (1.0 - level);
  return {level, quantile_sorted(samples, tail), quantile_sorted(samples, 1.0 - tail)};
}

/// Kolmogorov-Smirnov distance between the sample and U(0,1).
inline double ks_uniform_statistic(std::vector<double> p) {
  if (p.empty()) throw std::invalid_argument("ks: empty sample");
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double u = std::clamp(p[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - u, u - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic KS p-value with Stephens' small-sample adjustment.
inline double ks_pvalue(double d, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

}  // namespace advrsa
