#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "vfm/errors.hpp"

namespace vfm {

// Quantile of sorted data by linear interpolation between closest ranks:
// position h = (n - 1) p, value x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
inline double quantile_sorted(std::span<const double> sorted, double p) {
  detail::require_config(!sorted.empty(), "quantile of an empty sample");
  detail::require_config(p >= 0.0 && p <= 1.0, "quantile level must lie in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;

  bool contains(double v) const { return v >= lower && v <= upper; }
};

// Centred interval holding a fraction `level` of the sample, from the
// empirical quantiles at (1 -/+ level) / 2. Level 1 is the whole real line.
inline Interval centered_interval(std::span<const double> sorted, double level) {
  detail::require_config(level >= 0.0 && level <= 1.0, "interval level must lie in [0, 1]");
  if (level >= 1.0) {
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
  return {quantile_sorted(sorted, 0.5 * (1.0 - level)), quantile_sorted(sorted, 0.5 * (1.0 + level))};
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population standard deviation.
inline double stddev_of(std::span<const double> v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace vfm
