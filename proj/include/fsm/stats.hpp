#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fsm/error.hpp"

namespace fsm::stats {

inline double mean(std::span<const double> x) {
  if (x.empty()) throw DomainError("mean of an empty sample");
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

/// Sample variance, denominator n - 1.
inline double sample_variance(std::span<const double> x) {
  if (x.size() < 2) throw DomainError("sample variance needs at least two values");
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

inline double sample_sd(std::span<const double> x) { return std::sqrt(sample_variance(x)); }

/// Linear-interpolation quantile (Hyndman-Fan type 7).
inline double quantile(std::vector<double> x, double q) {
  if (x.empty()) throw DomainError("quantile of an empty sample");
  std::sort(x.begin(), x.end());
  const double h = (static_cast<double>(x.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

}  // namespace fsm::stats
