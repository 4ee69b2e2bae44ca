#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "hte/overlap.hpp"

// Brute-force references for the overlap diagnostics.
namespace hte::test {

// Type-7 percentile computed from scratch.
inline double naive_percentile(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * pct / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double naive_nd(const std::vector<double>& t, const std::vector<double>& c) {
  auto moments = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [mt, vt] = moments(t);
  const auto [mc, vc] = moments(c);
  return (mt - mc) / std::sqrt((vt + vc) / 2.0);
}

inline Coverage naive_coverage(const std::vector<double>& t, const std::vector<double>& c) {
  auto share = [](const std::vector<double>& own, const std::vector<double>& other) {
    const double lo = naive_percentile(other, 2.5), hi = naive_percentile(other, 97.5);
    double n = 0.0;
    for (double s : own) n += (s >= lo && s <= hi) ? 1.0 : 0.0;
    return n / static_cast<double>(own.size());
  };
  return {share(t, c), share(c, t)};
}

inline Coverage naive_close(const std::vector<double>& t, const std::vector<double>& c, const CloseRule& rule) {
  auto share = [&](const std::vector<double>& own, const std::vector<double>& other) {
    double n = 0.0;
    for (double a : own) {
      bool hit = false;
      for (double b : other) {
        const double tol = rule.mode == CloseMode::kRelative ? rule.tolerance * std::max(a, b) : rule.tolerance;
        hit = hit || std::fabs(a - b) <= tol;
      }
      n += hit ? 1.0 : 0.0;
    }
    return n / static_cast<double>(own.size());
  };
  return {share(t, c), share(c, t)};
}

}  // namespace hte::test
