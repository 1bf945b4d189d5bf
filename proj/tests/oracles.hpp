#pragma once

// Brute-force references used by the tests. Each is written from its
// definition with plain loops and shares no code with the library.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

// AP from pairwise comparisons: at each relevant position p, precision is
// (number of relevant items at positions <= p) / (p + 1).
inline double average_precision(const std::vector<bool>& rel) {
  double sum = 0;
  int R = 0;
  for (std::size_t p = 0; p < rel.size(); ++p) {
    if (!rel[p]) continue;
    ++R;
    int hits = 0;
    for (std::size_t q = 0; q <= p; ++q) hits += rel[q] ? 1 : 0;
    sum += static_cast<double>(hits) / static_cast<double>(p + 1);
  }
  return sum / R;
}

// Fraction of (relevant, irrelevant) pairs ordered wrongly; ties count 1/2.
inline double violation_rate(const Eigen::VectorXd& plus, const Eigen::VectorXd& minus) {
  double v = 0;
  for (Eigen::Index a = 0; a < plus.size(); ++a)
    for (Eigen::Index b = 0; b < minus.size(); ++b)
      v += plus(a) < minus(b) ? 1.0 : plus(a) == minus(b) ? 0.5 : 0.0;
  return v / static_cast<double>(plus.size() * minus.size());
}

inline double diag_gauss_logpdf(const Eigen::VectorXd& mu, const Eigen::VectorXd& var, const Eigen::VectorXd& z) {
  double l = 0;
  for (Eigen::Index j = 0; j < z.size(); ++j)
    l += -0.5 * std::log(2 * M_PI * var(j)) - 0.5 * (z(j) - mu(j)) * (z(j) - mu(j)) / var(j);
  return l;
}

inline double central_diff(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

inline double rel_err(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0 ? 0 : std::abs(a - b) / s;
}

}  // namespace oracle
