#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "s2m/errors.hpp"
#include "s2m/types.hpp"

namespace s2m {

inline constexpr int kDefaultBins = 100;

/// Relevance scores (log-densities) of the relevant and irrelevant sets.
template <typename Scalar>
struct RelevanceSets {
  Vector<Scalar> plus;
  Vector<Scalar> minus;
};

template <typename Scalar>
struct HistogramPair {
  Vector<Scalar> nodes;
  Vector<Scalar> h_plus;
  Vector<Scalar> h_minus;
  Scalar l_min = 0;
  Scalar l_max = 0;
  Scalar delta = 0;
  bool degenerate = false;
};

template <typename Scalar>
struct HistogramGrads {
  Vector<Scalar> d_plus;
  Vector<Scalar> d_minus;
  bool degenerate = false;
};

template <typename Scalar>
Scalar triangular_kernel(Scalar s, Scalar omega) {
  if (!(omega > 0)) throw DataError("triangular_kernel: width must be positive");
  return std::max(Scalar(1) - Scalar(2) * std::abs(s) / omega, Scalar(0));
}

namespace detail {

template <typename Scalar>
void check_relevances(const RelevanceSets<Scalar>& rel, int bins) {
  if (bins < 2) throw DataError("histogram: need at least 2 bins");
  if (rel.plus.size() < 1 || rel.minus.size() < 1) throw DataError("histogram: relevance sets must be nonempty");
  if (!rel.plus.allFinite() || !rel.minus.allFinite()) throw NumericError("histogram: non-finite relevance score");
}

// Lower node index and interpolation fraction of a score on the node grid.
// With kernel width 2*delta a score only touches its two neighbouring nodes,
// and the triangular weights reduce to linear interpolation between them.
// Scores outside [l_min, l_max] (possible only with an explicit range) are
// extrapolated linearly from the boundary interval.
template <typename Scalar>
std::pair<Index, Scalar> locate(Scalar s, Scalar l_min, Scalar delta, int bins) {
  const Scalar t = (s - l_min) / delta;
  Index b = static_cast<Index>(std::floor(t));
  b = std::clamp<Index>(b, 0, bins - 2);
  return {b, t - static_cast<Scalar>(b)};
}

template <typename Scalar>
void accumulate(const Vector<Scalar>& scores, Vector<Scalar>& h, Scalar l_min, Scalar delta, int bins) {
  const Scalar w = Scalar(1) / static_cast<Scalar>(scores.size());
  for (Index a = 0; a < scores.size(); ++a) {
    const auto [b, frac] = locate(scores(a), l_min, delta, bins);
    h(b) += w * (Scalar(1) - frac);
    h(b + 1) += w * frac;
  }
}

}  // namespace detail

/// Histograms over the range spanned by both sets, using `bins` nodes.
template <typename Scalar>
HistogramPair<Scalar> build_histograms(const RelevanceSets<Scalar>& rel, int bins,
                                       std::optional<std::pair<Scalar, Scalar>> range = std::nullopt) {
  detail::check_relevances(rel, bins);
  HistogramPair<Scalar> hp;
  if (range) {
    hp.l_min = range->first;
    hp.l_max = range->second;
  } else {
    hp.l_min = std::min(rel.plus.minCoeff(), rel.minus.minCoeff());
    hp.l_max = std::max(rel.plus.maxCoeff(), rel.minus.maxCoeff());
  }
  hp.h_plus = Vector<Scalar>::Zero(bins);
  hp.h_minus = Vector<Scalar>::Zero(bins);
  if (!(hp.l_max > hp.l_min)) {
    hp.degenerate = true;
    hp.nodes = Vector<Scalar>::Constant(bins, hp.l_min);
    return hp;
  }
  hp.delta = (hp.l_max - hp.l_min) / static_cast<Scalar>(bins - 1);
  hp.nodes = Vector<Scalar>::LinSpaced(bins, hp.l_min, hp.l_max);
  detail::accumulate(rel.plus, hp.h_plus, hp.l_min, hp.delta, bins);
  detail::accumulate(rel.minus, hp.h_minus, hp.l_min, hp.delta, bins);
  return hp;
}

/// Estimated probability that a relevant score falls below an irrelevant one:
/// sum_b h_minus[b] * sum_{l <= b} h_plus[l]. A degenerate range carries no
/// ordering information and yields 0.5.
template <typename Scalar>
Scalar histogram_loss(const HistogramPair<Scalar>& hp) {
  if (hp.degenerate) return Scalar(0.5);
  Scalar cdf = 0, loss = 0;
  for (Index b = 0; b < hp.h_plus.size(); ++b) {
    cdf += hp.h_plus(b);
    loss += hp.h_minus(b) * cdf;
  }
  return loss;
}

/// Exact derivative of histogram_loss(build_histograms(rel)) w.r.t. every
/// score, with the range endpoints held fixed.
template <typename Scalar>
HistogramGrads<Scalar> histogram_loss_backward(const RelevanceSets<Scalar>& rel, int bins,
                                               std::optional<std::pair<Scalar, Scalar>> range = std::nullopt) {
  const auto hp = build_histograms(rel, bins, range);
  HistogramGrads<Scalar> g;
  g.d_plus = Vector<Scalar>::Zero(rel.plus.size());
  g.d_minus = Vector<Scalar>::Zero(rel.minus.size());
  if (hp.degenerate) {
    g.degenerate = true;
    return g;
  }
  // dL/dh_minus[b] = cdf_plus[b];  dL/dh_plus[l] = sum_{b >= l} h_minus[b].
  Vector<Scalar> cdf_plus(bins), tail_minus(bins);
  Scalar acc = 0;
  for (int b = 0; b < bins; ++b) cdf_plus(b) = (acc += hp.h_plus(b));
  acc = 0;
  for (int b = bins - 1; b >= 0; --b) tail_minus(b) = (acc += hp.h_minus(b));

  const Scalar inv_plus = Scalar(1) / (hp.delta * static_cast<Scalar>(rel.plus.size()));
  const Scalar inv_minus = Scalar(1) / (hp.delta * static_cast<Scalar>(rel.minus.size()));
  for (Index a = 0; a < rel.plus.size(); ++a) {
    const Index b = detail::locate(rel.plus(a), hp.l_min, hp.delta, bins).first;
    g.d_plus(a) = (tail_minus(b + 1) - tail_minus(b)) * inv_plus;
  }
  for (Index a = 0; a < rel.minus.size(); ++a) {
    const Index b = detail::locate(rel.minus(a), hp.l_min, hp.delta, bins).first;
    g.d_minus(a) = (cdf_plus(b + 1) - cdf_plus(b)) * inv_minus;
  }
  return g;
}

}  // namespace s2m
