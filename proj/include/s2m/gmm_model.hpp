#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "s2m/errors.hpp"
#include "s2m/gaussian_model.hpp"
#include "s2m/rng.hpp"
#include "s2m/types.hpp"

namespace s2m {

inline constexpr double kWeightFloor = 1e-3;

/// k-component mixture of diagonal Gaussians. Row i of `means`/`vars` holds
/// component i.
template <typename Scalar>
struct GmmModel {
  Vector<Scalar> weights;
  Matrix<Scalar> means;
  Matrix<Scalar> vars;

  Index k() const { return weights.size(); }
  Index dim() const { return means.cols(); }

  static GmmModel from_gaussian(const GaussianModel<Scalar>& g) {
    GmmModel m;
    m.weights = Vector<Scalar>::Ones(1);
    m.means = g.mean.transpose();
    m.vars = g.var.transpose();
    return m;
  }
};

struct EmOptions {
  double rel_tol = 1e-8;
  int max_iter = 200;
  double var_floor = kVarFloor;
  double weight_floor = kWeightFloor;
  // Cold starts only: number of runs. Run 0 uses farthest-point seeding from
  // `seed`; run r > 0 draws k distinct rows uniformly from seed + r. The fit
  // with the highest final log-likelihood among those with no floor active
  // wins; if every run touches a floor, the best overall.
  int restarts = 1;
};

struct ColdStart {
  std::uint64_t seed = 0;
};

template <typename Scalar>
struct WarmStart {
  GmmModel<Scalar> model;
};

template <typename Scalar>
using EmInit = std::variant<ColdStart, WarmStart<Scalar>>;

struct EmTrace {
  std::vector<double> loglik;  // loglik[0] is the initial model's value
  bool converged = false;
  int iterations = 0;           // number of M-steps taken
  int restart = 0;              // index of the cold-start run kept
};

template <typename Scalar>
struct EmResult {
  GmmModel<Scalar> model;
  Matrix<Scalar> resp;  // N x k, evaluated at `model`
  EmTrace trace;
};

template <typename Scalar>
struct BicResult {
  GmmModel<Scalar> model;
  Matrix<Scalar> resp;
  int chosen_k = 0;
  std::vector<int> candidates;
  std::vector<double> bic;
  std::vector<bool> degenerate;  // fit ended on the weight or variance floor
  std::vector<EmTrace> traces;
};

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const Vector<Scalar>& x) {
  const Scalar mx = x.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((x.array() - mx).exp().sum());
}

template <typename Scalar>
void check_model(const GmmModel<Scalar>& m) {
  if (m.k() < 1) throw DataError("gmm: model has no components");
  if (m.means.rows() != m.k() || m.vars.rows() != m.k() || m.vars.cols() != m.dim())
    throw DataError("gmm: inconsistent model shapes");
}

}  // namespace detail

/// Per-component log(v_i N(z; mu_i, diag phi_i)).
template <typename Scalar, typename Derived>
Vector<Scalar> component_log_joint(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& z) {
  if (z.size() != m.dim()) throw DataError("gmm: dimension mismatch");
  const Scalar log2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  const Scalar n = static_cast<Scalar>(m.dim());
  Vector<Scalar> out(m.k());
  for (Index i = 0; i < m.k(); ++i) {
    const auto diff = z.derived().transpose().array() - m.means.row(i).array();
    out(i) = std::log(m.weights(i)) -
             Scalar(0.5) * (n * log2pi + m.vars.row(i).array().log().sum() +
                            (diff.square() / m.vars.row(i).array()).sum());
  }
  return out;
}

template <typename Scalar, typename Derived>
Scalar gmm_logpdf(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& z) {
  return detail::log_sum_exp(component_log_joint(m, z));
}

/// Gradient of log p_GMM(z) w.r.t. z.
template <typename Scalar, typename Derived>
Vector<Scalar> gmm_logpdf_grad_z(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& z) {
  const Vector<Scalar> lj = component_log_joint(m, z);
  const Vector<Scalar> r = (lj.array() - detail::log_sum_exp(lj)).exp();
  Vector<Scalar> g = Vector<Scalar>::Zero(m.dim());
  for (Index i = 0; i < m.k(); ++i)
    g.array() -= r(i) * (z.derived().transpose().array() - m.means.row(i).array()).transpose() /
                 m.vars.row(i).transpose().array();
  return g;
}

/// Gradient of log p_GMM(z) w.r.t. the stored parameters, laid out as
/// [means (k*n, component-major) | vars (k*n) | weights (k)].
template <typename Scalar, typename Derived>
Vector<Scalar> gmm_logpdf_grad_theta(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& z) {
  const Index k = m.k(), n = m.dim();
  const Vector<Scalar> lj = component_log_joint(m, z);
  const Vector<Scalar> r = (lj.array() - detail::log_sum_exp(lj)).exp();
  Vector<Scalar> g(k * (2 * n + 1));
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < n; ++j) {
      const Scalar diff = z(j) - m.means(i, j);
      const Scalar phi = m.vars(i, j);
      g(i * n + j) = r(i) * diff / phi;
      g(k * n + i * n + j) = r(i) * (diff * diff / (Scalar(2) * phi * phi) - Scalar(1) / (Scalar(2) * phi));
    }
    g(2 * k * n + i) = r(i) / m.weights(i);
  }
  return g;
}

/// Row-stochastic N x k responsibility matrix, computed in log space.
template <typename Scalar, typename Derived>
Matrix<Scalar> responsibilities(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& D,
                                Vector<Scalar>* row_logpdf = nullptr) {
  detail::check_model(m);
  if (D.rows() == 0) throw DataError("responsibilities: empty descriptor set");
  if (D.cols() != m.dim()) throw DataError("responsibilities: dimension mismatch");
  Matrix<Scalar> r(D.rows(), m.k());
  if (row_logpdf) row_logpdf->resize(D.rows());
  for (Index j = 0; j < D.rows(); ++j) {
    const Vector<Scalar> lj = component_log_joint(m, D.row(j).transpose());
    const Scalar lse = detail::log_sum_exp(lj);
    r.row(j) = (lj.array() - lse).exp().transpose();
    if (row_logpdf) (*row_logpdf)(j) = lse;
  }
  return r;
}

template <typename Scalar, typename Derived>
Scalar gmm_loglik(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& D) {
  Scalar l = 0;
  for (Index j = 0; j < D.rows(); ++j) l += gmm_logpdf(m, D.row(j).transpose());
  return l;
}

/// Constrained maximizer of sum_i c_i log v_i subject to sum v = 1 and
/// v_i >= floor: clip to the floor, share the remaining mass proportionally.
template <typename Scalar>
Vector<Scalar> floor_weights(const Vector<Scalar>& counts, Scalar floor) {
  const Index k = counts.size();
  Eigen::Array<bool, Eigen::Dynamic, 1> clipped = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(k, false);
  Vector<Scalar> v(k);
  for (int pass = 0; pass <= k; ++pass) {
    Scalar free_mass = Scalar(1) - floor * static_cast<Scalar>(clipped.count());
    Scalar free_count = 0;
    for (Index i = 0; i < k; ++i)
      if (!clipped(i)) free_count += counts(i);
    bool changed = false;
    for (Index i = 0; i < k; ++i) {
      if (clipped(i)) {
        v(i) = floor;
        continue;
      }
      v(i) = free_count > 0 ? free_mass * counts(i) / free_count
                            : free_mass / static_cast<Scalar>(k - clipped.count());
      if (v(i) < floor) {
        clipped(i) = true;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return v;
}

namespace detail {

// Farthest-point seeding; the first center is drawn from the seeded stream.
template <typename Derived>
std::vector<Index> farthest_point_seeds(const Eigen::MatrixBase<Derived>& D, Index k, std::uint64_t seed) {
  using Scalar = typename Derived::Scalar;
  Rng rng(seed);
  const Index N = D.rows();
  std::vector<Index> chosen{static_cast<Index>(rng.index(static_cast<std::uint64_t>(N)))};
  std::vector<bool> taken(static_cast<std::size_t>(N), false);
  taken[static_cast<std::size_t>(chosen[0])] = true;
  Vector<Scalar> min_d2 = (D.rowwise() - D.row(chosen[0])).rowwise().squaredNorm();
  while (static_cast<Index>(chosen.size()) < k) {
    Index best = -1;
    Scalar best_d = -1;
    for (Index j = 0; j < N; ++j) {
      if (taken[static_cast<std::size_t>(j)]) continue;
      if (min_d2(j) > best_d) {
        best_d = min_d2(j);
        best = j;
      }
    }
    chosen.push_back(best);
    taken[static_cast<std::size_t>(best)] = true;
    min_d2 = min_d2.cwiseMin((D.rowwise() - D.row(best)).rowwise().squaredNorm());
  }
  return chosen;
}

// k distinct rows drawn uniformly from the seeded stream.
template <typename Derived>
std::vector<Index> random_seeds(const Eigen::MatrixBase<Derived>& D, Index k, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Index> idx(static_cast<std::size_t>(D.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.index(idx.size() - static_cast<std::size_t>(i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace detail

enum class SeedRule { farthest, random };

template <typename Derived>
GmmModel<typename Derived::Scalar> cold_start_model(const Eigen::MatrixBase<Derived>& D, Index k, std::uint64_t seed,
                                                    const EmOptions& opt = {}, SeedRule rule = SeedRule::farthest) {
  using Scalar = typename Derived::Scalar;
  if (k < 1) throw DataError("gmm: k must be >= 1");
  if (D.rows() < k)
    throw DataError("gmm: cold start needs N >= k (N=" + std::to_string(D.rows()) + ", k=" + std::to_string(k) + ")");
  const auto seeds =
      rule == SeedRule::farthest ? detail::farthest_point_seeds(D, k, seed) : detail::random_seeds(D, k, seed);
  const Vector<Scalar> mean = D.colwise().mean().transpose();
  const Vector<Scalar> var = (D.rowwise() - mean.transpose())
                                 .array()
                                 .square()
                                 .colwise()
                                 .mean()
                                 .transpose()
                                 .cwiseMax(static_cast<Scalar>(opt.var_floor));
  GmmModel<Scalar> m;
  m.weights = Vector<Scalar>::Constant(k, Scalar(1) / static_cast<Scalar>(k));
  m.means.resize(k, D.cols());
  m.vars.resize(k, D.cols());
  for (Index i = 0; i < k; ++i) {
    m.means.row(i) = D.row(seeds[static_cast<std::size_t>(i)]);
    m.vars.row(i) = var.transpose();
  }
  return m;
}

/// One M-step with floors. Components with vanishing mass keep their mean and
/// variance (their contribution to the expected log-likelihood is nil).
template <typename Scalar, typename Derived>
GmmModel<Scalar> em_m_step(const GmmModel<Scalar>& prev, const Eigen::MatrixBase<Derived>& D,
                           const Matrix<Scalar>& r, const EmOptions& opt) {
  GmmModel<Scalar> m = prev;
  const Vector<Scalar> counts = r.colwise().sum().transpose();
  for (Index i = 0; i < m.k(); ++i) {
    if (counts(i) <= std::numeric_limits<Scalar>::min() * 1e10) continue;
    const Vector<Scalar> mu = (D.transpose() * r.col(i)) / counts(i);
    const Vector<Scalar> var =
        ((D.rowwise() - mu.transpose()).array().square().colwise() * r.col(i).array()).colwise().sum().transpose() /
        counts(i);
    m.means.row(i) = mu.transpose();
    m.vars.row(i) = var.cwiseMax(static_cast<Scalar>(opt.var_floor)).transpose();
  }
  m.weights = floor_weights<Scalar>(counts, static_cast<Scalar>(opt.weight_floor));
  return m;
}

namespace detail {

template <typename Scalar, typename Derived>
EmResult<Scalar> run_em(const Eigen::MatrixBase<Derived>& D, GmmModel<Scalar> model, const EmOptions& opt) {
  EmResult<Scalar> res;
  Vector<Scalar> rowlp;
  Matrix<Scalar> r = responsibilities(model, D, &rowlp);
  Scalar l = rowlp.sum();
  res.trace.loglik.push_back(static_cast<double>(l));
  for (int it = 0; it < opt.max_iter; ++it) {
    GmmModel<Scalar> next = em_m_step(model, D, r, opt);
    Matrix<Scalar> r_next = responsibilities(next, D, &rowlp);
    const Scalar l_next = rowlp.sum();
    if (!std::isfinite(l_next)) throw NumericError("gmm: non-finite log-likelihood during EM");
    model = std::move(next);
    r = std::move(r_next);
    res.trace.loglik.push_back(static_cast<double>(l_next));
    res.trace.iterations = it + 1;
    const Scalar gain = l_next - l;
    l = l_next;
    if (gain <= static_cast<Scalar>(opt.rel_tol) * std::abs(l)) {
      res.trace.converged = true;
      break;
    }
  }
  res.model = std::move(model);
  res.resp = std::move(r);
  return res;
}

template <typename Scalar>
bool touches_floor(const GmmModel<Scalar>& m, const EmOptions& opt) {
  if (m.k() > 1 && m.weights.minCoeff() <= static_cast<Scalar>(opt.weight_floor * (1 + 1e-9))) return true;
  return m.vars.minCoeff() <= static_cast<Scalar>(opt.var_floor * (1 + 1e-9));
}

}  // namespace detail

/// EM for a diagonal GMM. Stops when the relative log-likelihood gain drops
/// below `opt.rel_tol` or after `opt.max_iter` M-steps.
template <typename Derived>
EmResult<typename Derived::Scalar> fit_gmm_em(const Eigen::MatrixBase<Derived>& D, Index k,
                                              const EmInit<typename Derived::Scalar>& init, const EmOptions& opt = {}) {
  using Scalar = typename Derived::Scalar;
  detail::require_nonempty(D);
  if (const auto* warm = std::get_if<WarmStart<Scalar>>(&init)) {
    const auto& model = warm->model;
    if (model.k() != k || model.dim() != D.cols())
      throw DataError("gmm: warm-start model shape mismatch (k=" + std::to_string(model.k()) +
                      ", n=" + std::to_string(model.dim()) + ")");
    detail::check_model(model);
    return detail::run_em(D, model, opt);
  }
  if (opt.restarts < 1) throw DataError("gmm: restarts must be >= 1");
  const std::uint64_t seed = std::get<ColdStart>(init).seed;
  std::optional<EmResult<Scalar>> best;
  bool best_clear = false;
  for (int r = 0; r < opt.restarts; ++r) {
    const auto rule = r == 0 ? SeedRule::farthest : SeedRule::random;
    auto res = detail::run_em(D, cold_start_model(D, k, seed + static_cast<std::uint64_t>(r), opt, rule), opt);
    res.trace.restart = r;
    const bool clear = !detail::touches_floor(res.model, opt);
    const bool better = !best || (clear && !best_clear) ||
                        (clear == best_clear && res.trace.loglik.back() > best->trace.loglik.back());
    if (better) {
      best = std::move(res);
      best_clear = clear;
    }
  }
  return std::move(*best);
}

inline double bic_value(int k, Index n, Index N, double loglik) {
  return 2.0 * k * static_cast<double>(n) * std::log(static_cast<double>(N)) - 2.0 * loglik;
}

template <typename Derived>
BicResult<typename Derived::Scalar> select_by_bic(const Eigen::MatrixBase<Derived>& D,
                                                  const std::vector<int>& candidate_ks, std::uint64_t seed,
                                                  const EmOptions& opt = {}) {
  using Scalar = typename Derived::Scalar;
  if (candidate_ks.empty()) throw DataError("select_by_bic: empty candidate list");
  std::vector<int> ks = candidate_ks;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  BicResult<Scalar> out;
  std::vector<EmResult<Scalar>> fits;
  for (int k : ks) {
    if (k > D.rows()) throw DataError("select_by_bic: candidate k=" + std::to_string(k) + " exceeds N");
    auto fit = fit_gmm_em(D, k, EmInit<Scalar>{ColdStart{seed}}, opt);
    out.candidates.push_back(k);
    out.bic.push_back(bic_value(k, D.cols(), D.rows(), fit.trace.loglik.back()));
    out.degenerate.push_back(detail::touches_floor(fit.model, opt));
    out.traces.push_back(fit.trace);
    fits.push_back(std::move(fit));
  }
  // A fit resting on a floor has an artificial likelihood; such candidates
  // compete only when every candidate is degenerate.
  const bool any_proper = std::count(out.degenerate.begin(), out.degenerate.end(), false) > 0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t pick = 0;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (any_proper && out.degenerate[i]) continue;
    // Strict comparison: ties keep the smaller k (candidates are ascending).
    if (out.bic[i] < best) {
      best = out.bic[i];
      pick = i;
    }
  }
  out.chosen_k = ks[pick];
  out.model = std::move(fits[pick].model);
  out.resp = std::move(fits[pick].resp);
  return out;
}

}  // namespace s2m
