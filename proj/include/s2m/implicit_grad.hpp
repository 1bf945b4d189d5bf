#pragma once

#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Sparse>

#include "s2m/errors.hpp"
#include "s2m/gmm_model.hpp"
#include "s2m/types.hpp"

namespace s2m {

// Gradients of a fitted GMM w.r.t. its input descriptors.
//
// Internally the variance of coordinate j in component i is parametrized by
// its standard deviation sigma_ij, in which the coordinate-wise likelihood
// derivatives below are expressed. Results leave this module in the stored
// phi = sigma^2 parametrization, using d phi = 2 sigma d sigma.
//
// Parameter layout (both parametrizations), m = k (2n + 1):
//   [ mu_00 .. mu_0(n-1), mu_10 .. | s_00 .. s_0(n-1), s_10 .. | v_0 .. v_(k-1) ]
// The bordered system appends one row/column for the Lagrange multiplier of
// sum v = 1.

struct ParamLayout {
  Index k = 0;
  Index n = 0;

  Index mean(Index i, Index j) const { return i * n + j; }
  Index spread(Index i, Index j) const { return k * n + i * n + j; }
  Index weight(Index i) const { return 2 * k * n + i; }
  Index size() const { return k * (2 * n + 1); }
  Index lambda() const { return size(); }
  // Component that owns parameter `p`.
  Index component_of(Index p) const {
    if (p >= 2 * k * n) return p - 2 * k * n;
    return (p % (k * n)) / n;
  }
};

/// Coordinate-wise Gaussian likelihood g(mu, sigma | d) and its first and
/// second derivatives, the latter five returned as ratios to g.
template <typename Scalar>
struct CoordinateDerivatives {
  Scalar g;
  Scalar mu;           // g'_mu / g
  Scalar sigma;        // g'_sigma / g
  Scalar mu_mu;        // g''_mumu / g
  Scalar sigma_sigma;  // g''_sigmasigma / g
  Scalar sigma_mu;     // g''_sigmamu / g
};

template <typename Scalar>
CoordinateDerivatives<Scalar> coordinate_derivatives(Scalar mu, Scalar sigma, Scalar d) {
  if (!(sigma > 0)) throw NumericError("coordinate_derivatives: sigma must be positive");
  const Scalar e = d - mu;
  const Scalar s2 = sigma * sigma;
  const Scalar x2 = e * e / s2;
  CoordinateDerivatives<Scalar> c;
  c.g = std::exp(Scalar(-0.5) * x2) / (std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>) * sigma);
  c.mu = e / s2;
  c.sigma = (x2 - Scalar(1)) / sigma;
  c.mu_mu = -Scalar(1) / s2 + e * e / (s2 * s2);
  c.sigma_sigma = (Scalar(2) - Scalar(5) * x2 + x2 * x2) / s2;
  c.sigma_mu = -Scalar(3) * e / (s2 * sigma) + e * e * e / (s2 * s2 * sigma);
  return c;
}

/// Hessian of the log-likelihood in the sigma parametrization, split by the
/// structure the mixture imposes. The (mu_ij, sigma_ij) 2x2 blocks always
/// carry the bulk; observations whose responsibility is saturated add nothing
/// else apart from the diagonal weight entry.
template <typename Scalar>
struct HessianBlocks {
  ParamLayout layout;
  std::vector<Eigen::Matrix<Scalar, 2, 2>> diag;  // indexed by i * n + j
  Eigen::SparseMatrix<Scalar> coupling;           // 2kn x 2kn, off-block mean/spread terms
  Matrix<Scalar> weight_cross;                    // 2kn x k
  Matrix<Scalar> weight_block;                    // k x k
  std::vector<bool> saturated;                    // per observation

  double saturated_fraction() const {
    if (saturated.empty()) return 0.0;
    return static_cast<double>(std::count(saturated.begin(), saturated.end(), true)) /
           static_cast<double>(saturated.size());
  }

  Matrix<Scalar> dense() const {
    const Index k = layout.k, n = layout.n, m = layout.size();
    Matrix<Scalar> H = Matrix<Scalar>::Zero(m, m);
    H.topLeftCorner(2 * k * n, 2 * k * n) = Matrix<Scalar>(coupling);
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < n; ++j) {
        const auto& b = diag[static_cast<std::size_t>(i * n + j)];
        const Index a = layout.mean(i, j), s = layout.spread(i, j);
        H(a, a) += b(0, 0);
        H(a, s) += b(0, 1);
        H(s, a) += b(1, 0);
        H(s, s) += b(1, 1);
      }
    H.topRightCorner(2 * k * n, k) = weight_cross;
    H.bottomLeftCorner(k, 2 * k * n) = weight_cross.transpose();
    H.bottomRightCorner(k, k) = weight_block;
    return H;
  }
};

enum class SolveMode { automatic, dense, sparse };

struct ImplicitOptions {
  double sat_tol = 1e-12;
  bool use_saturation = true;
  SolveMode mode = SolveMode::automatic;
  double max_condition = 1e12;
  double var_floor = kVarFloor;
  double weight_floor = kWeightFloor;
};

/// d theta* / d d^l_(s) in the stored (phi) parametrization. Column l * n + s.
template <typename Scalar>
struct FitGradients {
  ParamLayout layout;
  Matrix<Scalar> dtheta_dd;   // m x nN
  Vector<Scalar> dlambda_dd;  // nN
};

namespace detail {

template <typename Scalar>
struct ObservationTerms {
  Matrix<Scalar> a_mu, a_sigma;             // k x n first-derivative ratios
  Matrix<Scalar> b_mumu, b_sigsig, b_sigmu;  // k x n second-derivative ratios
};

template <typename Scalar, typename Derived>
ObservationTerms<Scalar> observation_terms(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& d) {
  const Index k = m.k(), n = m.dim();
  ObservationTerms<Scalar> t;
  t.a_mu.resize(k, n);
  t.a_sigma.resize(k, n);
  t.b_mumu.resize(k, n);
  t.b_sigsig.resize(k, n);
  t.b_sigmu.resize(k, n);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < n; ++j) {
      const auto c = coordinate_derivatives<Scalar>(m.means(i, j), std::sqrt(m.vars(i, j)), d(j));
      t.a_mu(i, j) = c.mu;
      t.a_sigma(i, j) = c.sigma;
      t.b_mumu(i, j) = c.mu_mu;
      t.b_sigsig(i, j) = c.sigma_sigma;
      t.b_sigmu(i, j) = c.sigma_mu;
    }
  return t;
}

template <typename Scalar>
Index saturating_component(const Matrix<Scalar>& resp, Index row, double sat_tol) {
  Index best;
  const Scalar r = resp.row(row).maxCoeff(&best);
  return (Scalar(1) - r) < static_cast<Scalar>(sat_tol) ? best : -1;
}

template <typename Scalar, typename Derived>
void check_resp(const GmmModel<Scalar>& m, const Eigen::MatrixBase<Derived>& D, const Matrix<Scalar>& resp) {
  if (D.cols() != m.dim()) throw DataError("implicit-grad: descriptor dimension mismatch");
  if (resp.rows() != D.rows() || resp.cols() != m.k())
    throw DataError("implicit-grad: responsibility matrix shape inconsistent with model/data");
  for (Index j = 0; j < resp.rows(); ++j)
    if (std::abs(resp.row(j).sum() - Scalar(1)) > Scalar(1e-8))
      throw DataError("implicit-grad: responsibility row " + std::to_string(j) + " does not sum to one");
}

}  // namespace detail

/// Sum over observations of the second derivatives of log h(theta | d) w.r.t.
/// the model parameters (sigma parametrization, weights included). The three
/// cases of the mixture structure:
///   same component, different coordinates: (r_i - r_i^2) a_ijk a_ist
///   same component and coordinate:          r_i b_ijkt - r_i^2 a_ijk a_ijt
///   different components:                   -r_i r_u a_ijk a_ust
/// with a = g'/g and b = g''/g. The weight terms follow from d log h / d v_i =
/// r_i / v_i: d^2 / dv_i dv_u = -r_i r_u / (v_i v_u), and the mixed terms reuse
/// the case pattern with one factor replaced by r / v.
template <typename Scalar, typename Derived>
HessianBlocks<Scalar> loglik_hessian(const GmmModel<Scalar>& model, const Eigen::MatrixBase<Derived>& D,
                                     const Matrix<Scalar>& resp, const ImplicitOptions& opt = {}) {
  detail::check_resp(model, D, resp);
  const Index k = model.k(), n = model.dim(), N = D.rows();
  HessianBlocks<Scalar> H;
  H.layout = {k, n};
  H.diag.assign(static_cast<std::size_t>(k * n), Eigen::Matrix<Scalar, 2, 2>::Zero());
  H.weight_cross = Matrix<Scalar>::Zero(2 * k * n, k);
  H.weight_block = Matrix<Scalar>::Zero(k, k);
  H.saturated.assign(static_cast<std::size_t>(N), false);
  std::vector<Eigen::Triplet<Scalar>> trip;
  const auto& L = H.layout;
  const Vector<Scalar>& v = model.weights;

  for (Index l = 0; l < N; ++l) {
    const auto t = detail::observation_terms(model, D.row(l).transpose());
    const auto r = resp.row(l);
    const Index sat = opt.use_saturation ? detail::saturating_component(resp, l, opt.sat_tol) : -1;
    H.saturated[static_cast<std::size_t>(l)] = sat >= 0;

    if (sat >= 0) {
      // Only same-component, same-coordinate derivatives survive.
      const Scalar ri = r(sat);
      for (Index j = 0; j < n; ++j) {
        auto& b = H.diag[static_cast<std::size_t>(sat * n + j)];
        const Scalar am = t.a_mu(sat, j), as = t.a_sigma(sat, j);
        b(0, 0) += ri * t.b_mumu(sat, j) - ri * ri * am * am;
        b(0, 1) += ri * t.b_sigmu(sat, j) - ri * ri * am * as;
        b(1, 0) += ri * t.b_sigmu(sat, j) - ri * ri * am * as;
        b(1, 1) += ri * t.b_sigsig(sat, j) - ri * ri * as * as;
      }
      H.weight_block(sat, sat) -= ri * ri / (v(sat) * v(sat));
      continue;
    }

    auto a_of = [&](Index i, Index j, int kind) { return kind == 0 ? t.a_mu(i, j) : t.a_sigma(i, j); };
    auto index_of = [&](Index i, Index j, int kind) { return kind == 0 ? L.mean(i, j) : L.spread(i, j); };

    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < n; ++j) {
        // Same component, same coordinate.
        auto& b = H.diag[static_cast<std::size_t>(i * n + j)];
        const Scalar am = t.a_mu(i, j), as = t.a_sigma(i, j);
        b(0, 0) += r(i) * t.b_mumu(i, j) - r(i) * r(i) * am * am;
        b(0, 1) += r(i) * t.b_sigmu(i, j) - r(i) * r(i) * am * as;
        b(1, 0) += r(i) * t.b_sigmu(i, j) - r(i) * r(i) * am * as;
        b(1, 1) += r(i) * t.b_sigsig(i, j) - r(i) * r(i) * as * as;

        for (int kk = 0; kk < 2; ++kk) {
          const Index p = index_of(i, j, kk);
          const Scalar apk = a_of(i, j, kk);
          for (Index u = 0; u < k; ++u)
            for (Index s = 0; s < n; ++s) {
              if (u == i && s == j) continue;
              const Scalar coef = (u == i) ? r(i) - r(i) * r(i) : -r(i) * r(u);
              if (coef == Scalar(0)) continue;
              for (int tt = 0; tt < 2; ++tt)
                trip.emplace_back(p, index_of(u, s, tt), coef * apk * a_of(u, s, tt));
            }
          // Mean/spread against weights.
          for (Index u = 0; u < k; ++u) {
            const Scalar ru_v = r(u) / v(u);
            const Scalar val = (u == i) ? apk * (r(i) - r(i) * r(i)) / v(i) : -apk * r(i) * ru_v;
            H.weight_cross(p, u) += val;
          }
        }
      }
    }
    for (Index i = 0; i < k; ++i)
      for (Index u = 0; u < k; ++u) H.weight_block(i, u) -= r(i) * r(u) / (v(i) * v(u));
  }
  H.coupling.resize(2 * k * n, 2 * k * n);
  H.coupling.setFromTriplets(trip.begin(), trip.end());
  return H;
}

/// Per-observation m x n blocks d^2 log h(theta | d^l) / d theta d d^l_(s).
/// Uses d g / d d = -g'_mu, so d log g_ij / d d_j = -a_mu(i, j); the
/// responsibilities move with d through
///   d r_i / d d_s = r_i (sum_u r_u a_mu(u, s) - a_mu(i, s)).
template <typename Scalar, typename Derived>
std::vector<Matrix<Scalar>> cross_hessian_data(const GmmModel<Scalar>& model, const Eigen::MatrixBase<Derived>& D,
                                               const Matrix<Scalar>& resp, const ImplicitOptions& opt = {}) {
  detail::check_resp(model, D, resp);
  const Index k = model.k(), n = model.dim(), N = D.rows();
  const ParamLayout L{k, n};
  std::vector<Matrix<Scalar>> out;
  out.reserve(static_cast<std::size_t>(N));
  for (Index l = 0; l < N; ++l) {
    Matrix<Scalar> B = Matrix<Scalar>::Zero(L.size(), n);
    const auto t = detail::observation_terms(model, D.row(l).transpose());
    const auto r = resp.row(l);
    const Index sat = opt.use_saturation ? detail::saturating_component(resp, l, opt.sat_tol) : -1;

    // Direct dependence of a_ijk on d_j.
    for (Index i = 0; i < k; ++i) {
      if (sat >= 0 && i != sat) continue;
      for (Index s = 0; s < n; ++s) {
        const Scalar phi = model.vars(i, s);
        const Scalar sigma = std::sqrt(phi);
        const Scalar e = D(l, s) - model.means(i, s);
        B(L.mean(i, s), s) += r(i) / phi;
        B(L.spread(i, s), s) += r(i) * Scalar(2) * e / (phi * sigma);
      }
    }
    if (sat < 0) {
      for (Index s = 0; s < n; ++s) {
        Scalar avg = 0;
        for (Index u = 0; u < k; ++u) avg += r(u) * t.a_mu(u, s);
        for (Index i = 0; i < k; ++i) {
          const Scalar dr = r(i) * (avg - t.a_mu(i, s));
          if (dr == Scalar(0)) continue;
          for (Index j = 0; j < n; ++j) {
            B(L.mean(i, j), s) += dr * t.a_mu(i, j);
            B(L.spread(i, j), s) += dr * t.a_sigma(i, j);
          }
          B(L.weight(i), s) += dr / model.weights(i);
        }
      }
    }
    out.push_back(std::move(B));
  }
  return out;
}

/// Factored bordered system [H, c; c^T, 0] for a fitted model. The
/// factorization is shared between the full Jacobian solve and the adjoint
/// (vector-Jacobian) product used in backpropagation.
template <typename Scalar>
class ImplicitSystem {
 public:
  template <typename Derived>
  ImplicitSystem(const GmmModel<Scalar>& model, const Eigen::MatrixBase<Derived>& D, const Matrix<Scalar>& resp,
                 const ImplicitOptions& opt = {})
      : layout_{model.k(), model.dim()}, sigma_(model.vars.array().sqrt()) {
    check_floors(model, opt);
    hessian_ = loglik_hessian(model, D, resp, opt);
    cross_ = cross_hessian_data(model, D, resp, opt);
    const Index m = layout_.size();
    K_ = Matrix<Scalar>::Zero(m + 1, m + 1);
    K_.topLeftCorner(m, m) = hessian_.dense();
    for (Index i = 0; i < layout_.k; ++i) {
      K_(layout_.weight(i), m) = Scalar(1);
      K_(m, layout_.weight(i)) = Scalar(1);
    }
    const bool sparse = opt.mode == SolveMode::sparse ||
                        (opt.mode == SolveMode::automatic && hessian_.saturated_fraction() > 0.0);
    if (sparse) {
      partition_blocks();
    } else {
      blocks_.push_back(Block{});
      blocks_.back().idx.resize(static_cast<std::size_t>(m + 1));
      std::iota(blocks_.back().idx.begin(), blocks_.back().idx.end(), Index{0});
    }
    for (auto& b : blocks_) factor(b, model, opt);
  }

  const ParamLayout& layout() const { return layout_; }
  const HessianBlocks<Scalar>& hessian() const { return hessian_; }
  const std::vector<Matrix<Scalar>>& cross() const { return cross_; }
  const Matrix<Scalar>& system_matrix() const { return K_; }
  std::size_t num_blocks() const { return blocks_.size(); }

  /// Right-hand side [-B; 0] for every (observation, coordinate) pair.
  Matrix<Scalar> rhs() const {
    const Index m = layout_.size(), n = layout_.n, N = static_cast<Index>(cross_.size());
    Matrix<Scalar> R = Matrix<Scalar>::Zero(m + 1, n * N);
    for (Index l = 0; l < N; ++l) R.block(0, l * n, m, n) = -cross_[static_cast<std::size_t>(l)];
    return R;
  }

  /// Solution of K X = R in the sigma parametrization (rows m + 1).
  Matrix<Scalar> solve(const Matrix<Scalar>& R) const {
    Matrix<Scalar> X = Matrix<Scalar>::Zero(R.rows(), R.cols());
    for (const auto& b : blocks_) {
      Matrix<Scalar> sub(static_cast<Index>(b.idx.size()), R.cols());
      for (std::size_t a = 0; a < b.idx.size(); ++a) sub.row(static_cast<Index>(a)) = R.row(b.idx[a]);
      const Matrix<Scalar> sol = b.lu.solve(sub);
      for (std::size_t a = 0; a < b.idx.size(); ++a) X.row(b.idx[a]) = sol.row(static_cast<Index>(a));
    }
    return X;
  }

  FitGradients<Scalar> gradients() const {
    const Matrix<Scalar> X = solve(rhs());
    FitGradients<Scalar> g;
    g.layout = layout_;
    const Index m = layout_.size();
    g.dtheta_dd = X.topRows(m);
    to_phi_rows(g.dtheta_dd);
    g.dlambda_dd = X.row(m).transpose();
    return g;
  }

  /// dL/dD (N x n) given dL/dtheta in the stored parametrization, without
  /// forming the full Jacobian: K is symmetric, so solve K y = [g; 0] once and
  /// contract y with -B.
  Matrix<Scalar> backprop(const Vector<Scalar>& dL_dtheta) const {
    const Index m = layout_.size(), n = layout_.n, N = static_cast<Index>(cross_.size());
    if (dL_dtheta.size() != m) throw DataError("implicit-grad: parameter gradient has wrong size");
    Matrix<Scalar> g = Matrix<Scalar>::Zero(m + 1, 1);
    g.topRows(m) = dL_dtheta;
    for (Index i = 0; i < layout_.k; ++i)
      for (Index j = 0; j < n; ++j) g(layout_.spread(i, j), 0) *= Scalar(2) * sigma_(i, j);
    const Matrix<Scalar> y = solve(g);
    Matrix<Scalar> out(N, n);
    for (Index l = 0; l < N; ++l)
      out.row(l) = -(y.topRows(m).transpose() * cross_[static_cast<std::size_t>(l)]);
    return out;
  }

 private:
  struct Block {
    std::vector<Index> idx;
    Eigen::PartialPivLU<Matrix<Scalar>> lu;
  };

  void to_phi_rows(Matrix<Scalar>& M) const {
    for (Index i = 0; i < layout_.k; ++i)
      for (Index j = 0; j < layout_.n; ++j) M.row(layout_.spread(i, j)) *= Scalar(2) * sigma_(i, j);
  }

  void check_floors(const GmmModel<Scalar>& model, const ImplicitOptions& opt) const {
    for (Index i = 0; i < model.k(); ++i) {
      if (model.k() > 1 && model.weights(i) <= static_cast<Scalar>(opt.weight_floor * (1 + 1e-9)))
        throw NumericError("implicit-grad: weight floor active at component " + std::to_string(i));
      if ((model.vars.row(i).array() <= static_cast<Scalar>(opt.var_floor * (1 + 1e-9))).any())
        throw NumericError("implicit-grad: variance floor active at component " + std::to_string(i));
    }
  }

  // Connected components of the sparsity graph of K.
  void partition_blocks() {
    const Index dim = K_.rows();
    std::vector<Index> parent(static_cast<std::size_t>(dim));
    std::iota(parent.begin(), parent.end(), Index{0});
    auto find = [&](Index x) {
      while (parent[static_cast<std::size_t>(x)] != x) {
        parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
        x = parent[static_cast<std::size_t>(x)];
      }
      return x;
    };
    for (Index c = 0; c < dim; ++c)
      for (Index r = 0; r < c; ++r)
        if (K_(r, c) != Scalar(0)) parent[static_cast<std::size_t>(find(r))] = find(c);
    std::vector<Index> root_to_block(static_cast<std::size_t>(dim), -1);
    for (Index p = 0; p < dim; ++p) {
      const Index root = find(p);
      auto& slot = root_to_block[static_cast<std::size_t>(root)];
      if (slot < 0) {
        slot = static_cast<Index>(blocks_.size());
        blocks_.push_back(Block{});
      }
      blocks_[static_cast<std::size_t>(slot)].idx.push_back(p);
    }
  }

  void factor(Block& b, const GmmModel<Scalar>& model, const ImplicitOptions& opt) {
    const Index s = static_cast<Index>(b.idx.size());
    Matrix<Scalar> sub(s, s);
    for (Index a = 0; a < s; ++a)
      for (Index c = 0; c < s; ++c) sub(a, c) = K_(b.idx[static_cast<std::size_t>(a)], b.idx[static_cast<std::size_t>(c)]);
    b.lu.compute(sub);
    const Scalar rc = b.lu.rcond();
    if (!(rc * static_cast<Scalar>(opt.max_condition) >= Scalar(1))) {
      std::ostringstream os;
      os << "implicit-grad: ill-conditioned system (condition estimate " << (rc > 0 ? 1 / rc : INFINITY)
         << "), degenerate component " << degenerate_component(b, model);
      throw NumericError(os.str());
    }
  }

  // Component in the block whose own mean/spread sub-Hessian is worst conditioned.
  Index degenerate_component(const Block& b, const GmmModel<Scalar>&) const {
    Index worst = layout_.component_of(b.idx.front() == layout_.lambda() ? 0 : b.idx.front());
    Scalar worst_rc = std::numeric_limits<Scalar>::infinity();
    std::vector<bool> seen(static_cast<std::size_t>(layout_.k), false);
    for (Index p : b.idx) {
      if (p == layout_.lambda()) continue;
      const Index c = layout_.component_of(p);
      if (seen[static_cast<std::size_t>(c)]) continue;
      seen[static_cast<std::size_t>(c)] = true;
      std::vector<Index> own;
      for (Index j = 0; j < layout_.n; ++j) {
        own.push_back(layout_.mean(c, j));
        own.push_back(layout_.spread(c, j));
      }
      Matrix<Scalar> sub(static_cast<Index>(own.size()), static_cast<Index>(own.size()));
      for (std::size_t a = 0; a < own.size(); ++a)
        for (std::size_t d = 0; d < own.size(); ++d) sub(static_cast<Index>(a), static_cast<Index>(d)) = K_(own[a], own[d]);
      const Scalar rc = Eigen::PartialPivLU<Matrix<Scalar>>(sub).rcond();
      if (rc < worst_rc) {
        worst_rc = rc;
        worst = c;
      }
    }
    return worst;
  }

  ParamLayout layout_;
  Matrix<Scalar> sigma_;
  HessianBlocks<Scalar> hessian_;
  std::vector<Matrix<Scalar>> cross_;
  Matrix<Scalar> K_;
  std::vector<Block> blocks_;
};

template <typename Scalar, typename Derived>
FitGradients<Scalar> solve_implicit(const GmmModel<Scalar>& model, const Eigen::MatrixBase<Derived>& D,
                                    const Matrix<Scalar>& resp, const ImplicitOptions& opt = {}) {
  return ImplicitSystem<Scalar>(model, D, resp, opt).gradients();
}

/// Gradient of the total log-likelihood w.r.t. theta in the sigma
/// parametrization; the oracle target for the Hessian checks.
template <typename Scalar, typename Derived>
Vector<Scalar> loglik_grad_sigma(const GmmModel<Scalar>& model, const Eigen::MatrixBase<Derived>& D) {
  const Index k = model.k(), n = model.dim();
  const ParamLayout L{k, n};
  Vector<Scalar> g = Vector<Scalar>::Zero(L.size());
  const Matrix<Scalar> r = responsibilities(model, D);
  for (Index l = 0; l < D.rows(); ++l)
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < n; ++j) {
        const Scalar sigma = std::sqrt(model.vars(i, j));
        const Scalar e = D(l, j) - model.means(i, j);
        g(L.mean(i, j)) += r(l, i) * e / model.vars(i, j);
        g(L.spread(i, j)) += r(l, i) * (e * e / model.vars(i, j) - Scalar(1)) / sigma;
      }
      g(L.weight(i)) += r(l, i) / model.weights(i);
    }
  return g;
}

}  // namespace s2m
