#pragma once

#include <cmath>
#include <numbers>

#include "s2m/errors.hpp"
#include "s2m/types.hpp"

namespace s2m {

inline constexpr double kVarFloor = 1e-4;

/// Diagonal Gaussian N(mean, diag(var)).
template <typename Scalar>
struct GaussianModel {
  Vector<Scalar> mean;
  Vector<Scalar> var;

  Index dim() const { return mean.size(); }
};

/// Derivatives of the closed-form fit w.r.t. the input descriptors. Both are
/// coordinate-local: d mu_k / d d^j_l and d phi_k / d d^j_l vanish for k != l.
template <typename Scalar>
struct GaussianFitGrads {
  Scalar dmu_dd = 0;            // 1/N, identical for every observation and coordinate
  Matrix<Scalar> dphi_dd;       // (j, k) -> d phi_k / d d^j_k
  Eigen::Array<bool, Eigen::Dynamic, 1> floored;  // coordinates held at the variance floor
};

namespace detail {

template <typename Derived>
void require_nonempty(const Eigen::MatrixBase<Derived>& D) {
  if (D.rows() == 0) throw DataError("empty descriptor set");
  if (D.cols() == 0) throw DataError("descriptor dimension is zero");
}

}  // namespace detail

template <typename Derived>
GaussianModel<typename Derived::Scalar> fit_gaussian(const Eigen::MatrixBase<Derived>& D,
                                                     typename Derived::Scalar var_floor = kVarFloor) {
  using Scalar = typename Derived::Scalar;
  detail::require_nonempty(D);
  GaussianModel<Scalar> m;
  m.mean = D.colwise().mean().transpose();
  m.var = (D.rowwise() - m.mean.transpose()).array().square().colwise().mean().transpose();
  m.var = m.var.cwiseMax(var_floor);
  return m;
}

template <typename Scalar, typename Derived>
Scalar gaussian_logpdf(const GaussianModel<Scalar>& model, const Eigen::MatrixBase<Derived>& z) {
  if (z.size() != model.dim()) throw DataError("gaussian_logpdf: dimension mismatch");
  const Scalar n = static_cast<Scalar>(model.dim());
  const Scalar log2pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  const auto diff = (z.derived().template cast<Scalar>() - model.mean).array();
  return Scalar(-0.5) * (n * log2pi + model.var.array().log().sum() + (diff.square() / model.var.array()).sum());
}

/// Gradient of the log-density w.r.t. the probe point.
template <typename Scalar, typename Derived>
Vector<Scalar> gaussian_logpdf_grad_z(const GaussianModel<Scalar>& model, const Eigen::MatrixBase<Derived>& z) {
  return -((z.derived() - model.mean).array() / model.var.array()).matrix();
}

template <typename Derived>
GaussianFitGrads<typename Derived::Scalar> gaussian_fit_grads(const Eigen::MatrixBase<Derived>& D,
                                                              typename Derived::Scalar var_floor = kVarFloor) {
  using Scalar = typename Derived::Scalar;
  detail::require_nonempty(D);
  const Scalar N = static_cast<Scalar>(D.rows());
  const Vector<Scalar> mean = D.colwise().mean().transpose();
  const Vector<Scalar> raw_var = (D.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();

  GaussianFitGrads<Scalar> g;
  g.dmu_dd = Scalar(1) / N;
  g.dphi_dd = (Scalar(2) / N) * (D.rowwise() - mean.transpose());
  // A floored coordinate is locally constant.
  g.floored = raw_var.array() < var_floor;
  for (Index k = 0; k < D.cols(); ++k)
    if (g.floored(k)) g.dphi_dd.col(k).setZero();
  return g;
}

/// Chain the parameter gradient (dL/dmu, dL/dphi) of a closed-form fit back to
/// the descriptors. Returns an N x n matrix.
template <typename Derived, typename Scalar>
Matrix<Scalar> gaussian_backprop_fit(const Eigen::MatrixBase<Derived>& D, const Vector<Scalar>& dL_dmu,
                                     const Vector<Scalar>& dL_dphi, Scalar var_floor = kVarFloor) {
  const auto g = gaussian_fit_grads(D, var_floor);
  Matrix<Scalar> out = g.dphi_dd.array().rowwise() * dL_dphi.transpose().array();
  out.rowwise() += g.dmu_dd * dL_dmu.transpose();
  return out;
}

}  // namespace s2m
