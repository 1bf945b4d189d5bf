#pragma once

// Finite-difference and brute-force oracles. Nothing here reuses the
// analytic derivative code it checks: log-likelihoods, their gradients and
// reference fits are recomputed from scratch with plain loops.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "s2m/dataset.hpp"
#include "s2m/embedding_net.hpp"
#include "s2m/gmm_model.hpp"
#include "s2m/implicit_grad.hpp"
#include "s2m/meta_trainer.hpp"
#include "s2m/rng.hpp"

namespace s2m::check {

/// Normwise relative error |a - b|_inf / max(|a|_inf, |b|_inf); 0 when both vanish.
double rel_err(const Matrix<double>& a, const Matrix<double>& b);
double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b);

/// Central differences of a vector-valued function; column p is d f / d x_p.
Matrix<double> central_jacobian(const std::function<Vector<double>(const Vector<double>&)>& f,
                                const Vector<double>& x, double h);

// ---- Reference mixture computations (sigma parametrization) ----

Vector<double> pack_sigma(const GmmModel<double>& m);
GmmModel<double> unpack_sigma(const Vector<double>& theta, Index k, Index n);
/// l(theta) = sum_l log sum_i v_i prod_j N(d_lj | mu_ij, sigma_ij), weights unnormalized.
double reference_loglik(const Vector<double>& theta, Index k, Index n, const Matrix<double>& D);
Vector<double> reference_loglik_grad(const Vector<double>& theta, Index k, Index n, const Matrix<double>& D);

/// EM iterated until the parameters stop moving (max change <= tol, relative
/// to the parameter scale once that exceeds one).
GmmModel<double> refit_to_stationarity(const GmmModel<double>& start, const Matrix<double>& D, const EmOptions& em,
                                       double tol = 1e-14, int max_iter = 100000);

struct FitInstance {
  Matrix<double> D;
  GmmModel<double> model;  // stationary, floors inactive
  Matrix<double> resp;
};

/// Random descriptor set drawn around k centers and fitted to stationarity.
/// `separation` is the center spacing in units of the cluster spread.
FitInstance random_fit_instance(Rng& rng, Index k, Index n, Index N, double separation = 4.0);

/// Per-check outcome. `worst` is the largest error seen over the instances.
struct CheckResult {
  std::string name;
  double worst = 0.0;
  double tol = 0.0;
  int instances = 0;
  int excluded = 0;  // entries dropped as kink configurations
  bool passed = false;
  std::string detail;
};

CheckResult check_embedding(int instances, std::uint64_t seed);
CheckResult check_gaussian_grads(int instances, std::uint64_t seed);
CheckResult check_hessian(int instances, std::uint64_t seed);
CheckResult check_cross(int instances, std::uint64_t seed);
/// Implicit solve with k = 1 against the closed-form Gaussian gradients.
CheckResult check_implicit_gaussian(int instances, std::uint64_t seed);
/// Implicit solve against central differences of warm-started refits.
CheckResult check_implicit_refit(int instances, std::uint64_t seed);
CheckResult check_histogram(int instances, std::uint64_t seed);

struct EndToEndSetup {
  RelevanceKind relevance = RelevanceKind::gmm;
  int k = 2;
  int bins = 10;
  int concept_size = 8;
  int relevant_size = 6;
  int irrelevant_size = 6;
  std::vector<Index> hidden{8};
  Index embed_dim = 4;
  double h = 1e-4;
};

/// Tuple loss gradient w.r.t. every net weight against central differences
/// with the histogram range frozen and EM refits warm-started from theta*.
/// Weights whose perturbation moves a score across a histogram node or flips
/// a relu are excluded.
CheckResult check_end_to_end(int instances, std::uint64_t seed, const EndToEndSetup& setup);

struct GradcheckOptions {
  int instances = 10;
  std::uint64_t seed = 1;
  EndToEndSetup end_to_end;
};

std::vector<CheckResult> run_all(const GradcheckOptions& opt);

}  // namespace s2m::check
