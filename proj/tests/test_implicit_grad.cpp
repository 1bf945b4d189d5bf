#include <doctest.h>

#include "oracles.hpp"
#include "s2m/gradcheck.hpp"
#include "s2m/implicit_grad.hpp"

using namespace s2m;

namespace {

double g_at(double mu, double sigma, double d) { return coordinate_derivatives(mu, sigma, d).g; }

check::FitInstance instance(std::uint64_t seed, Index k, Index n, Index N, double sep) {
  Rng rng(seed);
  return check::random_fit_instance(rng, k, n, N, sep);
}

// Two unit-spread clusters whose means differ by `sep` in every coordinate.
check::FitInstance separated(std::uint64_t seed, Index n, Index N, double sep) {
  Rng rng(seed);
  check::FitInstance inst;
  inst.D.resize(N, n);
  for (Index l = 0; l < N; ++l)
    for (Index j = 0; j < n; ++j) inst.D(l, j) = rng.normal() + (l % 2 ? sep : 0.0);
  EmOptions em;
  em.restarts = 8;
  const auto fit = fit_gmm_em(inst.D, 2, EmInit<double>{ColdStart{seed}}, em);
  inst.model = check::refit_to_stationarity(fit.model, inst.D, EmOptions{});
  inst.resp = responsibilities(inst.model, inst.D);
  return inst;
}

ImplicitOptions with_mode(SolveMode m) {
  ImplicitOptions o;
  o.mode = m;
  return o;
}

}  // namespace

TEST_CASE("coordinate derivative table at the mean") {
  const auto c = coordinate_derivatives(0.3, 1.0, 0.3);
  CHECK(c.mu_mu == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(c.mu == 0.0);
  const auto s = coordinate_derivatives(0.3, 2.5, 0.3);
  CHECK(s.sigma == doctest::Approx(-1 / 2.5).epsilon(1e-15));
  CHECK_THROWS_AS(coordinate_derivatives(0.0, 0.0, 1.0), NumericError);
  CHECK_THROWS_AS(coordinate_derivatives(0.0, -1.0, 1.0), NumericError);
}

TEST_CASE("coordinate derivatives match central differences") {
  // Differences of log g; its derivatives are g'/g and g''/g - (g'/g)^2.
  auto lg = [](double mu, double sigma, double d) { return std::log(g_at(mu, sigma, d)); };
  Rng rng(3);
  double worst = 0;
  const double h = 1e-4;
  for (int t = 0; t < 200; ++t) {
    const double mu = rng.normal(), sigma = 0.5 + rng.uniform(), d = mu + rng.normal(0, 2 * sigma);
    const auto c = coordinate_derivatives(mu, sigma, d);
    const double l = lg(mu, sigma, d);
    const double fd_mu = (lg(mu + h, sigma, d) - lg(mu - h, sigma, d)) / (2 * h);
    const double fd_s = (lg(mu, sigma + h, d) - lg(mu, sigma - h, d)) / (2 * h);
    const double fd_mm = (lg(mu + h, sigma, d) - 2 * l + lg(mu - h, sigma, d)) / (h * h);
    const double fd_ss = (lg(mu, sigma + h, d) - 2 * l + lg(mu, sigma - h, d)) / (h * h);
    const double fd_sm = (lg(mu + h, sigma + h, d) - lg(mu - h, sigma + h, d) - lg(mu + h, sigma - h, d) +
                          lg(mu - h, sigma - h, d)) /
                         (4 * h * h);
    auto rel = [](double fd, double an) { return std::abs(fd - an) / std::max(1.0, std::abs(an)); };
    worst = std::max({worst, rel(fd_mu, c.mu), rel(fd_s, c.sigma), rel(fd_mm, c.mu_mu - c.mu * c.mu),
                      rel(fd_ss, c.sigma_sigma - c.sigma * c.sigma), rel(fd_sm, c.sigma_mu - c.sigma * c.mu)});
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("single-Gaussian hessian and cross blocks at the optimum") {
  Rng rng(5);
  Matrix<double> D(12, 3);
  for (Index i = 0; i < D.rows(); ++i)
    for (Index j = 0; j < 3; ++j) D(i, j) = rng.normal(0, 1 + j);
  const auto m = GmmModel<double>::from_gaussian(fit_gaussian(D));
  const Matrix<double> r = responsibilities(m, D);
  const auto H = loglik_hessian(m, D, r).dense();
  const auto X = cross_hessian_data(m, D, r);
  const ParamLayout L{1, 3};
  for (Index j = 0; j < 3; ++j) {
    CHECK(H(L.mean(0, j), L.mean(0, j)) == doctest::Approx(-12.0 / m.vars(0, j)).epsilon(1e-12));
    for (Index l = 0; l < D.rows(); ++l)
      CHECK(X[static_cast<std::size_t>(l)](L.mean(0, j), j) == doctest::Approx(1.0 / m.vars(0, j)).epsilon(1e-12));
  }
  CHECK((H - H.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * H.cwiseAbs().maxCoeff());
}

TEST_CASE("hessian and cross blocks match differences of the reference gradient") {
  Rng rng(8);
  for (int t = 0; t < 12; ++t) {
    const Index k = 1 + t % 3, n = 1 + static_cast<Index>(rng.index(4)), N = 6 + static_cast<Index>(rng.index(9));
    const auto inst = check::random_fit_instance(rng, k, n, std::max<Index>(N, 4 * k), 2.5);
    ImplicitOptions dense_opt;
    dense_opt.use_saturation = false;
    const Matrix<double> H = loglik_hessian(inst.model, inst.D, inst.resp, dense_opt).dense();
    const Vector<double> th = check::pack_sigma(inst.model);
    auto grad = [&](const Vector<double>& x) { return check::reference_loglik_grad(x, k, n, inst.D); };
    const Matrix<double> J = check::central_jacobian(grad, th, 1e-6);
    CHECK(check::rel_err(H, J) <= 1e-5);

    const auto X = cross_hessian_data(inst.model, inst.D, inst.resp, dense_opt);
    for (Index l = 0; l < inst.D.rows(); ++l) {
      auto gd = [&](const Vector<double>& d) {
        Matrix<double> P = inst.D;
        P.row(l) = d.transpose();
        return check::reference_loglik_grad(th, k, n, P);
      };
      const Matrix<double> Jd = check::central_jacobian(gd, inst.D.row(l).transpose(), 1e-6);
      CHECK(check::rel_err(X[static_cast<std::size_t>(l)], Jd) <= 1e-5);
    }
  }
}

TEST_CASE("saturated responsibilities zero the cross-component terms") {
  const auto inst = separated(21, 3, 40, 12.0);
  const auto hb = loglik_hessian(inst.model, inst.D, inst.resp);
  CHECK(hb.saturated_fraction() == 1.0);
  const Matrix<double> H = hb.dense();
  const ParamLayout L{2, 3};
  double worst_h = 0, worst_x = 0;
  const auto X = cross_hessian_data(inst.model, inst.D, inst.resp);
  for (Index j = 0; j < 3; ++j)
    for (Index jj = 0; jj < 3; ++jj) {
      for (Index a : {L.mean(0, j), L.spread(0, j)})
        for (Index b : {L.mean(1, jj), L.spread(1, jj)}) worst_h = std::max(worst_h, std::abs(H(a, b)));
      for (Index l = 0; l < inst.D.rows(); ++l) {
        const Index other = inst.resp(l, 0) > 0.5 ? 1 : 0;
        worst_x = std::max({worst_x, std::abs(X[static_cast<std::size_t>(l)](L.mean(other, j), jj)),
                            std::abs(X[static_cast<std::size_t>(l)](L.spread(other, j), jj))});
      }
    }
  CHECK(worst_h == 0.0);
  CHECK(worst_x <= 1e-8);
}

TEST_CASE("implicit solve reduces to the closed form for one component") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Index n = 1 + static_cast<Index>(rng.index(8)), N = 2 + static_cast<Index>(rng.index(19));
    Matrix<double> D(N, n);
    for (Index i = 0; i < N; ++i)
      for (Index j = 0; j < n; ++j) D(i, j) = rng.normal();
    const auto g = fit_gaussian(D);
    if ((g.var.array() <= kVarFloor * 2).any()) continue;
    const auto m = GmmModel<double>::from_gaussian(g);
    const auto fg = solve_implicit(m, D, responsibilities(m, D));
    const auto cf = gaussian_fit_grads(D);
    const ParamLayout L{1, n};
    double worst = 0;
    for (Index l = 0; l < N; ++l)
      for (Index s = 0; s < n; ++s)
        for (Index j = 0; j < n; ++j) {
          const double mu = fg.dtheta_dd(L.mean(0, j), l * n + s), phi = fg.dtheta_dd(L.spread(0, j), l * n + s);
          worst = std::max({worst, std::abs(mu - (j == s ? cf.dmu_dd : 0.0)),
                            std::abs(phi - (j == s ? cf.dphi_dd(l, j) : 0.0))});
        }
    CHECK(worst <= 1e-8);
    CHECK(fg.dtheta_dd.row(L.weight(0)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("sparse and dense solves agree on saturated sets") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = separated(seed + 40, 2 + seed % 4, 30, 12.0);
    REQUIRE(loglik_hessian(inst.model, inst.D, inst.resp).saturated_fraction() == 1.0);
    const ImplicitSystem<double> sp(inst.model, inst.D, inst.resp, with_mode(SolveMode::sparse));
    const ImplicitSystem<double> de(inst.model, inst.D, inst.resp, with_mode(SolveMode::dense));
    CHECK(sp.num_blocks() > 1);
    CHECK(de.num_blocks() == 1);
    CHECK(check::max_abs_diff(sp.gradients().dtheta_dd, de.gradients().dtheta_dd) <= 1e-10);
  }
}

TEST_CASE("solution residual, weight constraint and backprop fast path") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index k = 1 + static_cast<Index>(seed % 3);
    const auto inst = instance(seed + 70, k, 3, 20, 3.0);
    const ImplicitSystem<double> sys(inst.model, inst.D, inst.resp);
    const Matrix<double> R = sys.rhs();
    const Matrix<double> X = sys.solve(R);
    const Matrix<double> res = sys.system_matrix() * X - R;
    for (Index c = 0; c < R.cols(); ++c)
      CHECK(res.col(c).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1e-300, R.col(c).cwiseAbs().maxCoeff()));

    const auto g = sys.gradients();
    Vector<double> wsum = Vector<double>::Zero(g.dtheta_dd.cols());
    for (Index i = 0; i < k; ++i) wsum += g.dtheta_dd.row(g.layout.weight(i)).transpose();
    CHECK(wsum.cwiseAbs().maxCoeff() <= 1e-10);

    Rng rng(seed);
    Vector<double> up(g.layout.size());
    for (Index i = 0; i < up.size(); ++i) up(i) = rng.normal();
    const Matrix<double> fast = sys.backprop(up);
    const Vector<double> full = g.dtheta_dd.transpose() * up;
    for (Index l = 0; l < inst.D.rows(); ++l)
      for (Index s = 0; s < 3; ++s) CHECK(std::abs(fast(l, s) - full(l * 3 + s)) <= 1e-9 * (1 + std::abs(full(l * 3 + s))));
  }
}

TEST_CASE("most responsibilities saturate on two widely separated clusters") {
  double worst = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = separated(seed + 100, 2 + seed % 5, 40, 8.0);
    worst = std::min(worst, loglik_hessian(inst.model, inst.D, inst.resp).saturated_fraction());
  }
  CHECK(worst >= 0.95);
}

TEST_CASE("floors at the optimum are refused") {
  Matrix<double> D(4, 2);
  D << 0, 1, 0, 2, 0, 3, 0, 4;  // zero variance in coordinate 0
  const auto m = GmmModel<double>::from_gaussian(fit_gaussian(D));
  CHECK_THROWS_AS(solve_implicit(m, D, responsibilities(m, D)), NumericError);
  Matrix<double> bad_resp = Matrix<double>::Ones(3, 1);
  CHECK_THROWS_AS(loglik_hessian(m, D, bad_resp), DataError);
}
