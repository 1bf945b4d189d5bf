#include <doctest.h>

#include <numbers>

#include "oracles.hpp"
#include "s2m/gmm_model.hpp"

using namespace s2m;

namespace {

// Clusters along coordinate 0, `sep` apart, unit spread; returns labels too.
Matrix<double> clusters(Rng& rng, const std::vector<int>& sizes, Index n, double sep, std::vector<int>* labels = nullptr) {
  Index N = 0;
  for (int s : sizes) N += s;
  Matrix<double> D(N, n);
  Index r = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c)
    for (int i = 0; i < sizes[c]; ++i, ++r) {
      for (Index j = 0; j < n; ++j) D(r, j) = rng.normal();
      D(r, 0) += sep * static_cast<double>(c);
      if (labels) labels->push_back(static_cast<int>(c));
    }
  return D;
}

GmmModel<double> random_model(Rng& rng, Index k, Index n) {
  GmmModel<double> m;
  m.weights = Vector<double>(k);
  m.means = Matrix<double>(k, n);
  m.vars = Matrix<double>(k, n);
  for (Index i = 0; i < k; ++i) {
    m.weights(i) = 0.2 + rng.uniform();
    for (Index j = 0; j < n; ++j) {
      m.means(i, j) = rng.normal(0, 2);
      m.vars(i, j) = 0.2 + rng.uniform();
    }
  }
  m.weights /= m.weights.sum();
  return m;
}

double oracle_logpdf(const GmmModel<double>& m, const Vector<double>& z) {
  double p = 0;
  for (Index i = 0; i < m.k(); ++i)
    p += m.weights(i) * std::exp(oracle::diag_gauss_logpdf(m.means.row(i).transpose(), m.vars.row(i).transpose(), z));
  return std::log(p);
}

}  // namespace

TEST_CASE("mixture density reductions") {
  Rng rng(2);
  const auto g = random_model(rng, 1, 3);
  GmmModel<double> dup;
  dup.weights = Eigen::Vector2d(0.5, 0.5);
  dup.means = Matrix<double>(2, 3);
  dup.vars = Matrix<double>(2, 3);
  dup.means << g.means, g.means;
  dup.vars << g.vars, g.vars;
  const auto m = random_model(rng, 3, 3);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Vector3d z(rng.normal(), rng.normal(), rng.normal());
    GaussianModel<double> gg{g.means.row(0).transpose(), g.vars.row(0).transpose()};
    CHECK(std::abs(gmm_logpdf(g, z) - gaussian_logpdf(gg, z)) <= 1e-12);
    CHECK(std::abs(gmm_logpdf(dup, z) - gmm_logpdf(g, z)) <= 1e-12);
    CHECK(std::abs(gmm_logpdf(m, z) - oracle_logpdf(m, z)) <= 1e-10);
  }
  CHECK_THROWS_AS(gmm_logpdf(m, Eigen::Vector2d(0, 0)), DataError);
}

TEST_CASE("density integrates to one") {
  Rng rng(8);
  GmmModel<double> m;
  m.weights = Eigen::Vector2d(0.3, 0.7);
  m.means = Matrix<double>(2, 2);
  m.vars = Matrix<double>(2, 2);
  m.means << -1, 0, 2, 1;
  m.vars << 0.5, 1, 1, 0.25;
  // Uniform Monte-Carlo over a box reaching past 7 sigma of either component.
  const double lo0 = -8, hi0 = 9, lo1 = -7, hi1 = 8;
  const int S = 400000;
  double acc = 0;
  for (int s = 0; s < S; ++s)
    acc += std::exp(gmm_logpdf(m, Eigen::Vector2d(rng.uniform(lo0, hi0), rng.uniform(lo1, hi1))));
  const double integral = acc / S * (hi0 - lo0) * (hi1 - lo1);
  CHECK(std::abs(integral - 1) <= 0.02);
}

TEST_CASE("responsibilities") {
  GmmModel<double> m;
  m.weights = Eigen::Vector2d(0.5, 0.5);
  m.means = Matrix<double>(2, 1);
  m.vars = Matrix<double>::Ones(2, 1);
  m.means << -1, 1;
  Matrix<double> D(3, 1);
  D << 0, -1, -1 + 1e-3;
  auto r = responsibilities(m, D);
  CHECK(r(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  // 20 sigma from component 2.
  m.means << 0, 20;
  Matrix<double> near(1, 1);
  near << 0.1;
  r = responsibilities(m, near);
  CHECK(std::abs(r(0, 0) - 1) <= 1e-12);
  CHECK(r(0, 1) <= 1e-12);

  Rng rng(3);
  const auto one = random_model(rng, 1, 2);
  const Matrix<double> X = clusters(rng, {20}, 2, 0);
  CHECK(responsibilities(one, X).isOnes());
  CHECK_THROWS_AS(responsibilities(one, Matrix<double>(3, 4)), DataError);

  const auto three = random_model(rng, 3, 2);
  const Matrix<double> R = responsibilities(three, X);
  CHECK((R.rowwise().sum().array() - 1).abs().maxCoeff() <= 1e-10);
  CHECK(R.minCoeff() >= 0);
  CHECK(R.maxCoeff() <= 1);
}

TEST_CASE("component permutation leaves the density unchanged") {
  Rng rng(13);
  const auto m = random_model(rng, 3, 4);
  GmmModel<double> p = m;
  const std::array<Index, 3> perm{2, 0, 1};
  for (Index i = 0; i < 3; ++i) {
    p.weights(i) = m.weights(perm[i]);
    p.means.row(i) = m.means.row(perm[i]);
    p.vars.row(i) = m.vars.row(perm[i]);
  }
  for (int t = 0; t < 100; ++t) {
    Vector<double> z(4);
    for (Index j = 0; j < 4; ++j) z(j) = rng.normal(0, 2);
    CHECK(std::abs(gmm_logpdf(m, z) - gmm_logpdf(p, z)) <= 1e-12);
  }
}

TEST_CASE("single-component EM is the closed form") {
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    const Matrix<double> D = clusters(rng, {15}, 3, 0);
    const auto em = fit_gmm_em(D, 1, EmInit<double>{ColdStart{7}});
    const auto g = fit_gaussian(D);
    CHECK((em.model.means.row(0).transpose() - g.mean).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((em.model.vars.row(0).transpose() - g.var).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(em.model.weights(0) == 1.0);
  }
}

TEST_CASE("two separated clusters are recovered") {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    std::vector<int> labels;
    const Matrix<double> D = clusters(rng, {60, 140}, 2, 12.0, &labels);
    const auto fit = fit_gmm_em(D, 2, EmInit<double>{ColdStart{static_cast<std::uint64_t>(t)}});
    const Index lo = fit.model.means(0, 0) < fit.model.means(1, 0) ? 0 : 1;
    for (int c = 0; c < 2; ++c) {
      Vector<double> mean = Vector<double>::Zero(2);
      int cnt = 0;
      for (Index r = 0; r < D.rows(); ++r)
        if (labels[static_cast<std::size_t>(r)] == c) {
          mean += D.row(r).transpose();
          ++cnt;
        }
      mean /= cnt;
      const Index comp = c == 0 ? lo : 1 - lo;
      CHECK((fit.model.means.row(comp).transpose() - mean).cwiseAbs().maxCoeff() <= 0.05);
      CHECK(std::abs(fit.model.weights(comp) - cnt / 200.0) <= 0.02);
    }
  }
}

TEST_CASE("warm start from the generating parameters converges fast") {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const Matrix<double> D = clusters(rng, {50, 50}, 3, 10.0);
    GmmModel<double> truth;
    truth.weights = Eigen::Vector2d(0.5, 0.5);
    truth.means = Matrix<double>::Zero(2, 3);
    truth.means(1, 0) = 10;
    truth.vars = Matrix<double>::Ones(2, 3);
    const auto fit = fit_gmm_em(D, 2, EmInit<double>{WarmStart<double>{truth}});
    CHECK(fit.trace.converged);
    CHECK(fit.trace.iterations <= 5);
  }
}

TEST_CASE("EM is monotone, deterministic and respects floors") {
  Rng rng(31);
  EmOptions opt;
  opt.restarts = 3;
  for (int t = 0; t < 40; ++t) {
    const Index k = 1 + static_cast<Index>(rng.index(3));
    const Matrix<double> D = clusters(rng, {8, 12, 5}, 3, 3.0 * rng.uniform());
    const auto a = fit_gmm_em(D, k, EmInit<double>{ColdStart{static_cast<std::uint64_t>(t)}}, opt);
    const auto b = fit_gmm_em(D, k, EmInit<double>{ColdStart{static_cast<std::uint64_t>(t)}}, opt);
    CHECK(a.trace.loglik == b.trace.loglik);
    CHECK(a.model.means == b.model.means);
    for (std::size_t i = 1; i < a.trace.loglik.size(); ++i) CHECK(a.trace.loglik[i] >= a.trace.loglik[i - 1] - 1e-9);
    CHECK(std::abs(a.model.weights.sum() - 1) <= 1e-12);
    CHECK(a.model.weights.minCoeff() >= opt.weight_floor * (1 - 1e-12));
    CHECK(a.model.vars.minCoeff() >= opt.var_floor);
  }
}

TEST_CASE("EM input errors") {
  Rng rng(1);
  const Matrix<double> D = clusters(rng, {3}, 2, 0);
  CHECK_THROWS_AS(fit_gmm_em(D, 4, EmInit<double>{ColdStart{1}}), DataError);
  const auto wrong = random_model(rng, 3, 2);
  CHECK_THROWS_AS(fit_gmm_em(D, 2, EmInit<double>{WarmStart<double>{wrong}}), DataError);
  const auto wrong_dim = random_model(rng, 2, 3);
  CHECK_THROWS_AS(fit_gmm_em(D, 2, EmInit<double>{WarmStart<double>{wrong_dim}}), DataError);
}

TEST_CASE("BIC arithmetic and tie rule") {
  CHECK(bic_value(1, 2, 10, -30.0) == doctest::Approx(4 * std::log(10.0) + 60).epsilon(1e-14));
  CHECK(bic_value(1, 2, 10, -30.0) == doctest::Approx(69.2103).epsilon(1e-6));
  Rng rng(2);
  const Matrix<double> D = clusters(rng, {30}, 2, 0);
  const auto r = select_by_bic(D, {3, 1, 2, 1}, 5);
  CHECK(r.candidates == std::vector<int>{1, 2, 3});
  CHECK(r.bic.size() == 3);
  CHECK_THROWS_AS(select_by_bic(D, {}, 5), DataError);
  CHECK_THROWS_AS(select_by_bic(D, {1, 40}, 5), DataError);
}

TEST_CASE("BIC passes over fits that rest on a floor") {
  Rng rng(3);
  Matrix<double> D = clusters(rng, {40}, 2, 0);
  D.conservativeResize(41, 2);
  D.row(40) << 50, 50;  // a lone outlier gets its own collapsed component
  const auto r = select_by_bic(D, {1, 2}, 1);
  REQUIRE(r.degenerate.size() == 2);
  CHECK_FALSE(r.degenerate[0]);
  CHECK(r.degenerate[1]);
  CHECK(r.bic[1] < r.bic[0]);
  CHECK(r.chosen_k == 1);

  // With every candidate degenerate the plain minimum is kept.
  Matrix<double> flat = clusters(rng, {30}, 2, 0);
  flat.col(0).setConstant(1.0);
  const auto f = select_by_bic(flat, {1, 2}, 1);
  CHECK(f.degenerate[0]);
  CHECK(f.chosen_k == (f.bic[1] < f.bic[0] ? 2 : 1));
}

TEST_CASE("BIC picks one component for a single tight cluster") {
  Rng rng(77);
  int ok = 0;
  for (int t = 0; t < 50; ++t) {
    const Matrix<double> D = clusters(rng, {100}, 2, 0) * 0.1;
    ok += select_by_bic(D, {1, 2, 3}, static_cast<std::uint64_t>(t)).chosen_k == 1 ? 1 : 0;
  }
  CHECK(ok >= 45);
}

TEST_CASE("BIC picks two components for clusters 10 sigma apart") {
  Rng rng(78);
  int ok = 0;
  for (int t = 0; t < 50; ++t) {
    const Matrix<double> D = clusters(rng, {50, 50}, 2, 10.0);
    ok += select_by_bic(D, {1, 2, 3}, static_cast<std::uint64_t>(t)).chosen_k == 2 ? 1 : 0;
  }
  CHECK(ok >= 45);
}
