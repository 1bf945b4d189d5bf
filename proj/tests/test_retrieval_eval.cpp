#include <doctest.h>

#include <numeric>

#include "oracles.hpp"
#include "s2m/retrieval_eval.hpp"

using namespace s2m;

namespace {

EmbeddingNet<double> identity_net(Index dim) {
  EmbeddingNet<double> net;
  AffineLayer<double> L;
  L.weight = Matrix<double>::Identity(dim, dim);
  L.bias = Vector<double>::Zero(dim);
  net.layers.push_back(L);
  return net;
}

Matrix<double> rows(std::initializer_list<std::initializer_list<double>> v) {
  Matrix<double> M(static_cast<Index>(v.size()), static_cast<Index>(v.begin()->size()));
  Index i = 0;
  for (const auto& r : v) {
    Index j = 0;
    for (double x : r) M(i, j++) = x;
    ++i;
  }
  return M;
}

RankedList list_from_pattern(const std::vector<bool>& rel) {
  std::vector<std::uint64_t> ids(rel.size());
  std::vector<double> scores(rel.size());
  for (std::size_t i = 0; i < rel.size(); ++i) {
    ids[i] = i;
    scores[i] = -static_cast<double>(i);
  }
  return make_ranked_list(ids, scores, rel);
}

Matrix<double> unit_rows(Rng& rng, Index N, Index n) {
  Matrix<double> M(N, n);
  for (Index i = 0; i < N; ++i) {
    for (Index j = 0; j < n; ++j) M(i, j) = rng.normal();
    M.row(i).normalize();
  }
  return M;
}

Collection collection(const Matrix<double>& items) {
  Collection c;
  c.items = items;
  for (Index i = 0; i < items.rows(); ++i) {
    c.ids.push_back(static_cast<std::uint64_t>(100 + i));
    c.relevant.push_back(i % 3 == 0);
  }
  return c;
}

}  // namespace

TEST_CASE("average precision values") {
  CHECK(average_precision(list_from_pattern({true, false, true})) == doctest::Approx(0.5 * (1 + 2.0 / 3)).epsilon(1e-15));
  CHECK(average_precision(list_from_pattern({true, true, false, false})) == 1.0);
  CHECK_THROWS_AS(average_precision(list_from_pattern({false, false})), DataError);
  CHECK(mean_average_precision(std::vector<double>{1.0, 0.5}) == 0.75);
  CHECK(mean_average_precision(std::vector<double>{0.3}) == 0.3);
  CHECK(mean_average_precision(std::vector<double>{0.1, 0.7, 0.4}) ==
        doctest::Approx(mean_average_precision(std::vector<double>{0.7, 0.4, 0.1})).epsilon(1e-15));
}

TEST_CASE("average precision against the brute-force count") {
  Rng rng(10);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t L = 1 + rng.index(300);
    std::vector<bool> rel(L);
    for (std::size_t i = 0; i < L; ++i) rel[i] = rng.uniform() < 0.3;
    rel[rng.index(L)] = true;
    worst = std::max(worst, std::abs(average_precision(list_from_pattern(rel)) - oracle::average_precision(rel)));

    // Irrelevant items appended after the last relevant one change nothing.
    auto longer = rel;
    longer.insert(longer.end(), 1 + rng.index(20), false);
    CHECK(average_precision(list_from_pattern(longer)) == average_precision(list_from_pattern(rel)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("ranked lists sort by score then id") {
  const std::vector<std::uint64_t> ids{7, 3, 5, 1};
  const std::vector<double> scores{0.5, 0.9, 0.5, 0.1};
  const auto l = make_ranked_list(ids, scores, {true, false, true, false});
  CHECK(l.ids == std::vector<std::uint64_t>{3, 5, 7, 1});
  CHECK(l.relevant == std::vector<bool>{false, true, true, false});
  for (std::size_t i = 1; i < l.size(); ++i) CHECK(l.scores[i] <= l.scores[i - 1]);
}

TEST_CASE("plug-in scorers") {
  const Matrix<double> X = rows({{1, 0}, {0, 1}});
  CHECK(score_avg(X, rows({{1, 0}}))(0) == doctest::Approx(0.5));
  CHECK(std::abs(score_avg(X, rows({{1 / std::sqrt(2.0), -1 / std::sqrt(2.0)}}))(0)) <= 1e-15);
  CHECK(score_nn(X, rows({{1, 0}}))(0) == 1.0);
  CHECK(score_nn(rows({{1, 0}}), rows({{0, 1}}))(0) == 0.0);
  CHECK_THROWS_AS(score_avg(Matrix<double>(0, 2), X), DataError);

  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const Matrix<double> Q = unit_rows(rng, 1 + static_cast<Index>(rng.index(6)), 5);
    const Matrix<double> C = unit_rows(rng, 30, 5);
    const Vector<double> a = score_avg(Q, C), n = score_nn(Q, C);
    for (Index i = 0; i < C.rows(); ++i) {
      double mean_dot = 0, best = -1e300;
      for (Index q = 0; q < Q.rows(); ++q) {
        double dot = 0;
        for (Index j = 0; j < 5; ++j) dot += Q(q, j) * C(i, j);
        mean_dot += dot / static_cast<double>(Q.rows());
        best = std::max(best, dot);
      }
      CHECK(std::abs(a(i) - mean_dot) <= 1e-14);
      CHECK(std::abs(n(i) - best) <= 1e-14);
    }
  }
}

TEST_CASE("single-Gaussian ranking is Mahalanobis ranking") {
  Rng rng(6);
  ModelSpec spec;
  const auto net = identity_net(4);
  for (int t = 0; t < 100; ++t) {
    const Matrix<double> Q = unit_rows(rng, 8, 4);
    const auto c = collection(unit_rows(rng, 40, 4));
    const auto list = rank_s2m(net, Q, c, spec);
    const auto g = fit_gaussian(Q);
    std::vector<double> neg_maha;
    for (Index i = 0; i < c.items.rows(); ++i)
      neg_maha.push_back(-((c.items.row(i).transpose() - g.mean).array().square() / g.var.array()).sum());
    const auto ref = make_ranked_list(c.ids, neg_maha, c.relevant);
    CHECK(list.ids == ref.ids);
  }
}

TEST_CASE("the concept mean ranks first") {
  const auto net = identity_net(3);
  const Matrix<double> Q = rows({{1, 0.1, 0}, {1, -0.1, 0.05}, {1, 0, -0.05}, {1, 0.05, 0.1}});
  const auto g = fit_gaussian(embed_rows(net, Q));
  Collection c;
  c.items = rows({{0, 1, 0}, {1, 0.3, 0.3}, {0, 0, 1}});
  c.ids = {1, 2, 3};
  c.relevant = {false, true, false};
  c.items.conservativeResize(4, 3);
  c.items.row(3) = g.mean.transpose();
  c.ids.push_back(4);
  c.relevant.push_back(true);
  CHECK(rank_s2m(net, Q, c, ModelSpec{}).ids.front() == 4);
}

TEST_CASE("two-cluster mixture prefers items near either cluster") {
  Rng rng(12);
  Matrix<double> D(40, 2);
  for (Index i = 0; i < 40; ++i) D.row(i) << rng.normal(i % 2 ? 3.0 : -3.0, 0.3), rng.normal(0, 0.3);
  ModelSpec spec;
  spec.kind = ModelKind::gmm;
  spec.k = 2;
  spec.seed = 3;
  const Matrix<double> C = rows({{3, 0}, {-3, 0}, {0, 0}, {0, 3.0}, {0, -3.0}});
  const Vector<double> s = score_s2m(D, C, spec);
  const auto model = fit_concept(D, spec).model;
  for (Index i = 0; i < C.rows(); ++i) {
    double p = 0;
    for (Index c = 0; c < 2; ++c)
      p += model.weights(c) *
           std::exp(oracle::diag_gauss_logpdf(model.means.row(c).transpose(), model.vars.row(c).transpose(), C.row(i).transpose()));
    CHECK(std::abs(s(i) - std::log(p)) <= 1e-9 * std::abs(s(i)));
  }
  CHECK(std::min(s(0), s(1)) > std::max({s(2), s(3), s(4)}));
}

TEST_CASE("rankers ignore collection order") {
  Rng rng(2);
  const auto net = init_net<double>({5, 6, 3}, 9);
  const Matrix<double> Q = unit_rows(rng, 6, 5);
  auto c = collection(unit_rows(rng, 25, 5));
  Collection rev = c;
  for (Index i = 0; i < 25; ++i) {
    rev.items.row(i) = c.items.row(24 - i);
    rev.ids[static_cast<std::size_t>(i)] = c.ids[static_cast<std::size_t>(24 - i)];
    rev.relevant[static_cast<std::size_t>(i)] = c.relevant[static_cast<std::size_t>(24 - i)];
  }
  CHECK(rank_avg(net, Q, c).ids == rank_avg(net, Q, rev).ids);
  CHECK(rank_nn(net, Q, c).ids == rank_nn(net, Q, rev).ids);
  CHECK(rank_s2m(net, Q, c, ModelSpec{}).ids == rank_s2m(net, Q, rev, ModelSpec{}).ids);
}

TEST_CASE("linear svm") {
  Rng rng(3);
  Matrix<double> P(10, 2), N(20, 2);
  for (Index i = 0; i < 10; ++i) P.row(i) << 3 + rng.uniform(), rng.normal();
  for (Index i = 0; i < 20; ++i) N.row(i) << -3 - rng.uniform(), rng.normal();
  SvmOptions opt;
  Rng r1(5), r2(5);
  const auto s = train_linear_svm(P, N, opt, r1);
  double hinge = -1;
  svm_objective(s, P, N, opt.lambda, &hinge);
  CHECK(hinge == 0.0);
  CHECK(s.score(P).minCoeff() > s.score(N).maxCoeff());
  const auto s2 = train_linear_svm(P, N, opt, r2);
  CHECK(s.u == s2.u);
  CHECK(s.bias == s2.bias);

  // A point labelled both ways: regularization keeps the weights bounded.
  const Matrix<double> same = rows({{1, 1}});
  const auto d = train_linear_svm(same, same, opt, r1);
  CHECK(d.u.allFinite());
  CHECK(d.u.norm() <= 1 / std::sqrt(opt.lambda));

  const auto net = identity_net(2);
  Collection c;
  c.items = rows({{3, 0.2}, {-3, 0.1}});
  c.ids = {1, 2};
  c.relevant = {true, false};
  CHECK_THROWS_AS(rank_svm(net, P, Matrix<double>(0, 2), c, r1), DataError);
  Rng r3(8), r4(8);
  CHECK(rank_svm(net, P, N, c, r3).ids == rank_svm(net, P, N, c, r4).ids);
}

TEST_CASE("few-shot classification by maximal log-density") {
  const std::vector<Matrix<double>> far{rows({{1, 0}}), rows({{-1, 0}}), rows({{0, 1}})};
  CHECK(classify_few_shot(far, Eigen::Vector2d(-1, 0), ModelSpec{}) == 1);

  // Mirror-image classes, probe on the mirror plane.
  const std::vector<Matrix<double>> sym{rows({{1, 0}, {2, 0.5}}), rows({{-1, 0}, {-2, 0.5}})};
  CHECK(classify_few_shot(sym, Eigen::Vector2d(0, 0.25), ModelSpec{}) == 0);

  CHECK(argmax_first(Eigen::Vector3d(1, 3, 3)) == 1);
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Eigen::Vector4d s(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    CHECK(argmax_first(s) == argmax_first(Eigen::Vector4d(s.array() + rng.normal(0, 100))));
  }
  CHECK_THROWS_AS(classify_few_shot(std::vector<Matrix<double>>{rows({{1, 0}})}, Eigen::Vector2d(1, 0), ModelSpec{}), DataError);
  CHECK_THROWS_AS(classify_few_shot(std::vector<Matrix<double>>{rows({{1, 0}}), Matrix<double>(0, 2)}, Eigen::Vector2d(1, 0),
                                    ModelSpec{}),
                  DataError);
}

TEST_CASE("evaluation protocol shares queries across methods") {
  SynthSpec sp;
  sp.num_classes = 8;
  sp.train_classes = 4;
  sp.val_classes = 1;
  sp.test_classes = 3;
  sp.items_per_class = 30;
  const auto ds = generate(sp).dataset;
  const auto net = init_net<double>({sp.input_dim, 8}, 2);
  const auto test = ds.class_ids(Split::test);
  QueryProtocol qp;
  Method avg{"avg", RankerKind::avg, {}, {}}, nn{"nn", RankerKind::nn, {}, {}};
  const auto a = evaluate_retrieval(net, ds, test, avg, qp);
  const auto b = evaluate_retrieval(net, ds, test, nn, qp);
  REQUIRE(a.queries.size() == test.size() * 2);
  for (std::size_t q = 0; q < a.queries.size(); ++q) CHECK(a.queries[q].class_id == b.queries[q].class_id);
  CHECK(evaluate_retrieval(net, ds, test, avg, qp).map == a.map);
  CHECK_THROWS_AS(evaluate_retrieval(net, ds, {}, avg, qp), DataError);
  FewShotProtocol fp;
  fp.ways = 4;
  CHECK_THROWS_AS(evaluate_few_shot(net, ds, test, ModelSpec{}, fp), DataError);
}
