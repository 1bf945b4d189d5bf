#include <doctest.h>

#include "oracles.hpp"
#include "s2m/embedding_net.hpp"
#include "s2m/errors.hpp"

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

Vector<double> randn(Rng& rng, Index n) {
  Vector<double> v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("identity layer normalizes its input") {
  const auto net = identity_net(2);
  const Vector<double> d = embed(net, Eigen::Vector2d(3, 4));
  CHECK(d(0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(d(1) == doctest::Approx(0.8).epsilon(1e-15));

  const auto net5 = identity_net(5);
  Vector<double> e = Vector<double>::Zero(5);
  e(0) = 1;
  CHECK((embed(net5, e) - e).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dead relu layer leaves only the next layer's bias") {
  EmbeddingNet<double> net;
  AffineLayer<double> L1;
  L1.weight = Matrix<double>::Identity(3, 3);
  L1.bias = Vector<double>::Constant(3, -10);
  L1.activation = Activation::relu;
  AffineLayer<double> L2;
  L2.weight = Matrix<double>::Random(2, 3);
  L2.bias = Eigen::Vector2d(1, -2);
  net.layers = {L1, L2};
  const Vector<double> d = embed(net, Eigen::Vector3d(0.5, -1, 2));
  CHECK((d - L2.bias.normalized()).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("embed rejects bad inputs") {
  const auto net = identity_net(3);
  CHECK_THROWS_AS(embed(net, Eigen::Vector2d(1, 1)), DataError);
  CHECK_THROWS_AS(embed(net, Eigen::Vector3d::Zero()), NumericError);
}

TEST_CASE("backward through the normalization") {
  const auto net = identity_net(2);
  ForwardCache<double> cache;
  const Vector<double> d = embed(net, Eigen::Vector2d(3, 4), &cache);
  GradientTape<double> tape(net);

  const Vector<double> gx = embed_backward(net, cache, Eigen::Vector2d(1, 0), tape);
  CHECK(gx(0) == doctest::Approx(0.128).epsilon(1e-14));
  CHECK(gx(1) == doctest::Approx(-0.096).epsilon(1e-14));

  // The radial direction is annihilated.
  const Vector<double> gr = embed_backward(net, cache, Vector<double>(3.7 * d), tape);
  CHECK(gr.cwiseAbs().maxCoeff() <= 1e-15);

  ForwardCache<double> empty;
  CHECK_THROWS_AS(embed_backward(net, empty, Eigen::Vector2d(1, 0), tape), DataError);
  CHECK_THROWS_AS(embed_backward(net, cache, Eigen::Vector3d(1, 0, 0), tape), DataError);
}

TEST_CASE("init_net shapes and determinism") {
  const auto a = init_net<double>({4, 8, 3}, 5);
  REQUIRE(a.layers.size() == 2);
  CHECK(a.layers[0].weight.rows() == 8);
  CHECK(a.layers[0].weight.cols() == 4);
  CHECK(a.layers[1].weight.rows() == 3);
  CHECK(a.layers[1].weight.cols() == 8);
  CHECK(a.layers[0].activation == Activation::relu);
  CHECK(a.layers[1].activation == Activation::identity);
  CHECK_NOTHROW(a.validate());

  const auto b = init_net<double>({4, 8, 3}, 5);
  const auto c = init_net<double>({4, 8, 3}, 6);
  CHECK(net_to_json(a) == net_to_json(b));
  for (std::size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].weight != c.layers[i].weight);

  CHECK_THROWS_AS(init_net<double>({4}, 1), DataError);
  CHECK_THROWS_AS(init_net<double>({}, 1), DataError);
}

TEST_CASE("forward output has unit norm") {
  Rng rng(3);
  const auto net = init_net<double>({6, 16, 16, 5}, 11);
  for (int t = 0; t < 200; ++t) CHECK(std::abs(embed(net, randn(rng, 6)).norm() - 1.0) <= 1e-12);
}

TEST_CASE("tape matches central differences of a scalar probe") {
  // Probe L = c . f(x; w) + 0.5 |f(x; w)|^2 over nets with up to three layers.
  Rng rng(17);
  for (const std::vector<Index>& dims : {std::vector<Index>{5, 3}, std::vector<Index>{7, 9, 4},
                                         std::vector<Index>{6, 16, 12, 8}}) {
    auto net = init_net<double>(dims, 23);
    for (auto& L : net.layers) L.bias = randn(rng, L.out_dim()) * 0.1;
    const Vector<double> x = randn(rng, dims.front());
    const Vector<double> c = randn(rng, dims.back());
    auto probe = [&](const EmbeddingNet<double>& n) {
      const Vector<double> d = embed(n, x);
      return c.dot(d) + 0.5 * d.squaredNorm();
    };
    ForwardCache<double> cache;
    const Vector<double> d = embed(net, x, &cache);
    GradientTape<double> tape(net);
    const Vector<double> gx = embed_backward(net, cache, Vector<double>(c + d), tape);

    double worst = 0;
    const double h = 1e-4;
    for (Index p = 0; p < parameter_count(net); ++p) {
      auto plus = net, minus = net;
      parameter_at(plus, p) += h;
      parameter_at(minus, p) -= h;
      const double fd = (probe(plus) - probe(minus)) / (2 * h);
      const double an = tape_at(tape, p);
      if (std::max(std::abs(fd), std::abs(an)) > 1e-7) worst = std::max(worst, oracle::rel_err(fd, an));
    }
    CHECK(worst <= 1e-5);

    double worst_x = 0;
    for (Index i = 0; i < x.size(); ++i) {
      auto f = [&](double v) {
        Vector<double> xp = x;
        xp(i) = v;
        const Vector<double> dd = embed(net, xp);
        return c.dot(dd) + 0.5 * dd.squaredNorm();
      };
      worst_x = std::max(worst_x, std::abs(oracle::central_diff(f, x(i), h) - gx(i)));
    }
    CHECK(worst_x <= 1e-6 * std::max(1.0, gx.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("tape accumulates additively and net files round-trip") {
  const auto net = init_net<double>({3, 4, 2}, 2);
  ForwardCache<double> c1, c2;
  embed(net, Eigen::Vector3d(1, 2, 3), &c1);
  embed(net, Eigen::Vector3d(-1, 0.5, 2), &c2);
  GradientTape<double> both(net), t1(net), t2(net);
  embed_backward(net, c1, Eigen::Vector2d(1, -1), both);
  embed_backward(net, c2, Eigen::Vector2d(0.3, 2), both);
  embed_backward(net, c1, Eigen::Vector2d(1, -1), t1);
  embed_backward(net, c2, Eigen::Vector2d(0.3, 2), t2);
  t1 += t2;
  for (std::size_t i = 0; i < net.layers.size(); ++i) CHECK((both.d_weight[i] - t1.d_weight[i]).norm() <= 1e-15);

  const auto back = net_from_json(net_to_json(net));
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    CHECK(back.layers[i].weight == net.layers[i].weight);
    CHECK(back.layers[i].bias == net.layers[i].bias);
    CHECK(back.layers[i].activation == net.layers[i].activation);
  }
  CHECK_THROWS_AS(net_from_json("{\"layers\": 3}"), DataError);
}
