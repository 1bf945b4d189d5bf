#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "s2m/errors.hpp"
#include "s2m/rng.hpp"
#include "s2m/types.hpp"

namespace s2m {

enum class Activation { relu, identity };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

template <typename Scalar>
struct AffineLayer {
  Matrix<Scalar> weight;  // out x in
  Vector<Scalar> bias;
  Activation activation = Activation::identity;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

/// f(x; w): affine layers, relu between them, l2 normalization on the output.
template <typename Scalar>
struct EmbeddingNet {
  std::vector<AffineLayer<Scalar>> layers;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw DataError("embedding net has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      if (L.bias.size() != L.out_dim()) throw DataError("layer " + std::to_string(i) + ": bias size mismatch");
      if (i + 1 < layers.size() && L.out_dim() != layers[i + 1].in_dim())
        throw DataError("layer " + std::to_string(i) + ": output does not chain into next layer");
    }
    if (layers.back().activation != Activation::identity)
      throw DataError("final layer must use the identity activation");
  }
};

/// Per-parameter gradient accumulators, shaped like the net.
template <typename Scalar>
struct GradientTape {
  std::vector<Matrix<Scalar>> d_weight;
  std::vector<Vector<Scalar>> d_bias;

  GradientTape() = default;
  explicit GradientTape(const EmbeddingNet<Scalar>& net) {
    for (const auto& L : net.layers) {
      d_weight.push_back(Matrix<Scalar>::Zero(L.out_dim(), L.in_dim()));
      d_bias.push_back(Vector<Scalar>::Zero(L.out_dim()));
    }
  }

  void zero() {
    for (auto& w : d_weight) w.setZero();
    for (auto& b : d_bias) b.setZero();
  }

  bool matches(const EmbeddingNet<Scalar>& net) const {
    if (d_weight.size() != net.layers.size() || d_bias.size() != net.layers.size()) return false;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
      if (d_weight[i].rows() != net.layers[i].out_dim() || d_weight[i].cols() != net.layers[i].in_dim() ||
          d_bias[i].size() != net.layers[i].out_dim())
        return false;
    return true;
  }

  GradientTape& operator+=(const GradientTape& o) {
    if (o.d_weight.size() != d_weight.size()) throw DataError("gradient tape shape mismatch");
    for (std::size_t i = 0; i < d_weight.size(); ++i) {
      d_weight[i] += o.d_weight[i];
      d_bias[i] += o.d_bias[i];
    }
    return *this;
  }

  GradientTape& operator*=(Scalar s) {
    for (std::size_t i = 0; i < d_weight.size(); ++i) {
      d_weight[i] *= s;
      d_bias[i] *= s;
    }
    return *this;
  }
};

/// Activations saved by a forward pass for the matching backward pass.
template <typename Scalar>
struct ForwardCache {
  std::vector<Vector<Scalar>> inputs;  // input to each layer
  std::vector<Vector<Scalar>> pre;     // pre-activation of each layer
  Vector<Scalar> output;               // normalized descriptor
  Scalar norm = 0;                     // norm before normalization

  bool empty() const { return inputs.empty(); }
};

template <typename Scalar, typename Derived>
Vector<Scalar> embed(const EmbeddingNet<Scalar>& net, const Eigen::MatrixBase<Derived>& x,
                     ForwardCache<Scalar>* cache = nullptr) {
  if (x.size() != net.input_dim())
    throw DataError("embed: input has dimension " + std::to_string(x.size()) + ", net expects " +
                    std::to_string(net.input_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Vector<Scalar> h = x.derived().template cast<Scalar>();
  for (const auto& L : net.layers) {
    Vector<Scalar> u = L.weight * h + L.bias;
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(u);
    }
    h = L.activation == Activation::relu ? Vector<Scalar>(u.cwiseMax(Scalar(0))) : u;
  }
  const Scalar norm = h.norm();
  if (!(norm > 0)) throw NumericError("embed: zero vector before normalization");
  h /= norm;
  if (cache) {
    cache->output = h;
    cache->norm = norm;
  }
  return h;
}

/// Embeds every row of X, returning one descriptor per row.
template <typename Scalar, typename Derived>
Matrix<Scalar> embed_rows(const EmbeddingNet<Scalar>& net, const Eigen::MatrixBase<Derived>& X,
                          std::vector<ForwardCache<Scalar>>* caches = nullptr) {
  Matrix<Scalar> D(X.rows(), net.output_dim());
  if (caches) caches->resize(static_cast<std::size_t>(X.rows()));
  for (Index i = 0; i < X.rows(); ++i)
    D.row(i) = embed(net, X.row(i).transpose(), caches ? &(*caches)[static_cast<std::size_t>(i)] : nullptr).transpose();
  return D;
}

/// Accumulates dL/dw into `tape` and returns dL/dx. The normalization
/// Jacobian is (I - d d^T) / ||u||.
template <typename Scalar, typename Derived>
Vector<Scalar> embed_backward(const EmbeddingNet<Scalar>& net, const ForwardCache<Scalar>& cache,
                              const Eigen::MatrixBase<Derived>& upstream, GradientTape<Scalar>& tape) {
  if (cache.empty() || cache.inputs.size() != net.layers.size())
    throw DataError("embed_backward: no matching forward state");
  if (upstream.size() != net.output_dim()) throw DataError("embed_backward: upstream gradient dimension mismatch");
  if (!tape.matches(net)) throw DataError("embed_backward: tape does not match net");
  const Vector<Scalar>& d = cache.output;
  Vector<Scalar> g = (upstream - d * d.dot(upstream)) / cache.norm;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& L = net.layers[li];
    if (L.activation == Activation::relu) g = (cache.pre[li].array() > Scalar(0)).select(g, Scalar(0));
    tape.d_weight[li].noalias() += g * cache.inputs[li].transpose();
    tape.d_bias[li] += g;
    g = L.weight.transpose() * g;
  }
  return g;
}

/// Glorot-uniform weights, zero biases, relu on every hidden layer.
/// `dims` lists the input dimension followed by every layer's output size.
template <typename Scalar = double>
EmbeddingNet<Scalar> init_net(const std::vector<Index>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw DataError("init_net: need an input dimension and at least one layer");
  for (Index d : dims)
    if (d <= 0) throw DataError("init_net: dimensions must be positive");
  Rng rng(seed);
  EmbeddingNet<Scalar> net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    AffineLayer<Scalar> L;
    const Index in = dims[i], out = dims[i + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    L.weight.resize(out, in);
    for (Index r = 0; r < out; ++r)
      for (Index c = 0; c < in; ++c) L.weight(r, c) = static_cast<Scalar>(rng.uniform(-a, a));
    L.bias = Vector<Scalar>::Zero(out);
    L.activation = (i + 2 == dims.size()) ? Activation::identity : Activation::relu;
    net.layers.push_back(std::move(L));
  }
  return net;
}

/// Total parameter count, and flat views used by optimizers and tests.
template <typename Scalar>
Index parameter_count(const EmbeddingNet<Scalar>& net) {
  Index c = 0;
  for (const auto& L : net.layers) c += L.weight.size() + L.bias.size();
  return c;
}

template <typename Scalar>
Scalar& parameter_at(EmbeddingNet<Scalar>& net, Index flat) {
  for (auto& L : net.layers) {
    if (flat < L.weight.size()) return L.weight.data()[flat];
    flat -= L.weight.size();
    if (flat < L.bias.size()) return L.bias(flat);
    flat -= L.bias.size();
  }
  throw DataError("parameter index out of range");
}

template <typename Scalar>
Scalar tape_at(const GradientTape<Scalar>& tape, Index flat) {
  for (std::size_t i = 0; i < tape.d_weight.size(); ++i) {
    if (flat < tape.d_weight[i].size()) return tape.d_weight[i].data()[flat];
    flat -= tape.d_weight[i].size();
    if (flat < tape.d_bias[i].size()) return tape.d_bias[i](flat);
    flat -= tape.d_bias[i].size();
  }
  throw DataError("tape index out of range");
}

// JSON serialization (double precision only).
std::string net_to_json(const EmbeddingNet<double>& net);
EmbeddingNet<double> net_from_json(const std::string& text);
void save_net(const EmbeddingNet<double>& net, const std::string& path);
EmbeddingNet<double> load_net(const std::string& path);

}  // namespace s2m
