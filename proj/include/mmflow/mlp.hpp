#ifndef MMFLOW_MLP_HPP
#define MMFLOW_MLP_HPP

// Dense feed-forward networks with exact reverse-mode gradients, the Adam
// optimizer with global-norm clipping, and a plateau learning-rate schedule.
// Batched tensors are column-major: one sample per column.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmflow/error.hpp"
#include "mmflow/rng.hpp"

namespace mmflow {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

enum class Activation { ReLU, SiLU };

struct DenseLayer {
  MatX w;  // out x in
  MatX b;  // out x 1
};

/// Named view of one parameter (or gradient) tensor.
struct TensorRef {
  std::string name;
  MatX* data;
};

inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline double activate(Activation a, double z) { return a == Activation::ReLU ? (z > 0 ? z : 0.0) : z * sigmoid(z); }

inline double activate_grad(Activation a, double z) {
  if (a == Activation::ReLU) return z > 0 ? 1.0 : 0.0;
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

struct MlpGrads {
  std::vector<MatX> w;
  std::vector<MatX> b;

  void set_zero() {
    for (auto& m : w) m.setZero();
    for (auto& m : b) m.setZero();
  }

  /// Same names and order as Mlp::collect.
  void collect(const std::string& prefix, std::vector<TensorRef>& out) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      out.push_back({prefix + ".l" + std::to_string(l) + ".w", &w[l]});
      out.push_back({prefix + ".l" + std::to_string(l) + ".b", &b[l]});
    }
  }
};

class Mlp {
 public:
  Mlp() = default;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  static Mlp init(const std::vector<int>& sizes, Activation act, Rng& rng, double scale = 1.0) {
    require(sizes.size() >= 2, ErrorKind::ShapeMismatch, "an MLP needs at least input and output sizes");
    Mlp m;
    m.act_ = act;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      require(sizes[l] > 0 && sizes[l + 1] > 0, ErrorKind::ShapeMismatch, "layer sizes must be positive");
      const double a = scale / std::sqrt(static_cast<double>(sizes[l]));
      std::uniform_real_distribution<double> u(-a, a);
      DenseLayer layer{MatX(sizes[l + 1], sizes[l]), MatX(sizes[l + 1], 1)};
      for (Eigen::Index i = 0; i < layer.w.size(); ++i) layer.w.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < layer.b.size(); ++i) layer.b.data()[i] = u(rng);
      m.layers_.push_back(std::move(layer));
    }
    return m;
  }

  static Mlp from_layers(std::vector<DenseLayer> layers, Activation act) {
    require(!layers.empty(), ErrorKind::ShapeMismatch, "no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      require(layers[l].b.cols() == 1 && layers[l].w.rows() == layers[l].b.rows(), ErrorKind::ShapeMismatch,
              "bias size mismatch");
      if (l > 0) require(layers[l].w.cols() == layers[l - 1].w.rows(), ErrorKind::ShapeMismatch, "layer chain broken");
    }
    Mlp m;
    m.layers_ = std::move(layers);
    m.act_ = act;
    return m;
  }

  int in_dim() const { return static_cast<int>(layers_.front().w.cols()); }
  int out_dim() const { return static_cast<int>(layers_.back().w.rows()); }
  Activation activation() const { return act_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  struct Cache {
    std::vector<MatX> inputs;  // input to each layer
    std::vector<MatX> pre;     // affine output of each layer
  };

  MatX forward(const MatX& x) const {
    Cache c;
    return forward(x, c);
  }

  VecX forward(const VecX& x) const { return forward(MatX(x)).col(0); }

  MatX forward(const MatX& x, Cache& cache) const {
    require(x.rows() == in_dim(), ErrorKind::ShapeMismatch, "input dimension does not match the first layer");
    cache.inputs.clear();
    cache.pre.clear();
    MatX h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      cache.inputs.push_back(h);
      MatX z = layers_[l].w * h;
      z.colwise() += layers_[l].b.col(0);
      cache.pre.push_back(z);
      if (l + 1 < layers_.size())
        h = z.unaryExpr([this](double v) { return activate(act_, v); });
      else
        h = std::move(z);
    }
    return h;
  }

  MlpGrads zero_grads() const {
    MlpGrads g;
    for (const auto& layer : layers_) {
      g.w.push_back(MatX::Zero(layer.w.rows(), layer.w.cols()));
      g.b.push_back(MatX::Zero(layer.b.rows(), 1));
    }
    return g;
  }

  /// Accumulates parameter gradients into grads; returns the gradient w.r.t. the input.
  MatX backward(const Cache& cache, const MatX& upstream, MlpGrads& grads) const {
    require(upstream.rows() == out_dim() && cache.pre.size() == layers_.size(), ErrorKind::ShapeMismatch,
            "upstream gradient does not match the forward pass");
    require(grads.w.size() == layers_.size(), ErrorKind::ShapeMismatch, "gradient buffers do not match");
    MatX delta = upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size())
        delta = delta.cwiseProduct(cache.pre[l].unaryExpr([this](double v) { return activate_grad(act_, v); }));
      grads.w[l].noalias() += delta * cache.inputs[l].transpose();
      grads.b[l] += delta.rowwise().sum();
      delta = layers_[l].w.transpose() * delta;
    }
    return delta;
  }

  void collect(const std::string& prefix, std::vector<TensorRef>& out) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.push_back({prefix + ".l" + std::to_string(l) + ".w", &layers_[l].w});
      out.push_back({prefix + ".l" + std::to_string(l) + ".b", &layers_[l].b});
    }
  }

 private:
  std::vector<DenseLayer> layers_;
  Activation act_ = Activation::SiLU;
};

}  // namespace mmflow

#endif  // MMFLOW_MLP_HPP
