#pragma once

// Dense feed-forward kernel: forward pass, mean softmax cross-entropy with
// exact reverse-mode gradients, and finite-difference Hessian-vector
// products. The network is split at `split_index` into an encoder (layers
// [0, s)) and a head (layers [s, end)); the split only changes which
// activation is reported as z.
//
// Parameters live in one flat vector: for each layer, the weight matrix
// (out x in, column-major) followed by its bias.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cicf/errors.hpp"
#include "cicf/rng.hpp"

namespace cicf {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class Activation { relu, tanh };

struct ModelSpec {
  std::vector<int> layer_widths;  // input dim, hidden widths..., class count
  Activation activation = Activation::tanh;
  int split_index = 0;

  int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }
  int input_dim() const { return layer_widths.front(); }
  int class_count() const { return layer_widths.back(); }

  void validate() const {
    if (layer_widths.size() < 2)
      throw ConfigError("model: layer_widths needs at least input and output widths");
    for (std::size_t i = 0; i < layer_widths.size(); ++i)
      if (layer_widths[i] <= 0)
        throw ConfigError("model: layer width " + std::to_string(i) + " must be positive");
    if (split_index < 0 || split_index >= layer_count())
      throw ConfigError("model: split_index must lie in [0, " +
                        std::to_string(layer_count()) + ")");
  }
};

struct LayerSlice {
  Index weight_offset = 0;
  Index rows = 0;  // fan-out
  Index cols = 0;  // fan-in
  Index bias_offset = 0;

  bool operator==(const LayerSlice&) const = default;
};

/// Offsets of every layer's weights and bias inside the flat vector.
struct Manifest {
  std::vector<LayerSlice> layers;
  Index size = 0;

  static Manifest of(const ModelSpec& spec) {
    spec.validate();
    Manifest m;
    Index offset = 0;
    for (int l = 0; l < spec.layer_count(); ++l) {
      LayerSlice s;
      s.cols = spec.layer_widths[l];
      s.rows = spec.layer_widths[l + 1];
      s.weight_offset = offset;
      s.bias_offset = offset + s.rows * s.cols;
      offset = s.bias_offset + s.rows;
      m.layers.push_back(s);
    }
    m.size = offset;
    return m;
  }

  /// First flat index belonging to the head f (layers >= split).
  Index head_begin(int split_index) const { return layers.at(split_index).weight_offset; }

  bool operator==(const Manifest&) const = default;
};

template <typename Scalar>
struct BasicParamVector {
  VectorX<Scalar> values;
  Manifest manifest;

  BasicParamVector() = default;
  BasicParamVector(VectorX<Scalar> v, Manifest m) : values(std::move(v)), manifest(std::move(m)) {
    if (values.size() != manifest.size)
      throw ShapeError("parameter vector length " + std::to_string(values.size()) +
                       " does not match manifest extent " + std::to_string(manifest.size));
  }

  static BasicParamVector zeros(const ModelSpec& spec) {
    Manifest m = Manifest::of(spec);
    VectorX<Scalar> v = VectorX<Scalar>::Zero(m.size);
    return {std::move(v), std::move(m)};
  }

  Index size() const { return values.size(); }

  auto weight(int layer) {
    const auto& s = manifest.layers.at(layer);
    return Eigen::Map<MatrixX<Scalar>>(values.data() + s.weight_offset, s.rows, s.cols);
  }
  auto weight(int layer) const {
    const auto& s = manifest.layers.at(layer);
    return Eigen::Map<const MatrixX<Scalar>>(values.data() + s.weight_offset, s.rows, s.cols);
  }
  auto bias(int layer) { return values.segment(manifest.layers.at(layer).bias_offset,
                                               manifest.layers.at(layer).rows); }
  auto bias(int layer) const { return values.segment(manifest.layers.at(layer).bias_offset,
                                                     manifest.layers.at(layer).rows); }
};

using ParamVector = BasicParamVector<double>;

/// M samples as rows, their labels and the dataset ids they came from.
template <typename Scalar>
struct BasicBatch {
  MatrixX<Scalar> features;
  std::vector<int> labels;
  std::vector<std::size_t> indices;

  Index size() const { return features.rows(); }
};

using Batch = BasicBatch<double>;

template <typename Scalar>
struct ForwardResult {
  VectorX<Scalar> z;
  VectorX<Scalar> logits;
};

template <typename Scalar>
struct BatchForward {
  MatrixX<Scalar> z;       // M x width of layer s-1 (or input)
  MatrixX<Scalar> logits;  // M x class count
};

template <typename Scalar>
struct LossGrad {
  Scalar loss{};
  VectorX<Scalar> grad;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
template <typename Scalar = double>
BasicParamVector<Scalar> init_params(const ModelSpec& spec, std::uint64_t seed) {
  auto params = BasicParamVector<Scalar>::zeros(spec);
  Rng rng(seed);
  for (int l = 0; l < spec.layer_count(); ++l) {
    auto w = params.weight(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (Index j = 0; j < w.cols(); ++j)
      for (Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
  return params;
}

namespace detail {

template <typename Scalar>
void check_finite(const MatrixX<Scalar>& m, int layer) {
  if (!m.allFinite())
    throw NumericError("non-finite activations in layer " + std::to_string(layer), layer);
}

template <typename Scalar>
MatrixX<Scalar> activate(const MatrixX<Scalar>& pre, Activation act) {
  if (act == Activation::relu) return pre.cwiseMax(Scalar(0));
  return pre.array().tanh().matrix();
}

/// d(activation)/d(pre), given both pre- and post-activation values.
template <typename Scalar>
MatrixX<Scalar> activation_slope(const MatrixX<Scalar>& pre, const MatrixX<Scalar>& post,
                                 Activation act) {
  if (act == Activation::relu)
    return (pre.array() > Scalar(0)).template cast<Scalar>().matrix();
  return (Scalar(1) - post.array().square()).matrix();
}

template <typename Scalar>
void check_input(const ModelSpec& spec, Index theta_size, Index input_cols) {
  const Index expected = Manifest::of(spec).size;
  if (theta_size != expected)
    throw ShapeError("parameter length " + std::to_string(theta_size) + " != " +
                     std::to_string(expected) + " required by the model spec");
  if (input_cols != spec.input_dim())
    throw ShapeError("input dimension " + std::to_string(input_cols) + " != " +
                     std::to_string(spec.input_dim()));
}

}  // namespace detail

/// Batched forward pass. Rows of `x` are samples.
template <typename DerivedTheta, typename DerivedX>
BatchForward<typename DerivedTheta::Scalar> forward_batch(const ModelSpec& spec,
                                                          const Eigen::MatrixBase<DerivedTheta>& theta,
                                                          const Eigen::MatrixBase<DerivedX>& x) {
  using Scalar = typename DerivedTheta::Scalar;
  detail::check_input<Scalar>(spec, theta.size(), x.cols());
  const Manifest manifest = Manifest::of(spec);
  const VectorX<Scalar> th = theta;

  BatchForward<Scalar> out;
  MatrixX<Scalar> a = x.template cast<Scalar>();
  if (spec.split_index == 0) out.z = a;
  const int last = spec.layer_count() - 1;
  for (int l = 0; l <= last; ++l) {
    const auto& s = manifest.layers[l];
    Eigen::Map<const MatrixX<Scalar>> w(th.data() + s.weight_offset, s.rows, s.cols);
    auto b = th.segment(s.bias_offset, s.rows);
    MatrixX<Scalar> pre = a * w.transpose();
    pre.rowwise() += b.transpose();
    a = (l == last) ? std::move(pre) : detail::activate(pre, spec.activation);
    detail::check_finite(a, l);
    if (l + 1 == spec.split_index) out.z = a;
  }
  out.logits = std::move(a);
  return out;
}

/// Single-sample forward pass: z = h(x) and logits = f(z).
template <typename DerivedTheta, typename DerivedX>
ForwardResult<typename DerivedTheta::Scalar> forward(const ModelSpec& spec,
                                                     const Eigen::MatrixBase<DerivedTheta>& theta,
                                                     const Eigen::MatrixBase<DerivedX>& x) {
  if (x.cols() != 1 && x.rows() != 1) throw ShapeError("forward expects a single feature vector");
  const auto row = x.derived().reshaped(1, x.size());
  auto fb = forward_batch(spec, theta, row);
  return {fb.z.row(0).transpose(), fb.logits.row(0).transpose()};
}

template <typename Scalar>
ForwardResult<Scalar> forward(const BasicParamVector<Scalar>& params, const ModelSpec& spec,
                              const VectorX<Scalar>& x) {
  return forward(spec, params.values, x);
}

/// Per-row softmax probabilities and cross-entropy, with max-subtraction.
template <typename Scalar>
std::pair<MatrixX<Scalar>, VectorX<Scalar>> softmax_cross_entropy(const MatrixX<Scalar>& logits,
                                                                  const std::vector<int>& labels) {
  const Index m = logits.rows();
  MatrixX<Scalar> probs(m, logits.cols());
  VectorX<Scalar> losses(m);
  for (Index i = 0; i < m; ++i) {
    const Scalar top = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - top).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    losses(i) = lse - shifted(labels[static_cast<std::size_t>(i)]);
  }
  return {std::move(probs), std::move(losses)};
}

/// Mean softmax cross-entropy over the batch and its exact gradient with
/// respect to every parameter (encoder and head).
template <typename DerivedTheta>
LossGrad<typename DerivedTheta::Scalar> loss_and_grad(const ModelSpec& spec,
                                                      const Eigen::MatrixBase<DerivedTheta>& theta,
                                                      const BasicBatch<typename DerivedTheta::Scalar>& batch) {
  using Scalar = typename DerivedTheta::Scalar;
  const Index m = batch.size();
  if (m < 1) throw ShapeError("loss_and_grad: empty batch");
  if (static_cast<Index>(batch.labels.size()) != m)
    throw ShapeError("loss_and_grad: label count does not match batch rows");
  detail::check_input<Scalar>(spec, theta.size(), batch.features.cols());
  for (int y : batch.labels)
    if (y < 0 || y >= spec.class_count())
      throw ShapeError("loss_and_grad: label " + std::to_string(y) + " outside class range");

  const Manifest manifest = Manifest::of(spec);
  const VectorX<Scalar> th = theta;
  const int layers = spec.layer_count();

  // pre[l] / post[l]: pre- and post-activation of layer l; post[-1] is the input.
  std::vector<MatrixX<Scalar>> pre(layers), post(layers + 1);
  post[0] = batch.features;
  for (int l = 0; l < layers; ++l) {
    const auto& s = manifest.layers[l];
    Eigen::Map<const MatrixX<Scalar>> w(th.data() + s.weight_offset, s.rows, s.cols);
    pre[l] = post[l] * w.transpose();
    pre[l].rowwise() += th.segment(s.bias_offset, s.rows).transpose();
    post[l + 1] = (l == layers - 1) ? pre[l] : detail::activate(pre[l], spec.activation);
    detail::check_finite(post[l + 1], l);
  }

  auto [probs, losses] = softmax_cross_entropy<Scalar>(post[layers], batch.labels);
  LossGrad<Scalar> out;
  out.loss = losses.mean();
  if (!std::isfinite(static_cast<double>(out.loss)))
    throw NumericError("non-finite loss", layers - 1);

  MatrixX<Scalar> delta = std::move(probs);
  for (Index i = 0; i < m; ++i) delta(i, batch.labels[static_cast<std::size_t>(i)]) -= Scalar(1);
  delta /= static_cast<Scalar>(m);

  out.grad = VectorX<Scalar>::Zero(manifest.size);
  for (int l = layers - 1; l >= 0; --l) {
    const auto& s = manifest.layers[l];
    Eigen::Map<MatrixX<Scalar>> dw(out.grad.data() + s.weight_offset, s.rows, s.cols);
    dw.noalias() = delta.transpose() * post[l];
    out.grad.segment(s.bias_offset, s.rows) = delta.colwise().sum().transpose();
    if (l > 0) {
      Eigen::Map<const MatrixX<Scalar>> w(th.data() + s.weight_offset, s.rows, s.cols);
      MatrixX<Scalar> upstream = delta * w;
      delta = upstream.cwiseProduct(detail::activation_slope(pre[l - 1], post[l], spec.activation));
    }
  }
  if (!out.grad.allFinite()) throw NumericError("non-finite gradient");
  return out;
}

template <typename Scalar>
LossGrad<Scalar> loss_and_grad(const BasicParamVector<Scalar>& params, const ModelSpec& spec,
                               const BasicBatch<Scalar>& batch) {
  return loss_and_grad(spec, params.values, batch);
}

/// Central-difference Hessian-vector product of an arbitrary gradient map:
///   (grad(theta + eps*u) - grad(theta - eps*u)) / (2 eps) * |v|,  u = v / |v|.
/// `grad_of` maps a parameter vector to a gradient vector.
template <typename GradFn, typename Scalar>
VectorX<Scalar> hvp_central(GradFn&& grad_of, const VectorX<Scalar>& theta, const VectorX<Scalar>& v,
                            Scalar eps) {
  if (!(eps > Scalar(0))) throw ConfigError("hvp: eps must be positive");
  if (v.size() != theta.size()) throw ShapeError("hvp: direction length does not match parameters");
  const Scalar norm = v.norm();
  if (norm == Scalar(0)) return VectorX<Scalar>::Zero(theta.size());
  const VectorX<Scalar> step = (eps / norm) * v;
  const VectorX<Scalar> plus = grad_of(VectorX<Scalar>(theta + step));
  const VectorX<Scalar> minus = grad_of(VectorX<Scalar>(theta - step));
  return (plus - minus) * (norm / (Scalar(2) * eps));
}

/// Hessian of the batch-mean cross-entropy applied to `v`.
template <typename Scalar>
VectorX<Scalar> hvp(const ModelSpec& spec, const VectorX<Scalar>& theta, const BasicBatch<Scalar>& batch,
                    const VectorX<Scalar>& v, Scalar eps = Scalar(1e-4)) {
  return hvp_central(
      [&](const VectorX<Scalar>& t) { return loss_and_grad(spec, t, batch).grad; }, theta, v, eps);
}

}  // namespace cicf
