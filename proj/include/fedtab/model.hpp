#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedtab/errors.hpp"

namespace fedtab {

enum class ModelKind { kLogisticRegression, kMlp3 };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct ModelSpec {
  ModelKind kind = ModelKind::kMlp3;
  int input_dim = 0;
  std::array<int, 2> hidden_dims{32, 16};  // mlp3 only
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.05;
  int local_epochs = 1;
  int batch_size = 64;
  double l2 = 0.0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// One named tensor inside a flat parameter vector. Stored column-major, so a
// dense layer's weight is an (out x in) matrix occupying rows * cols slots.
struct TensorShape {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool is_bias() const { return name.ends_with(".bias"); }
  bool operator==(const TensorShape&) const = default;
};

using Layout = std::vector<TensorShape>;

Eigen::Index layout_size(const Layout& layout);
Layout make_layout(const ModelSpec& spec);

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Flat, ordered model weights plus the layout describing how they map onto layers.
template <typename Scalar>
struct BasicParameterVector {
  VectorX<Scalar> values;
  Layout layout;

  BasicParameterVector() = default;
  BasicParameterVector(VectorX<Scalar> v, Layout l) : values(std::move(v)), layout(std::move(l)) {
    if (values.size() != layout_size(layout)) {
      throw ShapeError("parameter vector length " + std::to_string(values.size()) +
                       " does not match layout size " + std::to_string(layout_size(layout)));
    }
  }

  static BasicParameterVector zeros(Layout l) {
    const auto n = layout_size(l);
    return BasicParameterVector(VectorX<Scalar>::Zero(n), std::move(l));
  }

  Eigen::Index size() const { return values.size(); }
  bool compatible_with(const BasicParameterVector& other) const { return layout == other.layout; }
  bool all_finite() const { return values.allFinite(); }

  template <typename Other>
  BasicParameterVector<Other> cast() const {
    return BasicParameterVector<Other>(values.template cast<Other>(), layout);
  }
};

using ParameterVector = BasicParameterVector<double>;

// Model-ready data: imputed, feature-selected rows and 0/1 labels.
struct Dataset {
  Eigen::MatrixXd features;
  Eigen::VectorXd labels;

  Eigen::Index rows() const { return features.rows(); }
  Eigen::Index cols() const { return features.cols(); }
};

ParameterVector init_model(const ModelSpec& spec);

namespace detail {

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  using std::exp;
  return z >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-z)) : exp(z) / (Scalar(1) + exp(z));
}

// log(1 + exp(z)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar z) {
  using std::abs;
  using std::exp;
  using std::log1p;
  return std::max(z, Scalar(0)) + log1p(exp(-abs(z)));
}

template <typename Scalar>
Scalar clamp_open_unit(Scalar p) {
  const Scalar lo = std::numeric_limits<Scalar>::min();
  const Scalar hi = Scalar(1) - std::numeric_limits<Scalar>::epsilon() / Scalar(2);
  return std::min(std::max(p, lo), hi);
}

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const VectorX<Scalar>>;

// Dense layers view over the flat vector: (weight, bias) per layer.
template <typename Scalar>
struct DenseLayers {
  std::vector<ConstMatrixMap<Scalar>> weights;
  std::vector<ConstVectorMap<Scalar>> biases;

  explicit DenseLayers(const BasicParameterVector<Scalar>& w) {
    Eigen::Index offset = 0;
    const Scalar* data = w.values.data();
    for (std::size_t i = 0; i + 1 < w.layout.size(); i += 2) {
      const auto& ws = w.layout[i];
      const auto& bs = w.layout[i + 1];
      weights.emplace_back(data + offset, ws.rows, ws.cols);
      offset += ws.size();
      biases.emplace_back(data + offset, bs.size());
      offset += bs.size();
    }
  }

  std::size_t depth() const { return weights.size(); }
};

inline void check_compatible(const Layout& layout, const ModelSpec& spec) {
  if (layout != make_layout(spec)) throw ShapeError("parameter layout does not match model spec");
}

}  // namespace detail

// Raw logits for every row of `x`.
template <typename Scalar, typename Derived>
VectorX<Scalar> logits(const BasicParameterVector<Scalar>& w, const ModelSpec& spec,
                       const Eigen::MatrixBase<Derived>& x) {
  detail::check_compatible(w.layout, spec);
  if (x.cols() != spec.input_dim) {
    throw ShapeError("feature row has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(spec.input_dim));
  }
  const detail::DenseLayers<Scalar> layers(w);
  MatrixX<Scalar> act = x.template cast<Scalar>();
  for (std::size_t l = 0; l < layers.depth(); ++l) {
    MatrixX<Scalar> z = act * layers.weights[l].transpose();
    z.rowwise() += layers.biases[l].transpose();
    if (l + 1 < layers.depth()) {
      act = z.array().tanh().matrix();
    } else {
      return z.col(0);
    }
  }
  return {};
}

// Risk scores in the open interval (0, 1), one per row.
template <typename Scalar, typename Derived>
VectorX<Scalar> predict_batch(const BasicParameterVector<Scalar>& w, const ModelSpec& spec,
                              const Eigen::MatrixBase<Derived>& x) {
  VectorX<Scalar> z = logits(w, spec, x);
  return z.unaryExpr([](Scalar v) { return detail::clamp_open_unit(detail::sigmoid(v)); });
}

template <typename Scalar, typename Derived>
Scalar predict(const BasicParameterVector<Scalar>& w, const ModelSpec& spec,
               const Eigen::MatrixBase<Derived>& row) {
  if (row.rows() != 1 && row.cols() == 1) return predict_batch(w, spec, row.transpose())(0);
  return predict_batch(w, spec, row)(0);
}

template <typename Scalar>
struct LossAndGradient {
  Scalar loss;
  BasicParameterVector<Scalar> gradient;
};

// Mean binary cross-entropy plus l2 * ||non-bias weights||^2 / 2, with the
// analytic gradient in the same layout as `w`.
template <typename Scalar, typename DerivedX, typename DerivedY>
LossAndGradient<Scalar> loss_and_gradient(const BasicParameterVector<Scalar>& w,
                                          const ModelSpec& spec,
                                          const Eigen::MatrixBase<DerivedX>& x,
                                          const Eigen::MatrixBase<DerivedY>& y, Scalar l2) {
  detail::check_compatible(w.layout, spec);
  if (x.rows() == 0) throw UsageError("loss_and_gradient needs a nonempty batch");
  if (x.cols() != spec.input_dim) throw ShapeError("batch column count does not match input_dim");
  if (y.size() != x.rows()) throw ShapeError("label count does not match batch rows");

  const detail::DenseLayers<Scalar> layers(w);
  const auto depth = layers.depth();
  const Scalar n = static_cast<Scalar>(x.rows());

  std::vector<MatrixX<Scalar>> acts;
  acts.reserve(depth);
  acts.push_back(x.template cast<Scalar>());
  MatrixX<Scalar> z;
  for (std::size_t l = 0; l < depth; ++l) {
    z = acts.back() * layers.weights[l].transpose();
    z.rowwise() += layers.biases[l].transpose();
    if (l + 1 < depth) acts.push_back(z.array().tanh().matrix());
  }

  const VectorX<Scalar> yy = y.template cast<Scalar>();
  const VectorX<Scalar> out = z.col(0);
  Scalar loss(0);
  for (Eigen::Index i = 0; i < out.size(); ++i) loss += detail::softplus(out(i)) - yy(i) * out(i);
  loss /= n;

  auto gradient = BasicParameterVector<Scalar>::zeros(w.layout);
  std::vector<Eigen::Index> offsets;
  {
    Eigen::Index offset = 0;
    for (const auto& t : w.layout) {
      offsets.push_back(offset);
      offset += t.size();
    }
  }

  MatrixX<Scalar> delta =
      (out.unaryExpr([](Scalar v) { return detail::sigmoid(v); }) - yy) / n;
  for (std::size_t l = depth; l-- > 0;) {
    const auto& wshape = w.layout[2 * l];
    Eigen::Map<MatrixX<Scalar>> gw(gradient.values.data() + offsets[2 * l], wshape.rows,
                                   wshape.cols);
    Eigen::Map<VectorX<Scalar>> gb(gradient.values.data() + offsets[2 * l + 1],
                                   w.layout[2 * l + 1].size());
    gw.noalias() = delta.transpose() * acts[l];
    gb = delta.colwise().sum().transpose();
    if (l > 0) {
      MatrixX<Scalar> back = delta * layers.weights[l];
      delta = (back.array() * (Scalar(1) - acts[l].array().square())).matrix();
    }
  }

  if (l2 != Scalar(0)) {
    Scalar penalty(0);
    for (std::size_t t = 0; t < w.layout.size(); ++t) {
      if (w.layout[t].is_bias()) continue;
      const auto seg = w.values.segment(offsets[t], w.layout[t].size());
      penalty += seg.squaredNorm();
      gradient.values.segment(offsets[t], w.layout[t].size()) += l2 * seg;
    }
    loss += l2 * penalty / Scalar(2);
  }
  return {loss, std::move(gradient)};
}

// Local minibatch SGD. Each epoch shuffles row order with a SplitMix64 stream
// derived from `rng_seed`; rows inside a minibatch are visited in ascending
// index order so a single full batch reproduces one plain gradient step.
ParameterVector train_local(const ParameterVector& w, const ModelSpec& spec,
                            const TrainConfig& config, const Dataset& data,
                            std::uint64_t rng_seed);

}  // namespace fedtab
