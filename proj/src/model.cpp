#include "fedtab/model.hpp"

#include <algorithm>
#include <numeric>

#include "fedtab/rng.hpp"

namespace fedtab {

std::string to_string(ModelKind kind) {
  return kind == ModelKind::kLogisticRegression ? "logistic-regression" : "mlp3";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "logistic-regression" || name == "lr") return ModelKind::kLogisticRegression;
  if (name == "mlp3" || name == "mlp") return ModelKind::kMlp3;
  throw ConfigError("unknown model kind '" + name + "'");
}

void ModelSpec::validate() const {
  if (input_dim < 1) throw ConfigError("model input_dim must be >= 1");
  if (kind == ModelKind::kMlp3 && (hidden_dims[0] < 1 || hidden_dims[1] < 1)) {
    throw ConfigError("mlp3 hidden dims must be positive");
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ConfigError("l2 must be non-negative");
}

Eigen::Index layout_size(const Layout& layout) {
  Eigen::Index n = 0;
  for (const auto& t : layout) n += t.size();
  return n;
}

Layout make_layout(const ModelSpec& spec) {
  spec.validate();
  if (spec.kind == ModelKind::kLogisticRegression) {
    return {{"linear.weight", 1, spec.input_dim}, {"linear.bias", 1, 1}};
  }
  const auto h1 = spec.hidden_dims[0];
  const auto h2 = spec.hidden_dims[1];
  return {
      {"dense0.weight", h1, spec.input_dim}, {"dense0.bias", h1, 1},
      {"dense1.weight", h2, h1},             {"dense1.bias", h2, 1},
      {"output.weight", 1, h2},              {"output.bias", 1, 1},
  };
}

ParameterVector init_model(const ModelSpec& spec) {
  auto w = ParameterVector::zeros(make_layout(spec));
  if (spec.kind == ModelKind::kLogisticRegression) return w;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) on weights, zero biases.
  SplitMix64 rng(derive_seed(spec.seed, 0x1417));
  Eigen::Index offset = 0;
  for (const auto& t : w.layout) {
    if (!t.is_bias()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.cols));
      for (Eigen::Index i = 0; i < t.size(); ++i) w.values(offset + i) = rng.uniform(-bound, bound);
    }
    offset += t.size();
  }
  return w;
}

ParameterVector train_local(const ParameterVector& w, const ModelSpec& spec,
                            const TrainConfig& config, const Dataset& data,
                            std::uint64_t rng_seed) {
  config.validate();
  if (data.rows() == 0) throw UsageError("train_local needs a nonempty dataset");
  if (data.labels.size() != data.rows()) throw ShapeError("label count does not match rows");

  ParameterVector current = w;
  const auto n = static_cast<std::size_t>(data.rows());
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  Eigen::MatrixXd bx;
  Eigen::VectorXd by;
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    SplitMix64 rng(derive_seed(rng_seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < n; start += batch) {
      const auto stop = std::min(n, start + batch);
      std::vector<Eigen::Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::sort(rows.begin(), rows.end());
      bx = data.features(rows, Eigen::all);
      by = data.labels(rows);
      auto step = loss_and_gradient(current, spec, bx, by, config.l2);
      current.values -= config.learning_rate * step.gradient.values;
    }
  }
  if (!current.all_finite()) throw UsageError("training diverged to non-finite weights");
  return current;
}

}  // namespace fedtab
