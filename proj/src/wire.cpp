#include "fedtab/wire.hpp"

#include <charconv>
#include <cmath>

namespace fedtab {

std::string format_double17(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, ptr);
}

double parse_double_exact(const std::string& text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ProtocolError(400, "bad_number", "weight '" + text + "' is not a finite decimal number");
  }
  return v;
}

void to_json(nlohmann::json& j, const ParameterVector& w) {
  auto layout = nlohmann::json::array();
  for (const auto& t : w.layout) layout.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  auto values = nlohmann::json::array();
  for (Eigen::Index i = 0; i < w.values.size(); ++i) values.push_back(format_double17(w.values(i)));
  j = nlohmann::json{{"layout", std::move(layout)}, {"values", std::move(values)}};
}

void from_json(const nlohmann::json& j, ParameterVector& w) {
  Layout layout;
  for (const auto& t : j.at("layout")) {
    TensorShape s{t.at("name").get<std::string>(), t.at("rows").get<Eigen::Index>(),
                  t.at("cols").get<Eigen::Index>()};
    if (s.rows < 1 || s.cols < 1) throw ProtocolError(400, "bad_layout", "tensor '" + s.name + "' has no extent");
    layout.push_back(std::move(s));
  }
  const auto& values = j.at("values");
  if (static_cast<Eigen::Index>(values.size()) != layout_size(layout)) {
    throw ProtocolError(400, "bad_layout", "weight count does not match layout");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i].is_string()) throw ProtocolError(400, "bad_number", "weights must be decimal strings");
    v(static_cast<Eigen::Index>(i)) = parse_double_exact(values[i].get<std::string>());
  }
  w = ParameterVector(std::move(v), std::move(layout));
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"input_dim", s.input_dim}, {"seed", s.seed}};
  if (s.kind == ModelKind::kMlp3) j["hidden_dims"] = s.hidden_dims;
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.kind = model_kind_from_string(j.at("kind").get<std::string>());
  s.input_dim = j.at("input_dim").get<int>();
  if (j.contains("hidden_dims")) s.hidden_dims = j.at("hidden_dims").get<std::array<int, 2>>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"local_epochs", c.local_epochs},
                     {"batch_size", c.batch_size},
                     {"l2", c.l2}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.local_epochs = j.value("local_epochs", d.local_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.l2 = j.value("l2", d.l2);
  c.validate();
}

void to_json(nlohmann::json& j, const ModelUpdate& u) {
  j = nlohmann::json{{"client_id", u.client_id},
                     {"round", u.round},
                     {"n_samples", u.n_samples},
                     {"local_epochs_used", u.local_epochs_used},
                     {"weights", u.weights}};
}

void from_json(const nlohmann::json& j, ModelUpdate& u) {
  u.client_id = j.at("client_id").get<std::string>();
  u.round = j.at("round").get<std::int64_t>();
  u.n_samples = j.at("n_samples").get<std::int64_t>();
  u.local_epochs_used = j.at("local_epochs_used").get<int>();
  u.weights = j.at("weights").get<ParameterVector>();
}

void to_json(nlohmann::json& j, const ConvergenceCriterion& c) {
  j = nlohmann::json{
      {"max_rounds", c.max_rounds}, {"weight_delta_tol", c.weight_delta_tol}, {"patience", c.patience}};
}

void from_json(const nlohmann::json& j, ConvergenceCriterion& c) {
  ConvergenceCriterion d;
  c.max_rounds = j.value("max_rounds", d.max_rounds);
  c.weight_delta_tol = j.value("weight_delta_tol", d.weight_delta_tol);
  c.patience = j.value("patience", d.patience);
  c.validate();
}

void to_json(nlohmann::json& j, const FedConfig& c) {
  j = nlohmann::json{{"aggregation", to_string(c.mode)},
                     {"min_clients", c.min_clients},
                     {"staleness_window", c.staleness_window},
                     {"convergence", c.criterion}};
}

void from_json(const nlohmann::json& j, FedConfig& c) {
  FedConfig d;
  c.mode = aggregation_mode_from_string(j.value("aggregation", to_string(d.mode)));
  c.min_clients = j.value("min_clients", d.min_clients);
  c.staleness_window = j.value("staleness_window", d.staleness_window);
  c.criterion = j.contains("convergence") ? j.at("convergence").get<ConvergenceCriterion>() : d.criterion;
}

}  // namespace fedtab
