#include "fedtab/privacy.hpp"

#include <map>
#include <memory>

#include "fedtab/errors.hpp"

namespace fedtab::privacy {

namespace {

enum class Type { kObject, kMap, kArray, kString, kInteger, kNumber, kBool };

struct Node {
  Type type = Type::kString;
  bool nullable = false;
  std::map<std::string, std::pair<Node, bool>> fields;  // name -> (node, required)
  std::shared_ptr<Node> element;                         // array / map values
};

Node scalar(Type t, bool nullable = false) { return Node{t, nullable, {}, nullptr}; }
Node str() { return scalar(Type::kString); }
Node integer() { return scalar(Type::kInteger); }
Node number_or_null() { return scalar(Type::kNumber, true); }
Node array_of(Node element) { return Node{Type::kArray, false, {}, std::make_shared<Node>(std::move(element))}; }
Node map_of(Node element) { return Node{Type::kMap, false, {}, std::make_shared<Node>(std::move(element))}; }

struct Field {
  std::string name;
  Node node;
  bool required = true;
};

Node object(std::initializer_list<Field> fields) {
  Node n{Type::kObject, false, {}, nullptr};
  for (const auto& f : fields) n.fields.emplace(f.name, std::make_pair(f.node, f.required));
  return n;
}

Field opt(std::string name, Node node) { return {std::move(name), std::move(node), false}; }

Node cohort_stats() {
  return object({{"n", integer()},
                 {"n_pos", integer()},
                 {"n_neg", integer()},
                 {"n_male", integer()},
                 {"n_female", integer()},
                 {"age_histogram", array_of(integer())}});
}

Node weights() {
  return object({{"layout", array_of(object({{"name", str()}, {"rows", integer()}, {"cols", integer()}}))},
                 {"values", array_of(str())}});
}

Node model_spec() {
  return object({{"kind", str()}, {"input_dim", integer()}, opt("hidden_dims", array_of(integer())), {"seed", integer()}});
}

Node train_config() {
  return object({{"learning_rate", scalar(Type::kNumber)},
                 {"local_epochs", integer()},
                 {"batch_size", integer()},
                 {"l2", scalar(Type::kNumber)}});
}

Node auc_report() {
  return object({{"round", integer()}, {"global_auc", number_or_null()}, {"local_auc", number_or_null()}});
}

Node snapshot() {
  return object({{"round", integer()},
                 {"phase", str()},
                 {"global_auc", number_or_null()},
                 {"client_auc", map_of(auc_report())},
                 {"cohort_stats", map_of(cohort_stats())},
                 {"sessions", map_of(object({{"status", str()}, {"declared_n_samples", integer()}}))},
                 {"feature_dim", integer()},
                 {"stale_count", integer()},
                 {"n_updates", integer()}});
}

const Node& schema_for(MessageKind kind) {
  static const std::map<MessageKind, Node> schemas = [] {
    std::map<MessageKind, Node> m;
    m[MessageKind::kRegisterRequest] = object({{"client_id", str()},
                                               {"declared_n_samples", integer()},
                                               {"cohort_stats", cohort_stats()},
                                               opt("schema_digest", str())});
    m[MessageKind::kRegisterResponse] = object({{"token", str()},
                                                {"client_id", str()},
                                                {"schema_digest", str()},
                                                {"model_spec", model_spec()},
                                                {"train_config", train_config()},
                                                {"run_seed", str()},
                                                {"round", integer()},
                                                {"phase", str()}});
    m[MessageKind::kModelResponse] =
        object({{"round", integer()}, {"phase", str()}, {"feature_dim", integer()}, {"weights", weights()}});
    m[MessageKind::kUpdateRequest] = object({{"token", str()},
                                             {"update", object({{"client_id", str()},
                                                                {"round", integer()},
                                                                {"n_samples", integer()},
                                                                {"local_epochs_used", integer()},
                                                                {"weights", weights()}})}});
    m[MessageKind::kUpdateResponse] = object({{"status", str()}, {"round", integer()}});
    m[MessageKind::kHeartbeatRequest] = object({{"token", str()}, opt("report", auc_report())});
    m[MessageKind::kHeartbeatResponse] = object({{"round", integer()}, {"phase", str()}});
    m[MessageKind::kMetricsResponse] = snapshot();
    m[MessageKind::kHistoryResponse] = object({{"snapshots", array_of(snapshot())}});
    m[MessageKind::kControlRequest] = object({{"action", str()}});
    m[MessageKind::kControlResponse] =
        object({{"phase", str()}, {"round", integer()}, {"started_at_ms", scalar(Type::kInteger, true)}});
    m[MessageKind::kHealthResponse] = object({{"status", str()}, {"phase", str()}, {"round", integer()}});
    m[MessageKind::kErrorResponse] = object({{"error", object({{"code", str()}, {"message", str()}})}});
    return m;
  }();
  return schemas.at(kind);
}

std::optional<std::string> check(const Node& node, const nlohmann::json& j, const std::string& path) {
  if (j.is_null()) {
    if (node.nullable) return std::nullopt;
    return path + ": null not allowed";
  }
  switch (node.type) {
    case Type::kObject: {
      if (!j.is_object()) return path + ": expected object";
      for (const auto& [key, value] : j.items()) {
        auto it = node.fields.find(key);
        if (it == node.fields.end()) return path + "." + key + ": field not in whitelist";
        if (auto err = check(it->second.first, value, path + "." + key)) return err;
      }
      for (const auto& [key, spec] : node.fields) {
        if (spec.second && !j.contains(key)) return path + "." + key + ": required field missing";
      }
      return std::nullopt;
    }
    case Type::kMap: {
      if (!j.is_object()) return path + ": expected object";
      for (const auto& [key, value] : j.items()) {
        if (auto err = check(*node.element, value, path + "[" + key + "]")) return err;
      }
      return std::nullopt;
    }
    case Type::kArray: {
      if (!j.is_array()) return path + ": expected array";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (auto err = check(*node.element, j[i], path + "[" + std::to_string(i) + "]")) return err;
      }
      return std::nullopt;
    }
    case Type::kString:
      return j.is_string() ? std::nullopt : std::optional<std::string>(path + ": expected string");
    case Type::kInteger:
      return j.is_number_integer() ? std::nullopt : std::optional<std::string>(path + ": expected integer");
    case Type::kNumber:
      return j.is_number() ? std::nullopt : std::optional<std::string>(path + ": expected number");
    case Type::kBool:
      return j.is_boolean() ? std::nullopt : std::optional<std::string>(path + ": expected boolean");
  }
  return path + ": unknown node";
}

}  // namespace

std::string_view name(MessageKind kind) {
  switch (kind) {
    case MessageKind::kRegisterRequest: return "register_request";
    case MessageKind::kRegisterResponse: return "register_response";
    case MessageKind::kModelResponse: return "model_response";
    case MessageKind::kUpdateRequest: return "update_request";
    case MessageKind::kUpdateResponse: return "update_response";
    case MessageKind::kHeartbeatRequest: return "heartbeat_request";
    case MessageKind::kHeartbeatResponse: return "heartbeat_response";
    case MessageKind::kMetricsResponse: return "metrics_response";
    case MessageKind::kHistoryResponse: return "history_response";
    case MessageKind::kControlRequest: return "control_request";
    case MessageKind::kControlResponse: return "control_response";
    case MessageKind::kHealthResponse: return "health_response";
    case MessageKind::kErrorResponse: return "error_response";
  }
  return "unknown";
}

std::optional<std::string> check_message(MessageKind kind, const nlohmann::json& body) {
  return check(schema_for(kind), body, "$");
}

void validate_message(MessageKind kind, const nlohmann::json& body) {
  if (auto err = check_message(kind, body)) {
    throw ProtocolError(400, "privacy_whitelist", std::string(name(kind)) + " rejected: " + *err);
  }
}

std::optional<MessageKind> request_kind(std::string_view method, std::string_view path) {
  if (method != "POST") return std::nullopt;
  if (path == "/v1/register") return MessageKind::kRegisterRequest;
  if (path == "/v1/update") return MessageKind::kUpdateRequest;
  if (path == "/v1/heartbeat") return MessageKind::kHeartbeatRequest;
  if (path == "/v1/control") return MessageKind::kControlRequest;
  return std::nullopt;
}

std::optional<MessageKind> response_kind(std::string_view method, std::string_view path, int status) {
  if (status >= 400) return MessageKind::kErrorResponse;
  if (method == "GET") {
    if (path == "/v1/model") return MessageKind::kModelResponse;
    if (path == "/v1/metrics") return MessageKind::kMetricsResponse;
    if (path == "/v1/metrics/history") return MessageKind::kHistoryResponse;
    if (path == "/v1/healthz") return MessageKind::kHealthResponse;
    return std::nullopt;
  }
  if (path == "/v1/register") return MessageKind::kRegisterResponse;
  if (path == "/v1/update") return MessageKind::kUpdateResponse;
  if (path == "/v1/heartbeat") return MessageKind::kHeartbeatResponse;
  if (path == "/v1/control") return MessageKind::kControlResponse;
  return std::nullopt;
}

}  // namespace fedtab::privacy
