#pragma once

#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace fedtab::privacy {

// Every message that crosses the coordinator boundary. Each one has a closed
// whitelist of fields: weights, counts, aggregate statistics, and control data.
// Any other key (a feature matrix, a record list, ...) fails validation.
enum class MessageKind {
  kRegisterRequest,
  kRegisterResponse,
  kModelResponse,
  kUpdateRequest,
  kUpdateResponse,
  kHeartbeatRequest,
  kHeartbeatResponse,
  kMetricsResponse,
  kHistoryResponse,
  kControlRequest,
  kControlResponse,
  kHealthResponse,
  kErrorResponse,
};

std::string_view name(MessageKind kind);

// Throws ProtocolError(400, "privacy_whitelist") naming the offending JSON path.
void validate_message(MessageKind kind, const nlohmann::json& body);

// Non-throwing variant; returns the violation text.
std::optional<std::string> check_message(MessageKind kind, const nlohmann::json& body);

// Maps an endpoint to the message kind of its request or response body.
// Returns nullopt for endpoints without a JSON body in that direction.
std::optional<MessageKind> request_kind(std::string_view method, std::string_view path);
std::optional<MessageKind> response_kind(std::string_view method, std::string_view path, int status);

}  // namespace fedtab::privacy
