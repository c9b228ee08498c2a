#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtab/coordinator.hpp"
#include "fedtab/data.hpp"

namespace fedtab {

struct ClientConfig {
  std::string client_id;
  std::string coordinator_url = "http://127.0.0.1:8080";
  std::filesystem::path data_path;
  std::filesystem::path schema_path;
  ImputeStrategy impute = ImputeStrategy::kMean;
  std::optional<TrainConfig> train;  // overrides the coordinator default when set
  std::filesystem::path test_path;   // optional shared test cohort
  int heartbeat_interval_ms = 1000;
  int poll_interval_ms = 50;
  int initial_backoff_ms = 100;
  int max_backoff_ms = 30000;
  int max_connect_attempts = 30;  // bounded retry while the coordinator is unreachable
};

void from_json(const nlohmann::json& j, ClientConfig& c);
ClientConfig load_client_config(const std::filesystem::path& path);

// What a hospital node talks to. The HTTP implementation throws TransientError
// for network failures and ProtocolError for error responses.
class CoordinatorApi {
 public:
  virtual ~CoordinatorApi() = default;
  virtual RegisterResponse register_client(const RegisterRequest& request) = 0;
  virtual ModelView fetch_model(const std::string& token) = 0;
  virtual SubmitResult submit_update(const std::string& token, const ModelUpdate& update) = 0;
  virtual RunControl heartbeat(const std::string& token, const std::optional<AucReport>& report) = 0;
};

std::unique_ptr<CoordinatorApi> make_http_api(const std::string& base_url, int timeout_ms = 30000);

// Calls a Coordinator in-process, pushing every body through the same JSON
// encoding and privacy whitelist as the HTTP path.
std::unique_ptr<CoordinatorApi> make_direct_api(Coordinator& coordinator);

struct LocalData {
  std::shared_ptr<const FeatureSchema> schema;
  PreparedData prepared;
  std::optional<Dataset> test;
};

// impute (fitted on local rows only) -> select. The policy never leaves the node.
LocalData local_pipeline(const ClientConfig& config);

struct ClientRunSummary {
  int exit_code = 0;
  int updates_submitted = 0;
  int stale_responses = 0;
  std::int64_t last_round = -1;
  std::vector<ModelUpdate> submitted;
};

// Register, then loop fetch -> train -> submit -> evaluate -> heartbeat until the
// run finishes. `stop` lets a host abort the loop (the summary then reports exit 1).
ClientRunSummary run_client(const ClientConfig& config, CoordinatorApi& api,
                            const std::atomic<bool>* stop = nullptr);

}  // namespace fedtab
