#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtab/data.hpp"
#include "fedtab/fed.hpp"
#include "fedtab/model.hpp"

namespace fedtab {

enum class RunPhase { kIdle, kRunning, kPaused, kFinished };
enum class ControlAction { kStart, kPause, kResume, kStop };

std::string to_string(RunPhase phase);
RunPhase run_phase_from_string(const std::string& name);
std::string to_string(ControlAction action);
ControlAction control_action_from_string(const std::string& name);  // throws ProtocolError

struct CoordinatorConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  int quorum = 1;
  int round_timeout_ms = 30000;
  int staleness_window = 0;
  AggregationMode mode = AggregationMode::kPlainMean;
  ConvergenceCriterion criterion;
  ModelSpec model;
  TrainConfig train;
  std::uint64_t run_seed = 0;
  std::filesystem::path schema_path;
  std::filesystem::path test_path;    // optional: server-side AUC on a fully observed test cohort
  std::filesystem::path event_log;    // optional: append-only JSON lines
  std::filesystem::path archive_dir;  // optional: per-round test scores
  std::filesystem::path ui_dir;       // optional: static dashboard assets mounted at /ui/
  int heartbeat_timeout_ms = 30000;
  int tick_ms = 20;
  bool autostart = false;
  bool resume = false;  // replay event_log on start-up
};

void from_json(const nlohmann::json& j, CoordinatorConfig& c);
// Relative paths in the file resolve against the file's directory.
CoordinatorConfig load_coordinator_config(const std::filesystem::path& path);

struct AucReport {
  std::int64_t round = 0;
  std::optional<double> global_auc;
  std::optional<double> local_auc;
};

void to_json(nlohmann::json& j, const AucReport& r);
void from_json(const nlohmann::json& j, AucReport& r);

struct SessionSummary {
  std::string status;  // active | lapsed
  std::int64_t declared_n_samples = 0;
};

struct MetricsSnapshot {
  std::int64_t round = 0;
  RunPhase phase = RunPhase::kIdle;
  std::optional<double> global_auc;
  std::map<std::string, AucReport> client_auc;
  std::map<std::string, CohortStats> cohort_stats;
  std::map<std::string, SessionSummary> sessions;
  int feature_dim = 0;
  std::int64_t stale_count = 0;
  int n_updates = 0;  // updates aggregated into this round (0 for the live snapshot)
};

void to_json(nlohmann::json& j, const MetricsSnapshot& s);
void from_json(const nlohmann::json& j, MetricsSnapshot& s);

struct ModelView {
  std::int64_t round = 0;
  RunPhase phase = RunPhase::kIdle;
  ParameterVector weights;
};

struct RegisterRequest {
  std::string client_id;
  std::int64_t declared_n_samples = 0;
  CohortStats stats;
  std::optional<std::string> schema_digest;
};

struct RegisterResponse {
  std::string token;
  std::string client_id;
  std::string schema_digest;
  ModelSpec model_spec;
  TrainConfig train_config;
  std::uint64_t run_seed = 0;
  std::int64_t round = 0;
  RunPhase phase = RunPhase::kIdle;
};

void to_json(nlohmann::json& j, const RegisterRequest& r);
void from_json(const nlohmann::json& j, RegisterRequest& r);
void to_json(nlohmann::json& j, const RegisterResponse& r);
void from_json(const nlohmann::json& j, RegisterResponse& r);

enum class SubmitStatus { kAccepted, kStale };

struct SubmitResult {
  SubmitStatus status = SubmitStatus::kStale;
  std::int64_t round = 0;
};

struct RunControl {
  RunPhase phase = RunPhase::kIdle;
  std::int64_t round = 0;
  std::optional<std::int64_t> started_at_ms;
};

std::string hex64(std::uint64_t v);

// Append-only JSON lines: {ts, kind, payload}.
class EventLog {
 public:
  explicit EventLog(const std::filesystem::path& path);
  void append(const std::string& kind, nlohmann::json payload);

  static std::vector<nlohmann::json> read(const std::filesystem::path& path);

 private:
  std::ofstream out_;
};

// Rebuilds the fed-core state by replaying `update` and `advance` events.
RoundState replay_round_state(const std::vector<nlohmann::json>& events, RoundState initial,
                              AggregationMode mode, const ConvergenceCriterion& criterion);

// Transport-agnostic aggregator. All mutations go through one mutex (the
// single writer); fetch_model and the metrics reads serve published snapshots.
class Coordinator {
 public:
  using Clock = std::function<std::int64_t()>;  // monotonic milliseconds

  explicit Coordinator(CoordinatorConfig config, Clock clock = {});

  RegisterResponse register_client(const RegisterRequest& request);
  ModelView fetch_model(const std::optional<std::string>& token = std::nullopt);
  SubmitResult submit_update(const std::string& token, ModelUpdate update);
  RunControl heartbeat(const std::string& token, const std::optional<AucReport>& report);
  RunControl control(ControlAction action);

  MetricsSnapshot metrics() const;
  std::vector<MetricsSnapshot> metrics_history() const;

  // Round driver: advance on quorum, or on deadline with at least one update.
  // Returns true when a round was aggregated.
  bool tick();

  RunControl run_control() const;
  RoundState round_state() const;
  std::int64_t round_started_ms() const;
  // True once every registered, non-lapsed session has fetched the finished model.
  bool all_sessions_saw_finish() const;
  const CoordinatorConfig& config() const { return config_; }

 private:
  struct Session {
    std::string client_id;
    std::string token;
    std::int64_t registered_at_ms = 0;
    std::int64_t last_seen_ms = 0;
    std::int64_t declared_n_samples = 0;
    CohortStats stats;
  };

  std::int64_t now() const { return clock_(); }
  Session& session_for(const std::string& token);
  bool maybe_advance_locked(bool deadline_path);
  void after_advance_locked(const AdvanceResult& adv, int n_updates, bool forced);
  MetricsSnapshot build_snapshot_locked(int n_updates) const;
  void publish_locked();
  void replay_log();

  CoordinatorConfig config_;
  Clock clock_;
  std::uint64_t schema_digest_ = 0;
  std::optional<Dataset> test_set_;
  std::unique_ptr<EventLog> log_;

  mutable std::mutex mutation_mutex_;
  RoundState state_;
  RunPhase phase_ = RunPhase::kIdle;
  std::optional<std::int64_t> started_at_ms_;
  std::int64_t round_started_ms_ = 0;
  std::map<std::string, Session> sessions_;  // by client_id
  std::map<std::string, std::string> tokens_;  // token -> client_id
  std::map<std::string, AucReport> client_auc_;
  std::set<std::string> saw_finish_;
  std::optional<double> last_global_auc_;
  std::vector<MetricsSnapshot> history_;

  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const ModelView> model_view_;
  std::shared_ptr<const std::vector<MetricsSnapshot>> history_view_;
};

}  // namespace fedtab
