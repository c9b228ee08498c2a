#include "fedtab/coordinator.hpp"

#include <chrono>
#include <cstdio>
#include <random>
#include <regex>

#include <spdlog/spdlog.h>

#include "fedtab/metrics.hpp"
#include "fedtab/wire.hpp"

namespace fedtab {

namespace {

std::int64_t steady_now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

std::int64_t wall_now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string random_token() {
  static thread_local std::random_device rd;
  std::uint64_t a = (std::uint64_t{rd()} << 32) | rd();
  std::uint64_t b = (std::uint64_t{rd()} << 32) | rd();
  return hex64(a) + hex64(b);
}

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> read_optional_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

ProtocolError auth_error() { return ProtocolError(401, "unknown_token", "unknown or expired session token"); }

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string to_string(RunPhase phase) {
  switch (phase) {
    case RunPhase::kIdle: return "idle";
    case RunPhase::kRunning: return "running";
    case RunPhase::kPaused: return "paused";
    case RunPhase::kFinished: return "finished";
  }
  return "idle";
}

RunPhase run_phase_from_string(const std::string& name) {
  if (name == "idle") return RunPhase::kIdle;
  if (name == "running") return RunPhase::kRunning;
  if (name == "paused") return RunPhase::kPaused;
  if (name == "finished") return RunPhase::kFinished;
  throw ProtocolError(400, "bad_phase", "unknown run phase '" + name + "'");
}

std::string to_string(ControlAction action) {
  switch (action) {
    case ControlAction::kStart: return "start";
    case ControlAction::kPause: return "pause";
    case ControlAction::kResume: return "resume";
    case ControlAction::kStop: return "stop";
  }
  return "start";
}

ControlAction control_action_from_string(const std::string& name) {
  if (name == "start") return ControlAction::kStart;
  if (name == "pause") return ControlAction::kPause;
  if (name == "resume") return ControlAction::kResume;
  if (name == "stop") return ControlAction::kStop;
  throw ProtocolError(400, "bad_action", "unknown control action '" + name + "'");
}

void from_json(const nlohmann::json& j, CoordinatorConfig& c) {
  CoordinatorConfig d;
  c.host = j.value("host", d.host);
  c.port = j.value("port", d.port);
  c.quorum = j.value("quorum", d.quorum);
  c.round_timeout_ms = j.value("round_timeout_ms", d.round_timeout_ms);
  c.staleness_window = j.value("staleness_window", d.staleness_window);
  c.mode = aggregation_mode_from_string(j.value("aggregation", to_string(d.mode)));
  c.criterion = j.contains("convergence") ? j.at("convergence").get<ConvergenceCriterion>() : d.criterion;
  c.model = j.at("model").get<ModelSpec>();
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.run_seed = j.value("run_seed", d.run_seed);
  c.schema_path = j.at("schema").get<std::string>();
  c.test_path = j.value("test_data", std::string());
  c.event_log = j.value("event_log", std::string());
  c.archive_dir = j.value("archive_dir", std::string());
  c.ui_dir = j.value("ui_dir", std::string());
  c.heartbeat_timeout_ms = j.value("heartbeat_timeout_ms", d.heartbeat_timeout_ms);
  c.tick_ms = j.value("tick_ms", d.tick_ms);
  c.autostart = j.value("autostart", d.autostart);
  c.resume = j.value("resume", d.resume);
  if (c.quorum < 1) throw ConfigError("quorum must be >= 1");
  if (c.round_timeout_ms < 1) throw ConfigError("round_timeout_ms must be >= 1");
  if (c.tick_ms < 1) throw ConfigError("tick_ms must be >= 1");
}

CoordinatorConfig load_coordinator_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open coordinator config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    auto c = j.get<CoordinatorConfig>();
    const auto base = path.parent_path();
    for (auto* p : {&c.schema_path, &c.test_path, &c.event_log, &c.archive_dir, &c.ui_dir}) {
      if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("coordinator config " + path.string() + ": " + e.what());
  }
}

void to_json(nlohmann::json& j, const AucReport& r) {
  j = nlohmann::json{
      {"round", r.round}, {"global_auc", optional_number(r.global_auc)}, {"local_auc", optional_number(r.local_auc)}};
}

void from_json(const nlohmann::json& j, AucReport& r) {
  r.round = j.at("round").get<std::int64_t>();
  r.global_auc = read_optional_number(j, "global_auc");
  r.local_auc = read_optional_number(j, "local_auc");
}

void to_json(nlohmann::json& j, const MetricsSnapshot& s) {
  auto sessions = nlohmann::json::object();
  for (const auto& [id, ss] : s.sessions) {
    sessions[id] = {{"status", ss.status}, {"declared_n_samples", ss.declared_n_samples}};
  }
  j = nlohmann::json{{"round", s.round},
                     {"phase", to_string(s.phase)},
                     {"global_auc", optional_number(s.global_auc)},
                     {"client_auc", s.client_auc},
                     {"cohort_stats", s.cohort_stats},
                     {"sessions", std::move(sessions)},
                     {"feature_dim", s.feature_dim},
                     {"stale_count", s.stale_count},
                     {"n_updates", s.n_updates}};
  if (s.client_auc.empty()) j["client_auc"] = nlohmann::json::object();
  if (s.cohort_stats.empty()) j["cohort_stats"] = nlohmann::json::object();
}

void from_json(const nlohmann::json& j, MetricsSnapshot& s) {
  s.round = j.at("round").get<std::int64_t>();
  s.phase = run_phase_from_string(j.at("phase").get<std::string>());
  s.global_auc = read_optional_number(j, "global_auc");
  s.client_auc = j.at("client_auc").get<std::map<std::string, AucReport>>();
  s.cohort_stats = j.at("cohort_stats").get<std::map<std::string, CohortStats>>();
  s.sessions.clear();
  for (const auto& [id, ss] : j.at("sessions").items()) {
    s.sessions[id] = {ss.at("status").get<std::string>(), ss.at("declared_n_samples").get<std::int64_t>()};
  }
  s.feature_dim = j.at("feature_dim").get<int>();
  s.stale_count = j.at("stale_count").get<std::int64_t>();
  s.n_updates = j.at("n_updates").get<int>();
}

void to_json(nlohmann::json& j, const RegisterRequest& r) {
  j = nlohmann::json{
      {"client_id", r.client_id}, {"declared_n_samples", r.declared_n_samples}, {"cohort_stats", r.stats}};
  if (r.schema_digest) j["schema_digest"] = *r.schema_digest;
}

void from_json(const nlohmann::json& j, RegisterRequest& r) {
  r.client_id = j.at("client_id").get<std::string>();
  r.declared_n_samples = j.at("declared_n_samples").get<std::int64_t>();
  r.stats = j.at("cohort_stats").get<CohortStats>();
  if (j.contains("schema_digest")) r.schema_digest = j.at("schema_digest").get<std::string>();
}

void to_json(nlohmann::json& j, const RegisterResponse& r) {
  j = nlohmann::json{{"token", r.token},
                     {"client_id", r.client_id},
                     {"schema_digest", r.schema_digest},
                     {"model_spec", r.model_spec},
                     {"train_config", r.train_config},
                     {"run_seed", std::to_string(r.run_seed)},
                     {"round", r.round},
                     {"phase", to_string(r.phase)}};
}

void from_json(const nlohmann::json& j, RegisterResponse& r) {
  r.token = j.at("token").get<std::string>();
  r.client_id = j.at("client_id").get<std::string>();
  r.schema_digest = j.at("schema_digest").get<std::string>();
  r.model_spec = j.at("model_spec").get<ModelSpec>();
  r.train_config = j.at("train_config").get<TrainConfig>();
  r.run_seed = std::stoull(j.at("run_seed").get<std::string>());
  r.round = j.at("round").get<std::int64_t>();
  r.phase = run_phase_from_string(j.at("phase").get<std::string>());
}

EventLog::EventLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw ConfigError("cannot open event log " + path.string());
}

void EventLog::append(const std::string& kind, nlohmann::json payload) {
  nlohmann::json line{{"ts", wall_now_ms()}, {"kind", kind}, {"payload", std::move(payload)}};
  out_ << line.dump() << '\n';
  out_.flush();
}

std::vector<nlohmann::json> EventLog::read(const std::filesystem::path& path) {
  std::vector<nlohmann::json> events;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      events.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      spdlog::warn("event log {}: skipping truncated line {}", path.string(), events.size() + 1);
    }
  }
  return events;
}

RoundState replay_round_state(const std::vector<nlohmann::json>& events, RoundState initial,
                              AggregationMode mode, const ConvergenceCriterion& criterion) {
  RoundState state = std::move(initial);
  for (const auto& e : events) {
    const auto kind = e.at("kind").get<std::string>();
    const auto& payload = e.at("payload");
    if (kind == "update") {
      state = accept_update(std::move(state), payload.at("update").get<ModelUpdate>()).state;
    } else if (kind == "advance") {
      state = payload.value("forced", false) ? force_advance(std::move(state), mode, criterion).state
                                             : try_advance(std::move(state), mode, criterion).state;
    }
  }
  return state;
}

Coordinator::Coordinator(CoordinatorConfig config, Clock clock)
    : config_(std::move(config)), clock_(clock ? std::move(clock) : Clock(steady_now_ms)) {
  config_.criterion.validate();
  config_.train.validate();
  const auto schema = load_schema(config_.schema_path);
  schema_digest_ = schema.digest();
  if (config_.model.input_dim != schema.input_dim()) {
    throw ConfigError("model input_dim " + std::to_string(config_.model.input_dim) +
                      " does not match the schema's " + std::to_string(schema.input_dim()) + " selected features");
  }
  if (!config_.test_path.empty()) {
    auto test = ingest_csv(config_.test_path, std::make_shared<const FeatureSchema>(schema), "test");
    if (test.missing_count() != 0) {
      throw ConfigError("server-side test set " + config_.test_path.string() + " must be fully observed");
    }
    test_set_ = select_features(test);
  }
  if (!config_.archive_dir.empty()) std::filesystem::create_directories(config_.archive_dir);

  state_ = make_round_state(init_model(config_.model), config_.quorum, config_.staleness_window);
  if (config_.resume && !config_.event_log.empty() && std::filesystem::exists(config_.event_log)) replay_log();
  if (!config_.event_log.empty()) log_ = std::make_unique<EventLog>(config_.event_log);
  round_started_ms_ = now();
  if (config_.autostart && phase_ == RunPhase::kIdle) {
    phase_ = RunPhase::kRunning;
    started_at_ms_ = wall_now_ms();
    if (log_) log_->append("control", {{"action", "start"}, {"phase", "running"}});
  }
  std::lock_guard lock(mutation_mutex_);
  publish_locked();
}

void Coordinator::replay_log() {
  const auto events = EventLog::read(config_.event_log);
  state_ = replay_round_state(events, std::move(state_), config_.mode, config_.criterion);
  for (const auto& e : events) {
    const auto kind = e.at("kind").get<std::string>();
    const auto& payload = e.at("payload");
    if (kind == "control") {
      phase_ = run_phase_from_string(payload.at("phase").get<std::string>());
      if (phase_ == RunPhase::kRunning && !started_at_ms_) started_at_ms_ = e.value("ts", std::int64_t{0});
    } else if (kind == "advance" && payload.contains("snapshot")) {
      history_.push_back(payload.at("snapshot").get<MetricsSnapshot>());
      last_global_auc_ = history_.back().global_auc;
    }
  }
  if (state_.converged) phase_ = RunPhase::kFinished;
  spdlog::info("resumed from {} events: round {}, phase {}", events.size(), state_.round, to_string(phase_));
}

Coordinator::Session& Coordinator::session_for(const std::string& token) {
  auto it = tokens_.find(token);
  if (it == tokens_.end()) throw auth_error();
  auto& s = sessions_.at(it->second);
  s.last_seen_ms = now();
  return s;
}

RegisterResponse Coordinator::register_client(const RegisterRequest& request) {
  static const std::regex kIdPattern("[A-Za-z0-9_.-]{1,64}");
  if (!std::regex_match(request.client_id, kIdPattern)) {
    throw ProtocolError(400, "bad_client_id", "client_id must match [A-Za-z0-9_.-]{1,64}");
  }
  if (request.declared_n_samples < 1) throw ProtocolError(400, "bad_request", "declared_n_samples must be >= 1");
  try {
    request.stats.validate();
  } catch (const SchemaError& e) {
    throw ProtocolError(400, "bad_cohort_stats", e.what());
  }
  if (request.stats.n != request.declared_n_samples) {
    throw ProtocolError(400, "bad_cohort_stats", "cohort_stats.n must equal declared_n_samples");
  }
  if (request.schema_digest && *request.schema_digest != hex64(schema_digest_)) {
    throw ProtocolError(409, "schema_mismatch", "client schema digest does not match the coordinator's");
  }

  std::lock_guard lock(mutation_mutex_);
  auto& s = sessions_[request.client_id];
  if (!s.token.empty()) tokens_.erase(s.token);
  const bool fresh = s.client_id.empty();
  s.client_id = request.client_id;
  s.token = random_token();
  if (fresh) s.registered_at_ms = now();
  s.last_seen_ms = now();
  s.declared_n_samples = request.declared_n_samples;
  s.stats = request.stats;
  tokens_[s.token] = s.client_id;
  if (log_) log_->append("register", {{"client_id", s.client_id}, {"declared_n_samples", s.declared_n_samples}});
  spdlog::info("client {} {} (n={})", s.client_id, fresh ? "registered" : "re-registered", s.declared_n_samples);

  RegisterResponse r;
  r.token = s.token;
  r.client_id = s.client_id;
  r.schema_digest = hex64(schema_digest_);
  r.model_spec = config_.model;
  r.train_config = config_.train;
  r.run_seed = config_.run_seed;
  r.round = state_.round;
  r.phase = phase_;
  return r;
}

ModelView Coordinator::fetch_model(const std::optional<std::string>& token) {
  if (token) {
    std::lock_guard lock(mutation_mutex_);
    auto& s = session_for(*token);
    if (phase_ == RunPhase::kFinished) saw_finish_.insert(s.client_id);
  }
  std::shared_ptr<const ModelView> view;
  {
    std::lock_guard lock(snapshot_mutex_);
    view = model_view_;
  }
  if (view->phase == RunPhase::kIdle) throw ProtocolError(503, "not_ready", "run has not been started");
  return *view;
}

SubmitResult Coordinator::submit_update(const std::string& token, ModelUpdate update) {
  std::lock_guard lock(mutation_mutex_);
  auto& s = session_for(token);
  if (update.client_id != s.client_id) {
    throw ProtocolError(401, "client_mismatch", "update client_id does not match the session");
  }
  try {
    update.validate();
  } catch (const UsageError& e) {
    throw ProtocolError(400, "bad_update", e.what());
  }
  nlohmann::json logged = update;
  AcceptResult res;
  try {
    res = accept_update(std::move(state_), std::move(update));
  } catch (const AggregationError& e) {
    throw ProtocolError(400, "aggregation", e.what());
  }
  state_ = std::move(res.state);
  if (log_) {
    log_->append("update", {{"update", std::move(logged)}, {"outcome", res.admitted ? "accepted" : "stale"}});
  }
  SubmitResult out{res.admitted ? SubmitStatus::kAccepted : SubmitStatus::kStale, state_.round};
  if (res.admitted && phase_ == RunPhase::kRunning) maybe_advance_locked(false);
  return out;
}

RunControl Coordinator::heartbeat(const std::string& token, const std::optional<AucReport>& report) {
  std::lock_guard lock(mutation_mutex_);
  auto& s = session_for(token);
  if (report) client_auc_[s.client_id] = *report;
  return {phase_, state_.round, started_at_ms_};
}

RunControl Coordinator::control(ControlAction action) {
  std::lock_guard lock(mutation_mutex_);
  const auto from = phase_;
  auto to = from;
  switch (action) {
    case ControlAction::kStart:
      if (from == RunPhase::kIdle) to = RunPhase::kRunning;
      break;
    case ControlAction::kPause:
      if (from == RunPhase::kRunning) to = RunPhase::kPaused;
      break;
    case ControlAction::kResume:
      if (from == RunPhase::kPaused) to = RunPhase::kRunning;
      break;
    case ControlAction::kStop:
      if (from == RunPhase::kRunning || from == RunPhase::kPaused) to = RunPhase::kFinished;
      break;
  }
  if (to == from) {
    throw ProtocolError(409, "illegal_transition",
                        "cannot " + to_string(action) + " while " + to_string(from));
  }
  phase_ = to;
  if (action == ControlAction::kStart) started_at_ms_ = wall_now_ms();
  if (to == RunPhase::kRunning) round_started_ms_ = now();
  if (log_) log_->append("control", {{"action", to_string(action)}, {"phase", to_string(to)}});
  spdlog::info("run {} -> {}", to_string(from), to_string(to));
  publish_locked();
  if (to == RunPhase::kRunning) maybe_advance_locked(false);
  return {phase_, state_.round, started_at_ms_};
}

bool Coordinator::tick() {
  std::lock_guard lock(mutation_mutex_);
  if (phase_ != RunPhase::kRunning) return false;
  if (maybe_advance_locked(false)) return true;
  if (now() - round_started_ms_ < config_.round_timeout_ms) return false;
  if (state_.received.empty()) {
    spdlog::warn("round {} deadline passed with no updates; extending", state_.round);
    round_started_ms_ = now();
    return false;
  }
  return maybe_advance_locked(true);
}

bool Coordinator::maybe_advance_locked(bool deadline_path) {
  const int n_updates = static_cast<int>(state_.received.size());
  auto adv = deadline_path ? force_advance(std::move(state_), config_.mode, config_.criterion)
                           : try_advance(std::move(state_), config_.mode, config_.criterion);
  state_ = std::move(adv.state);
  if (!adv.advanced) return false;
  after_advance_locked(adv, n_updates, deadline_path);
  return true;
}

void Coordinator::after_advance_locked(const AdvanceResult& adv, int n_updates, bool forced) {
  round_started_ms_ = now();
  if (test_set_) {
    const Eigen::VectorXd scores = predict_batch(state_.global_weights, config_.model, test_set_->features);
    last_global_auc_ = auc(scores, test_set_->labels);
    if (!config_.archive_dir.empty()) {
      std::ofstream out(config_.archive_dir / ("scores_round_" + std::to_string(state_.round) + ".csv"));
      out << "score,label\n";
      for (Eigen::Index i = 0; i < scores.size(); ++i) {
        out << format_double17(scores(i)) << ',' << static_cast<int>(test_set_->labels(i)) << '\n';
      }
    }
  }
  if (adv.converged) phase_ = RunPhase::kFinished;
  history_.push_back(build_snapshot_locked(n_updates));
  if (log_) {
    log_->append("advance", {{"round", state_.round},
                             {"forced", forced},
                             {"n_updates", n_updates},
                             {"delta", adv.delta},
                             {"snapshot", history_.back()}});
  }
  spdlog::info("round {} aggregated from {} update(s){}{}", state_.round, n_updates, forced ? " at deadline" : "",
               adv.converged ? "; run finished" : "");
  publish_locked();
}

MetricsSnapshot Coordinator::build_snapshot_locked(int n_updates) const {
  MetricsSnapshot s;
  s.round = state_.round;
  s.phase = phase_;
  s.global_auc = last_global_auc_;
  s.client_auc = client_auc_;
  const auto t = now();
  for (const auto& [id, session] : sessions_) {
    s.cohort_stats[id] = session.stats;
    s.sessions[id] = {t - session.last_seen_ms > config_.heartbeat_timeout_ms ? "lapsed" : "active",
                      session.declared_n_samples};
  }
  s.feature_dim = config_.model.input_dim;
  s.stale_count = state_.stale_count;
  s.n_updates = n_updates;
  return s;
}

void Coordinator::publish_locked() {
  auto view = std::make_shared<const ModelView>(ModelView{state_.round, phase_, state_.global_weights});
  auto history = std::make_shared<const std::vector<MetricsSnapshot>>(history_);
  std::lock_guard lock(snapshot_mutex_);
  model_view_ = std::move(view);
  history_view_ = std::move(history);
}

MetricsSnapshot Coordinator::metrics() const {
  std::lock_guard lock(mutation_mutex_);
  return build_snapshot_locked(0);
}

std::vector<MetricsSnapshot> Coordinator::metrics_history() const {
  std::lock_guard lock(snapshot_mutex_);
  return *history_view_;
}

RunControl Coordinator::run_control() const {
  std::lock_guard lock(mutation_mutex_);
  return {phase_, state_.round, started_at_ms_};
}

RoundState Coordinator::round_state() const {
  std::lock_guard lock(mutation_mutex_);
  return state_;
}

std::int64_t Coordinator::round_started_ms() const {
  std::lock_guard lock(mutation_mutex_);
  return round_started_ms_;
}

bool Coordinator::all_sessions_saw_finish() const {
  std::lock_guard lock(mutation_mutex_);
  if (phase_ != RunPhase::kFinished) return false;
  const auto t = now();
  for (const auto& [id, s] : sessions_) {
    if (t - s.last_seen_ms > config_.heartbeat_timeout_ms) continue;
    if (!saw_finish_.contains(id)) return false;
  }
  return true;
}

}  // namespace fedtab
