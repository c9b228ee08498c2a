#include "fedtab/client.hpp"

#include <chrono>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "fedtab/metrics.hpp"
#include "fedtab/privacy.hpp"
#include "fedtab/wire.hpp"

namespace fedtab {

namespace {

using privacy::MessageKind;

void sleep_ms(int ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); }

ProtocolError error_from_response(int status, const std::string& body) {
  try {
    auto j = nlohmann::json::parse(body);
    const auto& e = j.at("error");
    return ProtocolError(status, e.at("code").get<std::string>(), e.at("message").get<std::string>());
  } catch (const nlohmann::json::exception&) {
    return ProtocolError(status, "http_" + std::to_string(status), body);
  }
}

ModelView model_view_from_json(const nlohmann::json& j) {
  ModelView v;
  v.round = j.at("round").get<std::int64_t>();
  v.phase = run_phase_from_string(j.at("phase").get<std::string>());
  v.weights = j.at("weights").get<ParameterVector>();
  return v;
}

SubmitResult submit_result_from_json(const nlohmann::json& j) {
  return {j.at("status").get<std::string>() == "accepted" ? SubmitStatus::kAccepted : SubmitStatus::kStale,
          j.at("round").get<std::int64_t>()};
}

nlohmann::json heartbeat_body(const std::string& token, const std::optional<AucReport>& report) {
  nlohmann::json body{{"token", token}};
  if (report) body["report"] = *report;
  return body;
}

class HttpApi : public CoordinatorApi {
 public:
  HttpApi(const std::string& base_url, int timeout_ms) : client_(base_url) {
    const auto t = std::chrono::milliseconds(timeout_ms);
    client_.set_connection_timeout(t);
    client_.set_read_timeout(t);
    client_.set_write_timeout(t);
  }

  RegisterResponse register_client(const RegisterRequest& request) override {
    return post("/v1/register", request, MessageKind::kRegisterRequest, MessageKind::kRegisterResponse)
        .get<RegisterResponse>();
  }

  ModelView fetch_model(const std::string& token) override {
    auto res = client_.Get("/v1/model", {{"Authorization", "Bearer " + token}});
    return model_view_from_json(check(res, MessageKind::kModelResponse));
  }

  SubmitResult submit_update(const std::string& token, const ModelUpdate& update) override {
    return submit_result_from_json(post("/v1/update", {{"token", token}, {"update", update}},
                                        MessageKind::kUpdateRequest, MessageKind::kUpdateResponse));
  }

  RunControl heartbeat(const std::string& token, const std::optional<AucReport>& report) override {
    auto j = post("/v1/heartbeat", heartbeat_body(token, report), MessageKind::kHeartbeatRequest,
                  MessageKind::kHeartbeatResponse);
    return {run_phase_from_string(j.at("phase").get<std::string>()), j.at("round").get<std::int64_t>(), {}};
  }

 private:
  nlohmann::json post(const char* path, const nlohmann::json& body, MessageKind request, MessageKind response) {
    privacy::validate_message(request, body);
    return check(client_.Post(path, body.dump(), "application/json"), response);
  }

  nlohmann::json check(const httplib::Result& res, MessageKind kind) {
    if (!res) throw TransientError("coordinator unreachable: " + httplib::to_string(res.error()));
    if (res->status >= 500 && res->status != 503) {
      throw TransientError("coordinator returned " + std::to_string(res->status));
    }
    if (res->status >= 400) throw error_from_response(res->status, res->body);
    auto j = nlohmann::json::parse(res->body);
    privacy::validate_message(kind, j);
    return j;
  }

  httplib::Client client_;
};

class DirectApi : public CoordinatorApi {
 public:
  explicit DirectApi(Coordinator& c) : c_(c) {}

  RegisterResponse register_client(const RegisterRequest& request) override {
    nlohmann::json in = request;
    privacy::validate_message(MessageKind::kRegisterRequest, in);
    nlohmann::json out = c_.register_client(in.get<RegisterRequest>());
    privacy::validate_message(MessageKind::kRegisterResponse, out);
    return out.get<RegisterResponse>();
  }

  ModelView fetch_model(const std::string& token) override {
    auto v = c_.fetch_model(token);
    nlohmann::json out{{"round", v.round},
                       {"phase", to_string(v.phase)},
                       {"feature_dim", c_.config().model.input_dim},
                       {"weights", v.weights}};
    privacy::validate_message(MessageKind::kModelResponse, out);
    return model_view_from_json(out);
  }

  SubmitResult submit_update(const std::string& token, const ModelUpdate& update) override {
    nlohmann::json in{{"token", token}, {"update", update}};
    privacy::validate_message(MessageKind::kUpdateRequest, in);
    auto r = c_.submit_update(in.at("token").get<std::string>(), in.at("update").get<ModelUpdate>());
    return r;
  }

  RunControl heartbeat(const std::string& token, const std::optional<AucReport>& report) override {
    privacy::validate_message(MessageKind::kHeartbeatRequest, heartbeat_body(token, report));
    return c_.heartbeat(token, report);
  }

 private:
  Coordinator& c_;
};

class Backoff {
 public:
  Backoff(const ClientConfig& c, const std::atomic<bool>* stop) : config_(c), stop_(stop) { reset(); }

  void reset() {
    delay_ms_ = config_.initial_backoff_ms;
    failures_ = 0;
  }

  // Sleeps before the next retry; throws once the retry budget is exhausted.
  void wait(const std::string& what) {
    if (++failures_ > config_.max_connect_attempts) {
      throw TransientError(what + " (gave up after " + std::to_string(failures_ - 1) + " retries)");
    }
    spdlog::warn("{}; retrying in {} ms", what, delay_ms_);
    for (int slept = 0; slept < delay_ms_ && !stopped(); slept += 10) sleep_ms(std::min(10, delay_ms_ - slept));
    delay_ms_ = std::min(config_.max_backoff_ms, delay_ms_ * 2);
  }

  bool stopped() const { return stop_ && stop_->load(); }

 private:
  const ClientConfig& config_;
  const std::atomic<bool>* stop_;
  int delay_ms_ = 0;
  int failures_ = 0;
};

struct StopRequested {};

}  // namespace

void from_json(const nlohmann::json& j, ClientConfig& c) {
  ClientConfig d;
  c.client_id = j.at("client_id").get<std::string>();
  c.coordinator_url = j.value("coordinator_url", d.coordinator_url);
  c.data_path = j.at("data").get<std::string>();
  c.schema_path = j.at("schema").get<std::string>();
  c.impute = impute_strategy_from_string(j.value("impute", std::string("mean")));
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  c.test_path = j.value("test_data", std::string());
  c.heartbeat_interval_ms = j.value("heartbeat_interval_ms", d.heartbeat_interval_ms);
  c.poll_interval_ms = j.value("poll_interval_ms", d.poll_interval_ms);
  c.initial_backoff_ms = j.value("initial_backoff_ms", d.initial_backoff_ms);
  c.max_backoff_ms = j.value("max_backoff_ms", d.max_backoff_ms);
  c.max_connect_attempts = j.value("max_connect_attempts", d.max_connect_attempts);
  if (c.poll_interval_ms < 1 || c.initial_backoff_ms < 1 || c.max_backoff_ms < c.initial_backoff_ms) {
    throw ConfigError("client intervals must be positive and max_backoff_ms >= initial_backoff_ms");
  }
}

ClientConfig load_client_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open client config " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    auto c = j.get<ClientConfig>();
    const auto base = path.parent_path();
    for (auto* p : {&c.data_path, &c.schema_path, &c.test_path}) {
      if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("client config " + path.string() + ": " + e.what());
  }
}

std::unique_ptr<CoordinatorApi> make_http_api(const std::string& base_url, int timeout_ms) {
  return std::make_unique<HttpApi>(base_url, timeout_ms);
}

std::unique_ptr<CoordinatorApi> make_direct_api(Coordinator& coordinator) {
  return std::make_unique<DirectApi>(coordinator);
}

LocalData local_pipeline(const ClientConfig& config) {
  LocalData d;
  d.schema = std::make_shared<const FeatureSchema>(load_schema(config.schema_path));
  auto cohort = ingest_csv(config.data_path, d.schema, config.client_id);
  d.prepared = prepare_local(cohort, config.impute);
  if (!config.test_path.empty()) {
    d.test = prepare_eval(ingest_csv(config.test_path, d.schema, "test"), d.prepared.policy);
  }
  return d;
}

ClientRunSummary run_client(const ClientConfig& config, CoordinatorApi& api, const std::atomic<bool>* stop) {
  ClientRunSummary summary;
  const LocalData local = local_pipeline(config);
  const auto& train = local.prepared.train;
  Backoff backoff(config, stop);

  auto retrying = [&](auto&& call, const char* what) {
    for (;;) {
      if (backoff.stopped()) throw StopRequested{};
      try {
        auto r = call();
        backoff.reset();
        return r;
      } catch (const TransientError& e) {
        backoff.wait(std::string(what) + ": " + e.what());
      }
    }
  };

  RegisterRequest request{config.client_id, train.rows(), local.prepared.stats, hex64(local.schema->digest())};
  RegisterResponse session;
  auto do_register = [&] {
    session = retrying([&] { return api.register_client(request); }, "register");
    if (session.schema_digest != hex64(local.schema->digest())) {
      throw ConfigError("schema digest mismatch: coordinator " + session.schema_digest + ", local " +
                        hex64(local.schema->digest()));
    }
    if (session.model_spec.input_dim != train.cols()) {
      throw ConfigError("coordinator model expects " + std::to_string(session.model_spec.input_dim) +
                        " features, local pipeline produced " + std::to_string(train.cols()));
    }
  };

  try {
    do_register();
    const TrainConfig train_config = config.train.value_or(session.train_config);
    std::int64_t trained_round = -1;
    auto last_heartbeat = std::chrono::steady_clock::now();

    for (;;) {
      if (backoff.stopped()) throw StopRequested{};
      ModelView view;
      try {
        view = retrying([&] { return api.fetch_model(session.token); }, "fetch model");
      } catch (const ProtocolError& e) {
        if (e.status() == 503) {
          sleep_ms(config.poll_interval_ms);
          continue;
        }
        if (e.status() == 401) {
          do_register();
          continue;
        }
        throw;
      }
      if (view.phase == RunPhase::kFinished) break;

      std::optional<AucReport> report;
      if (view.round != trained_round) {
        ModelUpdate update;
        update.client_id = config.client_id;
        update.round = view.round;
        update.weights = train_local(view.weights, session.model_spec, train_config, train,
                                     client_round_seed(session.run_seed, config.client_id, view.round));
        update.n_samples = train.rows();
        update.local_epochs_used = train_config.local_epochs;

        SubmitResult result;
        try {
          result = retrying([&] { return api.submit_update(session.token, update); }, "submit update");
        } catch (const ProtocolError& e) {
          if (e.status() != 401) throw;
          do_register();
          result = retrying([&] { return api.submit_update(session.token, update); }, "submit update");
        }
        ++summary.updates_submitted;
        summary.submitted.push_back(update);
        summary.last_round = view.round;
        trained_round = view.round;
        if (result.status == SubmitStatus::kStale) {
          ++summary.stale_responses;
          spdlog::info("update for round {} was stale (coordinator at {})", view.round, result.round);
        }

        if (local.test) {
          AucReport r{view.round, std::nullopt, std::nullopt};
          try {
            r.global_auc = evaluate(view.weights, session.model_spec, *local.test).auc;
            r.local_auc = evaluate(update.weights, session.model_spec, *local.test).auc;
          } catch (const MetricError&) {
            // one-class test set: leave the report empty
          }
          report = r;
        }
      }

      const auto now = std::chrono::steady_clock::now();
      if (report || now - last_heartbeat >= std::chrono::milliseconds(config.heartbeat_interval_ms)) {
        try {
          retrying([&] { return api.heartbeat(session.token, report); }, "heartbeat");
        } catch (const ProtocolError& e) {
          if (e.status() != 401) throw;
        }
        last_heartbeat = now;
      }
      if (!report) sleep_ms(config.poll_interval_ms);
    }
    spdlog::info("run finished; submitted {} update(s)", summary.updates_submitted);
    summary.exit_code = 0;
  } catch (const StopRequested&) {
    summary.exit_code = 1;
  } catch (const ConfigError& e) {
    spdlog::error("fatal configuration error: {}", e.what());
    summary.exit_code = 2;
  } catch (const ProtocolError& e) {
    spdlog::error("fatal protocol error ({} {}): {}", e.status(), e.code(), e.what());
    summary.exit_code = e.code() == "schema_mismatch" ? 2 : 3;
  } catch (const TransientError& e) {
    spdlog::error("coordinator unreachable: {}", e.what());
    summary.exit_code = 4;
  }
  return summary;
}

}  // namespace fedtab
