#include "fedtab/server.hpp"

#include <chrono>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "fedtab/privacy.hpp"
#include "fedtab/wire.hpp"

namespace fedtab {

namespace {

using privacy::MessageKind;

void send_json(httplib::Response& res, int status, const nlohmann::json& body, MessageKind kind) {
  if (auto err = privacy::check_message(kind, body)) {
    spdlog::error("outgoing {} failed the whitelist: {}", privacy::name(kind), *err);
    res.status = 500;
    res.set_content(R"({"error":{"code":"internal","message":"response failed whitelist"}})", "application/json");
    return;
  }
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"error", {{"code", code}, {"message", message}}}}, MessageKind::kErrorResponse);
}

nlohmann::json parse_body(const httplib::Request& req, MessageKind kind) {
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception&) {
    throw ProtocolError(400, "bad_json", "request body is not valid JSON");
  }
  privacy::validate_message(kind, body);
  return body;
}

std::optional<std::string> bearer_token(const httplib::Request& req) {
  const auto header = req.get_header_value("Authorization");
  constexpr std::string_view kPrefix = "Bearer ";
  if (header.size() > kPrefix.size() && header.compare(0, kPrefix.size(), kPrefix) == 0) {
    return header.substr(kPrefix.size());
  }
  return std::nullopt;
}

nlohmann::json control_json(const RunControl& rc) {
  return {{"phase", to_string(rc.phase)},
          {"round", rc.round},
          {"started_at_ms", rc.started_at_ms ? nlohmann::json(*rc.started_at_ms) : nlohmann::json(nullptr)}};
}

template <typename Handler>
httplib::Server::Handler guarded(Handler handler) {
  return [handler](const httplib::Request& req, httplib::Response& res) {
    try {
      handler(req, res);
    } catch (const ProtocolError& e) {
      send_error(res, e.status(), e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "bad_request", e.what());
    } catch (const Error& e) {
      send_error(res, 400, "bad_request", e.what());
    } catch (const std::exception& e) {
      spdlog::error("{} {} failed: {}", req.method, req.path, e.what());
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

CoordinatorServer::CoordinatorServer(Coordinator& coordinator)
    : coordinator_(coordinator), http_(std::make_unique<httplib::Server>()) {
  register_routes();
}

CoordinatorServer::~CoordinatorServer() { stop(); }

void CoordinatorServer::register_routes() {
  auto& c = coordinator_;

  http_->set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  http_->Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
    res.status = 204;
  });

  http_->Post("/v1/register", guarded([&c](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, MessageKind::kRegisterRequest);
    auto response = c.register_client(body.get<RegisterRequest>());
    send_json(res, 200, response, MessageKind::kRegisterResponse);
  }));

  http_->Get("/v1/model", guarded([&c](const httplib::Request& req, httplib::Response& res) {
    auto view = c.fetch_model(bearer_token(req));
    send_json(res, 200,
              {{"round", view.round},
               {"phase", to_string(view.phase)},
               {"feature_dim", c.config().model.input_dim},
               {"weights", view.weights}},
              MessageKind::kModelResponse);
  }));

  http_->Post("/v1/update", guarded([&c](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, MessageKind::kUpdateRequest);
    auto result = c.submit_update(body.at("token").get<std::string>(), body.at("update").get<ModelUpdate>());
    send_json(res, 200,
              {{"status", result.status == SubmitStatus::kAccepted ? "accepted" : "stale"}, {"round", result.round}},
              MessageKind::kUpdateResponse);
  }));

  http_->Post("/v1/heartbeat", guarded([&c](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, MessageKind::kHeartbeatRequest);
    std::optional<AucReport> report;
    if (body.contains("report")) report = body.at("report").get<AucReport>();
    auto rc = c.heartbeat(body.at("token").get<std::string>(), report);
    send_json(res, 200, {{"round", rc.round}, {"phase", to_string(rc.phase)}}, MessageKind::kHeartbeatResponse);
  }));

  http_->Get("/v1/metrics", guarded([&c](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, c.metrics(), MessageKind::kMetricsResponse);
  }));

  http_->Get("/v1/metrics/history", guarded([&c](const httplib::Request&, httplib::Response& res) {
    nlohmann::json snapshots = nlohmann::json::array();
    for (const auto& s : c.metrics_history()) snapshots.push_back(s);
    send_json(res, 200, {{"snapshots", std::move(snapshots)}}, MessageKind::kHistoryResponse);
  }));

  http_->Post("/v1/control", guarded([&c](const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, MessageKind::kControlRequest);
    auto rc = c.control(control_action_from_string(body.at("action").get<std::string>()));
    send_json(res, 200, control_json(rc), MessageKind::kControlResponse);
  }));

  http_->Get("/v1/healthz", guarded([&c](const httplib::Request&, httplib::Response& res) {
    auto rc = c.run_control();
    send_json(res, 200, {{"status", "ok"}, {"phase", to_string(rc.phase)}, {"round", rc.round}},
              MessageKind::kHealthResponse);
  }));

  if (!c.config().ui_dir.empty()) {
    if (!http_->set_mount_point("/ui", c.config().ui_dir.string())) {
      spdlog::warn("ui_dir {} does not exist; /ui/ disabled", c.config().ui_dir.string());
    }
  }
}

int CoordinatorServer::start(const std::string& host, int port) {
  if (running_) return port_;
  port_ = port == 0 ? http_->bind_to_any_port(host) : (http_->bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  running_ = true;
  listener_ = std::thread([this] { http_->listen_after_bind(); });
  driver_ = std::thread([this] {
    const auto period = std::chrono::milliseconds(coordinator_.config().tick_ms);
    while (running_) {
      coordinator_.tick();
      std::this_thread::sleep_for(period);
    }
  });
  http_->wait_until_ready();
  spdlog::info("coordinator listening on {}:{}", host, port_);
  return port_;
}

void CoordinatorServer::stop() {
  if (!running_.exchange(false)) return;
  http_->stop();
  if (listener_.joinable()) listener_.join();
  if (driver_.joinable()) driver_.join();
}

}  // namespace fedtab
