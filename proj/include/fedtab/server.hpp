#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include "fedtab/coordinator.hpp"

namespace httplib {
class Server;
}

namespace fedtab {

// HTTP/1.1 + JSON front end for a Coordinator, plus the round-driver thread.
//
//   POST /v1/register          GET  /v1/model
//   POST /v1/update            POST /v1/heartbeat
//   GET  /v1/metrics           GET  /v1/metrics/history
//   POST /v1/control           GET  /v1/healthz
//   GET  /ui/...               (static dashboard assets when ui_dir is set)
//
// Every request and response body is checked against the privacy whitelist.
class CoordinatorServer {
 public:
  explicit CoordinatorServer(Coordinator& coordinator);
  ~CoordinatorServer();

  CoordinatorServer(const CoordinatorServer&) = delete;
  CoordinatorServer& operator=(const CoordinatorServer&) = delete;

  // Binds and starts serving on background threads. Returns the bound port.
  int start(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

 private:
  void register_routes();

  Coordinator& coordinator_;
  std::unique_ptr<httplib::Server> http_;
  std::thread listener_;
  std::thread driver_;
  std::atomic<bool> running_{false};
  int port_ = 0;
};

}  // namespace fedtab
