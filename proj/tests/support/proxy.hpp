#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

namespace fedtab::testing {

struct Exchange {
  std::string method;
  std::string path;
  int status = 0;
  std::string request_body;
  std::string response_body;
};

// HTTP pass-through that records every request and response body it forwards.
class RecordingProxy {
 public:
  RecordingProxy(std::string upstream_host, int upstream_port)
      : upstream_(std::move(upstream_host), upstream_port) {
    upstream_.set_read_timeout(30, 0);
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
      std::string target = req.path;
      if (!req.params.empty()) target += "?" + httplib::detail::params_to_query_str(req.params);
      httplib::Headers headers;
      if (req.has_header("Authorization")) headers.emplace("Authorization", req.get_header_value("Authorization"));
      httplib::Result r = req.method == "POST"
                              ? upstream_.Post(target, headers, req.body, "application/json")
                              : upstream_.Get(target, headers);
      Exchange ex{req.method, req.path, 0, req.body, {}};
      if (!r) {
        res.status = 502;
      } else {
        res.status = r->status;
        res.set_content(r->body, r->get_header_value("Content-Type").empty() ? "application/json"
                                                                                : r->get_header_value("Content-Type"));
        ex.status = r->status;
        ex.response_body = r->body;
      }
      std::lock_guard lock(mutex_);
      log_.push_back(std::move(ex));
    };
    server_.Get(".*", forward);
    server_.Post(".*", forward);
  }

  ~RecordingProxy() { stop(); }

  int start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::vector<Exchange> exchanges() const {
    std::lock_guard lock(mutex_);
    return log_;
  }

 private:
  httplib::Client upstream_;
  httplib::Server server_;
  std::thread thread_;
  mutable std::mutex mutex_;
  std::vector<Exchange> log_;
  int port_ = 0;
};

}  // namespace fedtab::testing
