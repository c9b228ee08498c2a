#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "fedtab/coordinator.hpp"
#include "fedtab/errors.hpp"
#include "fedtab/log.hpp"
#include "fedtab/server.hpp"
#include "fedtab/wire.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void write_json(const std::string& path, const nlohmann::json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
  }
  std::rename(tmp.c_str(), path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedtab coordinator"};
  std::string config_path, port_file, final_model, history_path;
  bool exit_on_finish = false;
  int linger_ms = 10000;
  app.add_option("--config", config_path, "coordinator config JSON")->required();
  app.add_option("--port-file", port_file, "write the bound port here once listening");
  app.add_option("--final-model", final_model, "write the final global model here on finish");
  app.add_option("--history", history_path, "write the per-round metrics history here on finish");
  app.add_flag("--exit-on-finish", exit_on_finish, "exit once the run has finished");
  app.add_option("--linger-ms", linger_ms, "after finishing, wait this long for clients to observe it");
  CLI11_PARSE(app, argc, argv);

  fedtab::init_logging("coordinator");
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    auto config = fedtab::load_coordinator_config(config_path);
    fedtab::Coordinator coordinator(config);
    fedtab::CoordinatorServer server(coordinator);
    const int port = server.start(config.host, config.port);
    spdlog::info("listening on {}:{}", config.host, port);
    if (!port_file.empty()) write_json(port_file, port);

    std::optional<std::chrono::steady_clock::time_point> finished_at;
    while (!g_stop) {
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      if (coordinator.run_control().phase != fedtab::RunPhase::kFinished) continue;
      if (!finished_at) {
        finished_at = std::chrono::steady_clock::now();
        const auto view = coordinator.fetch_model();
        if (!final_model.empty()) {
          write_json(final_model, {{"round", view.round}, {"weights", view.weights}});
        }
        if (!history_path.empty()) write_json(history_path, {{"snapshots", coordinator.metrics_history()}});
        spdlog::info("run finished at round {}", view.round);
      }
      if (!exit_on_finish) continue;
      const auto waited = std::chrono::steady_clock::now() - *finished_at;
      if (coordinator.all_sessions_saw_finish() || waited > std::chrono::milliseconds(linger_ms)) break;
    }
    server.stop();
    return 0;
  } catch (const fedtab::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("fatal: {}", e.what());
    return 1;
  }
}
