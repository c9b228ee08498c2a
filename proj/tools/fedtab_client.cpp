#include <atomic>
#include <csignal>

#include <CLI11.hpp>

#include "fedtab/client.hpp"
#include "fedtab/errors.hpp"
#include "fedtab/log.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedtab hospital client"};
  std::string config_path;
  app.add_option("--config", config_path, "client config JSON")->required();
  CLI11_PARSE(app, argc, argv);

  fedtab::init_logging("client");
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    const auto config = fedtab::load_client_config(config_path);
    auto api = fedtab::make_http_api(config.coordinator_url);
    const auto summary = fedtab::run_client(config, *api, &g_stop);
    spdlog::info("client {} done: {} updates, {} stale, exit {}", config.client_id, summary.updates_submitted,
                 summary.stale_responses, summary.exit_code);
    return summary.exit_code;
  } catch (const fedtab::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}
