#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fedtab/errors.hpp"
#include "fedtab/experiment.hpp"
#include "fedtab/log.hpp"
#include "fedtab/process.hpp"
#include "fedtab/synth.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"fedtab experiment runner"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run every setting of a plan and write the report");
  std::string plan_path, mode = "simulated", out_dir, bin_dir;
  int timeout_ms = 300000;
  run->add_option("--plan", plan_path, "plan JSON")->required();
  run->add_option("--mode", mode, "simulated or networked")->check(CLI::IsMember({"simulated", "networked"}));
  run->add_option("--out", out_dir, "report directory")->required();
  run->add_option("--bin-dir", bin_dir, "directory with fedtab-coordinator and fedtab-client");
  run->add_option("--timeout-ms", timeout_ms, "per-seed limit for networked runs");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic city to disk");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 1;
  gen->add_option("--config", gen_config, "generator config JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);
  fedtab::init_logging("exp");

  try {
    if (*gen) {
      std::ifstream in(gen_config);
      if (!in) throw fedtab::ConfigError("cannot open " + gen_config);
      nlohmann::json j;
      in >> j;
      auto config = j.get<fedtab::GenConfig>();
      config.validate();
      const auto city = fedtab::generate_synthetic_city(config, j.value("seed", gen_seed));
      fs::create_directories(gen_out);
      fedtab::write_city(city, gen_out);
      spdlog::info("wrote {} hospitals and a test cohort to {}", city.hospitals.size(), gen_out);
      return 0;
    }

    const auto plan = fedtab::load_plan(plan_path);
    fs::create_directories(out_dir);
    fedtab::NetworkOptions net;
    net.bin_dir = bin_dir.empty() ? fedtab::executable_dir() : fs::path(bin_dir);
    net.work_dir = fs::path(out_dir) / "work";
    net.timeout_ms = timeout_ms;
    const auto report = fedtab::run_experiment(plan, fedtab::execution_mode_from_string(mode), net);
    fedtab::emit_report(report, fedtab::ReportFormat::kJson, fs::path(out_dir) / "report.json");
    fedtab::emit_report(report, fedtab::ReportFormat::kCsv, fs::path(out_dir) / "report.csv");
    fedtab::emit_report(report, fedtab::ReportFormat::kMarkdown, fs::path(out_dir) / "report.md");
    fedtab::emit_report(report, fedtab::ReportFormat::kMarkdown, std::cout);
    return 0;
  } catch (const fedtab::ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
