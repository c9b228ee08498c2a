#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtab/data.hpp"
#include "fedtab/fed.hpp"
#include "fedtab/synth.hpp"

namespace fedtab {

enum class ExecutionMode { kSimulated, kNetworked };

ExecutionMode execution_mode_from_string(const std::string& name);

// Local baselines per hospital, one federated run, one centralized run, repeated per seed,
// all scored on the same held-out test cohort of that seed.
struct ExperimentPlan {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  GenConfig gen;
  ModelKind model_kind = ModelKind::kMlp3;
  std::array<int, 2> hidden_dims{32, 16};
  ImputeStrategy impute = ImputeStrategy::kMean;
  // Local-only and centralized training; local_epochs is the total epoch budget.
  TrainConfig train{0.05, 20, 64, 1e-4};
  // Per-round client training for the federated setting.
  TrainConfig fed_train{0.05, 3, 64, 1e-4};
  int rounds = 30;
  AggregationMode aggregation = AggregationMode::kPlainMean;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);
ExperimentPlan load_plan(const std::filesystem::path& path);

struct ReportRow {
  std::string setting;
  double auc_mean = 0.0;
  std::optional<double> auc_std;
  std::optional<double> auc_stderr;
  std::int64_t n_train = 0;
  double n_pos_rate = 0.0;
  std::vector<double> per_seed_auc;

  bool operator==(const ReportRow&) const = default;
};

void to_json(nlohmann::json& j, const ReportRow& r);
void from_json(const nlohmann::json& j, ReportRow& r);

struct Report {
  std::vector<ReportRow> rows;  // local A..E, federated, centralized

  const ReportRow& row(const std::string& setting) const;
};

std::string local_setting_name(const std::string& hospital_id);
inline constexpr const char* kFederatedSetting = "Federated Training";
inline constexpr const char* kCentralizedSetting = "Centralized Training";

// Options for launching coordinator and client processes.
struct NetworkOptions {
  std::filesystem::path bin_dir;   // holds fedtab-coordinator and fedtab-client
  std::filesystem::path work_dir;  // data, configs, logs
  int timeout_ms = 300000;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<double> local_auc;  // per hospital
  double federated_auc = 0.0;
  double centralized_auc = 0.0;
  std::vector<std::int64_t> n_train;   // per hospital
  std::vector<double> pos_rate;        // per hospital
  std::vector<double> federated_round_auc;
};

// Everything that one seed of the plan needs, derived from the seed alone.
struct SeedSetup {
  SyntheticCity city;
  ModelSpec spec;
  Dataset test;
  std::uint64_t fed_seed = 0;
  FedConfig fed;
};

SeedSetup make_seed_setup(const ExperimentPlan& plan, std::uint64_t seed);

SeedResult run_seed(const ExperimentPlan& plan, std::uint64_t seed, ExecutionMode mode,
                    const NetworkOptions& net = {});

Report run_experiment(const ExperimentPlan& plan, ExecutionMode mode, const NetworkOptions& net = {},
                      std::vector<SeedResult>* seeds_out = nullptr);

Report build_report(const ExperimentPlan& plan, const std::vector<SeedResult>& seeds);

// Networked federated run: writes the city to disk, launches one coordinator and one client
// per hospital, and returns the final global weights the coordinator published.
ParameterVector run_networked_federated(const SeedSetup& setup, const ExperimentPlan& plan,
                                        const NetworkOptions& net);

enum class ReportFormat { kCsv, kJson, kMarkdown };

void emit_report(const Report& report, ReportFormat format, std::ostream& out);
void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path);
std::string report_to_string(const Report& report, ReportFormat format);

Report parse_report_json(const std::string& text);
Report parse_report_csv(const std::string& text);

}  // namespace fedtab
