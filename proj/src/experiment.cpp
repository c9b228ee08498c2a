#include "fedtab/experiment.hpp"

#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "fedtab/coordinator.hpp"
#include "fedtab/metrics.hpp"
#include "fedtab/process.hpp"
#include "fedtab/rng.hpp"
#include "fedtab/wire.hpp"

namespace fedtab {

namespace {

constexpr std::uint64_t kModelStream = 0x6d6f64656cULL;
constexpr std::uint64_t kLocalStream = 0x6c6f63616cULL;
constexpr std::uint64_t kCentralStream = 0x63656e74ULL;
constexpr std::uint64_t kFedStream = 0x666564ULL;

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string csv_number(const std::optional<double>& v) { return v ? format_double17(*v) : std::string(); }

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string fixed3(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}

}  // namespace

ExecutionMode execution_mode_from_string(const std::string& name) {
  if (name == "simulated") return ExecutionMode::kSimulated;
  if (name == "networked") return ExecutionMode::kNetworked;
  throw ConfigError("unknown mode '" + name + "' (expected simulated or networked)");
}

void ExperimentPlan::validate() const {
  if (seeds.empty()) throw ConfigError("plan needs at least one seed");
  gen.validate();
  train.validate();
  fed_train.validate();
  if (rounds < 1) throw ConfigError("plan rounds must be >= 1");
}

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  j = nlohmann::json{{"seeds", p.seeds},
                     {"gen", p.gen},
                     {"model", {{"kind", to_string(p.model_kind)}, {"hidden_dims", p.hidden_dims}}},
                     {"impute", to_string(p.impute)},
                     {"train", p.train},
                     {"fed_train", p.fed_train},
                     {"rounds", p.rounds},
                     {"aggregation", to_string(p.aggregation)}};
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  ExperimentPlan d;
  p.seeds = j.value("seeds", d.seeds);
  p.gen = j.contains("gen") ? j.at("gen").get<GenConfig>() : d.gen;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    p.model_kind = model_kind_from_string(m.value("kind", to_string(d.model_kind)));
    p.hidden_dims = m.value("hidden_dims", d.hidden_dims);
  }
  p.impute = impute_strategy_from_string(j.value("impute", to_string(d.impute)));
  p.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  p.fed_train = j.contains("fed_train") ? j.at("fed_train").get<TrainConfig>() : d.fed_train;
  p.rounds = j.value("rounds", d.rounds);
  p.aggregation = aggregation_mode_from_string(j.value("aggregation", to_string(d.aggregation)));
  p.validate();
}

ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j.get<ExperimentPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("plan " + path.string() + ": " + e.what());
  }
}

void to_json(nlohmann::json& j, const ReportRow& r) {
  j = nlohmann::json{{"setting", r.setting},
                     {"auc_mean", r.auc_mean},
                     {"auc_std", optional_number(r.auc_std)},
                     {"auc_stderr", optional_number(r.auc_stderr)},
                     {"n_train", r.n_train},
                     {"n_pos_rate", r.n_pos_rate},
                     {"per_seed_auc", r.per_seed_auc}};
}

void from_json(const nlohmann::json& j, ReportRow& r) {
  r.setting = j.at("setting").get<std::string>();
  r.auc_mean = j.at("auc_mean").get<double>();
  r.auc_std = j.at("auc_std").is_null() ? std::nullopt : std::optional<double>(j.at("auc_std").get<double>());
  r.auc_stderr =
      j.at("auc_stderr").is_null() ? std::nullopt : std::optional<double>(j.at("auc_stderr").get<double>());
  r.n_train = j.at("n_train").get<std::int64_t>();
  r.n_pos_rate = j.at("n_pos_rate").get<double>();
  r.per_seed_auc = j.value("per_seed_auc", std::vector<double>{});
}

const ReportRow& Report::row(const std::string& setting) const {
  for (const auto& r : rows) {
    if (r.setting == setting) return r;
  }
  throw UsageError("report has no row '" + setting + "'");
}

std::string local_setting_name(const std::string& hospital_id) {
  return "Hospital " + hospital_id + " Local Training";
}

SeedSetup make_seed_setup(const ExperimentPlan& plan, std::uint64_t seed) {
  SeedSetup s;
  s.city = generate_synthetic_city(plan.gen, seed);
  s.spec.kind = plan.model_kind;
  s.spec.hidden_dims = plan.hidden_dims;
  s.spec.input_dim = s.city.schema->input_dim();
  s.spec.seed = derive_seed(seed, kModelStream);
  // The held-out cohort is fully observed, so no imputation policy touches it.
  s.test = select_features(s.city.test);
  s.fed_seed = derive_seed(seed, kFedStream);
  s.fed.mode = plan.aggregation;
  s.fed.min_clients = static_cast<int>(s.city.hospitals.size());
  s.fed.staleness_window = 0;
  s.fed.criterion = {plan.rounds, 0.0, 1};
  return s;
}

ParameterVector run_networked_federated(const SeedSetup& setup, const ExperimentPlan& plan,
                                        const NetworkOptions& net) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::absolute(net.work_dir);
  fs::remove_all(dir);
  fs::create_directories(dir / "data");
  write_city(setup.city, dir / "data");

  nlohmann::json coord{{"host", "127.0.0.1"},
                       {"port", 0},
                       {"quorum", setup.fed.min_clients},
                       {"round_timeout_ms", net.timeout_ms},
                       {"staleness_window", setup.fed.staleness_window},
                       {"aggregation", to_string(setup.fed.mode)},
                       {"convergence", setup.fed.criterion},
                       {"model", setup.spec},
                       {"train", plan.fed_train},
                       {"run_seed", setup.fed_seed},
                       {"schema", (dir / "data" / "schema.json").string()},
                       {"test_data", (dir / "data" / "test.csv").string()},
                       {"event_log", (dir / "events.jsonl").string()},
                       {"tick_ms", 5},
                       {"autostart", true}};
  std::ofstream(dir / "coordinator.json") << coord.dump(2);

  const auto port_file = dir / "port";
  const auto final_model = dir / "final_model.json";
  ChildProcess coordinator({(net.bin_dir / "fedtab-coordinator").string(), "--config",
                            (dir / "coordinator.json").string(), "--port-file", port_file.string(),
                            "--final-model", final_model.string(), "--exit-on-finish"},
                           dir / "coordinator.log");

  int port = 0;
  for (int i = 0; i < 1000 && port == 0; ++i) {
    std::ifstream in(port_file);
    if (!(in >> port)) port = 0;
    if (port == 0) {
      if (!coordinator.running()) throw UsageError("coordinator exited during start-up; see coordinator.log");
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }
  if (port == 0) throw UsageError("coordinator did not publish its port");

  std::vector<ChildProcess> clients;
  for (const auto& h : setup.city.hospitals) {
    nlohmann::json cc{{"client_id", h.hospital_id},
                      {"coordinator_url", "http://127.0.0.1:" + std::to_string(port)},
                      {"data", (dir / "data" / ("hospital_" + h.hospital_id + ".csv")).string()},
                      {"schema", (dir / "data" / "schema.json").string()},
                      {"impute", to_string(plan.impute)},
                      {"train", plan.fed_train},
                      {"poll_interval_ms", 5},
                      {"heartbeat_interval_ms", 500}};
    const auto cfg = dir / ("client_" + h.hospital_id + ".json");
    std::ofstream(cfg) << cc.dump(2);
    clients.emplace_back(std::vector<std::string>{(net.bin_dir / "fedtab-client").string(), "--config", cfg.string()},
                         dir / ("client_" + h.hospital_id + ".log"));
  }

  auto status = coordinator.wait_for(net.timeout_ms);
  if (!status) {
    coordinator.kill();
    throw UsageError("networked federated run timed out after " + std::to_string(net.timeout_ms) + " ms");
  }
  if (*status != 0) throw UsageError("coordinator exited with status " + std::to_string(*status));
  for (std::size_t i = 0; i < clients.size(); ++i) {
    auto cs = clients[i].wait_for(10000);
    if (!cs || *cs != 0) {
      throw UsageError("client " + setup.city.hospitals[i].hospital_id + " did not exit cleanly");
    }
  }

  std::ifstream in(final_model);
  if (!in) throw UsageError("coordinator did not write " + final_model.string());
  nlohmann::json j;
  in >> j;
  return j.at("weights").get<ParameterVector>();
}

SeedResult run_seed(const ExperimentPlan& plan, std::uint64_t seed, ExecutionMode mode, const NetworkOptions& net) {
  const auto setup = make_seed_setup(plan, seed);
  const auto& city = setup.city;
  const auto& spec = setup.spec;

  SeedResult r;
  r.seed = seed;
  std::vector<SimClient> clients;
  for (std::size_t h = 0; h < city.hospitals.size(); ++h) {
    const auto& cohort = city.hospitals[h];
    auto prepared = prepare_local(cohort, plan.impute);
    const auto w = train_local(init_model(spec), spec, plan.train, prepared.train,
                               derive_seed(seed, kLocalStream, h));
    r.local_auc.push_back(evaluate(w, spec, setup.test).auc);
    r.n_train.push_back(prepared.stats.n);
    r.pos_rate.push_back(static_cast<double>(prepared.stats.n_pos) / static_cast<double>(prepared.stats.n));
    clients.push_back({cohort.hospital_id, std::move(prepared.train), plan.fed_train});
  }

  {
    auto pooled = prepare_local(pool_cohorts(city.hospitals), plan.impute);
    const auto w = train_local(init_model(spec), spec, plan.train, pooled.train, derive_seed(seed, kCentralStream));
    r.centralized_auc = evaluate(w, spec, setup.test).auc;
  }

  if (mode == ExecutionMode::kSimulated) {
    const auto trace = simulate(clients, spec, setup.fed, setup.fed_seed, &setup.test);
    for (const auto& tr : trace.rounds) r.federated_round_auc.push_back(tr.test_auc.value_or(0.0));
    r.federated_auc = evaluate(trace.final_weights(), spec, setup.test).auc;
  } else {
    NetworkOptions seed_net = net;
    seed_net.work_dir = net.work_dir / ("seed_" + std::to_string(seed));
    const auto w = run_networked_federated(setup, plan, seed_net);
    r.federated_auc = evaluate(w, spec, setup.test).auc;
  }
  spdlog::info("seed {}: federated {:.4f}, centralized {:.4f}", seed, r.federated_auc, r.centralized_auc);
  return r;
}

Report build_report(const ExperimentPlan& plan, const std::vector<SeedResult>& seeds) {
  if (seeds.empty()) throw UsageError("build_report needs at least one seed result");
  Report report;
  const auto nh = plan.gen.hospital_ids.size();
  auto make_row = [&](std::string name, auto&& pick_auc, std::int64_t n_train, double pos_rate) {
    ReportRow row;
    row.setting = std::move(name);
    for (const auto& s : seeds) row.per_seed_auc.push_back(pick_auc(s));
    const auto summary = summarize(std::span<const double>(row.per_seed_auc));
    row.auc_mean = summary.mean;
    row.auc_std = summary.std;
    row.auc_stderr = summary.std_error;
    row.n_train = n_train;
    row.n_pos_rate = pos_rate;
    return row;
  };

  std::int64_t total_n = 0;
  double total_pos = 0.0;
  for (std::size_t h = 0; h < nh; ++h) {
    const auto n = seeds.front().n_train[h];
    const auto rate = seeds.front().pos_rate[h];
    total_n += n;
    total_pos += rate * static_cast<double>(n);
    report.rows.push_back(make_row(local_setting_name(plan.gen.hospital_ids[h]),
                                   [h](const SeedResult& s) { return s.local_auc[h]; }, n, rate));
  }
  const double pooled_rate = total_pos / static_cast<double>(total_n);
  report.rows.push_back(make_row(kFederatedSetting, [](const SeedResult& s) { return s.federated_auc; }, total_n,
                                 pooled_rate));
  report.rows.push_back(make_row(kCentralizedSetting, [](const SeedResult& s) { return s.centralized_auc; },
                                 total_n, pooled_rate));
  return report;
}

Report run_experiment(const ExperimentPlan& plan, ExecutionMode mode, const NetworkOptions& net,
                      std::vector<SeedResult>* seeds_out) {
  plan.validate();
  std::vector<SeedResult> results;
  for (auto seed : plan.seeds) {
    try {
      results.push_back(run_seed(plan, seed, mode, net));
    } catch (const Error& e) {
      throw UsageError("seed " + std::to_string(seed) + " failed: " + e.what());
    }
  }
  auto report = build_report(plan, results);
  if (seeds_out) *seeds_out = std::move(results);
  return report;
}

void emit_report(const Report& report, ReportFormat format, std::ostream& out) {
  if (report.rows.empty()) throw UsageError("cannot emit an empty report");
  switch (format) {
    case ReportFormat::kJson: {
      out << nlohmann::json{{"rows", report.rows}}.dump(2) << '\n';
      break;
    }
    case ReportFormat::kCsv: {
      out << "setting,auc_mean,auc_std,auc_stderr,n_train,n_pos_rate\n";
      for (const auto& r : report.rows) {
        out << r.setting << ',' << format_double17(r.auc_mean) << ',' << csv_number(r.auc_std) << ','
            << csv_number(r.auc_stderr) << ',' << r.n_train << ',' << format_double17(r.n_pos_rate) << '\n';
      }
      break;
    }
    case ReportFormat::kMarkdown: {
      out << "| Experimental Setting | AUC Mean | AUC Std. | AUC Std. Err. |\n";
      out << "|---|---|---|---|\n";
      for (const auto& r : report.rows) {
        out << "| " << r.setting << " | " << fixed3(r.auc_mean) << " | " << fixed3(r.auc_std) << " | "
            << fixed3(r.auc_stderr) << " |\n";
      }
      break;
    }
  }
  if (!out) throw UsageError("failed writing report");
}

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write report to " + path.string());
  emit_report(report, format, out);
}

std::string report_to_string(const Report& report, ReportFormat format) {
  std::ostringstream out;
  emit_report(report, format, out);
  return out.str();
}

Report parse_report_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  return Report{j.at("rows").get<std::vector<ReportRow>>()};
}

Report parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  Report report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != 6) throw UsageError("malformed report line: " + line);
    ReportRow r;
    r.setting = cells[0];
    r.auc_mean = parse_double_exact(cells[1]);
    if (!cells[2].empty()) r.auc_std = parse_double_exact(cells[2]);
    if (!cells[3].empty()) r.auc_stderr = parse_double_exact(cells[3]);
    r.n_train = std::stoll(cells[4]);
    r.n_pos_rate = parse_double_exact(cells[5]);
    report.rows.push_back(std::move(r));
  }
  return report;
}

}  // namespace fedtab
