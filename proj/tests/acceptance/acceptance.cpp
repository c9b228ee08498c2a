#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "fedtab/coordinator.hpp"
#include "fedtab/experiment.hpp"
#include "fedtab/fed.hpp"
#include "fedtab/metrics.hpp"
#include "fedtab/model.hpp"
#include "fedtab/privacy.hpp"
#include "fedtab/process.hpp"
#include "fedtab/rng.hpp"
#include "fedtab/server.hpp"
#include "fedtab/synth.hpp"
#include "fedtab/wire.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "proxy.hpp"

using namespace fedtab;
namespace fs = std::filesystem;

namespace {

constexpr double kEquivalenceTol = 1e-10;
constexpr double kGradientTol = 1e-5;
constexpr long double kFdStep = 1e-4L;
constexpr double kParityTol = 0.02;
constexpr double kSmallSiteGain = 0.05;
constexpr double kTransportTol = 1e-9;

const fs::path kBinDir = FEDTAB_BIN_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > limit_s) {
    o.pass = false;
    o.detail += " (over the " + std::to_string(static_cast<int>(limit_s)) + " s budget)";
  }
  if (!o.pass) ++failures;
  std::printf("%s  %-28s %6.1fs  %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt_num(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome one_step_equivalence() {
  const auto pooled = testing::random_dataset(500, 20, 4242);
  double worst = 0.0;
  for (auto kind : {ModelKind::kLogisticRegression, ModelKind::kMlp3}) {
    ModelSpec spec;
    spec.kind = kind;
    spec.input_dim = 20;
    spec.hidden_dims = {16, 8};
    spec.seed = 7;
    const TrainConfig shard_cfg{0.3, 1, 100, 1e-3};
    std::vector<SimClient> clients;
    for (int k = 0; k < 5; ++k) {
      clients.push_back({"site" + std::to_string(k),
                         Dataset{pooled.features.middleRows(k * 100, 100), pooled.labels.segment(k * 100, 100)},
                         shard_cfg});
    }
    FedConfig fc;
    fc.min_clients = 5;
    fc.criterion = {1, 0.0, 1};
    const auto trace = simulate(clients, spec, fc, 11);
    const auto& fed = trace.final_weights().values;

    const TrainConfig central_cfg{0.3, 1, 500, 1e-3};
    const auto central = train_local(trace.initial_weights, spec, central_cfg, pooled, 11);
    const auto loop = oracle::gd_step(trace.initial_weights, pooled.features, pooled.labels, 0.3, 1e-3);
    worst = std::max({worst, (fed - central.values).lpNorm<Eigen::Infinity>(), (fed - loop).lpNorm<Eigen::Infinity>()});
  }
  return {worst <= kEquivalenceTol, "max |fed - central| = " + fmt_num("%.3g", worst)};
}

Outcome gradient_check() {
  ModelSpec spec;
  spec.kind = ModelKind::kMlp3;
  spec.input_dim = 119;
  spec.hidden_dims = {32, 16};
  double worst = 0.0;
  for (std::uint64_t b = 0; b < 20; ++b) {
    spec.seed = 500 + b;
    const auto w = testing::random_weights(spec, 900 + b);
    const auto batch = testing::random_dataset(32, 119, 1300 + b);
    const double l2 = 1e-4;
    const auto lg = loss_and_gradient(w, spec, batch.features, batch.labels, l2);
    SplitMix64 pick(derive_seed(77, b));
    for (int c = 0; c < 20; ++c) {
      const auto k = static_cast<Eigen::Index>(pick.below(static_cast<std::uint64_t>(w.size())));
      const auto fd = oracle::fd_partial(w, batch.features, batch.labels, l2, k, kFdStep);
      worst = std::max(worst, oracle::relative_error(lg.gradient.values(k), fd));
    }
  }
  return {worst < kGradientTol, "max relative error = " + fmt_num("%.3g", worst)};
}

Outcome auc_oracle() {
  SplitMix64 rng(2024);
  int mismatches = 0;
  std::size_t tied = 0, total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 2 + rng.below(199);
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::uint64_t i = 0; i < n; ++i) {
      double s = rng.uniform();
      if (i > 0 && rng.bernoulli(0.2)) {
        s = scores[rng.below(i)];
        ++tied;
      }
      scores.push_back(s);
      labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
    }
    labels[0] = 1;
    labels[1] = 0;
    total += n;
    Eigen::VectorXd sv = Eigen::Map<Eigen::VectorXd>(scores.data(), Eigen::Index(n));
    Eigen::VectorXd yv(n);
    for (std::uint64_t i = 0; i < n; ++i) yv(Eigen::Index(i)) = labels[i];
    mismatches += auc(sv, yv) != oracle::pairwise_auc(scores, labels);
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 200 instances, " +
                               fmt_num("%.0f%%", 100.0 * double(tied) / double(total)) + " tied scores"};
}

Outcome table_analogue() {
  const ExperimentPlan plan;
  const auto r = run_experiment(plan, ExecutionMode::kSimulated);
  const double fed = r.row(kFederatedSetting).auc_mean;
  const double central = r.row(kCentralizedSetting).auc_mean;
  double max_local = 0.0;
  for (const auto& id : plan.gen.hospital_ids) max_local = std::max(max_local, r.row(local_setting_name(id)).auc_mean);
  const double min_small = std::min(r.row(local_setting_name("D")).auc_mean, r.row(local_setting_name("E")).auc_mean);
  const bool a = std::abs(fed - central) <= kParityTol;
  const bool b = fed >= max_local - kParityTol;
  const bool c = fed - min_small >= kSmallSiteGain;
  std::string detail = "fed " + fmt_num("%.3f", fed) + ", central " + fmt_num("%.3f", central) + ", max local " +
                       fmt_num("%.3f", max_local) + ", min(D,E) " + fmt_num("%.3f", min_small) + " | (a) " +
                       (a ? "ok" : "no") + " (b) " + (b ? "ok" : "no") + " (c) " + (c ? "ok" : "no");
  return {a && b && c, detail};
}

struct NodeWorld {
  testing::TempDir dir{"accept"};
  SyntheticCity city;
  CoordinatorConfig config;

  NodeWorld(int total, std::uint64_t seed) : city(generate_synthetic_city(testing::small_gen(total, 500, 16), seed)) {
    fs::create_directories(dir / "data");
    write_city(city, dir / "data");
    config.port = 0;
    config.model.kind = ModelKind::kMlp3;
    config.model.input_dim = city.schema->input_dim();
    config.model.hidden_dims = {16, 8};
    config.model.seed = seed;
    config.train = {0.05, 2, 64, 1e-4};
    config.run_seed = seed;
    config.schema_path = dir / "data" / "schema.json";
    config.test_path = dir / "data" / "test.csv";
    config.event_log = dir / "events.jsonl";
    config.tick_ms = 5;
    config.autostart = true;
  }
};

fs::path write_client_config(const fs::path& dir, const std::string& id, int port, std::optional<int> epochs) {
  nlohmann::json cc{{"client_id", id},
                    {"coordinator_url", "http://127.0.0.1:" + std::to_string(port)},
                    {"data", (dir / "data" / ("hospital_" + id + ".csv")).string()},
                    {"schema", (dir / "data" / "schema.json").string()},
                    {"test_data", (dir / "data" / "test.csv").string()},
                    {"poll_interval_ms", 5},
                    {"heartbeat_interval_ms", 200},
                    {"initial_backoff_ms", 20},
                    {"max_backoff_ms", 200}};
  if (epochs) cc["train"] = TrainConfig{0.05, *epochs, 64, 1e-4};
  const auto path = dir / ("client_" + id + ".json");
  std::ofstream(path) << cc.dump(2);
  return path;
}

ChildProcess spawn_client(const fs::path& dir, const fs::path& config, const std::string& id) {
  return ChildProcess({(kBinDir / "fedtab-client").string(), "--config", config.string()},
                      dir / ("client_" + id + ".log"));
}

const std::set<std::string> kForbiddenKeys{"records", "record", "rows",   "features", "feature_matrix",
                                           "x",       "X",      "labels", "label",    "y",
                                           "patients", "data"};

// Record-shaped keys holding containers; scalar shape fields such as layout rows are fine.
std::optional<std::string> forbidden_key(const nlohmann::json& j, const std::string& path = "$") {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      if (kForbiddenKeys.count(k) && v.is_structured()) return path + "." + k;
      if (auto hit = forbidden_key(v, path + "." + k)) return hit;
    }
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (auto hit = forbidden_key(j[i], path + "[" + std::to_string(i) + "]")) return hit;
    }
  }
  return std::nullopt;
}

// Returns an error for the first body that a whitelist check or key scan rejects.
std::optional<std::string> audit(const testing::Exchange& ex) {
  auto check_body = [&](const std::string& body, std::optional<privacy::MessageKind> kind,
                        const char* side) -> std::optional<std::string> {
    if (body.empty()) return std::nullopt;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return ex.method + " " + ex.path + " " + side + ": not JSON";
    }
    if (!kind) return ex.method + " " + ex.path + " " + side + ": no whitelist entry";
    if (auto err = privacy::check_message(*kind, j)) return ex.method + " " + ex.path + " " + side + ": " + *err;
    if (auto hit = forbidden_key(j)) return ex.method + " " + ex.path + " " + side + ": forbidden key " + *hit;
    return std::nullopt;
  };
  if (auto e = check_body(ex.request_body, privacy::request_kind(ex.method, ex.path), "request")) return e;
  return check_body(ex.response_body, privacy::response_kind(ex.method, ex.path, ex.status), "response");
}

Outcome privacy_schema() {
  NodeWorld w(3000, 31);
  w.config.quorum = 5;
  w.config.criterion = {3, 0.0, 1};
  Coordinator coordinator(w.config);
  CoordinatorServer server(coordinator);
  const int port = server.start("127.0.0.1", 0);
  testing::RecordingProxy proxy("127.0.0.1", port);
  const int proxy_port = proxy.start();

  std::vector<ChildProcess> clients;
  for (const auto& h : w.city.hospitals) {
    clients.push_back(spawn_client(w.dir.path(), write_client_config(w.dir.path(), h.hospital_id, proxy_port, {}),
                                   h.hospital_id));
  }
  int bad_exit = 0;
  for (auto& c : clients) {
    auto s = c.wait_for(90000);
    bad_exit += !s || *s != 0;
  }

  httplib::Client dash("127.0.0.1", proxy_port);
  dash.Get("/v1/healthz");
  dash.Get("/v1/metrics");
  dash.Get("/v1/metrics/history");
  dash.Post("/v1/control", R"({"action":"pause"})", "application/json");

  // Negative control: a record-shaped payload must be refused and flagged.
  const std::string leak =
      R"({"client_id":"Z","declared_n_samples":1,"cohort_stats":{"n":1,"n_pos":0,"n_neg":1,"n_male":0,"n_female":1,"age_histogram":[1]},"records":[{"age":70,"stroke":1}]})";
  auto refused = dash.Post("/v1/register", leak, "application/json");
  server.stop();
  proxy.stop();

  const auto log = proxy.exchanges();
  int audited = 0, violations = 0;
  bool negative_flagged = false;
  std::string first;
  for (const auto& ex : log) {
    const bool is_negative = ex.request_body == leak;
    auto err = audit(ex);
    if (is_negative) {
      negative_flagged = err.has_value() && ex.status == 400;
      continue;
    }
    ++audited;
    if (err) {
      ++violations;
      if (first.empty()) first = *err;
    }
  }
  const bool finished = coordinator.run_control().phase == RunPhase::kFinished ||
                        coordinator.run_control().phase == RunPhase::kPaused;
  const bool ok = violations == 0 && negative_flagged && bad_exit == 0 && finished && refused &&
                  refused->status == 400 && audited > 20;
  std::string detail = std::to_string(audited) + " exchanges audited, " + std::to_string(violations) +
                       " violations, record payload " + (negative_flagged ? "refused" : "NOT refused");
  if (bad_exit) detail += ", " + std::to_string(bad_exit) + " clients failed";
  if (!first.empty()) detail += ", first: " + first;
  return {ok, detail};
}

Outcome fault_tolerance() {
  NodeWorld w(4000, 53);
  w.config.quorum = 2;
  w.config.round_timeout_ms = 5000;
  w.config.heartbeat_timeout_ms = 3000;
  w.config.criterion = {10, 0.0, 1};
  Coordinator coordinator(w.config);
  CoordinatorServer server(coordinator);
  const int port = server.start("127.0.0.1", 0);

  const std::vector<std::pair<std::string, int>> plan{{"A", 1}, {"B", 5}, {"C", 10}};
  std::vector<ChildProcess> clients;
  for (const auto& [id, epochs] : plan) {
    clients.push_back(spawn_client(w.dir.path(), write_client_config(w.dir.path(), id, port, epochs), id));
  }

  const std::string victim = "A";
  if (!testing::wait_until([&] { return coordinator.run_control().round >= 3; }, 60000)) {
    return {false, "run never reached round 3"};
  }
  clients[0].kill(SIGKILL);
  clients[0].wait();
  const auto kill_round = coordinator.run_control().round;
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  const auto settled = EventLog::read(w.config.event_log).size();

  const bool finished =
      testing::wait_until([&] { return coordinator.run_control().phase == RunPhase::kFinished; }, 120000, 20);
  int bad_exit = 0;
  for (std::size_t i = 1; i < clients.size(); ++i) {
    auto s = clients[i].wait_for(20000);
    bad_exit += !s || *s != 0;
  }
  server.stop();

  const auto history = coordinator.metrics_history();
  const auto events = EventLog::read(w.config.event_log);
  std::int64_t logged_stale = 0;
  int victim_after_kill = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.at("kind") != "update") continue;
    logged_stale += e.at("payload").at("outcome") == "stale";
    if (i >= settled && e.at("payload").at("update").at("client_id") == victim) ++victim_after_kill;
  }
  bool monotone = true;
  for (std::size_t i = 1; i < history.size(); ++i) monotone &= history[i].stale_count >= history[i - 1].stale_count;
  const auto stale = coordinator.metrics().stale_count;

  const bool ok = finished && history.size() == 10 && stale == logged_stale && victim_after_kill == 0 && monotone &&
                  bad_exit == 0;
  return {ok, std::string(finished ? "finished" : "NOT finished") + ", killed " + victim + " at round " +
                  std::to_string(kill_round) + ", " + std::to_string(history.size()) + " snapshots, stale " +
                  std::to_string(stale) + " (log " + std::to_string(logged_stale) + "), " +
                  std::to_string(victim_after_kill) + " updates from the killed client afterwards"};
}

Outcome transport_independence() {
  const ExperimentPlan plan;
  const std::uint64_t seed = 1;
  const auto setup = make_seed_setup(plan, seed);
  std::vector<SimClient> clients;
  for (const auto& cohort : setup.city.hospitals) {
    clients.push_back({cohort.hospital_id, prepare_local(cohort, plan.impute).train, plan.fed_train});
  }
  const auto trace = simulate(clients, setup.spec, setup.fed, setup.fed_seed);
  const double sim_auc = evaluate(trace.final_weights(), setup.spec, setup.test).auc;

  testing::TempDir dir("transport");
  NetworkOptions net{kBinDir, dir / "net", 240000};
  const auto networked = run_networked_federated(setup, plan, net);
  const double net_auc = evaluate(networked, setup.spec, setup.test).auc;
  const double diff = std::abs(sim_auc - net_auc);
  const bool same_weights = weights_digest(networked) == weights_digest(trace.final_weights());
  return {diff <= kTransportTol, "simulated " + fmt_num("%.6f", sim_auc) + ", networked " + fmt_num("%.6f", net_auc) +
                                     ", weights " + (same_weights ? "bit-identical" : "differ")};
}

Outcome determinism() {
  ExperimentPlan plan;
  plan.seeds = {3};
  const auto a = report_to_string(run_experiment(plan, ExecutionMode::kSimulated), ReportFormat::kJson);
  const auto b = report_to_string(run_experiment(plan, ExecutionMode::kSimulated), ReportFormat::kJson);
  return {a == b, std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different")};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  report("one-step equivalence", 5, one_step_equivalence);
  report("gradient check", 30, gradient_check);
  report("auc oracle", 10, auc_oracle);
  report("table analogue", 300, table_analogue);
  report("privacy schema", 120, privacy_schema);
  report("fault tolerance", 180, fault_tolerance);
  report("transport independence", 300, transport_independence);
  report("determinism", 300, determinism);
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
