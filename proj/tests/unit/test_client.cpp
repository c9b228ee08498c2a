#include <doctest.h>

#include <deque>
#include <fstream>
#include <mutex>
#include <thread>

#include "fedtab/client.hpp"
#include "fedtab/coordinator.hpp"
#include "fedtab/errors.hpp"
#include "fedtab/server.hpp"
#include "fedtab/synth.hpp"
#include "fixtures.hpp"

using namespace fedtab;

namespace {

// A small city on disk plus coordinator and client configs pointing at it.
struct World {
  testing::TempDir dir{"client"};
  SyntheticCity city;
  CoordinatorConfig coord;

  explicit World(int max_rounds = 3) {
    auto gen = testing::small_gen(1500, 400, 12);
    city = generate_synthetic_city(gen, 5);
    write_city(city, dir.path());
    coord.port = 0;
    coord.quorum = 5;
    coord.round_timeout_ms = 60000;
    coord.model.kind = ModelKind::kMlp3;
    coord.model.hidden_dims = {6, 4};
    coord.model.input_dim = city.schema->input_dim();
    coord.model.seed = 11;
    coord.train = {0.05, 1, 32, 0.0};
    coord.run_seed = 99;
    coord.schema_path = dir / "schema.json";
    coord.criterion = {max_rounds, 0.0, 1};
    coord.autostart = true;
    coord.tick_ms = 5;
  }

  ClientConfig client(const std::string& id) const {
    ClientConfig c;
    c.client_id = id;
    c.data_path = dir / ("hospital_" + id + ".csv");
    c.schema_path = dir / "schema.json";
    c.poll_interval_ms = 1;
    c.initial_backoff_ms = 1;
    c.max_backoff_ms = 4;
    return c;
  }

  std::vector<std::string> ids() const { return city.schema ? std::vector<std::string>{"A", "B", "C", "D", "E"} : std::vector<std::string>{}; }
};

ClientRunSummary run_direct(Coordinator& c, const ClientConfig& cfg) {
  auto api = make_direct_api(c);
  return run_client(cfg, *api);
}

// Forwards to a real API; the first submit is delivered but its reply is lost.
class FlakyApi : public CoordinatorApi {
 public:
  explicit FlakyApi(CoordinatorApi& inner) : inner_(inner) {}
  RegisterResponse register_client(const RegisterRequest& r) override { return inner_.register_client(r); }
  ModelView fetch_model(const std::string& t) override { return inner_.fetch_model(t); }
  SubmitResult submit_update(const std::string& t, const ModelUpdate& u) override {
    auto r = inner_.submit_update(t, u);
    sent.push_back(u);
    ++count;
    if (!dropped_) {
      dropped_ = true;
      throw TransientError("connection reset");
    }
    return r;
  }
  RunControl heartbeat(const std::string& t, const std::optional<AucReport>& r) override {
    return inner_.heartbeat(t, r);
  }
  std::vector<ModelUpdate> sent;
  std::atomic<int> count{0};

 private:
  CoordinatorApi& inner_;
  bool dropped_ = false;
};

// Records every coordinator reply in order.
class RecordingApi : public CoordinatorApi {
 public:
  explicit RecordingApi(CoordinatorApi& inner) : inner_(inner) {}
  RegisterResponse register_client(const RegisterRequest& r) override {
    auto out = inner_.register_client(r);
    registers.push_back(out);
    return out;
  }
  ModelView fetch_model(const std::string& t) override {
    auto out = inner_.fetch_model(t);
    models.push_back(out);
    return out;
  }
  SubmitResult submit_update(const std::string& t, const ModelUpdate& u) override {
    auto out = inner_.submit_update(t, u);
    submits.push_back(out);
    return out;
  }
  RunControl heartbeat(const std::string& t, const std::optional<AucReport>& r) override {
    auto out = inner_.heartbeat(t, r);
    beats.push_back(out);
    return out;
  }
  std::deque<RegisterResponse> registers;
  std::deque<ModelView> models;
  std::deque<SubmitResult> submits;
  std::deque<RunControl> beats;

 private:
  CoordinatorApi& inner_;
};

// Plays back a recorded transcript with no coordinator behind it.
class ReplayApi : public CoordinatorApi {
 public:
  explicit ReplayApi(RecordingApi& rec) : rec_(rec) {}
  RegisterResponse register_client(const RegisterRequest&) override { return pop(rec_.registers); }
  ModelView fetch_model(const std::string&) override { return pop(rec_.models); }
  SubmitResult submit_update(const std::string&, const ModelUpdate& u) override {
    submitted.push_back(u);
    return pop(rec_.submits);
  }
  RunControl heartbeat(const std::string&, const std::optional<AucReport>&) override {
    return rec_.beats.empty() ? RunControl{} : pop(rec_.beats);
  }
  std::vector<ModelUpdate> submitted;

 private:
  template <typename T>
  static T pop(std::deque<T>& q) {
    if (q.empty()) throw ProtocolError(500, "transcript_exhausted", "no more recorded replies");
    T v = q.front();
    q.pop_front();
    return v;
  }
  RecordingApi& rec_;
};

}  // namespace

TEST_CASE("clients finish with the coordinator") {
  World w(3);
  Coordinator c(w.coord);
  std::vector<ClientRunSummary> out(5);
  std::vector<std::thread> threads;
  const auto ids = w.ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    threads.emplace_back([&, i] { out[i] = run_direct(c, w.client(ids[i])); });
  }
  for (auto& t : threads) t.join();
  CHECK(c.run_control().phase == RunPhase::kFinished);
  CHECK(c.metrics_history().size() == 3);
  for (const auto& s : out) {
    CHECK(s.exit_code == 0);
    CHECK(s.updates_submitted <= 3);
    CHECK(s.updates_submitted == 3);
  }
  CHECK(c.all_sessions_saw_finish());
}

TEST_CASE("a lost reply leads to one idempotent resubmission") {
  World w(2);
  w.coord.quorum = 1;
  w.coord.event_log = w.dir / "events.jsonl";
  auto c = std::make_unique<Coordinator>(w.coord);
  auto direct = make_direct_api(*c);
  FlakyApi flaky(*direct);
  // Pause after round 0 fills so the duplicate lands in the same round.
  c->control(ControlAction::kPause);
  std::thread resume([&] {
    testing::wait_until([&] { return flaky.count >= 2; }, 5000);
    c->control(ControlAction::kResume);
  });
  const auto summary = run_client(w.client("B"), flaky);
  resume.join();
  CHECK(summary.exit_code == 0);
  REQUIRE(flaky.sent.size() >= 2);
  CHECK(flaky.sent[0].round == flaky.sent[1].round);
  CHECK(flaky.sent[0].weights.values == flaky.sent[1].weights.values);
  CHECK(summary.updates_submitted == 2);

  int round0 = 0;
  for (const auto& e : EventLog::read(w.coord.event_log)) {
    if (e.at("kind") == "update" && e.at("payload").at("update").at("round") == 0) {
      CHECK(e.at("payload").at("outcome") == "accepted");
      ++round0;
    }
  }
  CHECK(round0 == 2);
  const auto history = c->metrics_history();
  REQUIRE(history.size() == 2);
  CHECK(history[0].n_updates == 1);
}

TEST_CASE("clients with different local epochs share one run") {
  World w(3);
  w.coord.quorum = 2;
  Coordinator c(w.coord);
  auto fast = w.client("A");
  fast.train = TrainConfig{0.05, 1, 32, 0.0};
  auto slow = w.client("B");
  slow.train = TrainConfig{0.05, 10, 32, 0.0};
  ClientRunSummary a, b;
  std::thread ta([&] { a = run_direct(c, fast); });
  std::thread tb([&] { b = run_direct(c, slow); });
  ta.join();
  tb.join();
  CHECK(a.exit_code == 0);
  CHECK(b.exit_code == 0);
  REQUIRE(!a.submitted.empty());
  REQUIRE(!b.submitted.empty());
  CHECK(a.submitted[0].local_epochs_used == 1);
  CHECK(b.submitted[0].local_epochs_used == 10);
  CHECK(a.submitted[0].weights.values != b.submitted[0].weights.values);
  CHECK(c.metrics_history().size() == 3);
}

TEST_CASE("replaying a transcript reproduces the submitted weights") {
  World w(3);
  w.coord.quorum = 1;
  Coordinator c(w.coord);
  auto direct = make_direct_api(c);
  RecordingApi rec(*direct);
  auto cfg = w.client("C");
  cfg.heartbeat_interval_ms = 1000000;
  const auto live = run_client(cfg, rec);
  REQUIRE(live.exit_code == 0);
  ReplayApi replay(rec);
  const auto again = run_client(cfg, replay);
  CHECK(again.exit_code == 0);
  REQUIRE(again.submitted.size() == live.submitted.size());
  for (std::size_t i = 0; i < live.submitted.size(); ++i) {
    CHECK(again.submitted[i].round == live.submitted[i].round);
    CHECK(again.submitted[i].weights.values == live.submitted[i].weights.values);
  }
}

TEST_CASE("a late joiner picks up the current global model") {
  World w(4);
  w.coord.quorum = 1;
  Coordinator c(w.coord);
  const auto first = c.register_client({"A", 10, [] {
                                          CohortStats s;
                                          s.n = 10;
                                          s.n_neg = 10;
                                          s.n_female = 10;
                                          s.age_histogram[3] = 10;
                                          return s;
                                        }(), std::nullopt})
                         .token;
  auto w0 = c.fetch_model(first);
  ModelUpdate u{"A", 0, w0.weights, 10, 1};
  c.submit_update(first, u);
  u.round = 1;
  c.submit_update(first, u);
  REQUIRE(c.run_control().round == 2);
  const auto wk = c.fetch_model(first).weights;

  auto api = make_direct_api(c);
  RecordingApi rec(*api);
  const auto s = run_client(w.client("D"), rec);
  CHECK(s.exit_code == 0);
  REQUIRE(!s.submitted.empty());
  CHECK(s.submitted.front().round == 2);
  CHECK(rec.models.front().round == 2);
  CHECK(rec.models.front().weights.values == wk.values);
  CHECK(c.run_control().phase == RunPhase::kFinished);
}

TEST_CASE("local pipeline") {
  World w;
  const auto a1 = local_pipeline(w.client("A"));
  const auto a2 = local_pipeline(w.client("A"));
  CHECK(a1.prepared.train.features == a2.prepared.train.features);
  CHECK(a1.prepared.train.features.cols() == w.city.schema->input_dim());
  CHECK(a1.prepared.stats.n == static_cast<std::int64_t>(w.city.hospitals[0].size()));

  auto cfg = w.client("A");
  cfg.test_path = w.dir / "test.csv";
  const auto with_test = local_pipeline(cfg);
  REQUIRE(with_test.test);
  CHECK(with_test.test->features == select_features(w.city.test).features);

  // Blank out one feature column entirely.
  std::ifstream in(w.dir / "hospital_B.csv");
  std::ofstream out(w.dir / "hospital_X.csv");
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!header) {
      auto first = line.find(',', line.find(',') + 1);
      auto second = line.find(',', first + 1);
      line = line.substr(0, first + 1) + line.substr(second);
    }
    header = false;
    out << line << '\n';
  }
  out.close();
  try {
    local_pipeline(w.client("X"));
    FAIL("expected an impute error");
  } catch (const ImputeError& e) {
    CHECK(std::string(e.what()).find(w.city.schema->features[0].name) != std::string::npos);
  }
}

TEST_CASE("schema mismatch is a configuration failure") {
  World w;
  Coordinator c(w.coord);
  auto schema = *w.city.schema;
  schema.selected.pop_back();
  save_schema(schema, w.dir / "other_schema.json");
  auto cfg = w.client("A");
  cfg.schema_path = w.dir / "other_schema.json";
  CHECK(run_direct(c, cfg).exit_code == 2);
}

TEST_CASE("unreachable coordinator gives up after bounded retries") {
  World w;
  auto cfg = w.client("A");
  cfg.max_connect_attempts = 3;
  auto api = make_http_api("http://127.0.0.1:1", 200);
  CHECK(run_client(cfg, *api).exit_code == 4);
}

TEST_CASE("stop flag ends the loop") {
  World w(1000);
  w.coord.quorum = 2;
  Coordinator c(w.coord);
  std::atomic<bool> stop{false};
  auto api = make_direct_api(c);
  std::thread stopper([&] {
    testing::wait_until([&] { return c.metrics().sessions.size() == 1; }, 5000);
    stop = true;
  });
  const auto s = run_client(w.client("A"), *api, &stop);
  stopper.join();
  CHECK(s.exit_code == 1);
}

TEST_CASE("clients over http") {
  World w(2);
  w.coord.quorum = 2;
  Coordinator c(w.coord);
  CoordinatorServer server(c);
  const int port = server.start("127.0.0.1", 0);
  std::vector<ClientRunSummary> out(2);
  std::vector<std::thread> threads;
  for (int i = 0; i < 2; ++i) {
    threads.emplace_back([&, i] {
      auto cfg = w.client(i == 0 ? "A" : "E");
      cfg.coordinator_url = "http://127.0.0.1:" + std::to_string(port);
      cfg.test_path = w.dir / "test.csv";
      auto api = make_http_api(cfg.coordinator_url);
      out[i] = run_client(cfg, *api);
    });
  }
  for (auto& t : threads) t.join();
  server.stop();
  CHECK(out[0].exit_code == 0);
  CHECK(out[1].exit_code == 0);
  CHECK(c.metrics_history().size() == 2);
  const auto m = c.metrics();
  CHECK(m.client_auc.size() == 2);
  CHECK(m.client_auc.at("A").global_auc.has_value());
}

TEST_CASE("client config file") {
  World w;
  std::ofstream(w.dir / "client.json") << R"({"client_id": "A", "data": "hospital_A.csv", "schema": "schema.json",
    "coordinator_url": "http://10.0.0.1:9000", "impute": "median",
    "train": {"learning_rate": 0.1, "local_epochs": 2, "batch_size": 8, "l2": 0}})";
  const auto cfg = load_client_config(w.dir / "client.json");
  CHECK(cfg.client_id == "A");
  CHECK(cfg.data_path == w.dir / "hospital_A.csv");
  CHECK(cfg.impute == ImputeStrategy::kMedian);
  REQUIRE(cfg.train);
  CHECK(cfg.train->local_epochs == 2);
  std::ofstream(w.dir / "bad.json") << R"({"client_id": "A"})";
  CHECK_THROWS_AS(load_client_config(w.dir / "bad.json"), ConfigError);
}
