#include <doctest.h>

#include <sstream>

#include "fedtab/errors.hpp"
#include "fedtab/metrics.hpp"
#include "fedtab/synth.hpp"
#include "fixtures.hpp"

using namespace fedtab;

namespace {

const SyntheticCity& default_city() {
  static const SyntheticCity city = generate_synthetic_city(GenConfig{}, 17);
  return city;
}

double positive_rate(const Cohort& c) {
  const auto s = cohort_stats(c);
  return static_cast<double>(s.n_pos) / static_cast<double>(s.n);
}

std::string csv_of(const Cohort& c) {
  std::ostringstream out;
  write_csv(c, out);
  return out.str();
}

}  // namespace

TEST_CASE("default city sizes") {
  const auto& city = default_city();
  REQUIRE(city.hospitals.size() == 5);
  std::size_t total = 0;
  for (const auto& h : city.hospitals) total += h.size();
  CHECK(total == 20000);
  CHECK(city.test.size() == 5000);
  const double share_a = static_cast<double>(city.hospitals[0].size()) / static_cast<double>(total);
  CHECK(std::abs(share_a - 0.5) <= 0.02);
  CHECK(city.schema->input_dim() == 119);
  CHECK(city.hospitals[0].hospital_id == "A");
  CHECK(city.hospitals[4].hospital_id == "E");
}

TEST_CASE("positive rates hit their targets") {
  const auto& city = default_city();
  const GenConfig cfg;
  for (std::size_t h = 0; h < city.hospitals.size(); ++h) {
    CAPTURE(city.hospitals[h].hospital_id);
    CHECK(std::abs(positive_rate(city.hospitals[h]) - cfg.positive_rates[h]) <= 0.005);
  }
  CHECK(positive_rate(city.hospitals[3]) < 0.01);
  CHECK(positive_rate(city.hospitals[4]) < 0.01);
  for (std::size_t h = 0; h < 3; ++h) {
    CHECK(positive_rate(city.hospitals[h]) >= 0.03);
    CHECK(positive_rate(city.hospitals[h]) <= 0.04);
  }
  CHECK(std::abs(positive_rate(city.test) - cfg.pooled_positive_rate()) <= 0.005);
}

TEST_CASE("missingness is injected into hospitals but not the test cohort") {
  const auto& city = default_city();
  CHECK(city.test.missing_count() == 0);
  const auto& a = city.hospitals[0];
  const double cells = static_cast<double>(a.size() * city.schema->features.size());
  const double rate = static_cast<double>(a.missing_count()) / cells;
  CHECK(rate > 0.03);
  CHECK(rate < 0.06);
}

TEST_CASE("discrete values lie in the schema domain") {
  const auto& city = default_city();
  const auto& schema = *city.schema;
  for (std::size_t f = 0; f < schema.features.size(); ++f) {
    if (schema.features[f].kind != FeatureKind::kDiscrete) continue;
    const auto& dom = schema.features[f].domain;
    for (const auto& r : city.hospitals[1].records) {
      if (r.values[f]) CHECK(std::binary_search(dom.begin(), dom.end(), *r.values[f]));
    }
  }
}

TEST_CASE("pooled logistic regression finds the signal") {
  const auto& city = default_city();
  ModelSpec spec;
  spec.kind = ModelKind::kLogisticRegression;
  spec.input_dim = city.schema->input_dim();
  const auto prepared = prepare_local(pool_cohorts(city.hospitals), ImputeStrategy::kMean);
  const auto w = train_local(init_model(spec), spec, TrainConfig{0.05, 20, 64, 1e-4}, prepared.train, 1);
  const auto test = prepare_eval(city.test, prepared.policy);
  CHECK(evaluate(w, spec, test).auc >= 0.75);
}

TEST_CASE("same seed gives byte-identical exports") {
  const auto cfg = testing::small_gen();
  const auto a = generate_synthetic_city(cfg, 99);
  const auto b = generate_synthetic_city(cfg, 99);
  const auto c = generate_synthetic_city(cfg, 100);
  for (std::size_t h = 0; h < a.hospitals.size(); ++h) CHECK(csv_of(a.hospitals[h]) == csv_of(b.hospitals[h]));
  CHECK(csv_of(a.test) == csv_of(b.test));
  CHECK(csv_of(a.test) != csv_of(c.test));

  testing::TempDir d1("city1"), d2("city2");
  write_city(a, d1.path());
  write_city(b, d2.path());
  for (const auto* name : {"schema.json", "hospital_A.csv", "hospital_E.csv", "test.csv"}) {
    CHECK(testing::read_file(d1 / name) == testing::read_file(d2 / name));
  }
  const auto schema = std::make_shared<const FeatureSchema>(load_schema(d1 / "schema.json"));
  CHECK(*schema == *a.schema);
  CHECK(csv_of(ingest_csv(d1 / "hospital_B.csv", schema, "B")) == csv_of(a.hospitals[1]));
}

TEST_CASE("config validation and infeasible targets") {
  auto cfg = testing::small_gen();
  cfg.positive_rates[0] = 0.0;
  CHECK_THROWS_AS(cfg.validate(), GenerationError);
  cfg = testing::small_gen();
  cfg.hospital_shares = {0.5, 0.5};
  CHECK_THROWS_AS(cfg.validate(), GenerationError);
  cfg = testing::small_gen();
  cfg.total_patients = 0;
  CHECK_THROWS_AS(cfg.validate(), GenerationError);

  // A target far above what the ground truth can produce exhausts the draw budget.
  cfg = testing::small_gen();
  cfg.positive_rates = {0.95, 0.035, 0.035, 0.008, 0.008};
  cfg.max_draws_per_patient = 3;
  CHECK_THROWS_AS(generate_synthetic_city(cfg, 1), GenerationError);
}

TEST_CASE("gen config json round trip") {
  const auto cfg = testing::small_gen();
  const nlohmann::json j = cfg;
  const auto back = j.get<GenConfig>();
  CHECK(nlohmann::json(back) == j);
}
