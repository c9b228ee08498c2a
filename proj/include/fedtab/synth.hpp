#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtab/data.hpp"

namespace fedtab {

// Synthetic multi-hospital city. Defaults: five hospitals, A holding half of
// ~20k patients, A-C at 3.5% positives, D-E at 0.8%, 119 features.
struct GenConfig {
  int n_features = 119;
  int total_patients = 20000;
  int test_patients = 5000;
  std::vector<std::string> hospital_ids{"A", "B", "C", "D", "E"};
  std::vector<double> hospital_shares{0.50, 0.15, 0.15, 0.10, 0.10};
  std::vector<double> positive_rates{0.035, 0.035, 0.035, 0.008, 0.008};
  double missing_rate = 0.05;
  double discrete_fraction = 0.35;
  int n_informative = 30;
  double effect_scale = 0.32;
  double shift_scale = 0.2;
  double base_prevalence = 0.08;
  int max_draws_per_patient = 200;

  void validate() const;
  double pooled_positive_rate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct SyntheticCity {
  std::shared_ptr<const FeatureSchema> schema;
  std::vector<Cohort> hospitals;
  Cohort test;  // drawn from the pooled distribution, fully observed
  double intercept = 0.0;
  std::vector<double> coefficients;  // ground-truth logit weights, schema feature order
};

SyntheticCity generate_synthetic_city(const GenConfig& config, std::uint64_t seed);

// schema.json, hospital_<id>.csv per hospital, test.csv
void write_city(const SyntheticCity& city, const std::filesystem::path& dir);

}  // namespace fedtab
