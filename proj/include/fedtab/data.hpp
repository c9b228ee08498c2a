#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedtab/model.hpp"

namespace fedtab {

enum class FeatureKind { kContinuous, kDiscrete };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::kContinuous;
  std::vector<double> domain;  // sorted observed values, discrete only

  bool operator==(const FeatureSpec&) const = default;
};

struct FeatureSchema {
  std::vector<FeatureSpec> features;
  std::string label_name = "stroke";
  std::vector<std::string> selected;

  void validate() const;
  std::size_t index_of(const std::string& name) const;  // throws SchemaError
  int input_dim() const { return static_cast<int>(selected.size()); }

  // FNV-1a over the canonical JSON dump; shared between coordinator and clients.
  std::uint64_t digest() const;

  bool operator==(const FeatureSchema&) const = default;
};

void to_json(nlohmann::json& j, const FeatureSchema& schema);
void from_json(const nlohmann::json& j, FeatureSchema& schema);

FeatureSchema load_schema(const std::filesystem::path& path);
void save_schema(const FeatureSchema& schema, const std::filesystem::path& path);

enum class Sex { kMale, kFemale };

struct PatientRecord {
  std::vector<std::optional<double>> values;  // nullopt = missing
  int label = 0;
  Sex sex = Sex::kFemale;
  int age = 0;

  bool operator==(const PatientRecord&) const = default;
};

struct Cohort {
  std::string hospital_id;
  std::vector<PatientRecord> records;
  std::shared_ptr<const FeatureSchema> schema;

  std::size_t size() const { return records.size(); }
  std::size_t missing_count() const;
  void validate() const;
};

// CSV layout: header `sex,age,<feature names...>,<label>`; sex is M or F;
// missing cells are empty or NA; the label column is last.
Cohort ingest_csv(const std::filesystem::path& path, std::shared_ptr<const FeatureSchema> schema,
                  std::string hospital_id = {});
Cohort parse_csv(std::istream& in, std::shared_ptr<const FeatureSchema> schema,
                 std::string hospital_id, const std::string& source_name = "<stream>");
void export_csv(const Cohort& cohort, const std::filesystem::path& path);
void write_csv(const Cohort& cohort, std::ostream& out);

enum class ImputeStrategy { kMean, kMedian };

std::string to_string(ImputeStrategy s);
ImputeStrategy impute_strategy_from_string(const std::string& name);

struct ImputePolicy {
  std::vector<ImputeStrategy> strategy;  // per feature
  std::vector<double> fill;              // fitted fill value per feature
};

ImputePolicy fit_impute(const Cohort& cohort, ImputeStrategy strategy);
ImputePolicy fit_impute(const Cohort& cohort, const std::vector<ImputeStrategy>& per_feature);

// Nearest member of a sorted domain; equidistant candidates resolve to the smaller value.
double nearest_in_domain(double value, const std::vector<double>& domain);

Cohort apply_impute(const Cohort& cohort, const ImputePolicy& policy);

// Model-ready projection onto schema.selected, in that order.
Dataset select_features(const Cohort& cohort);

// Pools cohorts that share one schema (the centralized-training reference).
Cohort pool_cohorts(const std::vector<Cohort>& cohorts, std::string hospital_id = "pooled");

inline constexpr std::size_t kAgeBins = 12;  // [0,10), ..., [100,110), [110,120]

struct CohortStats {
  std::int64_t n = 0;
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  std::int64_t n_male = 0;
  std::int64_t n_female = 0;
  std::vector<std::int64_t> age_histogram = std::vector<std::int64_t>(kAgeBins, 0);

  void validate() const;  // throws SchemaError on inconsistent counts
  bool operator==(const CohortStats&) const = default;
};

CohortStats cohort_stats(const Cohort& cohort);

void to_json(nlohmann::json& j, const CohortStats& s);
void from_json(const nlohmann::json& j, CohortStats& s);

// Local pipeline shared by clients and the in-process simulation:
// fit imputation on `train`, apply it, project to the selected features.
struct PreparedData {
  Dataset train;
  ImputePolicy policy;
  CohortStats stats;
};

PreparedData prepare_local(const Cohort& train, ImputeStrategy strategy);

// Applies an existing policy to an evaluation cohort and projects it.
Dataset prepare_eval(const Cohort& eval, const ImputePolicy& policy);

}  // namespace fedtab
