#include "fedtab/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "fedtab/rng.hpp"

namespace fedtab {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

std::optional<double> parse_number(const std::string& text) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string format_shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

[[noreturn]] void ingest_fail(const std::string& source, std::size_t row, const std::string& column,
                              const std::string& what) {
  throw IngestError(source + ": row " + std::to_string(row) + ", column '" + column + "': " + what);
}

}  // namespace

void FeatureSchema::validate() const {
  std::set<std::string> names;
  for (const auto& f : features) {
    if (f.name.empty()) throw SchemaError("feature with empty name");
    if (!names.insert(f.name).second) throw SchemaError("duplicate feature '" + f.name + "'");
    if (f.name == "sex" || f.name == "age" || f.name == label_name) {
      throw SchemaError("feature name '" + f.name + "' collides with a reserved column");
    }
    if (f.kind == FeatureKind::kDiscrete) {
      if (f.domain.empty()) throw SchemaError("discrete feature '" + f.name + "' has an empty domain");
      if (!std::is_sorted(f.domain.begin(), f.domain.end()) ||
          std::adjacent_find(f.domain.begin(), f.domain.end()) != f.domain.end()) {
        throw SchemaError("discrete feature '" + f.name + "' domain must be sorted and unique");
      }
    }
  }
  if (label_name.empty()) throw SchemaError("schema needs a label name");
  std::set<std::string> sel;
  for (const auto& s : selected) {
    if (!names.contains(s)) throw SchemaError("selected feature '" + s + "' is not in the schema");
    if (!sel.insert(s).second) throw SchemaError("feature '" + s + "' selected twice");
  }
  if (selected.empty()) throw SchemaError("schema selects no features");
}

std::size_t FeatureSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].name == name) return i;
  }
  throw SchemaError("feature '" + name + "' is not in the schema");
}

std::uint64_t FeatureSchema::digest() const {
  nlohmann::json j = *this;
  return fnv1a64(j.dump());
}

void to_json(nlohmann::json& j, const FeatureSchema& schema) {
  auto features = nlohmann::json::array();
  for (const auto& f : schema.features) {
    nlohmann::json fj{{"name", f.name},
                      {"kind", f.kind == FeatureKind::kDiscrete ? "discrete" : "continuous"}};
    if (f.kind == FeatureKind::kDiscrete) fj["domain"] = f.domain;
    features.push_back(std::move(fj));
  }
  j = nlohmann::json{{"features", std::move(features)},
                     {"label", schema.label_name},
                     {"selected", schema.selected}};
}

void from_json(const nlohmann::json& j, FeatureSchema& schema) {
  try {
    schema = {};
    for (const auto& fj : j.at("features")) {
      FeatureSpec f;
      f.name = fj.at("name").get<std::string>();
      const auto kind = fj.at("kind").get<std::string>();
      if (kind == "discrete") {
        f.kind = FeatureKind::kDiscrete;
        f.domain = fj.at("domain").get<std::vector<double>>();
      } else if (kind != "continuous") {
        throw SchemaError("feature '" + f.name + "' has unknown kind '" + kind + "'");
      }
      schema.features.push_back(std::move(f));
    }
    schema.label_name = j.value("label", std::string("stroke"));
    if (j.contains("selected")) {
      schema.selected = j.at("selected").get<std::vector<std::string>>();
    } else {
      for (const auto& f : schema.features) schema.selected.push_back(f.name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed schema: ") + e.what());
  }
  schema.validate();
}

FeatureSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open schema " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("schema " + path.string() + " is not valid JSON: " + e.what());
  }
  return j.get<FeatureSchema>();
}

void save_schema(const FeatureSchema& schema, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write schema " + path.string());
  out << nlohmann::json(schema).dump(2) << '\n';
}

std::size_t Cohort::missing_count() const {
  std::size_t n = 0;
  for (const auto& r : records) {
    n += static_cast<std::size_t>(std::count(r.values.begin(), r.values.end(), std::nullopt));
  }
  return n;
}

void Cohort::validate() const {
  if (hospital_id.empty()) throw SchemaError("cohort needs a hospital id");
  if (!schema) throw SchemaError("cohort has no schema");
  for (const auto& r : records) {
    if (r.values.size() != schema->features.size()) throw SchemaError("record width mismatch");
    if (r.label != 0 && r.label != 1) throw SchemaError("label must be 0 or 1");
    if (r.age < 0 || r.age > 120) throw SchemaError("age out of range [0, 120]");
  }
}

Cohort parse_csv(std::istream& in, std::shared_ptr<const FeatureSchema> schema,
                 std::string hospital_id, const std::string& source_name) {
  if (!schema) throw SchemaError("parse_csv needs a schema");
  std::vector<std::string> expected{"sex", "age"};
  for (const auto& f : schema->features) expected.push_back(f.name);
  expected.push_back(schema->label_name);

  std::string line;
  if (!std::getline(in, line)) throw IngestError(source_name + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_csv_line(line);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c >= expected.size() || header[c] != expected[c]) {
      ingest_fail(source_name, 0, header[c],
                  c >= expected.size() ? "unknown column" : "expected '" + expected[c] + "'");
    }
  }
  if (header.size() != expected.size()) {
    ingest_fail(source_name, 0, expected[header.size()], "column missing from header");
  }

  Cohort cohort{std::move(hospital_id), {}, schema};
  const std::size_t n_features = schema->features.size();
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != expected.size()) {
      ingest_fail(source_name, row, cells.size() < expected.size() ? expected[cells.size()] : "?",
                  "expected " + std::to_string(expected.size()) + " cells, found " +
                      std::to_string(cells.size()));
    }
    PatientRecord rec;
    if (cells[0] == "M") {
      rec.sex = Sex::kMale;
    } else if (cells[0] == "F") {
      rec.sex = Sex::kFemale;
    } else {
      ingest_fail(source_name, row, "sex", "expected M or F, got '" + cells[0] + "'");
    }
    int age = -1;
    auto [ptr, ec] = std::from_chars(cells[1].data(), cells[1].data() + cells[1].size(), age);
    if (ec != std::errc{} || ptr != cells[1].data() + cells[1].size() || age < 0 || age > 120) {
      ingest_fail(source_name, row, "age", "expected an integer in [0, 120], got '" + cells[1] + "'");
    }
    rec.age = age;
    rec.values.reserve(n_features);
    for (std::size_t f = 0; f < n_features; ++f) {
      const auto& cell = cells[2 + f];
      if (cell.empty() || cell == "NA") {
        rec.values.emplace_back(std::nullopt);
        continue;
      }
      auto v = parse_number(cell);
      if (!v) ingest_fail(source_name, row, schema->features[f].name, "unparseable value '" + cell + "'");
      rec.values.emplace_back(*v);
    }
    const auto& label = cells.back();
    if (label == "0") {
      rec.label = 0;
    } else if (label == "1") {
      rec.label = 1;
    } else if (label.empty() || label == "NA") {
      ingest_fail(source_name, row, schema->label_name, "missing label");
    } else {
      ingest_fail(source_name, row, schema->label_name, "label must be 0 or 1, got '" + label + "'");
    }
    cohort.records.push_back(std::move(rec));
  }
  return cohort;
}

Cohort ingest_csv(const std::filesystem::path& path, std::shared_ptr<const FeatureSchema> schema,
                  std::string hospital_id) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  if (hospital_id.empty()) hospital_id = path.stem().string();
  return parse_csv(in, std::move(schema), std::move(hospital_id), path.string());
}

void write_csv(const Cohort& cohort, std::ostream& out) {
  out << "sex,age";
  for (const auto& f : cohort.schema->features) out << ',' << f.name;
  out << ',' << cohort.schema->label_name << '\n';
  for (const auto& r : cohort.records) {
    out << (r.sex == Sex::kMale ? 'M' : 'F') << ',' << r.age;
    for (const auto& v : r.values) {
      out << ',';
      if (v) out << format_shortest(*v);
    }
    out << ',' << r.label << '\n';
  }
}

void export_csv(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  write_csv(cohort, out);
}

std::string to_string(ImputeStrategy s) { return s == ImputeStrategy::kMean ? "mean" : "median"; }

ImputeStrategy impute_strategy_from_string(const std::string& name) {
  if (name == "mean") return ImputeStrategy::kMean;
  if (name == "median") return ImputeStrategy::kMedian;
  throw ConfigError("unknown impute strategy '" + name + "'");
}

ImputePolicy fit_impute(const Cohort& cohort, ImputeStrategy strategy) {
  return fit_impute(cohort, std::vector<ImputeStrategy>(cohort.schema->features.size(), strategy));
}

ImputePolicy fit_impute(const Cohort& cohort, const std::vector<ImputeStrategy>& per_feature) {
  const auto& features = cohort.schema->features;
  if (per_feature.size() != features.size()) throw ConfigError("one impute strategy per feature required");
  ImputePolicy policy{per_feature, std::vector<double>(features.size(), 0.0)};
  std::vector<double> observed;
  observed.reserve(cohort.size());
  for (std::size_t f = 0; f < features.size(); ++f) {
    observed.clear();
    for (const auto& r : cohort.records) {
      if (r.values[f]) observed.push_back(*r.values[f]);
    }
    if (observed.empty()) {
      throw ImputeError("feature '" + features[f].name + "' has no observed values in cohort '" +
                        cohort.hospital_id + "'");
    }
    if (per_feature[f] == ImputeStrategy::kMean) {
      double sum = 0.0;
      for (double v : observed) sum += v;
      policy.fill[f] = sum / static_cast<double>(observed.size());
    } else {
      std::sort(observed.begin(), observed.end());
      const auto m = observed.size();
      policy.fill[f] = m % 2 == 1 ? observed[m / 2] : 0.5 * (observed[m / 2 - 1] + observed[m / 2]);
    }
  }
  return policy;
}

double nearest_in_domain(double value, const std::vector<double>& domain) {
  if (domain.empty()) throw SchemaError("nearest_in_domain on an empty domain");
  auto it = std::lower_bound(domain.begin(), domain.end(), value);
  if (it == domain.begin()) return *it;
  if (it == domain.end()) return domain.back();
  const double above = *it;
  const double below = *std::prev(it);
  return (above - value) < (value - below) ? above : below;
}

Cohort apply_impute(const Cohort& cohort, const ImputePolicy& policy) {
  const auto& features = cohort.schema->features;
  if (policy.fill.size() != features.size()) throw SchemaError("impute policy does not match schema");
  std::vector<double> fill(features.size());
  for (std::size_t f = 0; f < features.size(); ++f) {
    fill[f] = features[f].kind == FeatureKind::kDiscrete
                  ? nearest_in_domain(policy.fill[f], features[f].domain)
                  : policy.fill[f];
  }
  Cohort out = cohort;
  for (auto& r : out.records) {
    for (std::size_t f = 0; f < features.size(); ++f) {
      if (!r.values[f]) r.values[f] = fill[f];
    }
  }
  return out;
}

Dataset select_features(const Cohort& cohort) {
  const auto& schema = *cohort.schema;
  std::vector<std::size_t> columns;
  columns.reserve(schema.selected.size());
  for (const auto& name : schema.selected) columns.push_back(schema.index_of(name));

  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(cohort.size()), static_cast<Eigen::Index>(columns.size()));
  d.labels.resize(static_cast<Eigen::Index>(cohort.size()));
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& r = cohort.records[i];
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& v = r.values[columns[c]];
      if (!v) {
        throw UsageError("select_features: feature '" + schema.selected[c] + "' still missing in row " +
                         std::to_string(i + 1) + "; impute first");
      }
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = *v;
    }
    d.labels(static_cast<Eigen::Index>(i)) = r.label;
  }
  return d;
}

Cohort pool_cohorts(const std::vector<Cohort>& cohorts, std::string hospital_id) {
  if (cohorts.empty()) throw UsageError("pool_cohorts needs at least one cohort");
  Cohort pooled{std::move(hospital_id), {}, cohorts.front().schema};
  for (const auto& c : cohorts) {
    if (*c.schema != *pooled.schema) throw SchemaError("cannot pool cohorts with different schemas");
    pooled.records.insert(pooled.records.end(), c.records.begin(), c.records.end());
  }
  return pooled;
}

void CohortStats::validate() const {
  auto sum = [](const std::vector<std::int64_t>& v) {
    std::int64_t s = 0;
    for (auto x : v) {
      if (x < 0) throw SchemaError("negative histogram bin");
      s += x;
    }
    return s;
  };
  if (n < 0 || n_pos < 0 || n_neg < 0 || n_male < 0 || n_female < 0) {
    throw SchemaError("cohort stats counts must be non-negative");
  }
  if (n_pos + n_neg != n) throw SchemaError("n_pos + n_neg must equal n");
  if (n_male + n_female != n) throw SchemaError("n_male + n_female must equal n");
  if (age_histogram.size() != kAgeBins) throw SchemaError("age histogram must have 12 ten-year bins");
  if (sum(age_histogram) != n) throw SchemaError("age histogram bins must sum to n");
}

CohortStats cohort_stats(const Cohort& cohort) {
  CohortStats s;
  s.n = static_cast<std::int64_t>(cohort.size());
  for (const auto& r : cohort.records) {
    s.n_pos += r.label == 1;
    (r.sex == Sex::kMale ? s.n_male : s.n_female) += 1;
    s.age_histogram[std::min<std::size_t>(static_cast<std::size_t>(r.age) / 10, kAgeBins - 1)] += 1;
  }
  s.n_neg = s.n - s.n_pos;
  return s;
}

void to_json(nlohmann::json& j, const CohortStats& s) {
  j = nlohmann::json{{"n", s.n},           {"n_pos", s.n_pos},       {"n_neg", s.n_neg},
                     {"n_male", s.n_male}, {"n_female", s.n_female}, {"age_histogram", s.age_histogram}};
}

void from_json(const nlohmann::json& j, CohortStats& s) {
  s.n = j.at("n").get<std::int64_t>();
  s.n_pos = j.at("n_pos").get<std::int64_t>();
  s.n_neg = j.at("n_neg").get<std::int64_t>();
  s.n_male = j.at("n_male").get<std::int64_t>();
  s.n_female = j.at("n_female").get<std::int64_t>();
  s.age_histogram = j.at("age_histogram").get<std::vector<std::int64_t>>();
}

PreparedData prepare_local(const Cohort& train, ImputeStrategy strategy) {
  if (train.size() == 0) throw UsageError("cohort '" + train.hospital_id + "' is empty");
  PreparedData p;
  p.policy = fit_impute(train, strategy);
  p.train = select_features(apply_impute(train, p.policy));
  p.stats = cohort_stats(train);
  return p;
}

Dataset prepare_eval(const Cohort& eval, const ImputePolicy& policy) {
  return select_features(apply_impute(eval, policy));
}

}  // namespace fedtab
