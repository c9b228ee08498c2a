#include "fedtab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedtab/rng.hpp"

namespace fedtab {

namespace {

// A handful of recognisable risk-factor names lead the schema; the rest are generic.
struct NamedFeature {
  const char* name;
  FeatureKind kind;
  int levels;
};

constexpr NamedFeature kNamedFeatures[] = {
    {"age_z", FeatureKind::kContinuous, 0},
    {"sex_male", FeatureKind::kDiscrete, 2},
    {"systolic_bp", FeatureKind::kContinuous, 0},
    {"antihypertensive_tx", FeatureKind::kDiscrete, 2},
    {"prior_coronary_disease", FeatureKind::kDiscrete, 2},
    {"diabetes", FeatureKind::kDiscrete, 2},
    {"atrial_fibrillation", FeatureKind::kDiscrete, 2},
    {"smoking_status", FeatureKind::kDiscrete, 3},
    {"bmi", FeatureKind::kContinuous, 0},
    {"ldl_cholesterol", FeatureKind::kContinuous, 0},
    {"hba1c", FeatureKind::kContinuous, 0},
    {"left_ventricular_hypertrophy", FeatureKind::kDiscrete, 2},
};

constexpr std::size_t kAgeFeature = 0;
constexpr std::size_t kSexFeature = 1;

struct FeatureModel {
  FeatureKind kind = FeatureKind::kContinuous;
  int levels = 0;             // discrete: 2 or 3
  double base_logit = 0.0;    // discrete success logit
  double center = 0.0;        // pooled expectation, used to center the ground truth
};

struct HospitalModel {
  std::vector<double> shift;  // per-feature mean (continuous) or logit (discrete) shift
  double mean_age = 62.0;
  double p_male = 0.5;
};

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Candidate {
  PatientRecord record;
  double logit = 0.0;
};

class CityModel {
 public:
  CityModel(const GenConfig& config, std::uint64_t seed) : config_(config) {
    SplitMix64 rng(derive_seed(seed, 0xfea7));
    const auto nf = static_cast<std::size_t>(config.n_features);
    features_.resize(nf);
    schema_.label_name = "stroke";
    for (std::size_t j = 0; j < nf; ++j) {
      FeatureSpec spec;
      auto& fm = features_[j];
      if (j < std::size(kNamedFeatures)) {
        spec.name = kNamedFeatures[j].name;
        fm.kind = kNamedFeatures[j].kind;
        fm.levels = kNamedFeatures[j].levels;
      } else {
        const bool discrete = rng.uniform() < config.discrete_fraction;
        fm.kind = discrete ? FeatureKind::kDiscrete : FeatureKind::kContinuous;
        fm.levels = discrete ? (rng.uniform() < 0.75 ? 2 : 3) : 0;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "feat_%03zu", j);
        spec.name = buf;
      }
      spec.kind = fm.kind;
      if (fm.kind == FeatureKind::kDiscrete) {
        for (int v = 0; v < fm.levels; ++v) spec.domain.push_back(v);
        const double p = j == kSexFeature ? 0.5 : rng.uniform(0.1, 0.5);
        fm.base_logit = std::log(p / (1.0 - p));
        fm.center = (fm.levels - 1) * p;
      }
      schema_.features.push_back(std::move(spec));
      schema_.selected.push_back(schema_.features.back().name);
    }

    // Ground truth: age and sex plus the next informative features carry signal.
    coefficients_.assign(nf, 0.0);
    const auto informative = std::min<std::size_t>(static_cast<std::size_t>(config.n_informative), nf);
    for (std::size_t j = 0; j < informative; ++j) {
      double beta = config.effect_scale * rng.uniform(0.5, 1.5);
      if (j > kSexFeature && rng.uniform() < 0.3) beta = -beta;
      if (features_[j].kind == FeatureKind::kDiscrete) beta *= 2.0;
      coefficients_[j] = beta;
    }
    if (nf > 0) coefficients_[kAgeFeature] = 2.0 * config.effect_scale;

    for (std::size_t h = 0; h < config.hospital_ids.size(); ++h) {
      HospitalModel hm;
      hm.shift.resize(nf);
      for (auto& s : hm.shift) s = config.shift_scale * rng.normal();
      hm.mean_age = 62.0 + 4.0 * rng.normal();
      hm.p_male = std::clamp(0.5 + 0.05 * rng.normal(), 0.3, 0.7);
      hospitals_.push_back(std::move(hm));
    }

    calibrate_intercept(derive_seed(seed, 0xca1b));
  }

  Candidate draw(std::size_t hospital, SplitMix64& rng) const {
    const auto& hm = hospitals_[hospital];
    const auto nf = features_.size();
    Candidate c;
    auto& r = c.record;
    r.age = static_cast<int>(std::lround(std::clamp(hm.mean_age + 14.0 * rng.normal(), 18.0, 100.0)));
    r.sex = rng.uniform() < hm.p_male ? Sex::kMale : Sex::kFemale;
    r.values.resize(nf);
    double eta = 0.0;
    for (std::size_t j = 0; j < nf; ++j) {
      const auto& fm = features_[j];
      double v = 0.0;
      if (j == kAgeFeature) {
        v = (r.age - 62.0) / 14.0;
      } else if (j == kSexFeature) {
        v = r.sex == Sex::kMale ? 1.0 : 0.0;
      } else if (fm.kind == FeatureKind::kContinuous) {
        v = hm.shift[j] + rng.normal();
      } else {
        const double p = logistic(fm.base_logit + hm.shift[j]);
        for (int t = 1; t < fm.levels; ++t) v += rng.uniform() < p ? 1.0 : 0.0;
      }
      r.values[j] = v;
      eta += coefficients_[j] * (v - fm.center);
    }
    c.logit = eta;
    return c;
  }

  // Rejection-sample `n` patients from `hospitals` (chosen by share) hitting an exact positive quota.
  std::vector<PatientRecord> sample(const std::vector<std::size_t>& pool, const std::vector<double>& weights,
                                    int n, double positive_rate, SplitMix64& rng,
                                    const std::string& who) const {
    const int pos_quota = static_cast<int>(std::lround(positive_rate * n));
    const int neg_quota = n - pos_quota;
    int pos = 0;
    int neg = 0;
    std::vector<PatientRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    const double total_w = std::accumulate(weights.begin(), weights.end(), 0.0);
    const long long budget = static_cast<long long>(config_.max_draws_per_patient) * std::max(n, 1);
    long long draws = 0;
    while (pos < pos_quota || neg < neg_quota) {
      if (++draws > budget) {
        throw GenerationError("cannot reach positive rate " + std::to_string(positive_rate) + " for " +
                              who + " within the draw budget; ground-truth prevalence is too low");
      }
      std::size_t h = pool.front();
      if (pool.size() > 1) {
        double u = rng.uniform() * total_w;
        for (std::size_t k = 0; k < pool.size(); ++k) {
          h = pool[k];
          if (u < weights[k]) break;
          u -= weights[k];
        }
      }
      auto c = draw(h, rng);
      const int label = rng.uniform() < logistic(intercept_ + c.logit) ? 1 : 0;
      if (label == 1 ? pos >= pos_quota : neg >= neg_quota) continue;
      (label == 1 ? pos : neg) += 1;
      c.record.label = label;
      out.push_back(std::move(c.record));
    }
    return out;
  }

  void inject_missing(std::vector<PatientRecord>& records, SplitMix64& rng) const {
    for (auto& r : records) {
      for (std::size_t j = 0; j < r.values.size(); ++j) {
        if (j == kAgeFeature || j == kSexFeature) continue;
        if (rng.uniform() < config_.missing_rate) r.values[j] = std::nullopt;
      }
    }
  }

  const FeatureSchema& schema() const { return schema_; }
  double intercept() const { return intercept_; }
  const std::vector<double>& coefficients() const { return coefficients_; }

 private:
  void calibrate_intercept(std::uint64_t key) {
    SplitMix64 rng(key);
    std::vector<double> etas;
    constexpr int kPilot = 20000;
    etas.reserve(kPilot);
    for (int i = 0; i < kPilot; ++i) {
      double u = rng.uniform();
      std::size_t h = 0;
      for (; h + 1 < hospitals_.size(); ++h) {
        if (u < config_.hospital_shares[h]) break;
        u -= config_.hospital_shares[h];
      }
      etas.push_back(draw(h, rng).logit);
    }
    double lo = -20.0;
    double hi = 20.0;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      double prev = 0.0;
      for (double e : etas) prev += logistic(mid + e);
      prev /= kPilot;
      (prev < config_.base_prevalence ? lo : hi) = mid;
    }
    intercept_ = 0.5 * (lo + hi);
  }

  GenConfig config_;
  FeatureSchema schema_;
  std::vector<FeatureModel> features_;
  std::vector<HospitalModel> hospitals_;
  std::vector<double> coefficients_;
  double intercept_ = 0.0;
};

}  // namespace

void GenConfig::validate() const {
  if (n_features < 2) throw GenerationError("n_features must be >= 2 (age and sex are always present)");
  if (total_patients < 1 || test_patients < 1) throw GenerationError("cohort sizes must be positive");
  if (hospital_ids.empty()) throw GenerationError("need at least one hospital");
  if (hospital_shares.size() != hospital_ids.size() || positive_rates.size() != hospital_ids.size()) {
    throw GenerationError("hospital_ids, hospital_shares and positive_rates must align");
  }
  double total = 0.0;
  for (double s : hospital_shares) {
    if (!(s > 0.0)) throw GenerationError("hospital shares must be positive");
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-9) throw GenerationError("hospital shares must sum to 1");
  for (double p : positive_rates) {
    if (!(p > 0.0 && p < 1.0)) throw GenerationError("positive rates must lie in (0, 1)");
  }
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw GenerationError("missing_rate must be in [0, 1)");
  if (!(base_prevalence > 0.0 && base_prevalence < 1.0)) {
    throw GenerationError("base_prevalence must be in (0, 1)");
  }
  if (max_draws_per_patient < 1) throw GenerationError("max_draws_per_patient must be >= 1");
}

double GenConfig::pooled_positive_rate() const {
  double r = 0.0;
  for (std::size_t h = 0; h < hospital_shares.size(); ++h) r += hospital_shares[h] * positive_rates[h];
  return r;
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = nlohmann::json{{"n_features", c.n_features},
                     {"total_patients", c.total_patients},
                     {"test_patients", c.test_patients},
                     {"hospital_ids", c.hospital_ids},
                     {"hospital_shares", c.hospital_shares},
                     {"positive_rates", c.positive_rates},
                     {"missing_rate", c.missing_rate},
                     {"discrete_fraction", c.discrete_fraction},
                     {"n_informative", c.n_informative},
                     {"effect_scale", c.effect_scale},
                     {"shift_scale", c.shift_scale},
                     {"base_prevalence", c.base_prevalence},
                     {"max_draws_per_patient", c.max_draws_per_patient}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  GenConfig d;
  c.n_features = j.value("n_features", d.n_features);
  c.total_patients = j.value("total_patients", d.total_patients);
  c.test_patients = j.value("test_patients", d.test_patients);
  c.hospital_ids = j.value("hospital_ids", d.hospital_ids);
  c.hospital_shares = j.value("hospital_shares", d.hospital_shares);
  c.positive_rates = j.value("positive_rates", d.positive_rates);
  c.missing_rate = j.value("missing_rate", d.missing_rate);
  c.discrete_fraction = j.value("discrete_fraction", d.discrete_fraction);
  c.n_informative = j.value("n_informative", d.n_informative);
  c.effect_scale = j.value("effect_scale", d.effect_scale);
  c.shift_scale = j.value("shift_scale", d.shift_scale);
  c.base_prevalence = j.value("base_prevalence", d.base_prevalence);
  c.max_draws_per_patient = j.value("max_draws_per_patient", d.max_draws_per_patient);
}

SyntheticCity generate_synthetic_city(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  CityModel model(config, seed);

  SyntheticCity city;
  city.schema = std::make_shared<const FeatureSchema>(model.schema());
  city.intercept = model.intercept();
  city.coefficients = model.coefficients();

  const auto nh = config.hospital_ids.size();
  int assigned = 0;
  for (std::size_t h = 0; h < nh; ++h) {
    const int n = h + 1 == nh ? config.total_patients - assigned
                              : static_cast<int>(std::lround(config.hospital_shares[h] * config.total_patients));
    assigned += n;
    if (n < 1) throw GenerationError("hospital " + config.hospital_ids[h] + " would be empty");
    SplitMix64 rng(derive_seed(seed, 0x40, h));
    auto records = model.sample({h}, {1.0}, n, config.positive_rates[h], rng,
                                "hospital " + config.hospital_ids[h]);
    model.inject_missing(records, rng);
    city.hospitals.push_back(Cohort{config.hospital_ids[h], std::move(records), city.schema});
  }

  std::vector<std::size_t> all(nh);
  std::iota(all.begin(), all.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, 0x7e57));
  city.test = Cohort{"test",
                     model.sample(all, config.hospital_shares, config.test_patients,
                                  config.pooled_positive_rate(), rng, "the test cohort"),
                     city.schema};
  return city;
}

void write_city(const SyntheticCity& city, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_schema(*city.schema, dir / "schema.json");
  for (const auto& c : city.hospitals) export_csv(c, dir / ("hospital_" + c.hospital_id + ".csv"));
  export_csv(city.test, dir / "test.csv");
}

}  // namespace fedtab
