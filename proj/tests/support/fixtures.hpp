#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <thread>

#include <unistd.h>

#include <Eigen/Dense>

#include "fedtab/data.hpp"
#include "fedtab/model.hpp"
#include "fedtab/rng.hpp"
#include "fedtab/synth.hpp"

namespace fedtab::testing {

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fedtab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Dataset random_dataset(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Dataset d;
  d.features.resize(rows, cols);
  d.labels.resize(rows);
  Eigen::VectorXd beta(cols);
  for (Eigen::Index c = 0; c < cols; ++c) beta(c) = rng.normal();
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) d.features(r, c) = rng.normal();
    const double p = 1.0 / (1.0 + std::exp(-d.features.row(r).dot(beta) / std::sqrt(double(cols))));
    d.labels(r) = rng.bernoulli(p) ? 1.0 : 0.0;
  }
  return d;
}

inline ParameterVector random_weights(const ModelSpec& spec, std::uint64_t seed, double scale = 0.5) {
  auto w = init_model(spec);
  SplitMix64 rng(seed);
  for (Eigen::Index k = 0; k < w.size(); ++k) w.values(k) = rng.uniform(-scale, scale);
  return w;
}

// Three features: sbp (continuous), smoker (discrete {0,1}), bmi (continuous).
inline std::shared_ptr<const FeatureSchema> tiny_schema() {
  FeatureSchema s;
  s.features = {{"sbp", FeatureKind::kContinuous, {}},
                {"smoker", FeatureKind::kDiscrete, {0.0, 1.0}},
                {"bmi", FeatureKind::kContinuous, {}}};
  s.selected = {"sbp", "smoker", "bmi"};
  return std::make_shared<const FeatureSchema>(s);
}

inline PatientRecord record(std::vector<std::optional<double>> values, int label, Sex sex = Sex::kFemale,
                            int age = 60) {
  PatientRecord r;
  r.values = std::move(values);
  r.label = label;
  r.sex = sex;
  r.age = age;
  return r;
}

// A small city that keeps integration tests fast.
inline GenConfig small_gen(int total = 3000, int test = 1000, int features = 20) {
  GenConfig g;
  g.total_patients = total;
  g.test_patients = test;
  g.n_features = features;
  g.n_informative = std::min(features, 10);
  g.effect_scale = 0.6;
  return g;
}

template <typename Pred>
bool wait_until(Pred pred, int timeout_ms, int step_ms = 5) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (std::chrono::steady_clock::now() < deadline) {
    if (pred()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(step_ms));
  }
  return pred();
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fedtab::testing
