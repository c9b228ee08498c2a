#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedtab/model.hpp"

namespace fedtab {

struct EvalResult {
  double auc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  double accuracy_at_half = 0.0;
};

// Area under the ROC curve with ties counted one half (Mann-Whitney U / (n_pos n_neg)).
// Computed from average ranks but bit-identical to the pairwise definition.
double auc(const Eigen::Ref<const Eigen::VectorXd>& scores,
           const Eigen::Ref<const Eigen::VectorXd>& labels);

EvalResult evaluate_scores(const Eigen::Ref<const Eigen::VectorXd>& scores,
                           const Eigen::Ref<const Eigen::VectorXd>& labels);
EvalResult evaluate(const ParameterVector& w, const ModelSpec& spec, const Dataset& data);

struct AucSummary {
  double mean = 0.0;
  std::optional<double> std;        // sample standard deviation, n - 1 denominator
  std::optional<double> std_error;  // std / sqrt(n)
  std::size_t runs = 0;
};

AucSummary summarize(std::span<const double> aucs);
AucSummary summarize(std::span<const EvalResult> runs);

}  // namespace fedtab
