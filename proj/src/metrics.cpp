#include "fedtab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace fedtab {

double auc(const Eigen::Ref<const Eigen::VectorXd>& scores,
           const Eigen::Ref<const Eigen::VectorXd>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  const auto n = static_cast<std::size_t>(scores.size());
  std::int64_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels(static_cast<Eigen::Index>(i));
    if (y != 0.0 && y != 1.0) throw UsageError("auc: labels must be 0 or 1");
    n_pos += y == 1.0;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("auc undefined: need both positive and negative labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b));
  });

  // Twice the positive rank sum; tie groups share the average of 1-based ranks
  // start+1 .. end, i.e. twice-rank = start + end + 1.
  std::int64_t twice_rank_sum = 0;
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start + 1;
    const double s = scores(static_cast<Eigen::Index>(order[start]));
    while (end < n && scores(static_cast<Eigen::Index>(order[end])) == s) ++end;
    std::int64_t group_pos = 0;
    for (std::size_t k = start; k < end; ++k) group_pos += labels(static_cast<Eigen::Index>(order[k])) == 1.0;
    twice_rank_sum += group_pos * static_cast<std::int64_t>(start + end + 1);
    start = end;
  }
  const std::int64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_pos * n_neg);
}

EvalResult evaluate_scores(const Eigen::Ref<const Eigen::VectorXd>& scores,
                           const Eigen::Ref<const Eigen::VectorXd>& labels) {
  EvalResult r;
  r.auc = auc(scores, labels);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const bool pos = labels(i) == 1.0;
    r.n_pos += pos;
    correct += (scores(i) >= 0.5) == pos;
  }
  r.n_neg = static_cast<std::size_t>(scores.size()) - r.n_pos;
  r.accuracy_at_half = static_cast<double>(correct) / static_cast<double>(scores.size());
  return r;
}

EvalResult evaluate(const ParameterVector& w, const ModelSpec& spec, const Dataset& data) {
  return evaluate_scores(predict_batch(w, spec, data.features), data.labels);
}

AucSummary summarize(std::span<const double> aucs) {
  if (aucs.empty()) throw UsageError("summarize needs at least one run");
  AucSummary s;
  s.runs = aucs.size();
  s.mean = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(aucs.size());
  if (aucs.size() >= 2) {
    double ss = 0.0;
    for (double a : aucs) ss += (a - s.mean) * (a - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(aucs.size() - 1));
    s.std_error = *s.std / std::sqrt(static_cast<double>(aucs.size()));
  }
  return s;
}

AucSummary summarize(std::span<const EvalResult> runs) {
  std::vector<double> aucs;
  aucs.reserve(runs.size());
  for (const auto& r : runs) aucs.push_back(r.auc);
  return summarize(std::span<const double>(aucs));
}

}  // namespace fedtab
