#include "fedtab/fed.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "fedtab/metrics.hpp"
#include "fedtab/rng.hpp"

namespace fedtab {

std::string to_string(AggregationMode mode) {
  return mode == AggregationMode::kPlainMean ? "plain-mean" : "sample-weighted";
}

AggregationMode aggregation_mode_from_string(const std::string& name) {
  if (name == "plain-mean") return AggregationMode::kPlainMean;
  if (name == "sample-weighted") return AggregationMode::kSampleWeighted;
  throw ConfigError("unknown aggregation mode '" + name + "'");
}

void ModelUpdate::validate() const {
  if (client_id.empty()) throw UsageError("update has no client_id");
  if (round < 0) throw UsageError("update round must be >= 0");
  if (n_samples < 1) throw UsageError("update n_samples must be >= 1");
  if (local_epochs_used < 1) throw UsageError("update local_epochs_used must be >= 1");
  if (!weights.all_finite()) throw UsageError("update weights must be finite");
}

void ConvergenceCriterion::validate() const {
  if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
  if (!(weight_delta_tol >= 0.0)) throw ConfigError("weight_delta_tol must be non-negative");
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

RoundState make_round_state(ParameterVector initial, int min_clients, int staleness_window) {
  if (min_clients < 1) throw ConfigError("min_clients must be >= 1");
  if (staleness_window < 0) throw ConfigError("staleness_window must be >= 0");
  RoundState s;
  s.global_weights = std::move(initial);
  s.min_clients = min_clients;
  s.staleness_window = staleness_window;
  return s;
}

ParameterVector aggregate(std::span<const ModelUpdate> updates, AggregationMode mode) {
  if (updates.empty()) throw UsageError("aggregate needs at least one update");
  std::vector<const ModelUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) {
    if (!u.weights.compatible_with(updates.front().weights)) {
      throw AggregationError("update from '" + u.client_id + "' has an incompatible layout");
    }
    ordered.push_back(&u);
  }
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ModelUpdate* a, const ModelUpdate* b) { return a->client_id < b->client_id; });

  // Integer weights: 1 each for plain mean, n_i / gcd(n) for sample weighting,
  // so equal sample counts reproduce the plain mean bit for bit.
  std::vector<std::int64_t> k(ordered.size(), 1);
  if (mode == AggregationMode::kSampleWeighted) {
    std::int64_t g = 0;
    for (const auto* u : ordered) {
      if (u->n_samples < 1) throw AggregationError("sample-weighted aggregation needs n_samples >= 1");
      g = std::gcd(g, u->n_samples);
    }
    for (std::size_t i = 0; i < ordered.size(); ++i) k[i] = ordered[i]->n_samples / g;
  }
  double total = 0.0;
  for (auto ki : k) total += static_cast<double>(ki);

  // Accumulate deviations from the first vector so m identical inputs return it exactly.
  const auto& ref = ordered.front()->weights.values;
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(ref.size());
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (k[i] == 1) {
      acc += ordered[i]->weights.values - ref;
    } else {
      acc += static_cast<double>(k[i]) * (ordered[i]->weights.values - ref);
    }
  }
  ParameterVector out(ref + acc / total, updates.front().weights.layout);
  if (!out.all_finite()) throw AggregationError("aggregation produced non-finite weights");
  return out;
}

AcceptResult accept_update(RoundState state, ModelUpdate update) {
  const bool in_window =
      update.round <= state.round && update.round >= state.round - state.staleness_window;
  if (!in_window || state.converged) {
    state.stale_count += 1;
    return {std::move(state), false};
  }
  if (!update.weights.compatible_with(state.global_weights)) {
    throw AggregationError("update from '" + update.client_id + "' does not match the global layout");
  }
  auto id = update.client_id;
  state.received.insert_or_assign(std::move(id), std::move(update));
  return {std::move(state), true};
}

namespace {

AdvanceResult advance_with(RoundState state, AggregationMode mode, const ConvergenceCriterion& criterion,
                           std::size_t required) {
  if (state.converged) return {std::move(state), false, true, 0.0};
  if (state.received.empty() || state.received.size() < required) return {std::move(state), false, false, 0.0};

  std::vector<ModelUpdate> updates;
  updates.reserve(state.received.size());
  for (auto& [id, u] : state.received) updates.push_back(std::move(u));
  auto next = aggregate(updates, mode);
  const double delta = (next.values - state.global_weights.values).lpNorm<Eigen::Infinity>();

  state.global_weights = std::move(next);
  state.received.clear();
  state.round += 1;
  state.calm_rounds = delta < criterion.weight_delta_tol ? state.calm_rounds + 1 : 0;
  state.converged = state.calm_rounds >= criterion.patience || state.round >= criterion.max_rounds;
  state.status = state.converged ? RoundStatus::kAggregated : RoundStatus::kCollecting;
  const bool converged = state.converged;
  return {std::move(state), true, converged, delta};
}

}  // namespace

AdvanceResult try_advance(RoundState state, AggregationMode mode, const ConvergenceCriterion& criterion) {
  const auto required = static_cast<std::size_t>(state.min_clients);
  return advance_with(std::move(state), mode, criterion, required);
}

AdvanceResult force_advance(RoundState state, AggregationMode mode, const ConvergenceCriterion& criterion) {
  return advance_with(std::move(state), mode, criterion, 1);
}

std::uint64_t client_round_seed(std::uint64_t run_seed, const std::string& client_id, std::int64_t round) {
  return derive_seed(run_seed, fnv1a64(client_id), static_cast<std::uint64_t>(round));
}

Trace simulate(const std::vector<SimClient>& clients, const ModelSpec& spec, const FedConfig& config,
               std::uint64_t seed, const Dataset* test) {
  if (clients.empty()) throw UsageError("simulate needs at least one client");
  config.criterion.validate();

  Trace trace;
  trace.initial_weights = init_model(spec);
  auto state = make_round_state(trace.initial_weights, config.min_clients, config.staleness_window);
  while (!state.converged) {
    const auto broadcast = state.global_weights;
    const auto round = state.round;
    const auto stale_before = state.stale_count;
    for (const auto& c : clients) {
      ModelUpdate u;
      u.client_id = c.client_id;
      u.round = round;
      u.weights = train_local(broadcast, spec, c.train, c.data, client_round_seed(seed, c.client_id, round));
      u.n_samples = c.data.rows();
      u.local_epochs_used = c.train.local_epochs;
      state = accept_update(std::move(state), std::move(u)).state;
    }
    const int n_updates = static_cast<int>(state.received.size());
    auto adv = try_advance(std::move(state), config.mode, config.criterion);
    state = std::move(adv.state);
    if (!adv.advanced) {
      throw UsageError("simulation stalled: quorum " + std::to_string(config.min_clients) +
                       " exceeds the number of clients");
    }
    TraceRound tr;
    tr.round = state.round;
    tr.global_weights = state.global_weights;
    tr.n_updates = n_updates;
    tr.n_stale = state.stale_count - stale_before;
    if (test) tr.test_auc = evaluate(state.global_weights, spec, *test).auc;
    trace.rounds.push_back(std::move(tr));
  }
  return trace;
}

std::uint64_t weights_digest(const ParameterVector& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < w.values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(w.values(i));
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    h = fnv1a64(std::string_view(bytes, 8), h);
  }
  return h;
}

void write_trace_jsonl(const Trace& trace, std::ostream& out) {
  for (const auto& r : trace.rounds) {
    nlohmann::json j{{"round", r.round},
                     {"global_weights_digest", weights_digest(r.global_weights)},
                     {"test_auc", r.test_auc ? nlohmann::json(*r.test_auc) : nlohmann::json(nullptr)},
                     {"n_updates", r.n_updates},
                     {"n_stale", r.n_stale}};
    out << j.dump() << '\n';
  }
}

}  // namespace fedtab
