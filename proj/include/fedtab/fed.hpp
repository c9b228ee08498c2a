#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedtab/model.hpp"

namespace fedtab {

enum class AggregationMode { kPlainMean, kSampleWeighted };

std::string to_string(AggregationMode mode);
AggregationMode aggregation_mode_from_string(const std::string& name);

struct ModelUpdate {
  std::string client_id;
  std::int64_t round = 0;
  ParameterVector weights;
  std::int64_t n_samples = 1;
  int local_epochs_used = 1;

  void validate() const;  // throws UsageError
};

struct ConvergenceCriterion {
  int max_rounds = 20;
  double weight_delta_tol = 0.0;  // L-infinity on consecutive global weights
  int patience = 1;

  void validate() const;
};

enum class RoundStatus { kCollecting, kAggregated };

// Coordinator view of round t. Pure value: every transition returns a new state.
struct RoundState {
  std::int64_t round = 0;
  ParameterVector global_weights;
  std::map<std::string, ModelUpdate> received;  // keyed and ordered by client_id
  RoundStatus status = RoundStatus::kCollecting;
  int min_clients = 1;
  int staleness_window = 0;

  std::int64_t stale_count = 0;
  int calm_rounds = 0;  // consecutive rounds with delta below tolerance
  bool converged = false;
};

RoundState make_round_state(ParameterVector initial, int min_clients, int staleness_window);

// w_{t+1} = (1/m) sum_i w_i (plain mean) or sum_i (n_i / sum n) w_i, summed in
// ascending client_id order.
ParameterVector aggregate(std::span<const ModelUpdate> updates, AggregationMode mode);

struct AcceptResult {
  RoundState state;
  bool admitted = false;
};

// Updates older than round - staleness_window, or from a future round, are
// discarded and counted; admitted updates replace any earlier one from the same client.
AcceptResult accept_update(RoundState state, ModelUpdate update);

struct AdvanceResult {
  RoundState state;
  bool advanced = false;
  bool converged = false;
  double delta = 0.0;  // L-infinity weight change of the advance, 0 if none
};

// Aggregates when at least min_clients updates are waiting.
AdvanceResult try_advance(RoundState state, AggregationMode mode, const ConvergenceCriterion& criterion);

// Deadline path: aggregates whatever is waiting (at least one update).
AdvanceResult force_advance(RoundState state, AggregationMode mode, const ConvergenceCriterion& criterion);

struct FedConfig {
  AggregationMode mode = AggregationMode::kPlainMean;
  int min_clients = 1;
  int staleness_window = 0;
  ConvergenceCriterion criterion;
};

struct SimClient {
  std::string client_id;
  Dataset data;
  TrainConfig train;
};

struct TraceRound {
  std::int64_t round = 0;  // round index after aggregation
  ParameterVector global_weights;
  std::optional<double> test_auc;
  int n_updates = 0;
  std::int64_t n_stale = 0;
};

struct Trace {
  ParameterVector initial_weights;
  std::vector<TraceRound> rounds;

  const ParameterVector& final_weights() const {
    return rounds.empty() ? initial_weights : rounds.back().global_weights;
  }
};

// Per-client, per-round training seed. Shared with the networked client so both
// execution paths train on identical streams.
std::uint64_t client_round_seed(std::uint64_t run_seed, const std::string& client_id, std::int64_t round);

// In-process federated loop: broadcast, local training per client, collection, aggregation.
Trace simulate(const std::vector<SimClient>& clients, const ModelSpec& spec, const FedConfig& config,
               std::uint64_t seed, const Dataset* test = nullptr);

// FNV-1a over the little-endian IEEE-754 bytes of the values, in layout order.
std::uint64_t weights_digest(const ParameterVector& w);

// JSON lines: {round, global_weights_digest, test_auc, n_updates, n_stale}.
void write_trace_jsonl(const Trace& trace, std::ostream& out);

}  // namespace fedtab
