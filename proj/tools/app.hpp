#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// harness: dataset specifications, model assembly and command dispatch.

#include "rvae/analysis.hpp"
#include "rvae/datasets.hpp"
#include "rvae/rvae.hpp"
#include "rvae/training.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace rvae::app {

/// Farm dataset description. JSON fields (all optional):
///   layout: {seed, n_turbines, min_spacing, spacing_factor} or {positions: [[e, n], ...]}
///   seed, n_snapshots, test_fraction, sampling: {speed_min, speed_max, yaw_noise_deg},
///   wake: {induction, expansion}, graph: {cutoff_multiplier, global_conditioning}
struct FarmSpec {
  std::uint64_t layout_seed = 1;
  int n_turbines = 30;
  double min_spacing = 3.0;
  double spacing_factor = 6.0;
  std::vector<std::array<double, 2>> positions;  // overrides the random layout when set
  std::uint64_t seed = 2;
  int n_snapshots = 1000;
  double test_fraction = 0.2;
  FarmSampling sampling;
  WakeParams wake;
  double cutoff_multiplier = 20.0;
  bool global_conditioning = false;

  nlohmann::json to_json() const;
  static FarmSpec from_json(const nlohmann::json& j);
};

struct FarmData {
  FarmSpec spec;
  FarmLayout layout;
  std::vector<FarmSnapshot> train_snaps, test_snaps;
  FarmGraphOptions graph;  // standardization fitted on the training split
  std::vector<AttributedGraph> train, test;
  GraphPartition partition;
};

/// Generates the snapshots, splits them (first part train, rest test) and
/// builds graphs. With `standardization` the given scaling is used instead of
/// one fitted on the training split.
FarmData make_farm_data(const FarmSpec& spec, const Standardization* standardization = nullptr);

/// GP task description: {stream: GPStream, test: {seed, n_tasks, n_context, n_target},
/// validation: {seed, n_tasks}}.
struct GPSpec {
  GPStream stream;
  std::uint64_t test_seed = 1001;
  int n_tasks = 1000;
  int n_context = 50;
  int n_target = 50;
  std::uint64_t validation_seed = 2002;
  int validation_tasks = 64;

  nlohmann::json to_json() const;
  static GPSpec from_json(const nlohmann::json& j);
};

/// Default task hyperparameters for each regime.
TrainConfig default_train_config(const std::string& task);

/// Parameter initialization stream for a run seed.
Rng init_rng(std::uint64_t seed);

struct TrainedModel {
  Checkpoint checkpoint;
  RunRecord record;
};

/// Train from a full run configuration ({task, seed, model, train, data}).
TrainedModel train_from_config(const nlohmann::json& cfg, std::ostream* log = nullptr);

/// Exit codes: 0 success, 1 runtime failure (JSON on `err`), 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rvae::app
