#pragma once

// Optimization loops, KL schedules, evaluation metrics and checkpoints.

#include "rvae/datasets.hpp"
#include "rvae/graph.hpp"
#include "rvae/parameters.hpp"
#include "rvae/rvae.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rvae {

/// Linear ramp of every beta from 0 over `anneal_steps`; 0 means constant.
struct BetaSchedule {
  ELBOWeights beta;
  long anneal_steps = 0;
};

ELBOWeights kl_anneal(long step, const BetaSchedule& schedule);

struct TrainConfig {
  double learning_rate = 5e-5;
  long max_steps = 40000;
  int batch_size = 16;
  double mask_fraction = 0.2;
  int min_context = 3;  // task streams: |C| and |T| ranges, inclusive
  int max_context = 50;
  int min_target = 3;
  int max_target = 50;
  long patience = 2500;
  long eval_interval = 500;
  BetaSchedule beta;
  int mc_samples = 1;
  bool rotate_augment = true;  // farm graphs only
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on a malformed configuration.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EvalPoint {
  long step = 0;
  double train_loss = 0.0;  // mean per-node negative objective over the last interval
  double mean = 0.0;        // test objective, higher is better
  double std = 0.0;         // across test batches
};

struct RunRecord {
  std::vector<EvalPoint> evals;
  long best_step = -1;
  double best_objective = 0.0;
  long steps_run = 0;
  bool diverged = false;
  bool early_stopped = false;
  /// Not serialized, so records of identical runs compare byte for byte.
  double wall_seconds = 0.0;

  /// One JSON line per evaluation followed by a summary line.
  void write_jsonl(std::ostream& os) const;
  nlohmann::json summary_json() const;
};

enum class EvalMode { elbo, target_nll, mape };
EvalMode eval_mode_from(const std::string& s);
const char* eval_mode_name(EvalMode m);

/// Affine map from standardized node state back to physical units.
struct StateScale {
  int channel = 0;
  double offset = 0.0;
  double scale = 1.0;
  double restore(double v) const { return v * scale + offset; }
};

struct EvalOptions {
  int batch_size = 16;
  ELBOWeights weights;         // elbo
  int mc_samples = 16;         // target_nll
  std::uint64_t seed = 12345;  // MC noise for elbo and target_nll
  StateScale state;            // mape
};

struct EvalResult {
  double mean = 0.0;
  double std = 0.0;  // across batches
  long count = 0;    // scored items (graphs, targets or masked nodes)
  long excluded = 0; // mape: masked nodes whose true value is zero
};

struct MapeResult {
  double value = 0.0;
  long count = 0;
  long excluded = 0;
};

/// (1/N) sum |v - v_hat| / |v|; entries with v == 0 are skipped and counted.
MapeResult mape(std::span<const double> truth, std::span<const double> predicted);

/// Masks a random `round(fraction * n)` nodes (at least one, at most n - 1
/// when n > 1).
NodeMask random_node_mask(Rng& rng, Index n, double fraction);

/// Deterministic per-graph masks for evaluation.
std::vector<NodeMask> fixed_masks(std::span<const AttributedGraph> graphs, double fraction,
                                  std::uint64_t seed);

/// Decoder mean of the node state at z = mu of the masked-graph encoder, one
/// row per batched node.
Matrix predict_node_state(const RVAEModel& model, const ParameterStore& store,
                          const ModelBatch& batch);

/// elbo: mean over graphs of the objective per node (the training objective
/// with the masked posterior and the model prior). target_nll: per target the
/// log of the mean predictive density over `mc_samples` draws from the
/// masked-graph encoder, averaged over targets (higher is better). mape: over
/// masked nodes of the chosen state channel in physical units.
EvalResult evaluate(const RVAEModel& model, const ParameterStore& store,
                    std::span<const AttributedGraph> graphs, std::span<const NodeMask> masks,
                    EvalMode mode, const EvalOptions& opt = {});

/// Farm regime: batches of graphs drawn from `train`, fresh masks every step,
/// the ELBO with the model prior, early stopping on the test ELBO. On return
/// `store` holds the best evaluated parameters.
RunRecord train_farm(const RVAEModel& model, ParameterStore& store,
                     std::span<const AttributedGraph> train, std::span<const AttributedGraph> test,
                     const TrainConfig& cfg, std::ostream* log = nullptr);

struct GPStream {
  SEKernel kernel;
  double x_lo = 0.0;
  double x_hi = 1.0;
  GPGraphOptions graph;

  nlohmann::json to_json() const;
  static GPStream from_json(const nlohmann::json& j);
};

/// One task with `n_context + n_target` points; targets are the masked nodes.
std::pair<AttributedGraph, NodeMask> sample_gp_graph(Rng& rng, const GPStream& stream,
                                                     int n_context, int n_target);

struct GPTestSet {
  std::vector<AttributedGraph> graphs;
  std::vector<NodeMask> masks;
};
GPTestSet make_gp_test_set(std::uint64_t seed, const GPStream& stream, int n_tasks, int n_context,
                           int n_target);

/// Task-stream regime: fresh GP tasks each step with |C| and |T| drawn from
/// the configured ranges, the arbitrary-conditioning objective, early stopping
/// on the test target log-likelihood.
RunRecord train_np(const RVAEModel& model, ParameterStore& store, const GPStream& stream,
                   const GPTestSet& test, const TrainConfig& cfg, std::ostream* log = nullptr);

// --- checkpoints -------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  nlohmann::json data;  // dataset description (graph options, standardization)
  ParameterStore params;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model for existing parameters. Throws std::invalid_argument
/// if the parameter names or shapes disagree with the configuration.
RVAEModel restore_model(const ModelConfig& cfg, const ParameterStore& params);

inline constexpr const char* kCheckpointFormat = "rvae-checkpoint";
inline constexpr int kCheckpointFormatVersion = 1;

}  // namespace rvae
