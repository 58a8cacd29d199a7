#pragma once

// Relational VAE: GraphNet-parameterized diagonal Gaussians over node, edge and
// global latents, the level-weighted ELBO and the arbitrary-conditioning
// (Neural Process) objective.

#include "rvae/graph.hpp"
#include "rvae/graphnet.hpp"
#include "rvae/parameters.hpp"
#include "rvae/random.hpp"
#include "rvae/tensor.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <vector>

namespace rvae {

inline constexpr double kLatentSigmaFloor = 1e-4;
inline constexpr double kObservationSigmaFloor = 1e-3;

enum class EncoderKind { graphnet, deepset };

enum class PriorKind {
  unit,            // N(0, I) at every level
  conditional,     // Graph Independent network over G_h, unit where a level has no G_h
  shared_encoder,  // the posterior encoder applied to the masked graph
};

struct ModelConfig {
  EncoderKind encoder = EncoderKind::graphnet;
  Index mlp_width = 32;
  Index latent_size = 32;
  int encoder_steps = 2;
  int decoder_steps = 2;
  AggregatorSpec aggregator;
  bool node_latent = true;
  bool edge_latent = true;
  bool global_latent = true;
  PriorKind prior = PriorKind::conditional;
  bool fixed_observation_noise = false;
  double observation_sigma = 0.1;
  bool decoder_global_conditioning = true;
  /// Core message passing feeds the global attribute to edges and nodes.
  bool broadcast_globals = true;
  /// Initial scale of the output layers that emit Gaussian parameters, so
  /// heads start near mu = 0, sigma = softplus(0) for any input magnitude.
  double head_gain = 0.1;
  /// Channel layout of the unmasked graphs the model consumes.
  GraphPartition partition;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ELBOWeights {
  double node = 1.0;
  double edge = 1.0;
  double global = 1.0;
  nlohmann::json to_json() const;
  static ELBOWeights from_json(const nlohmann::json& j);
};

struct LevelGaussian {
  bool present = false;
  Tensor mu;
  Tensor sigma;
};

struct GaussianGraphDistribution {
  LevelGaussian node;
  LevelGaussian edge;
  LevelGaussian global;
};

/// A draw of G_z. Absent levels are n x 0.
struct LatentGraph {
  Tensor nodes;
  Tensor edges;
  Tensor globals;
};

/// Standard normal noise shaped like the present levels of a distribution.
struct LatentNoise {
  Matrix nodes;
  Matrix edges;
  Matrix globals;
};

/// Observation model p(G_x | G_z; G_h). Levels without state channels are
/// absent.
using ObservationDistribution = GaussianGraphDistribution;

/// Graphs prepared for the model: raw attributes, the fully observed encoder
/// input (mask bit 0 everywhere), the masked encoder input and per-node target
/// flags.
struct ModelBatch {
  GraphBatch observed;
  GraphBatch full;
  GraphBatch masked;
  std::vector<bool> target;  // per batched node

  Index num_graphs() const { return observed.num_graphs(); }
  Index num_nodes() const { return observed.num_nodes(); }
  Index num_targets() const;
};

/// `masks` may be empty (nothing masked) or hold one mask per graph.
ModelBatch make_batch(std::span<const AttributedGraph> graphs, std::span<const NodeMask> masks,
                      const GraphPartition& partition);

struct KLTerms {
  Tensor node;  // B x 1 per-graph sums, zero for absent levels
  Tensor edge;
  Tensor global;
};

struct ElboResult {
  Tensor objective;       // 1 x 1, summed over the batch
  Tensor reconstruction;  // 1 x 1
  Tensor kl_node, kl_edge, kl_global;  // 1 x 1 each, unweighted
  std::vector<double> per_graph;       // objective per graph
  std::vector<double> per_graph_reconstruction;
  bool empty_target = false;  // np_elbo with no target nodes: objective is exactly 0
};

class RVAEModel {
 public:
  static RVAEModel create(ParameterStore& store, Rng& rng, const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  LevelDims state_dims() const;
  LevelDims conditioning_dims() const;
  /// Widths of the masked-graph encoder input (node width includes the mask bit).
  LevelDims encoder_input_dims() const;
  LevelDims decoder_input_dims() const;

  /// q(G_z | G_x; G_h) from an encoder input (masked or fully observed).
  GaussianGraphDistribution encode_posterior(ParameterBinding& p, const GraphBatch& topo,
                                             const GraphTensors& input) const;
  GaussianGraphDistribution encode_posterior(ParameterBinding& p, const GraphBatch& input) const;

  /// p(G_z; G_h) for the unit and conditional priors. For the shared-encoder
  /// prior call `encode_posterior` on the masked graph instead.
  GaussianGraphDistribution prior(ParameterBinding& p, const GraphBatch& observed) const;

  /// p(G_x | G_z; G_h); `conditioning` holds the raw graphs (only G_h channels
  /// are read).
  ObservationDistribution decode(ParameterBinding& p, const GraphBatch& topo,
                                 const LatentGraph& z, const GraphTensors& conditioning) const;
  ObservationDistribution decode(ParameterBinding& p, const GraphBatch& observed,
                                 const LatentGraph& z) const;

 private:
  ModelConfig cfg_;
  // graphnet encoder
  std::optional<EncodeProcessDecode> encoder_;
  // deepset encoder: per-node embedding then a global-only GN block
  std::optional<GraphIndependent> deepset_embed_;
  std::optional<GNBlock> deepset_pool_;
  std::optional<GraphIndependent> prior_net_;
  std::optional<EncodeProcessDecode> decoder_;
  std::optional<GNBlock> node_decoder_;  // deepset/NP decoder

  friend GaussianGraphDistribution deepset_np_encode(const RVAEModel&, ParameterBinding&,
                                                     const GraphBatch&, const GraphTensors&);
};

/// The NP instantiation: per-node MLP, mean over nodes, MLP head to the global
/// latent. Throws if the model is not configured with the deepset encoder.
GaussianGraphDistribution deepset_np_encode(const RVAEModel& model, ParameterBinding& p,
                                            const GraphBatch& topo, const GraphTensors& input);

/// Splits a head output [mu | raw] into (mu, softplus(raw) + floor).
LevelGaussian gaussian_head(const Tensor& raw, Index dim, double sigma_floor);

LatentNoise sample_noise(Rng& rng, const GaussianGraphDistribution& dist);
/// z = mu + sigma * eps at every present level.
LatentGraph reparameterize(const GaussianGraphDistribution& dist, const LatentNoise& eps);
/// z = mu (deterministic decoding).
LatentGraph posterior_mean(const GaussianGraphDistribution& dist);

/// Closed-form KL(q || p) per level, summed per graph. Throws on shape or
/// presence mismatch.
KLTerms kl_factorized(const GaussianGraphDistribution& q, const GaussianGraphDistribution& p,
                      const GraphBatch& topo);

/// Elementwise log N(x | mu, sigma^2).
Tensor gaussian_log_density(const Tensor& x, const Tensor& mu, const Tensor& sigma);

/// Per-node log-density of the observed node state, an N x s tensor.
Tensor node_log_likelihood(const ObservationDistribution& obs, const Tensor& node_state);

/// Sum over the batch of log p(G_x | G_z; G_h), node terms restricted to nodes
/// whose `node_weight` is nonzero (weight multiplies the node's term). Returns
/// B x 1 per-graph sums.
Tensor decode_likelihood(const RVAEModel& model, ParameterBinding& p, const GraphBatch& observed,
                         const LatentGraph& z, std::span<const double> node_weight);

/// E_q[log p(G_x|G_z;G_h)] - beta_V KL_V - beta_E KL_E - beta_u KL_u. The
/// posterior reads the masked encoder input; with an all-false mask this is the
/// plain fully observed ELBO. Reconstruction covers every node.
ElboResult elbo(const RVAEModel& model, ParameterBinding& p, const ModelBatch& batch,
                const ELBOWeights& weights, Rng& rng, int mc_samples = 1);

/// Arbitrary-conditioning objective: reconstruction of target nodes under
/// q(z | fully observed) minus KL(q(z | fully observed) || q(z | masked)).
ElboResult np_elbo(const RVAEModel& model, ParameterBinding& p, const ModelBatch& batch,
                   const ELBOWeights& weights, Rng& rng, int mc_samples = 1);

}  // namespace rvae
