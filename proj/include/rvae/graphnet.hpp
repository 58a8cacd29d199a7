#pragma once

// GraphNet blocks over batched graphs: per-element MLPs, edge/node/global
// updates with permutation-invariant aggregation, and the encode-process-decode
// stack built from them.

#include "rvae/graph.hpp"
#include "rvae/parameters.hpp"
#include "rvae/random.hpp"
#include "rvae/tensor.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace rvae {

struct AggregatorSpec {
  enum class Kind { mean, max, min, sum, composite };
  Kind kind = Kind::mean;

  /// Output width relative to input width (3 for mean||max||min).
  Index width_factor() const { return kind == Kind::composite ? 3 : 1; }
  std::string name() const;
  static AggregatorSpec parse(const std::string& name);
  bool operator==(const AggregatorSpec&) const = default;
};

/// Applies `spec` to rows grouped by `ids`. The composite form concatenates
/// mean, max and min in that order.
Tensor aggregate(const Tensor& values, std::span<const int> ids, Index num_segments,
                 const AggregatorSpec& spec);

/// Node, edge and global attribute tensors of a batch on one tape.
struct GraphTensors {
  Tensor nodes;
  Tensor edges;
  Tensor globals;
};

GraphTensors as_tensors(Tape& tape, const GraphBatch& b, bool requires_grad = false);

/// Three-layer perceptron: two ReLU hidden layers and a linear output layer.
class Mlp {
 public:
  /// `output_gain` scales the Glorot draw of the output layer.
  static Mlp create(ParameterStore& store, Rng& rng, const std::string& prefix, Index in,
                    Index hidden, Index out, double output_gain = 1.0);

  Tensor operator()(ParameterBinding& params, const Tensor& x) const;
  /// Same as applying the MLP to the column concatenation of the gathered
  /// parts, with `rows` output rows.
  Tensor operator()(ParameterBinding& params, std::span<const LinearPart> parts, Index rows) const;

  Index in_dim() const { return in_; }
  Index out_dim() const { return out_; }
  const std::string& prefix() const { return prefix_; }
  static constexpr int kLayers = 3;
  /// Parameter name of layer `layer`'s weight ("w") or bias ("b").
  std::string param_name(int layer, char kind) const;

 private:
  std::string prefix_;
  Index in_ = 0;
  Index out_ = 0;
};

struct GNBlockConfig {
  Index node_in = 0, edge_in = 0, global_in = 0;
  Index node_out = 0, edge_out = 0, global_out = 0;
  Index hidden = 32;
  AggregatorSpec edge_to_node;
  AggregatorSpec edge_to_global;
  AggregatorSpec node_to_global;

  bool use_edge_block = true;
  bool use_node_block = true;
  bool use_global_block = true;

  struct EdgeInputs {
    bool edges = true, senders = true, receivers = true, globals = true;
  } edge_inputs;
  struct NodeInputs {
    bool messages = true, nodes = true, globals = true;
  } node_inputs;
  struct GlobalInputs {
    bool edges = true, nodes = true, globals = true;
  } global_inputs;
  /// Initial scale of each update MLP's output layer.
  double output_gain = 1.0;

  /// Edge width seen by the aggregations (edge_out if the edge block runs).
  Index edge_width() const { return use_edge_block ? edge_out : edge_in; }
  Index node_width() const { return use_node_block ? node_out : node_in; }
  Index global_width() const { return use_global_block ? global_out : global_in; }
};

/// Full GN block: edge update, edge->node aggregation, node update, then the
/// global update from aggregated edges and nodes. Disabled sub-blocks pass
/// their attributes through unchanged.
class GNBlock {
 public:
  static GNBlock create(ParameterStore& store, Rng& rng, const std::string& prefix,
                        const GNBlockConfig& cfg);

  const GNBlockConfig& config() const { return cfg_; }

  Tensor edge_update(ParameterBinding& p, const GraphBatch& topo, const GraphTensors& g) const;
  Tensor node_update(ParameterBinding& p, const GraphBatch& topo, const GraphTensors& g,
                     const Tensor& aggregated_edges) const;
  Tensor global_update(ParameterBinding& p, const GraphTensors& g, const Tensor& agg_edges,
                       const Tensor& agg_nodes) const;

  GraphTensors operator()(ParameterBinding& p, const GraphBatch& topo,
                          const GraphTensors& g) const;

  const std::optional<Mlp>& edge_fn() const { return edge_fn_; }
  const std::optional<Mlp>& node_fn() const { return node_fn_; }
  const std::optional<Mlp>& global_fn() const { return global_fn_; }

 private:
  GNBlockConfig cfg_;
  std::optional<Mlp> edge_fn_;
  std::optional<Mlp> node_fn_;
  std::optional<Mlp> global_fn_;
};

struct LevelDims {
  Index node = 0;
  Index edge = 0;
  Index global = 0;
  bool operator==(const LevelDims&) const = default;
};

/// Per-element MLPs with no message passing. A level with output width 0
/// yields an empty (n x 0) tensor; a level with input width 0 but positive
/// output width yields a learned constant.
class GraphIndependent {
 public:
  static GraphIndependent create(ParameterStore& store, Rng& rng, const std::string& prefix,
                                 LevelDims in, LevelDims out, Index hidden,
                                 double output_gain = 1.0);
  GraphTensors operator()(ParameterBinding& p, const GraphTensors& g) const;
  LevelDims in_dims() const { return in_; }
  LevelDims out_dims() const { return out_; }

 private:
  LevelDims in_;
  LevelDims out_;
  std::optional<Mlp> node_fn_;
  std::optional<Mlp> edge_fn_;
  std::optional<Mlp> global_fn_;
};

struct EncodeProcessDecodeConfig {
  LevelDims in;
  LevelDims out;
  Index width = 32;
  int steps = 0;
  AggregatorSpec aggregator;
  /// Whether core edge and node updates read the global attribute. Without it
  /// a node's output depends only on its `steps`-hop neighborhood.
  bool broadcast_globals = true;
  /// Initial scale of the final decoder's output layer.
  double output_gain = 1.0;
};

/// Graph Independent encoder to `width` channels per level, `steps` residual
/// GN core applications (separate weights per step), Graph Independent
/// decoder to the requested output widths.
class EncodeProcessDecode {
 public:
  static EncodeProcessDecode create(ParameterStore& store, Rng& rng, const std::string& prefix,
                                    const EncodeProcessDecodeConfig& cfg);

  GraphTensors operator()(ParameterBinding& p, const GraphBatch& topo,
                          const GraphTensors& g) const;

  const EncodeProcessDecodeConfig& config() const { return cfg_; }
  const std::vector<GNBlock>& core() const { return core_; }

 private:
  EncodeProcessDecodeConfig cfg_;
  GraphIndependent encoder_;
  std::vector<GNBlock> core_;
  GraphIndependent decoder_;
};

}  // namespace rvae
