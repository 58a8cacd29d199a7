#pragma once

// Attributed directed graphs G = (V, E, u) and their batched form.

#include "rvae/tensor.hpp"

#include <algorithm>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rvae {

struct AttributedGraph {
  Matrix nodes;   // Nv x dv
  Matrix edges;   // Ne x de
  std::vector<int> senders;
  std::vector<int> receivers;
  Matrix globals = Matrix(1, 0);  // 1 x du

  Index num_nodes() const { return nodes.rows(); }
  Index num_edges() const { return static_cast<Index>(senders.size()); }
  Index node_dim() const { return nodes.cols(); }
  Index edge_dim() const { return edges.cols(); }
  Index global_dim() const { return globals.cols(); }

  bool operator==(const AttributedGraph& o) const;
};

/// Half-open channel interval [begin, end).
struct ChannelRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool operator==(const ChannelRange&) const = default;
};

/// State (G_x) and conditioning (G_h) channels of one attribute level.
struct LevelPartition {
  ChannelRange state;
  ChannelRange conditioning;
  int width() const { return std::max(state.end, conditioning.end); }
  bool operator==(const LevelPartition&) const = default;
};

struct GraphPartition {
  LevelPartition node;
  LevelPartition edge;
  LevelPartition global;

  /// Empty when the ranges are disjoint and exactly cover the given widths.
  std::vector<std::string> check(Index node_dim, Index edge_dim, Index global_dim) const;
  bool operator==(const GraphPartition&) const = default;
};

/// true = target (state hidden), false = context.
using NodeMask = std::vector<bool>;

/// Disjoint union of graphs with offset-shifted topology.
struct GraphBatch {
  Matrix nodes;
  Matrix edges;
  Matrix globals;  // B x du
  std::vector<int> senders;
  std::vector<int> receivers;
  std::vector<int> node_graph;  // graph index per node
  std::vector<int> edge_graph;  // graph index per edge
  std::vector<int> n_node;
  std::vector<int> n_edge;

  Index num_graphs() const { return static_cast<Index>(n_node.size()); }
  Index num_nodes() const { return nodes.rows(); }
  Index num_edges() const { return static_cast<Index>(senders.size()); }
};

/// All invariant violations of `g`; empty means valid.
std::vector<std::string> validate(const AttributedGraph& g);

/// Throws std::invalid_argument if the graphs disagree on attribute widths.
GraphBatch batch(std::span<const AttributedGraph> graphs);
std::vector<AttributedGraph> unbatch(const GraphBatch& b);

/// Zeroes the state channels of masked nodes and appends the mask bit b as the
/// last node channel (1 = masked). If the graph already carries the bit (node
/// width is one more than the partition width) it is overwritten, which makes
/// the operation idempotent.
AttributedGraph apply_mask(const AttributedGraph& g, const NodeMask& mask,
                           const GraphPartition& part);

struct ContextTarget {
  std::vector<int> context;
  std::vector<int> target;
};
ContextTarget split_context_target(const AttributedGraph& g, const NodeMask& mask);

/// Relabels node i as perm[i]; edges keep their order with remapped endpoints.
AttributedGraph permute_nodes(const AttributedGraph& g, std::span<const int> perm);

// --- JSON Lines ------------------------------------------------------------

struct GraphRecord {
  AttributedGraph graph;
  std::optional<NodeMask> mask;
};

/// One line (without the trailing newline). Floats use 17 significant digits.
std::string to_jsonl(const AttributedGraph& g, const NodeMask* mask = nullptr);
GraphRecord from_jsonl(const std::string& line);

void write_jsonl(std::ostream& os, std::span<const GraphRecord> records);
std::vector<GraphRecord> read_jsonl(std::istream& is);

}  // namespace rvae
