#include "rvae/graph.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace rvae {

bool AttributedGraph::operator==(const AttributedGraph& o) const {
  return nodes.rows() == o.nodes.rows() && nodes.cols() == o.nodes.cols() && nodes == o.nodes &&
         edges.rows() == o.edges.rows() && edges.cols() == o.edges.cols() && edges == o.edges &&
         globals.cols() == o.globals.cols() && globals == o.globals && senders == o.senders &&
         receivers == o.receivers;
}

std::vector<std::string> GraphPartition::check(Index node_dim, Index edge_dim,
                                               Index global_dim) const {
  std::vector<std::string> errors;
  auto one = [&](const char* level, const LevelPartition& p, Index dim) {
    const auto& s = p.state;
    const auto& c = p.conditioning;
    if (s.begin < 0 || s.end < s.begin || c.begin < 0 || c.end < c.begin) {
      errors.push_back(std::string(level) + ": malformed channel range");
      return;
    }
    const bool overlap = s.size() > 0 && c.size() > 0 && s.begin < c.end && c.begin < s.end;
    if (overlap) errors.push_back(std::string(level) + ": state and conditioning overlap");
    if (s.size() + c.size() != dim || p.width() != dim) {
      errors.push_back(std::string(level) + ": ranges do not cover attribute dimension " +
                       std::to_string(dim));
    }
  };
  one("node", node, node_dim);
  one("edge", edge, edge_dim);
  one("global", global, global_dim);
  return errors;
}

std::vector<std::string> validate(const AttributedGraph& g) {
  std::vector<std::string> errors;
  if (g.senders.size() != g.receivers.size()) {
    errors.push_back("senders and receivers differ in length");
  }
  if (static_cast<Index>(g.senders.size()) != g.edges.rows()) {
    errors.push_back("edge attribute rows (" + std::to_string(g.edges.rows()) +
                     ") != edge count (" + std::to_string(g.senders.size()) + ")");
  }
  if (g.globals.rows() != 1) errors.push_back("global attribute must be a single row");
  const Index n = g.num_nodes();
  for (std::size_t k = 0; k < g.senders.size(); ++k) {
    const bool bad_s = g.senders[k] < 0 || g.senders[k] >= n;
    const bool bad_r = k < g.receivers.size() && (g.receivers[k] < 0 || g.receivers[k] >= n);
    if (bad_s || bad_r) {
      errors.push_back("edge index out of range at edge " + std::to_string(k));
    }
  }
  if (!g.nodes.allFinite()) errors.push_back("non-finite attribute in nodes");
  if (!g.edges.allFinite()) errors.push_back("non-finite attribute in edges");
  if (!g.globals.allFinite()) errors.push_back("non-finite attribute in globals");
  return errors;
}

GraphBatch batch(std::span<const AttributedGraph> graphs) {
  if (graphs.empty()) throw std::invalid_argument("batch: no graphs");
  const Index dv = graphs[0].node_dim();
  const Index de = graphs[0].edge_dim();
  const Index du = graphs[0].global_dim();
  Index nv = 0;
  Index ne = 0;
  for (const auto& g : graphs) {
    if (g.node_dim() != dv || g.edge_dim() != de || g.global_dim() != du) {
      throw std::invalid_argument("batch: attribute dimension mismatch across graphs");
    }
    nv += g.num_nodes();
    ne += g.num_edges();
  }
  GraphBatch b;
  b.nodes.resize(nv, dv);
  b.edges.resize(ne, de);
  b.globals.resize(static_cast<Index>(graphs.size()), du);
  b.senders.reserve(static_cast<std::size_t>(ne));
  b.receivers.reserve(static_cast<std::size_t>(ne));
  b.node_graph.reserve(static_cast<std::size_t>(nv));
  b.edge_graph.reserve(static_cast<std::size_t>(ne));
  Index node_off = 0;
  Index edge_off = 0;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto& g = graphs[i];
    b.nodes.middleRows(node_off, g.num_nodes()) = g.nodes;
    b.edges.middleRows(edge_off, g.num_edges()) = g.edges;
    b.globals.row(static_cast<Index>(i)) = g.globals.row(0);
    for (Index k = 0; k < g.num_edges(); ++k) {
      b.senders.push_back(g.senders[static_cast<std::size_t>(k)] + static_cast<int>(node_off));
      b.receivers.push_back(g.receivers[static_cast<std::size_t>(k)] + static_cast<int>(node_off));
      b.edge_graph.push_back(static_cast<int>(i));
    }
    b.node_graph.insert(b.node_graph.end(), static_cast<std::size_t>(g.num_nodes()),
                        static_cast<int>(i));
    b.n_node.push_back(static_cast<int>(g.num_nodes()));
    b.n_edge.push_back(static_cast<int>(g.num_edges()));
    node_off += g.num_nodes();
    edge_off += g.num_edges();
  }
  return b;
}

std::vector<AttributedGraph> unbatch(const GraphBatch& b) {
  std::vector<AttributedGraph> out;
  out.reserve(b.n_node.size());
  Index node_off = 0;
  Index edge_off = 0;
  for (std::size_t i = 0; i < b.n_node.size(); ++i) {
    AttributedGraph g;
    const Index nv = b.n_node[i];
    const Index ne = b.n_edge[i];
    g.nodes = b.nodes.middleRows(node_off, nv);
    g.edges = b.edges.middleRows(edge_off, ne);
    g.globals = b.globals.row(static_cast<Index>(i));
    for (Index k = edge_off; k < edge_off + ne; ++k) {
      g.senders.push_back(b.senders[static_cast<std::size_t>(k)] - static_cast<int>(node_off));
      g.receivers.push_back(b.receivers[static_cast<std::size_t>(k)] - static_cast<int>(node_off));
    }
    out.push_back(std::move(g));
    node_off += nv;
    edge_off += ne;
  }
  return out;
}

AttributedGraph apply_mask(const AttributedGraph& g, const NodeMask& mask,
                           const GraphPartition& part) {
  if (static_cast<Index>(mask.size()) != g.num_nodes()) {
    throw std::invalid_argument("apply_mask: mask length " + std::to_string(mask.size()) +
                                " != node count " + std::to_string(g.num_nodes()));
  }
  const Index width = part.node.width();
  const bool has_bit = g.node_dim() == width + 1;
  if (!has_bit && g.node_dim() != width) {
    throw std::invalid_argument("apply_mask: node width does not match partition");
  }
  AttributedGraph out = g;
  if (!has_bit) {
    out.nodes.conservativeResize(Eigen::NoChange, width + 1);
  }
  const auto& s = part.node.state;
  for (Index i = 0; i < g.num_nodes(); ++i) {
    const bool m = mask[static_cast<std::size_t>(i)];
    if (m) out.nodes.block(i, s.begin, 1, s.size()).setZero();
    out.nodes(i, width) = m ? 1.0 : 0.0;
  }
  return out;
}

ContextTarget split_context_target(const AttributedGraph& g, const NodeMask& mask) {
  if (static_cast<Index>(mask.size()) != g.num_nodes()) {
    throw std::invalid_argument("split_context_target: mask length mismatch");
  }
  ContextTarget ct;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    (mask[i] ? ct.target : ct.context).push_back(static_cast<int>(i));
  }
  return ct;
}

AttributedGraph permute_nodes(const AttributedGraph& g, std::span<const int> perm) {
  if (static_cast<Index>(perm.size()) != g.num_nodes()) {
    throw std::invalid_argument("permute_nodes: permutation length mismatch");
  }
  AttributedGraph out = g;
  for (Index i = 0; i < g.num_nodes(); ++i) out.nodes.row(perm[static_cast<std::size_t>(i)]) = g.nodes.row(i);
  for (std::size_t k = 0; k < g.senders.size(); ++k) {
    out.senders[k] = perm[static_cast<std::size_t>(g.senders[k])];
    out.receivers[k] = perm[static_cast<std::size_t>(g.receivers[k])];
  }
  return out;
}

// --- JSON Lines ------------------------------------------------------------

namespace {

void append_double(std::string& s, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  s += buf;
}

void append_row(std::string& s, const Matrix& m, Index row) {
  s += '[';
  for (Index c = 0; c < m.cols(); ++c) {
    if (c) s += ',';
    append_double(s, m(row, c));
  }
  s += ']';
}

Matrix rows_from_json(const nlohmann::json& arr, const char* what) {
  if (!arr.is_array()) throw std::runtime_error(std::string(what) + " must be an array");
  const Index rows = static_cast<Index>(arr.size());
  const Index cols = rows ? static_cast<Index>(arr[0].size()) : 0;
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const auto& row = arr[static_cast<std::size_t>(r)];
    if (static_cast<Index>(row.size()) != cols) {
      throw std::runtime_error(std::string(what) + ": ragged attribute rows");
    }
    for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

std::string to_jsonl(const AttributedGraph& g, const NodeMask* mask) {
  std::string s = "{\"nodes\":[";
  for (Index i = 0; i < g.num_nodes(); ++i) {
    if (i) s += ',';
    append_row(s, g.nodes, i);
  }
  s += "],\"edges\":[";
  for (Index k = 0; k < g.num_edges(); ++k) {
    if (k) s += ',';
    s += "{\"sender\":" + std::to_string(g.senders[static_cast<std::size_t>(k)]) +
         ",\"receiver\":" + std::to_string(g.receivers[static_cast<std::size_t>(k)]) +
         ",\"attrs\":";
    append_row(s, g.edges, k);
    s += '}';
  }
  s += "],\"global\":";
  append_row(s, g.globals, 0);
  // widths cannot be inferred from empty arrays
  if (g.num_nodes() == 0) s += ",\"node_dim\":" + std::to_string(g.node_dim());
  if (g.num_edges() == 0) s += ",\"edge_dim\":" + std::to_string(g.edge_dim());
  if (mask) {
    s += ",\"mask\":[";
    for (std::size_t i = 0; i < mask->size(); ++i) {
      if (i) s += ',';
      s += (*mask)[i] ? "true" : "false";
    }
    s += ']';
  }
  s += '}';
  return s;
}

GraphRecord from_jsonl(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  GraphRecord rec;
  auto& g = rec.graph;
  g.nodes = rows_from_json(j.at("nodes"), "nodes");
  if (g.nodes.rows() == 0) g.nodes.resize(0, j.value("node_dim", 0));
  const auto& edges = j.at("edges");
  const Index ne = static_cast<Index>(edges.size());
  const Index de = ne ? static_cast<Index>(edges[0].at("attrs").size()) : j.value("edge_dim", 0);
  g.edges.resize(ne, de);
  for (Index k = 0; k < ne; ++k) {
    const auto& e = edges[static_cast<std::size_t>(k)];
    g.senders.push_back(e.at("sender").get<int>());
    g.receivers.push_back(e.at("receiver").get<int>());
    const auto& attrs = e.at("attrs");
    if (static_cast<Index>(attrs.size()) != de) throw std::runtime_error("edges: ragged attrs");
    for (Index c = 0; c < de; ++c) g.edges(k, c) = attrs[static_cast<std::size_t>(c)].get<double>();
  }
  const auto glob = j.at("global").get<std::vector<double>>();
  g.globals.resize(1, static_cast<Index>(glob.size()));
  for (std::size_t c = 0; c < glob.size(); ++c) g.globals(0, static_cast<Index>(c)) = glob[c];
  if (j.contains("mask")) {
    const auto m = j.at("mask").get<std::vector<bool>>();
    rec.mask = NodeMask(m.begin(), m.end());
  }
  return rec;
}

void write_jsonl(std::ostream& os, std::span<const GraphRecord> records) {
  for (const auto& r : records) {
    os << to_jsonl(r.graph, r.mask ? &*r.mask : nullptr) << '\n';
  }
}

std::vector<GraphRecord> read_jsonl(std::istream& is) {
  std::vector<GraphRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(from_jsonl(line));
  }
  return out;
}

}  // namespace rvae
