#include "rvae/graphnet.hpp"

#include <stdexcept>

namespace rvae {

std::string AggregatorSpec::name() const {
  switch (kind) {
    case Kind::mean: return "mean";
    case Kind::max: return "max";
    case Kind::min: return "min";
    case Kind::sum: return "sum";
    case Kind::composite: return "composite";
  }
  return "?";
}

AggregatorSpec AggregatorSpec::parse(const std::string& name) {
  if (name == "mean") return {Kind::mean};
  if (name == "max") return {Kind::max};
  if (name == "min") return {Kind::min};
  if (name == "sum") return {Kind::sum};
  if (name == "composite" || name == "mean-max-min") return {Kind::composite};
  throw std::invalid_argument("unknown aggregator: " + name);
}

Tensor aggregate(const Tensor& values, std::span<const int> ids, Index num_segments,
                 const AggregatorSpec& spec) {
  using K = AggregatorSpec::Kind;
  switch (spec.kind) {
    case K::mean: return segment_aggregate(values, ids, num_segments, Reduce::mean);
    case K::max: return segment_aggregate(values, ids, num_segments, Reduce::max);
    case K::min: return segment_aggregate(values, ids, num_segments, Reduce::min);
    case K::sum: return segment_aggregate(values, ids, num_segments, Reduce::sum);
    case K::composite:
      return concat_cols({segment_aggregate(values, ids, num_segments, Reduce::mean),
                          segment_aggregate(values, ids, num_segments, Reduce::max),
                          segment_aggregate(values, ids, num_segments, Reduce::min)});
  }
  throw std::logic_error("aggregate: bad kind");
}

GraphTensors as_tensors(Tape& tape, const GraphBatch& b, bool requires_grad) {
  auto make = [&](const Matrix& m) { return requires_grad ? tape.variable(m) : tape.constant(m); };
  return {make(b.nodes), make(b.edges), make(b.globals)};
}

// --- Mlp --------------------------------------------------------------------

std::string Mlp::param_name(int layer, char kind) const {
  return prefix_ + "/" + kind + std::to_string(layer);
}

Mlp Mlp::create(ParameterStore& store, Rng& rng, const std::string& prefix, Index in,
                Index hidden, Index out, double output_gain) {
  Mlp m;
  m.prefix_ = prefix;
  m.in_ = in;
  m.out_ = out;
  const Index widths[kLayers + 1] = {in, hidden, hidden, out};
  for (int l = 0; l < kLayers; ++l) {
    const double gain = l + 1 == kLayers ? output_gain : 1.0;
    store.add(m.param_name(l, 'w'), gain * glorot_uniform(rng, widths[l], widths[l + 1]));
    store.add(m.param_name(l, 'b'), Matrix::Zero(1, widths[l + 1]));
  }
  return m;
}

Tensor Mlp::operator()(ParameterBinding& params, const Tensor& x) const {
  const LinearPart part{x};
  return (*this)(params, std::span(&part, 1), x.rows());
}

Tensor Mlp::operator()(ParameterBinding& params, std::span<const LinearPart> parts,
                       Index rows) const {
  Index width = 0;
  for (const auto& part : parts) width += part.x.cols();
  if (width != in_) {
    throw ShapeError(prefix_ + ": input width " + std::to_string(width) + " != " +
                     std::to_string(in_));
  }
  Tensor h = gathered_linear(parts, params(param_name(0, 'w')), params(param_name(0, 'b')), rows);
  for (int l = 1; l < kLayers; ++l) {
    const LinearPart hidden{relu(h)};
    h = gathered_linear(std::span(&hidden, 1), params(param_name(l, 'w')),
                        params(param_name(l, 'b')), rows);
  }
  return h;
}

// --- GNBlock ----------------------------------------------------------------

GNBlock GNBlock::create(ParameterStore& store, Rng& rng, const std::string& prefix,
                        const GNBlockConfig& cfg) {
  GNBlock b;
  b.cfg_ = cfg;
  if (cfg.use_edge_block) {
    const auto& in = cfg.edge_inputs;
    const Index width = (in.edges ? cfg.edge_in : 0) + (in.senders ? cfg.node_in : 0) +
                        (in.receivers ? cfg.node_in : 0) + (in.globals ? cfg.global_in : 0);
    b.edge_fn_ = Mlp::create(store, rng, prefix + "/edge", width, cfg.hidden, cfg.edge_out, cfg.output_gain);
  }
  if (cfg.use_node_block) {
    const auto& in = cfg.node_inputs;
    const Index width =
        (in.messages ? cfg.edge_width() * cfg.edge_to_node.width_factor() : 0) +
        (in.nodes ? cfg.node_in : 0) + (in.globals ? cfg.global_in : 0);
    b.node_fn_ = Mlp::create(store, rng, prefix + "/node", width, cfg.hidden, cfg.node_out, cfg.output_gain);
  }
  if (cfg.use_global_block) {
    const auto& in = cfg.global_inputs;
    const Index width =
        (in.edges ? cfg.edge_width() * cfg.edge_to_global.width_factor() : 0) +
        (in.nodes ? cfg.node_width() * cfg.node_to_global.width_factor() : 0) +
        (in.globals ? cfg.global_in : 0);
    b.global_fn_ =
        Mlp::create(store, rng, prefix + "/global", width, cfg.hidden, cfg.global_out, cfg.output_gain);
  }
  return b;
}

namespace {

void check_width(const char* what, const Tensor& t, Index expected) {
  if (t.cols() != expected) {
    throw ShapeError(std::string(what) + " width " + std::to_string(t.cols()) + " != " +
                     std::to_string(expected));
  }
}

}  // namespace

Tensor GNBlock::edge_update(ParameterBinding& p, const GraphBatch& topo,
                            const GraphTensors& g) const {
  if (!edge_fn_) return g.edges;
  const auto& in = cfg_.edge_inputs;
  std::vector<LinearPart> parts;
  if (in.edges) parts.push_back({g.edges});
  if (in.senders) parts.push_back({g.nodes, &topo.senders});
  if (in.receivers) parts.push_back({g.nodes, &topo.receivers});
  if (in.globals) parts.push_back({g.globals, &topo.edge_graph});
  return (*edge_fn_)(p, parts, topo.num_edges());
}

Tensor GNBlock::node_update(ParameterBinding& p, const GraphBatch& topo, const GraphTensors& g,
                            const Tensor& aggregated_edges) const {
  if (!node_fn_) return g.nodes;
  const auto& in = cfg_.node_inputs;
  std::vector<LinearPart> parts;
  if (in.messages) parts.push_back({aggregated_edges});
  if (in.nodes) parts.push_back({g.nodes});
  if (in.globals) parts.push_back({g.globals, &topo.node_graph});
  return (*node_fn_)(p, parts, topo.num_nodes());
}

Tensor GNBlock::global_update(ParameterBinding& p, const GraphTensors& g,
                              const Tensor& agg_edges, const Tensor& agg_nodes) const {
  if (!global_fn_) return g.globals;
  const auto& in = cfg_.global_inputs;
  std::vector<LinearPart> parts;
  if (in.edges) parts.push_back({agg_edges});
  if (in.nodes) parts.push_back({agg_nodes});
  if (in.globals) parts.push_back({g.globals});
  return (*global_fn_)(p, parts, g.globals.rows());
}

GraphTensors GNBlock::operator()(ParameterBinding& p, const GraphBatch& topo,
                                 const GraphTensors& g) const {
  check_width("GN node input", g.nodes, cfg_.node_in);
  check_width("GN edge input", g.edges, cfg_.edge_in);
  check_width("GN global input", g.globals, cfg_.global_in);
  if (g.nodes.rows() != topo.num_nodes() || g.edges.rows() != topo.num_edges() ||
      g.globals.rows() != topo.num_graphs()) {
    throw ShapeError("GN block: tensors do not match batch topology");
  }

  GraphTensors out;
  out.edges = edge_update(p, topo, g);

  Tensor messages;
  if (node_fn_ && cfg_.node_inputs.messages) {
    messages = aggregate(out.edges, topo.receivers, topo.num_nodes(), cfg_.edge_to_node);
  }
  out.nodes = node_update(p, topo, g, messages);

  Tensor agg_e;
  Tensor agg_v;
  if (global_fn_ && cfg_.global_inputs.edges) {
    agg_e = aggregate(out.edges, topo.edge_graph, topo.num_graphs(), cfg_.edge_to_global);
  }
  if (global_fn_ && cfg_.global_inputs.nodes) {
    agg_v = aggregate(out.nodes, topo.node_graph, topo.num_graphs(), cfg_.node_to_global);
  }
  out.globals = global_update(p, g, agg_e, agg_v);
  return out;
}

// --- GraphIndependent ------------------------------------------------------

GraphIndependent GraphIndependent::create(ParameterStore& store, Rng& rng,
                                          const std::string& prefix, LevelDims in,
                                          LevelDims out, Index hidden, double output_gain) {
  GraphIndependent gi;
  gi.in_ = in;
  gi.out_ = out;
  auto mlp = [&](const char* level, Index i, Index o) {
    return Mlp::create(store, rng, prefix + level, i, hidden, o, output_gain);
  };
  if (out.node > 0) gi.node_fn_ = mlp("/node", in.node, out.node);
  if (out.edge > 0) gi.edge_fn_ = mlp("/edge", in.edge, out.edge);
  if (out.global > 0) gi.global_fn_ = mlp("/global", in.global, out.global);
  return gi;
}

GraphTensors GraphIndependent::operator()(ParameterBinding& p, const GraphTensors& g) const {
  auto level = [&](const std::optional<Mlp>& fn, const Tensor& x) {
    if (fn) return (*fn)(p, x);
    return p.tape().constant(Matrix(x.rows(), 0));
  };
  return {level(node_fn_, g.nodes), level(edge_fn_, g.edges), level(global_fn_, g.globals)};
}

// --- EncodeProcessDecode ---------------------------------------------------

EncodeProcessDecode EncodeProcessDecode::create(ParameterStore& store, Rng& rng,
                                                const std::string& prefix,
                                                const EncodeProcessDecodeConfig& cfg) {
  if (cfg.steps < 0) throw std::invalid_argument("message-passing steps must be >= 0");
  EncodeProcessDecode m;
  m.cfg_ = cfg;
  const LevelDims latent{cfg.width, cfg.width, cfg.width};
  m.encoder_ = GraphIndependent::create(store, rng, prefix + "/encoder", cfg.in, latent, cfg.width);
  for (int s = 0; s < cfg.steps; ++s) {
    GNBlockConfig c;
    c.node_in = c.edge_in = c.global_in = cfg.width;
    c.node_out = c.edge_out = c.global_out = cfg.width;
    c.hidden = cfg.width;
    c.edge_to_node = c.edge_to_global = c.node_to_global = cfg.aggregator;
    c.edge_inputs.globals = c.node_inputs.globals = cfg.broadcast_globals;
    m.core_.push_back(GNBlock::create(store, rng, prefix + "/core" + std::to_string(s), c));
  }
  m.decoder_ = GraphIndependent::create(store, rng, prefix + "/decoder", latent, cfg.out, cfg.width,
                                        cfg.output_gain);
  return m;
}

GraphTensors EncodeProcessDecode::operator()(ParameterBinding& p, const GraphBatch& topo,
                                             const GraphTensors& g) const {
  GraphTensors h = encoder_(p, g);
  for (const GNBlock& block : core_) {
    GraphTensors d = block(p, topo, h);
    h = {add(h.nodes, d.nodes), add(h.edges, d.edges), add(h.globals, d.globals)};
  }
  return decoder_(p, h);
}

}  // namespace rvae
