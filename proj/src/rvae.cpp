#include "rvae/rvae.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rvae {

namespace {

nlohmann::json range_json(const ChannelRange& r) { return {r.begin, r.end}; }

ChannelRange range_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<int>>();
  if (v.size() != 2) throw std::invalid_argument("channel range must be [begin, end]");
  return {v[0], v[1]};
}

nlohmann::json level_json(const LevelPartition& l) {
  return {{"state", range_json(l.state)}, {"conditioning", range_json(l.conditioning)}};
}

LevelPartition level_from(const nlohmann::json& j) {
  LevelPartition l;
  if (j.contains("state")) l.state = range_from(j.at("state"));
  if (j.contains("conditioning")) l.conditioning = range_from(j.at("conditioning"));
  return l;
}

const char* encoder_name(EncoderKind k) { return k == EncoderKind::graphnet ? "graphnet" : "deepset"; }

EncoderKind encoder_from(const std::string& s) {
  if (s == "graphnet") return EncoderKind::graphnet;
  if (s == "deepset") return EncoderKind::deepset;
  throw std::invalid_argument("unknown encoder kind: " + s);
}

const char* prior_name(PriorKind k) {
  switch (k) {
    case PriorKind::unit: return "unit";
    case PriorKind::conditional: return "conditional";
    case PriorKind::shared_encoder: return "shared_encoder";
  }
  return "?";
}

PriorKind prior_from(const std::string& s) {
  if (s == "unit") return PriorKind::unit;
  if (s == "conditional") return PriorKind::conditional;
  if (s == "shared_encoder") return PriorKind::shared_encoder;
  throw std::invalid_argument("unknown prior kind: " + s);
}

Tensor cond_slice(const Tensor& t, const ChannelRange& r) { return slice_cols(t, r.begin, r.size()); }

Tensor empty_rows(Tape& tape, Index rows) { return tape.constant(Matrix(rows, 0)); }

Tensor per_graph_sum(const Tensor& per_row, std::span<const int> graph_of_row, Index num_graphs) {
  return segment_aggregate(row_sum(per_row), graph_of_row, num_graphs, Reduce::sum);
}

std::vector<double> column_values(const Tensor& t) {
  std::vector<double> v(static_cast<std::size_t>(t.rows()));
  for (Index i = 0; i < t.rows(); ++i) v[static_cast<std::size_t>(i)] = t.value()(i, 0);
  return v;
}

}  // namespace

// --- config -----------------------------------------------------------------

nlohmann::json ModelConfig::to_json() const {
  return {{"encoder", encoder_name(encoder)},
          {"mlp_width", mlp_width},
          {"latent_size", latent_size},
          {"encoder_steps", encoder_steps},
          {"decoder_steps", decoder_steps},
          {"aggregator", aggregator.name()},
          {"latents", {{"node", node_latent}, {"edge", edge_latent}, {"global", global_latent}}},
          {"prior", prior_name(prior)},
          {"fixed_observation_noise", fixed_observation_noise},
          {"observation_sigma", observation_sigma},
          {"decoder_global_conditioning", decoder_global_conditioning},
          {"broadcast_globals", broadcast_globals},
          {"head_gain", head_gain},
          {"partition",
           {{"node", level_json(partition.node)},
            {"edge", level_json(partition.edge)},
            {"global", level_json(partition.global)}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.encoder = encoder_from(j.value("encoder", "graphnet"));
  c.mlp_width = j.value("mlp_width", c.mlp_width);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.encoder_steps = j.value("encoder_steps", c.encoder_steps);
  c.decoder_steps = j.value("decoder_steps", c.decoder_steps);
  c.aggregator = AggregatorSpec::parse(j.value("aggregator", "mean"));
  if (j.contains("latents")) {
    const auto& l = j.at("latents");
    c.node_latent = l.value("node", c.node_latent);
    c.edge_latent = l.value("edge", c.edge_latent);
    c.global_latent = l.value("global", c.global_latent);
  }
  c.prior = prior_from(j.value("prior", "conditional"));
  c.fixed_observation_noise = j.value("fixed_observation_noise", c.fixed_observation_noise);
  c.observation_sigma = j.value("observation_sigma", c.observation_sigma);
  c.decoder_global_conditioning =
      j.value("decoder_global_conditioning", c.decoder_global_conditioning);
  c.broadcast_globals = j.value("broadcast_globals", c.broadcast_globals);
  c.head_gain = j.value("head_gain", c.head_gain);
  if (!(c.head_gain > 0.0)) throw std::invalid_argument("head_gain must be > 0");
  if (j.contains("partition")) {
    const auto& p = j.at("partition");
    if (p.contains("node")) c.partition.node = level_from(p.at("node"));
    if (p.contains("edge")) c.partition.edge = level_from(p.at("edge"));
    if (p.contains("global")) c.partition.global = level_from(p.at("global"));
  }
  return c;
}

nlohmann::json ELBOWeights::to_json() const {
  return {{"beta_node", node}, {"beta_edge", edge}, {"beta_global", global}};
}

ELBOWeights ELBOWeights::from_json(const nlohmann::json& j) {
  ELBOWeights w;
  w.node = j.value("beta_node", 1.0);
  w.edge = j.value("beta_edge", 1.0);
  w.global = j.value("beta_global", 1.0);
  if (w.node < 0 || w.edge < 0 || w.global < 0) {
    throw std::invalid_argument("ELBO weights must be nonnegative");
  }
  return w;
}

// --- batches ----------------------------------------------------------------

Index ModelBatch::num_targets() const {
  Index n = 0;
  for (bool t : target) n += t ? 1 : 0;
  return n;
}

ModelBatch make_batch(std::span<const AttributedGraph> graphs, std::span<const NodeMask> masks,
                      const GraphPartition& partition) {
  if (!masks.empty() && masks.size() != graphs.size()) {
    throw std::invalid_argument("make_batch: one mask per graph required");
  }
  std::vector<AttributedGraph> full;
  std::vector<AttributedGraph> masked;
  full.reserve(graphs.size());
  masked.reserve(graphs.size());
  ModelBatch mb;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const NodeMask none(static_cast<std::size_t>(graphs[i].num_nodes()), false);
    const NodeMask& m = masks.empty() ? none : masks[i];
    full.push_back(apply_mask(graphs[i], none, partition));
    masked.push_back(apply_mask(graphs[i], m, partition));
    mb.target.insert(mb.target.end(), m.begin(), m.end());
  }
  mb.observed = batch(graphs);
  mb.full = batch(full);
  mb.masked = batch(masked);
  return mb;
}

// --- model ------------------------------------------------------------------

LevelDims RVAEModel::state_dims() const {
  const auto& p = cfg_.partition;
  return {p.node.state.size(), p.edge.state.size(), p.global.state.size()};
}

LevelDims RVAEModel::conditioning_dims() const {
  const auto& p = cfg_.partition;
  return {p.node.conditioning.size(), p.edge.conditioning.size(), p.global.conditioning.size()};
}

LevelDims RVAEModel::encoder_input_dims() const {
  const auto& p = cfg_.partition;
  return {p.node.width() + 1, p.edge.width(), p.global.width()};
}

LevelDims RVAEModel::decoder_input_dims() const {
  const LevelDims c = conditioning_dims();
  const Index dz = cfg_.latent_size;
  return {(cfg_.node_latent ? dz : 0) + c.node, (cfg_.edge_latent ? dz : 0) + c.edge,
          (cfg_.global_latent ? dz : 0) + (cfg_.decoder_global_conditioning ? c.global : 0)};
}

RVAEModel RVAEModel::create(ParameterStore& store, Rng& rng, const ModelConfig& cfg) {
  RVAEModel m;
  m.cfg_ = cfg;
  const Index dz = cfg.latent_size;
  const Index w = cfg.mlp_width;
  const LevelDims enc_in = m.encoder_input_dims();
  const LevelDims state = m.state_dims();
  const LevelDims cond = m.conditioning_dims();
  auto obs_width = [&](Index s) { return cfg.fixed_observation_noise ? s : 2 * s; };
  const LevelDims obs_out{obs_width(state.node), obs_width(state.edge), obs_width(state.global)};
  const LevelDims dec_in = m.decoder_input_dims();

  if (cfg.encoder == EncoderKind::graphnet) {
    EncodeProcessDecodeConfig e;
    e.in = enc_in;
    e.out = {cfg.node_latent ? 2 * dz : 0, cfg.edge_latent ? 2 * dz : 0,
             cfg.global_latent ? 2 * dz : 0};
    e.width = w;
    e.steps = cfg.encoder_steps;
    e.aggregator = cfg.aggregator;
    e.broadcast_globals = cfg.broadcast_globals;
    e.output_gain = cfg.head_gain;
    m.encoder_ = EncodeProcessDecode::create(store, rng, "encoder", e);

    EncodeProcessDecodeConfig d;
    d.in = dec_in;
    d.out = obs_out;
    d.width = w;
    d.steps = cfg.decoder_steps;
    d.aggregator = cfg.aggregator;
    d.broadcast_globals = cfg.broadcast_globals;
    d.output_gain = cfg.head_gain;
    m.decoder_ = EncodeProcessDecode::create(store, rng, "decoder", d);
  } else {
    if (cfg.node_latent || cfg.edge_latent || !cfg.global_latent) {
      throw std::invalid_argument("deepset encoder supports a global latent only");
    }
    m.deepset_embed_ =
        GraphIndependent::create(store, rng, "encoder/embed", {enc_in.node, 0, 0}, {w, 0, 0}, w);
    GNBlockConfig pool;
    pool.node_in = w;
    pool.global_out = 2 * dz;
    pool.hidden = w;
    pool.node_to_global = AggregatorSpec{AggregatorSpec::Kind::mean};
    pool.use_edge_block = false;
    pool.use_node_block = false;
    pool.global_inputs = {false, true, false};
    pool.output_gain = cfg.head_gain;
    m.deepset_pool_ = GNBlock::create(store, rng, "encoder/pool", pool);

    GNBlockConfig node_block;
    node_block.node_in = cond.node;
    node_block.edge_in = dec_in.edge;
    node_block.global_in = dec_in.global;
    node_block.node_out = obs_out.node;
    node_block.hidden = w;
    node_block.use_edge_block = false;
    node_block.use_global_block = false;
    node_block.node_inputs = {false, true, true};
    node_block.output_gain = cfg.head_gain;
    m.node_decoder_ = GNBlock::create(store, rng, "decoder/node_block", node_block);
  }

  if (cfg.prior == PriorKind::conditional) {
    const LevelDims out{cfg.node_latent && cond.node > 0 ? 2 * dz : 0,
                        cfg.edge_latent && cond.edge > 0 ? 2 * dz : 0,
                        cfg.global_latent && cond.global > 0 ? 2 * dz : 0};
    if (out.node + out.edge + out.global > 0) {
      m.prior_net_ = GraphIndependent::create(store, rng, "prior", cond, out, w, cfg.head_gain);
    }
  }
  return m;
}

LevelGaussian gaussian_head(const Tensor& raw, Index dim, double sigma_floor) {
  if (raw.cols() != 2 * dim) {
    throw ShapeError("gaussian head width " + std::to_string(raw.cols()) + " != 2 x " +
                     std::to_string(dim));
  }
  LevelGaussian g;
  g.present = true;
  g.mu = slice_cols(raw, 0, dim);
  g.sigma = add_scalar(softplus(slice_cols(raw, dim, dim)), sigma_floor);
  if (!g.mu.value().allFinite() || !g.sigma.value().allFinite()) {
    throw NumericError("non-finite network output");
  }
  return g;
}

GaussianGraphDistribution RVAEModel::encode_posterior(ParameterBinding& p, const GraphBatch& topo,
                                                      const GraphTensors& input) const {
  if (cfg_.encoder == EncoderKind::deepset) return deepset_np_encode(*this, p, topo, input);
  const GraphTensors out = (*encoder_)(p, topo, input);
  const Index dz = cfg_.latent_size;
  GaussianGraphDistribution d;
  if (cfg_.node_latent) d.node = gaussian_head(out.nodes, dz, kLatentSigmaFloor);
  if (cfg_.edge_latent) d.edge = gaussian_head(out.edges, dz, kLatentSigmaFloor);
  if (cfg_.global_latent) d.global = gaussian_head(out.globals, dz, kLatentSigmaFloor);
  return d;
}

GaussianGraphDistribution RVAEModel::encode_posterior(ParameterBinding& p,
                                                      const GraphBatch& input) const {
  return encode_posterior(p, input, as_tensors(p.tape(), input));
}

GaussianGraphDistribution deepset_np_encode(const RVAEModel& model, ParameterBinding& p,
                                            const GraphBatch& topo, const GraphTensors& input) {
  if (model.cfg_.encoder != EncoderKind::deepset || !model.deepset_embed_) {
    throw std::invalid_argument("deepset_np_encode: model is not configured with a deepset encoder");
  }
  Tape& tape = p.tape();
  const GraphTensors embedded = (*model.deepset_embed_)(p, input);
  const GraphTensors pooled_in{embedded.nodes, empty_rows(tape, topo.num_edges()),
                               empty_rows(tape, topo.num_graphs())};
  const GraphTensors pooled = (*model.deepset_pool_)(p, topo, pooled_in);
  GaussianGraphDistribution d;
  d.global = gaussian_head(pooled.globals, model.cfg_.latent_size, kLatentSigmaFloor);
  return d;
}

GaussianGraphDistribution RVAEModel::prior(ParameterBinding& p, const GraphBatch& observed) const {
  if (cfg_.prior == PriorKind::shared_encoder) {
    throw std::logic_error("shared-encoder prior: encode the masked graph instead");
  }
  Tape& tape = p.tape();
  const Index dz = cfg_.latent_size;
  const auto& part = cfg_.partition;
  GaussianGraphDistribution d;
  auto unit = [&](Index rows) {
    LevelGaussian g;
    g.present = true;
    g.mu = tape.constant(Matrix::Zero(rows, dz));
    g.sigma = tape.constant(Matrix::Ones(rows, dz));
    return g;
  };
  GraphTensors learned;
  if (prior_net_) {
    const GraphTensors raw = as_tensors(tape, observed);
    const GraphTensors cond{cond_slice(raw.nodes, part.node.conditioning),
                            cond_slice(raw.edges, part.edge.conditioning),
                            cond_slice(raw.globals, part.global.conditioning)};
    learned = (*prior_net_)(p, cond);
  }
  auto level = [&](bool enabled, const Tensor& out, Index rows) {
    if (!enabled) return LevelGaussian{};
    if (out.valid() && out.cols() > 0) return gaussian_head(out, dz, kLatentSigmaFloor);
    return unit(rows);
  };
  d.node = level(cfg_.node_latent, learned.nodes, observed.num_nodes());
  d.edge = level(cfg_.edge_latent, learned.edges, observed.num_edges());
  d.global = level(cfg_.global_latent, learned.globals, observed.num_graphs());
  return d;
}

ObservationDistribution RVAEModel::decode(ParameterBinding& p, const GraphBatch& topo,
                                          const LatentGraph& z,
                                          const GraphTensors& conditioning) const {
  const auto& part = cfg_.partition;
  auto join = [&](bool use_latent, const Tensor& latent, const Tensor& cond) {
    std::vector<Tensor> parts;
    if (use_latent) parts.push_back(latent);
    parts.push_back(cond);
    return concat_cols(parts);
  };
  Tensor global_cond = cond_slice(conditioning.globals, part.global.conditioning);
  if (!cfg_.decoder_global_conditioning) global_cond = empty_rows(p.tape(), topo.num_graphs());
  const GraphTensors in{
      join(cfg_.node_latent, z.nodes, cond_slice(conditioning.nodes, part.node.conditioning)),
      join(cfg_.edge_latent, z.edges, cond_slice(conditioning.edges, part.edge.conditioning)),
      join(cfg_.global_latent, z.globals, global_cond)};

  GraphTensors out;
  if (decoder_) {
    out = (*decoder_)(p, topo, in);
  } else {
    out = (*node_decoder_)(p, topo, in);
  }
  const LevelDims s = state_dims();
  ObservationDistribution obs;
  auto head = [&](const Tensor& raw, Index dim) {
    if (dim == 0) return LevelGaussian{};
    if (cfg_.fixed_observation_noise) {
      LevelGaussian g;
      g.present = true;
      g.mu = raw;
      g.sigma = p.tape().constant(Matrix::Constant(raw.rows(), dim, cfg_.observation_sigma));
      return g;
    }
    return gaussian_head(raw, dim, kObservationSigmaFloor);
  };
  obs.node = head(out.nodes, s.node);
  if (decoder_) {
    obs.edge = head(out.edges, s.edge);
    obs.global = head(out.globals, s.global);
  }
  return obs;
}

ObservationDistribution RVAEModel::decode(ParameterBinding& p, const GraphBatch& observed,
                                          const LatentGraph& z) const {
  return decode(p, observed, z, as_tensors(p.tape(), observed));
}

// --- sampling and divergences ----------------------------------------------

LatentNoise sample_noise(Rng& rng, const GaussianGraphDistribution& dist) {
  LatentNoise eps;
  auto draw = [&](const LevelGaussian& g) {
    return g.present ? standard_normal(rng, g.mu.rows(), g.mu.cols()) : Matrix();
  };
  eps.nodes = draw(dist.node);
  eps.edges = draw(dist.edge);
  eps.globals = draw(dist.global);
  return eps;
}

namespace {

Tape& tape_of(const GaussianGraphDistribution& d) {
  for (const LevelGaussian* g : {&d.node, &d.edge, &d.global}) {
    if (g->present) return g->mu.tape();
  }
  throw std::invalid_argument("distribution has no latent level");
}

}  // namespace

LatentGraph reparameterize(const GaussianGraphDistribution& dist, const LatentNoise& eps) {
  Tape& tape = tape_of(dist);
  auto level = [&](const LevelGaussian& g, const Matrix& e) {
    if (!g.present) return Tensor{};
    if (e.rows() != g.mu.rows() || e.cols() != g.mu.cols()) {
      throw ShapeError("reparameterize: noise shape mismatch");
    }
    return add(g.mu, mul(g.sigma, tape.constant(e)));
  };
  return {level(dist.node, eps.nodes), level(dist.edge, eps.edges),
          level(dist.global, eps.globals)};
}

LatentGraph posterior_mean(const GaussianGraphDistribution& dist) {
  return {dist.node.present ? dist.node.mu : Tensor{}, dist.edge.present ? dist.edge.mu : Tensor{},
          dist.global.present ? dist.global.mu : Tensor{}};
}

Tensor gaussian_log_density(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Tensor z = div(sub(x, mu), sigma);
  return add_scalar(neg(add(log(sigma), scale(square(z), 0.5))), -half_log_2pi);
}

namespace {

Tensor kl_elementwise(const LevelGaussian& q, const LevelGaussian& p) {
  // log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
  Tensor ratio = div(add(square(q.sigma), square(sub(q.mu, p.mu))), scale(square(p.sigma), 2.0));
  return add_scalar(add(sub(log(p.sigma), log(q.sigma)), ratio), -0.5);
}

}  // namespace

KLTerms kl_factorized(const GaussianGraphDistribution& q, const GaussianGraphDistribution& p,
                      const GraphBatch& topo) {
  Tape* tape = nullptr;
  for (const LevelGaussian* g : {&q.node, &q.edge, &q.global, &p.node, &p.edge, &p.global}) {
    if (g->present) tape = &g->mu.tape();
  }
  if (!tape) throw std::invalid_argument("kl_factorized: no latent levels");
  auto level = [&](const char* name, const LevelGaussian& a, const LevelGaussian& b,
                   std::span<const int> graph_of_row) {
    if (a.present != b.present) {
      throw std::invalid_argument(std::string("kl_factorized: presence mismatch at ") + name);
    }
    if (!a.present) return tape->constant(Matrix::Zero(topo.num_graphs(), 1));
    if (a.mu.rows() != b.mu.rows() || a.mu.cols() != b.mu.cols()) {
      throw ShapeError(std::string("kl_factorized: shape mismatch at ") + name);
    }
    return per_graph_sum(kl_elementwise(a, b), graph_of_row, topo.num_graphs());
  };
  std::vector<int> graph_index(static_cast<std::size_t>(topo.num_graphs()));
  for (std::size_t i = 0; i < graph_index.size(); ++i) graph_index[i] = static_cast<int>(i);
  return {level("node", q.node, p.node, topo.node_graph),
          level("edge", q.edge, p.edge, topo.edge_graph),
          level("global", q.global, p.global, graph_index)};
}

Tensor node_log_likelihood(const ObservationDistribution& obs, const Tensor& node_state) {
  if (!obs.node.present) throw std::invalid_argument("observation model has no node level");
  return gaussian_log_density(node_state, obs.node.mu, obs.node.sigma);
}

Tensor decode_likelihood(const RVAEModel& model, ParameterBinding& p, const GraphBatch& observed,
                         const LatentGraph& z, std::span<const double> node_weight) {
  Tape& tape = p.tape();
  const auto& part = model.config().partition;
  const GraphTensors raw = as_tensors(tape, observed);
  const ObservationDistribution obs = model.decode(p, observed, z, raw);
  const Index B = observed.num_graphs();
  Tensor total = tape.constant(Matrix::Zero(B, 1));
  if (obs.node.present) {
    if (static_cast<Index>(node_weight.size()) != observed.num_nodes()) {
      throw std::invalid_argument("decode_likelihood: node weight length mismatch");
    }
    Tensor lp = gaussian_log_density(cond_slice(raw.nodes, part.node.state), obs.node.mu,
                                     obs.node.sigma);
    Matrix w(lp.rows(), lp.cols());
    for (Index i = 0; i < w.rows(); ++i) w.row(i).setConstant(node_weight[static_cast<std::size_t>(i)]);
    if (!lp.value().allFinite()) throw NumericError("non-finite log-density");
    total = add(total, per_graph_sum(mul(lp, tape.constant(std::move(w))), observed.node_graph, B));
  }
  if (obs.edge.present) {
    Tensor lp = gaussian_log_density(cond_slice(raw.edges, part.edge.state), obs.edge.mu,
                                     obs.edge.sigma);
    total = add(total, per_graph_sum(lp, observed.edge_graph, B));
  }
  if (obs.global.present) {
    Tensor lp = gaussian_log_density(cond_slice(raw.globals, part.global.state), obs.global.mu,
                                     obs.global.sigma);
    total = add(total, row_sum(lp));
  }
  return total;
}

namespace {

ElboResult assemble(const Tensor& recon, const KLTerms& kl, const ELBOWeights& w) {
  Tensor per_graph = sub(sub(sub(recon, scale(kl.node, w.node)), scale(kl.edge, w.edge)),
                         scale(kl.global, w.global));
  ElboResult r;
  r.objective = sum(per_graph);
  r.reconstruction = sum(recon);
  r.kl_node = sum(kl.node);
  r.kl_edge = sum(kl.edge);
  r.kl_global = sum(kl.global);
  r.per_graph = column_values(per_graph);
  r.per_graph_reconstruction = column_values(recon);
  return r;
}

Tensor expected_reconstruction(const RVAEModel& model, ParameterBinding& p, const GraphBatch& obs,
                               const GaussianGraphDistribution& q, std::span<const double> weight,
                               Rng& rng, int mc_samples) {
  if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
  Tensor acc;
  for (int s = 0; s < mc_samples; ++s) {
    const LatentGraph z = reparameterize(q, sample_noise(rng, q));
    Tensor r = decode_likelihood(model, p, obs, z, weight);
    acc = acc.valid() ? add(acc, r) : r;
  }
  return mc_samples == 1 ? acc : scale(acc, 1.0 / mc_samples);
}

}  // namespace

ElboResult elbo(const RVAEModel& model, ParameterBinding& p, const ModelBatch& batch,
                const ELBOWeights& weights, Rng& rng, int mc_samples) {
  const GaussianGraphDistribution q = model.encode_posterior(p, batch.masked);
  const GaussianGraphDistribution prior = model.prior(p, batch.observed);
  const KLTerms kl = kl_factorized(q, prior, batch.observed);
  const std::vector<double> all(static_cast<std::size_t>(batch.num_nodes()), 1.0);
  const Tensor recon = expected_reconstruction(model, p, batch.observed, q, all, rng, mc_samples);
  return assemble(recon, kl, weights);
}

ElboResult np_elbo(const RVAEModel& model, ParameterBinding& p, const ModelBatch& batch,
                   const ELBOWeights& weights, Rng& rng, int mc_samples) {
  const GaussianGraphDistribution q = model.encode_posterior(p, batch.full);
  const GaussianGraphDistribution prior = model.encode_posterior(p, batch.masked);
  const KLTerms kl = kl_factorized(q, prior, batch.observed);
  std::vector<double> target(batch.target.size());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = batch.target[i] ? 1.0 : 0.0;
  const Tensor recon =
      expected_reconstruction(model, p, batch.observed, q, target, rng, mc_samples);
  ElboResult r = assemble(recon, kl, weights);
  r.empty_target = batch.num_targets() == 0;
  return r;
}

}  // namespace rvae
