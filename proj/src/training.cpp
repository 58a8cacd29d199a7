#include "rvae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace rvae {

// --- schedules and configuration ---------------------------------------------

ELBOWeights kl_anneal(long step, const BetaSchedule& schedule) {
  if (schedule.anneal_steps < 0) throw std::invalid_argument("anneal_steps must be >= 0");
  if (schedule.anneal_steps == 0 || step >= schedule.anneal_steps) return schedule.beta;
  const double f = static_cast<double>(std::max(step, 0L)) / static_cast<double>(schedule.anneal_steps);
  return {schedule.beta.node * f, schedule.beta.edge * f, schedule.beta.global * f};
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) fail("mask_fraction must lie in (0, 1)");
  if (min_context < 0 || min_context > max_context) fail("bad context count range");
  if (min_target < 0 || min_target > max_target) fail("bad target count range");
  if (eval_interval < 1) fail("eval_interval must be >= 1");
  if (patience < eval_interval || patience % eval_interval != 0) {
    fail("patience must be a positive multiple of eval_interval");
  }
  if (beta.anneal_steps < 0) fail("anneal_steps must be >= 0");
  if (mc_samples < 1) fail("mc_samples must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"max_steps", max_steps},
          {"batch_size", batch_size},       {"mask_fraction", mask_fraction},
          {"min_context", min_context},     {"max_context", max_context},
          {"min_target", min_target},       {"max_target", max_target},
          {"patience", patience},           {"eval_interval", eval_interval},
          {"beta", beta.beta.to_json()},    {"anneal_steps", beta.anneal_steps},
          {"mc_samples", mc_samples},       {"rotate_augment", rotate_augment},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.mask_fraction = j.value("mask_fraction", c.mask_fraction);
  c.min_context = j.value("min_context", c.min_context);
  c.max_context = j.value("max_context", c.max_context);
  c.min_target = j.value("min_target", c.min_target);
  c.max_target = j.value("max_target", c.max_target);
  c.patience = j.value("patience", c.patience);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  if (j.contains("beta")) c.beta.beta = ELBOWeights::from_json(j.at("beta"));
  c.beta.anneal_steps = j.value("anneal_steps", c.beta.anneal_steps);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.rotate_augment = j.value("rotate_augment", c.rotate_augment);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

void RunRecord::write_jsonl(std::ostream& os) const {
  for (const auto& e : evals) {
    os << nlohmann::json{{"step", e.step}, {"train_loss", e.train_loss}, {"test_mean", e.mean},
                         {"test_std", e.std}}
              .dump()
       << "\n";
  }
  os << summary_json().dump() << "\n";
}

nlohmann::json RunRecord::summary_json() const {
  return {{"best_step", best_step},   {"best_objective", best_objective},
          {"steps_run", steps_run},   {"diverged", diverged},
          {"early_stopped", early_stopped}};
}

EvalMode eval_mode_from(const std::string& s) {
  if (s == "elbo") return EvalMode::elbo;
  if (s == "nll" || s == "target_nll") return EvalMode::target_nll;
  if (s == "mape") return EvalMode::mape;
  throw std::invalid_argument("unknown evaluation mode '" + s + "'");
}

const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::elbo: return "elbo";
    case EvalMode::target_nll: return "target_nll";
    case EvalMode::mape: return "mape";
  }
  return "";
}

// --- metrics -------------------------------------------------------------------

MapeResult mape(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("mape: length mismatch");
  MapeResult r;
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 0.0) {
      ++r.excluded;
      continue;
    }
    acc += std::abs(truth[i] - predicted[i]) / std::abs(truth[i]);
    ++r.count;
  }
  if (r.count == 0) throw std::invalid_argument("mape: no scorable entries");
  r.value = acc / static_cast<double>(r.count);
  return r;
}

NodeMask random_node_mask(Rng& rng, Index n, double fraction) {
  NodeMask m(static_cast<std::size_t>(n), false);
  if (n == 0) return m;
  Index k = static_cast<Index>(std::lround(fraction * static_cast<double>(n)));
  k = std::clamp<Index>(k, 1, std::max<Index>(n - 1, 1));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (Index i = 0; i < k; ++i) m[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return m;
}

std::vector<NodeMask> fixed_masks(std::span<const AttributedGraph> graphs, double fraction,
                                  std::uint64_t seed) {
  std::vector<NodeMask> out;
  out.reserve(graphs.size());
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    Rng rng = derive_rng(seed, i);
    out.push_back(random_node_mask(rng, graphs[i].num_nodes(), fraction));
  }
  return out;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd batch_spread(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

/// Per-node log-density of the node state summed over state channels.
Matrix node_log_density(const RVAEModel& model, ParameterBinding& p, const GraphBatch& observed,
                        const LatentGraph& z) {
  const auto& st = model.config().partition.node.state;
  const GraphTensors raw = as_tensors(p.tape(), observed);
  const ObservationDistribution obs = model.decode(p, observed, z, raw);
  const Tensor lp = node_log_likelihood(obs, slice_cols(raw.nodes, st.begin, st.size()));
  return lp.value().rowwise().sum();
}

struct LatentValues {
  std::optional<Matrix> nodes, edges, globals;
  LatentGraph on(Tape& tape) const {
    auto c = [&](const std::optional<Matrix>& m) { return m ? tape.constant(*m) : Tensor{}; };
    return {c(nodes), c(edges), c(globals)};
  }
};

LatentValues latent_values(const LatentGraph& z) {
  auto v = [](const Tensor& t) { return t.valid() ? std::optional<Matrix>(t.value()) : std::nullopt; };
  return {v(z.nodes), v(z.edges), v(z.globals)};
}

double log_mean_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

ElboResult objective_for(const RVAEModel& model, ParameterBinding& p, const ModelBatch& mb,
                         const ELBOWeights& w, Rng& rng, int mc) {
  if (model.config().prior == PriorKind::shared_encoder) return np_elbo(model, p, mb, w, rng, mc);
  return elbo(model, p, mb, w, rng, mc);
}

}  // namespace

Matrix predict_node_state(const RVAEModel& model, const ParameterStore& store,
                          const ModelBatch& batch) {
  Tape tape;
  ParameterBinding p(tape, store, false);
  const GaussianGraphDistribution q = model.encode_posterior(p, batch.masked);
  const ObservationDistribution obs = model.decode(p, batch.observed, posterior_mean(q));
  if (!obs.node.present) throw std::invalid_argument("model has no node observation level");
  return obs.node.mu.value();
}

EvalResult evaluate(const RVAEModel& model, const ParameterStore& store,
                    std::span<const AttributedGraph> graphs, std::span<const NodeMask> masks,
                    EvalMode mode, const EvalOptions& opt) {
  if (graphs.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (masks.size() != graphs.size()) throw std::invalid_argument("evaluate: one mask per graph");
  if (opt.batch_size < 1 || opt.mc_samples < 1) throw std::invalid_argument("evaluate: bad options");
  const auto& part = model.config().partition;
  Rng rng(opt.seed);
  EvalResult res;
  std::vector<double> batch_values;
  double pooled = 0.0;
  std::vector<double> truth_all, pred_all;

  for (std::size_t begin = 0; begin < graphs.size(); begin += static_cast<std::size_t>(opt.batch_size)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(opt.batch_size), graphs.size() - begin);
    const auto gs = graphs.subspan(begin, n);
    const auto ms = masks.subspan(begin, n);
    const ModelBatch mb = make_batch(gs, ms, part);

    if (mode == EvalMode::elbo) {
      Tape tape;
      ParameterBinding p(tape, store, false);
      const ElboResult r = objective_for(model, p, mb, opt.weights, rng, 1);
      double acc = 0.0;
      for (std::size_t g = 0; g < n; ++g) {
        const double v = r.per_graph[g] / static_cast<double>(std::max<Index>(gs[g].num_nodes(), 1));
        acc += v;
        pooled += v;
      }
      res.count += static_cast<long>(n);
      batch_values.push_back(acc / static_cast<double>(n));
    } else if (mode == EvalMode::target_nll) {
      std::vector<LatentValues> zs;
      {
        Tape tape;
        ParameterBinding p(tape, store, false);
        const GaussianGraphDistribution q = model.encode_posterior(p, mb.masked);
        for (int s = 0; s < opt.mc_samples; ++s) zs.push_back(latent_values(reparameterize(q, sample_noise(rng, q))));
      }
      // one tape per draw keeps memory at a single decoder pass
      std::vector<Matrix> draws;
      for (const LatentValues& z : zs) {
        Tape tape;
        ParameterBinding p(tape, store, false);
        draws.push_back(node_log_density(model, p, mb.observed, z.on(tape)));
      }
      double acc = 0.0;
      long count = 0;
      std::vector<double> per(static_cast<std::size_t>(opt.mc_samples));
      for (Index i = 0; i < mb.num_nodes(); ++i) {
        if (!mb.target[static_cast<std::size_t>(i)]) continue;
        for (int s = 0; s < opt.mc_samples; ++s) per[static_cast<std::size_t>(s)] = draws[static_cast<std::size_t>(s)](i, 0);
        acc += log_mean_exp(per);
        ++count;
      }
      if (count > 0) {
        pooled += acc;
        res.count += count;
        batch_values.push_back(acc / static_cast<double>(count));
      }
    } else {
      const Matrix pred = predict_node_state(model, store, mb);
      const int ch = opt.state.channel;
      if (ch < 0 || ch >= part.node.state.size()) throw std::invalid_argument("mape: bad channel");
      std::vector<double> truth, guess;
      for (Index i = 0; i < mb.num_nodes(); ++i) {
        if (!mb.target[static_cast<std::size_t>(i)]) continue;
        truth.push_back(opt.state.restore(mb.observed.nodes(i, part.node.state.begin + ch)));
        guess.push_back(opt.state.restore(pred(i, ch)));
      }
      if (truth.empty()) continue;
      truth_all.insert(truth_all.end(), truth.begin(), truth.end());
      pred_all.insert(pred_all.end(), guess.begin(), guess.end());
      try {
        batch_values.push_back(mape(truth, guess).value);
      } catch (const std::invalid_argument&) {
        // every true value in this batch is zero
      }
    }
  }

  if (mode == EvalMode::mape) {
    if (truth_all.empty()) throw std::invalid_argument("mape: no masked nodes");
    const MapeResult m = mape(truth_all, pred_all);
    res.mean = m.value;
    res.count = m.count;
    res.excluded = m.excluded;
  } else {
    if (res.count == 0) throw std::invalid_argument("evaluate: nothing to score");
    res.mean = pooled / static_cast<double>(res.count);
  }
  res.std = batch_spread(batch_values).std;
  return res;
}

// --- training loops ------------------------------------------------------------

namespace {

using BatchFn = std::function<ModelBatch(Rng&, long step)>;
using EvalFn = std::function<EvalResult()>;

RunRecord run_training(const RVAEModel& model, ParameterStore& store, const TrainConfig& cfg,
                       const BatchFn& next_batch, const EvalFn& eval, std::ostream* log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  const AdamOptions adam{cfg.learning_rate};

  ParameterStore best = store;
  auto record_eval = [&](long step, double train_loss) {
    EvalPoint e;
    e.step = step;
    e.train_loss = train_loss;
    const EvalResult r = eval();
    e.mean = r.mean;
    e.std = r.std;
    rec.evals.push_back(e);
    if (rec.best_step < 0 || e.mean > rec.best_objective) {
      rec.best_objective = e.mean;
      rec.best_step = step;
      best = store;
    }
    if (log) {
      *log << "step " << step << " train_loss " << train_loss << " test " << e.mean << "\n";
      log->flush();
    }
  };
  record_eval(0, 0.0);

  double loss_acc = 0.0;
  long loss_count = 0;
  for (long step = 1; step <= cfg.max_steps; ++step) {
    Rng rng = derive_rng(cfg.seed, static_cast<std::uint64_t>(step));
    const ModelBatch mb = next_batch(rng, step);
    const ELBOWeights w = kl_anneal(step - 1, cfg.beta);
    Tape tape;
    ParameterBinding p(tape, store);
    try {
      const ElboResult r = objective_for(model, p, mb, w, rng, cfg.mc_samples);
      // Without targets KL(q || q) leaves rounding-level gradients that Adam
      // would normalize into full-size steps, so such batches are skipped.
      if (!r.empty_target) {
        const double nodes = static_cast<double>(std::max<Index>(mb.num_nodes(), 1));
        const Tensor loss = scale(r.objective, -1.0 / nodes);
        if (!std::isfinite(loss.scalar())) throw NumericError("non-finite training loss");
        tape.backward(loss);
        loss_acc += loss.scalar();
        ++loss_count;
        store.adam_step(p.gradients(), adam);
      }
    } catch (const NumericError& e) {
      rec.diverged = true;
      rec.steps_run = step;
      if (log) *log << "diverged at step " << step << ": " << e.what() << "\n";
      break;
    }
    rec.steps_run = step;
    if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
      record_eval(step, loss_count ? loss_acc / static_cast<double>(loss_count) : 0.0);
      loss_acc = 0.0;
      loss_count = 0;
      if (step - rec.best_step >= cfg.patience) {
        rec.early_stopped = true;
        break;
      }
    }
  }
  store = std::move(best);
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

}  // namespace

RunRecord train_farm(const RVAEModel& model, ParameterStore& store,
                     std::span<const AttributedGraph> train, std::span<const AttributedGraph> test,
                     const TrainConfig& cfg, std::ostream* log) {
  if (train.empty() || test.empty()) throw std::invalid_argument("train_farm: empty split");
  const auto& part = model.config().partition;
  const std::vector<NodeMask> test_masks = fixed_masks(test, cfg.mask_fraction, EvalOptions{}.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::uniform_real_distribution<double> angle(0.0, 360.0);

  BatchFn next = [&](Rng& rng, long) {
    std::vector<AttributedGraph> gs;
    std::vector<NodeMask> ms;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const AttributedGraph& g = train[pick(rng)];
      gs.push_back(cfg.rotate_augment ? rotate_farm_graph(g, angle(rng)) : g);
      ms.push_back(random_node_mask(rng, g.num_nodes(), cfg.mask_fraction));
    }
    return make_batch(gs, ms, part);
  };
  EvalFn eval = [&]() {
    EvalOptions opt;
    opt.weights = cfg.beta.beta;
    return evaluate(model, store, test, test_masks, EvalMode::elbo, opt);
  };
  return run_training(model, store, cfg, next, eval, log);
}

nlohmann::json GPStream::to_json() const {
  return {{"kernel", kernel.to_json()},
          {"x_range", {x_lo, x_hi}},
          {"cutoff", graph.cutoff},
          {"edge_features", graph.edge_features},
          {"node_position", graph.node_position}};
}

GPStream GPStream::from_json(const nlohmann::json& j) {
  GPStream s;
  if (j.contains("kernel")) s.kernel = SEKernel::from_json(j.at("kernel"));
  if (j.contains("x_range")) {
    s.x_lo = j.at("x_range").at(0).get<double>();
    s.x_hi = j.at("x_range").at(1).get<double>();
  }
  s.graph.cutoff = j.value("cutoff", s.graph.cutoff);
  s.graph.edge_features = j.value("edge_features", s.graph.edge_features);
  s.graph.node_position = j.value("node_position", s.graph.node_position);
  if (!(s.x_hi > s.x_lo)) throw std::invalid_argument("x_range must be increasing");
  return s;
}

std::pair<AttributedGraph, NodeMask> sample_gp_graph(Rng& rng, const GPStream& stream,
                                                     int n_context, int n_target) {
  const int n = n_context + n_target;
  const GPTask task = sample_gp(rng, n, stream.kernel, stream.x_lo, stream.x_hi);
  BuiltGraph built = build_gp_graph(task, stream.graph);
  NodeMask target = random_split(rng, n, n_context);
  return {std::move(built.graph), std::move(target)};
}

GPTestSet make_gp_test_set(std::uint64_t seed, const GPStream& stream, int n_tasks, int n_context,
                           int n_target) {
  GPTestSet t;
  for (int i = 0; i < n_tasks; ++i) {
    Rng rng = derive_rng(seed, static_cast<std::uint64_t>(i));
    auto [g, m] = sample_gp_graph(rng, stream, n_context, n_target);
    t.graphs.push_back(std::move(g));
    t.masks.push_back(std::move(m));
  }
  return t;
}

RunRecord train_np(const RVAEModel& model, ParameterStore& store, const GPStream& stream,
                   const GPTestSet& test, const TrainConfig& cfg, std::ostream* log) {
  const auto& part = model.config().partition;
  BatchFn next = [&](Rng& rng, long) {
    std::vector<AttributedGraph> gs;
    std::vector<NodeMask> ms;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int nc = uniform_int(rng, cfg.min_context, cfg.max_context);
      const int nt = uniform_int(rng, cfg.min_target, cfg.max_target);
      auto [g, m] = sample_gp_graph(rng, stream, nc, nt);
      gs.push_back(std::move(g));
      ms.push_back(std::move(m));
    }
    return make_batch(gs, ms, part);
  };
  EvalFn eval = [&]() {
    return evaluate(model, store, test.graphs, test.masks, EvalMode::target_nll);
  };
  return run_training(model, store, cfg, next, eval, log);
}

// --- checkpoints -----------------------------------------------------------------

nlohmann::json Checkpoint::to_json() const {
  return {{"format", kCheckpointFormat}, {"version", kCheckpointFormatVersion},
          {"model", model.to_json()},    {"train", train.to_json()},
          {"data", data},                {"parameters", params.to_json()}};
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kCheckpointFormat) throw std::runtime_error("not an rvae checkpoint");
  if (j.value("version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  Checkpoint c;
  c.model = ModelConfig::from_json(j.at("model"));
  c.train = TrainConfig::from_json(j.at("train"));
  c.data = j.value("data", nlohmann::json::object());
  c.params = ParameterStore::from_json(j.at("parameters"));
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << c.to_json().dump() << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("checkpoint not found: " + path.string());
  return Checkpoint::from_json(nlohmann::json::parse(is));
}

RVAEModel restore_model(const ModelConfig& cfg, const ParameterStore& params) {
  ParameterStore scratch;
  Rng rng(0);
  RVAEModel model = RVAEModel::create(scratch, rng, cfg);
  if (scratch.names() != params.names()) {
    throw std::invalid_argument("checkpoint/config mismatch: parameter names differ");
  }
  for (const auto& name : scratch.names()) {
    const Matrix& a = scratch.get(name);
    const Matrix& b = params.get(name);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw std::invalid_argument("checkpoint/config mismatch: shape of " + name);
    }
  }
  return model;
}

}  // namespace rvae
