#include "app.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

namespace rvae::app {

namespace fs = std::filesystem;
using nlohmann::json;

// --- dataset specifications ------------------------------------------------------

json FarmSpec::to_json() const {
  json layout;
  if (positions.empty()) {
    layout = {{"seed", layout_seed}, {"n_turbines", n_turbines}, {"min_spacing", min_spacing},
              {"spacing_factor", spacing_factor}};
  } else {
    layout = {{"positions", positions}};
  }
  return {{"layout", layout},
          {"seed", seed},
          {"n_snapshots", n_snapshots},
          {"test_fraction", test_fraction},
          {"sampling",
           {{"speed_min", sampling.speed_min},
            {"speed_max", sampling.speed_max},
            {"yaw_noise_deg", sampling.yaw_noise_deg}}},
          {"wake", {{"induction", wake.induction}, {"expansion", wake.expansion}}},
          {"graph",
           {{"cutoff_multiplier", cutoff_multiplier}, {"global_conditioning", global_conditioning}}}};
}

FarmSpec FarmSpec::from_json(const json& j) {
  FarmSpec s;
  if (j.contains("layout")) {
    const json& l = j.at("layout");
    s.layout_seed = l.value("seed", s.layout_seed);
    s.n_turbines = l.value("n_turbines", s.n_turbines);
    s.min_spacing = l.value("min_spacing", s.min_spacing);
    s.spacing_factor = l.value("spacing_factor", s.spacing_factor);
    if (l.contains("positions")) s.positions = l.at("positions").get<std::vector<std::array<double, 2>>>();
  }
  s.seed = j.value("seed", s.seed);
  s.n_snapshots = j.value("n_snapshots", s.n_snapshots);
  s.test_fraction = j.value("test_fraction", s.test_fraction);
  if (j.contains("sampling")) {
    const json& m = j.at("sampling");
    s.sampling.speed_min = m.value("speed_min", s.sampling.speed_min);
    s.sampling.speed_max = m.value("speed_max", s.sampling.speed_max);
    s.sampling.yaw_noise_deg = m.value("yaw_noise_deg", s.sampling.yaw_noise_deg);
  }
  if (j.contains("wake")) {
    s.wake.induction = j.at("wake").value("induction", s.wake.induction);
    s.wake.expansion = j.at("wake").value("expansion", s.wake.expansion);
  }
  if (j.contains("graph")) {
    s.cutoff_multiplier = j.at("graph").value("cutoff_multiplier", s.cutoff_multiplier);
    s.global_conditioning = j.at("graph").value("global_conditioning", s.global_conditioning);
  }
  if (s.n_snapshots < 2) throw std::invalid_argument("farm data: n_snapshots must be >= 2");
  if (!(s.test_fraction > 0.0 && s.test_fraction < 1.0)) {
    throw std::invalid_argument("farm data: test_fraction must lie in (0, 1)");
  }
  return s;
}

FarmData make_farm_data(const FarmSpec& spec, const Standardization* standardization) {
  FarmData d;
  d.spec = spec;
  if (spec.positions.empty()) {
    Rng rng = derive_rng(spec.layout_seed, 0);
    d.layout = random_layout(rng, spec.n_turbines, spec.min_spacing, spec.spacing_factor);
  } else {
    d.layout.positions.resize(static_cast<Index>(spec.positions.size()), 2);
    for (std::size_t i = 0; i < spec.positions.size(); ++i) {
      d.layout.positions(static_cast<Index>(i), 0) = spec.positions[i][0];
      d.layout.positions(static_cast<Index>(i), 1) = spec.positions[i][1];
    }
  }
  auto snaps = generate_farm_dataset(spec.seed, d.layout, spec.n_snapshots, spec.sampling, spec.wake);
  const auto n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(spec.test_fraction * spec.n_snapshots)));
  const auto n_train = snaps.size() - n_test;
  d.train_snaps.assign(snaps.begin(), snaps.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.test_snaps.assign(snaps.begin() + static_cast<std::ptrdiff_t>(n_train), snaps.end());
  d.graph.cutoff_multiplier = spec.cutoff_multiplier;
  d.graph.global_conditioning = spec.global_conditioning;
  d.graph.standardization =
      standardization ? *standardization : Standardization::fit(d.train_snaps);
  for (const auto& s : d.train_snaps) {
    BuiltGraph b = build_farm_graph(d.layout, s, d.graph);
    d.partition = b.partition;
    d.train.push_back(std::move(b.graph));
  }
  for (const auto& s : d.test_snaps) d.test.push_back(build_farm_graph(d.layout, s, d.graph).graph);
  return d;
}

json GPSpec::to_json() const {
  return {{"stream", stream.to_json()},
          {"test", {{"seed", test_seed}, {"n_tasks", n_tasks}, {"n_context", n_context}, {"n_target", n_target}}},
          {"validation", {{"seed", validation_seed}, {"n_tasks", validation_tasks}}}};
}

GPSpec GPSpec::from_json(const json& j) {
  GPSpec s;
  if (j.contains("stream")) s.stream = GPStream::from_json(j.at("stream"));
  if (j.contains("test")) {
    const json& t = j.at("test");
    s.test_seed = t.value("seed", s.test_seed);
    s.n_tasks = t.value("n_tasks", s.n_tasks);
    s.n_context = t.value("n_context", s.n_context);
    s.n_target = t.value("n_target", s.n_target);
  }
  if (j.contains("validation")) {
    s.validation_seed = j.at("validation").value("seed", s.validation_seed);
    s.validation_tasks = j.at("validation").value("n_tasks", s.validation_tasks);
  }
  if (s.n_tasks < 1 || s.validation_tasks < 1 || s.n_context < 0 || s.n_target < 1) {
    throw std::invalid_argument("gp data: bad task counts");
  }
  return s;
}

TrainConfig default_train_config(const std::string& task) {
  TrainConfig t;
  if (task == "gp") {
    t.learning_rate = 1e-4;
    t.max_steps = 40000;
  } else if (task == "farm") {
    t.learning_rate = 5e-5;
    t.max_steps = 40000;
  } else {
    throw std::invalid_argument("unknown task '" + task + "' (expected farm or gp)");
  }
  return t;
}

Rng init_rng(std::uint64_t seed) { return derive_rng(seed, 0x1417); }

namespace {

GraphPartition gp_partition(const GPStream& s) {
  Rng r(0);
  return build_gp_graph(sample_gp(r, 2, s.kernel, s.x_lo, s.x_hi), s.graph).partition;
}

json patched(json base, const json& cfg, const char* key) {
  if (cfg.contains(key)) base.merge_patch(cfg.at(key));
  return base;
}

}  // namespace

TrainedModel train_from_config(const json& cfg, std::ostream* log) {
  const std::string task = cfg.value("task", "farm");
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  json tj = patched(default_train_config(task).to_json(), cfg, "train");
  tj["seed"] = seed;
  TrainedModel out;
  Checkpoint& ck = out.checkpoint;
  ck.train = TrainConfig::from_json(tj);
  json mj = cfg.value("model", json::object());
  if (task == "gp" && !mj.contains("prior")) mj["prior"] = "shared_encoder";
  ck.model = ModelConfig::from_json(mj);
  Rng ir = init_rng(seed);

  if (task == "farm") {
    const FarmSpec spec = FarmSpec::from_json(cfg.value("data", json::object()));
    const FarmData data = make_farm_data(spec);
    ck.model.partition = data.partition;
    ck.data = {{"task", "farm"}, {"farm", spec.to_json()},
               {"standardization", data.graph.standardization.to_json()}};
    const RVAEModel model = RVAEModel::create(ck.params, ir, ck.model);
    out.record = train_farm(model, ck.params, data.train, data.test, ck.train, log);
  } else {
    const GPSpec spec = GPSpec::from_json(cfg.value("data", json::object()));
    ck.model.partition = gp_partition(spec.stream);
    ck.data = {{"task", "gp"}, {"gp", spec.to_json()}};
    const RVAEModel model = RVAEModel::create(ck.params, ir, ck.model);
    const GPTestSet validation = make_gp_test_set(spec.validation_seed, spec.stream,
                                                  spec.validation_tasks, spec.n_context, spec.n_target);
    out.record = train_np(model, ck.params, spec.stream, validation, ck.train, log);
  }
  return out;
}

// --- command line ------------------------------------------------------------------

namespace {

/// Failure reported as exit code 1 with a JSON message.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeFailure("config not found: " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw RuntimeFailure("config is not valid JSON: " + path + ": " + e.what());
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string checkpoint;
  std::string mode;
};

/// Collects the files of one run and writes them plus the manifest.
class RunDir {
 public:
  RunDir(const std::string& command, const Options& o, json config)
      : command_(command), opt_(o), config_(std::move(config)) {}

  void write(const std::string& name, const std::string& content) {
    fs::create_directories(opt_.out);
    std::ofstream os(fs::path(opt_.out) / name, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + (fs::path(opt_.out) / name).string());
    os << content;
    outputs_.push_back(name);
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

  void finish(std::ostream& out) {
    json m = {{"tool", "rvae"},
              {"version", kVersion},
              {"command", command_},
              {"config", config_},
              {"outputs", outputs_},
              {"build",
               {{"compiler", __VERSION__},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                              "." + std::to_string(EIGEN_MINOR_VERSION)},
                {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
    m["seed"] = opt_.seed ? json(*opt_.seed) : json(nullptr);
    m["checkpoint"] = opt_.checkpoint.empty() ? json(nullptr) : json(opt_.checkpoint);
    m["mode"] = opt_.mode.empty() ? json(nullptr) : json(opt_.mode);
    write_json("manifest.json", m);
    out << "wrote " << outputs_.size() << " files to " << opt_.out << "\n";
  }

 private:
  std::string command_;
  Options opt_;
  json config_;
  std::vector<std::string> outputs_;
};

json load_config(const Options& o) {
  return o.config.empty() ? json::object() : read_json_file(o.config);
}

// Dataset commands take a bare dataset description or a run configuration.
json data_section(const json& cfg) { return cfg.contains("data") ? cfg.at("data") : cfg; }

// --- generators ---------------------------------------------------------------------

void cmd_generate_gp(const Options& o, std::ostream& out) {
  GPSpec spec = GPSpec::from_json(data_section(load_config(o)));
  if (o.seed) spec.test_seed = *o.seed;
  const GPTestSet set = make_gp_test_set(spec.test_seed, spec.stream, spec.n_tasks, spec.n_context, spec.n_target);
  std::vector<GraphRecord> recs;
  for (std::size_t i = 0; i < set.graphs.size(); ++i) recs.push_back({set.graphs[i], set.masks[i]});
  std::ostringstream os;
  write_jsonl(os, recs);
  RunDir run("generate-gp", o, spec.to_json());
  run.write("tasks.jsonl", os.str());
  run.finish(out);
}

std::string graphs_jsonl(std::span<const AttributedGraph> graphs) {
  std::ostringstream os;
  for (const auto& g : graphs) os << to_jsonl(g) << "\n";
  return os.str();
}

void cmd_generate_farm(const Options& o, std::ostream& out) {
  FarmSpec spec = FarmSpec::from_json(data_section(load_config(o)));
  if (o.seed) spec.seed = *o.seed;
  const FarmData d = make_farm_data(spec);
  RunDir run("generate-farm", o, spec.to_json());
  run.write_json("layout.json", d.layout.to_json());
  std::ostringstream csv;
  std::vector<FarmSnapshot> all = d.train_snaps;
  all.insert(all.end(), d.test_snaps.begin(), d.test_snaps.end());
  write_snapshots_csv(csv, d.layout, all);
  run.write("snapshots.csv", csv.str());
  run.write("train.jsonl", graphs_jsonl(d.train));
  run.write("test.jsonl", graphs_jsonl(d.test));
  run.write_json("data.json", {{"farm", spec.to_json()},
                               {"standardization", d.graph.standardization.to_json()},
                               {"n_train", d.train.size()},
                               {"n_test", d.test.size()}});
  run.finish(out);
}

// --- training --------------------------------------------------------------------------

void cmd_train(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  if (o.seed) cfg["seed"] = *o.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainedModel t = train_from_config(cfg, &out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  RunDir run("train", o, cfg);
  run.write("checkpoint.json", t.checkpoint.to_json().dump() + "\n");
  std::ostringstream jl;
  t.record.write_jsonl(jl);
  run.write("run.jsonl", jl.str());
  const std::string task = t.checkpoint.data.at("task");
  std::ostringstream csv;
  csv << "task,encoder_steps,decoder_steps,steps_run,best_step,test_metric,best_test_mean,best_test_std\n";
  double best_std = 0.0;
  for (const auto& e : t.record.evals) {
    if (e.step == t.record.best_step) best_std = e.std;
  }
  csv << task << ',' << t.checkpoint.model.encoder_steps << ',' << t.checkpoint.model.decoder_steps << ','
      << t.record.steps_run << ',' << t.record.best_step << ','
      << (task == "gp" ? "target_log_likelihood" : "elbo_per_node") << ','
      << format_double(t.record.best_objective) << ',' << format_double(best_std) << "\n";
  run.write("summary.csv", csv.str());
  run.finish(out);
  out << "checkpoint " << (fs::path(o.out) / "checkpoint.json").string() << ", " << t.record.steps_run
      << " steps in " << std::fixed << std::setprecision(1) << secs << " s\n";
}

// --- checkpoint-based commands ------------------------------------------------------------

struct Loaded {
  Checkpoint ck;
  std::string task;
  std::optional<RVAEModel> model;
  json data;  // checkpoint data patched by the config
  // evaluation graphs
  std::vector<AttributedGraph> graphs;
  std::vector<NodeMask> masks;
  std::optional<FarmData> farm;
  std::vector<FarmSnapshot> snaps;  // farm: snapshots behind `graphs`
};

Loaded load(const Options& o, const json& cfg) {
  if (o.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
  Loaded l;
  if (!fs::exists(o.checkpoint)) throw RuntimeFailure("checkpoint not found: " + o.checkpoint);
  l.ck = load_checkpoint(o.checkpoint);
  l.model.emplace(restore_model(l.ck.model, l.ck.params));
  l.task = l.ck.data.value("task", "");
  const std::string split = cfg.value("split", "test");
  if (split != "test" && split != "train" && split != "all") {
    throw std::invalid_argument("split must be test, train or all");
  }
  if (l.task == "gp") {
    l.data = patched(l.ck.data.at("gp"), cfg, "data");
    const GPSpec spec = GPSpec::from_json(l.data);
    const GPStream& s = spec.stream;
    if (!(gp_partition(s) == l.ck.model.partition)) {
      throw std::invalid_argument("checkpoint/config mismatch: data channels differ from the model");
    }
    GPTestSet t = make_gp_test_set(spec.test_seed, s, spec.n_tasks, spec.n_context, spec.n_target);
    l.graphs = std::move(t.graphs);
    l.masks = std::move(t.masks);
  } else if (l.task == "farm") {
    l.data = patched(l.ck.data.at("farm"), cfg, "data");
    const Standardization st = Standardization::from_json(l.ck.data.at("standardization"));
    l.farm.emplace(make_farm_data(FarmSpec::from_json(l.data), &st));
    if (!(l.farm->partition == l.ck.model.partition)) {
      throw std::invalid_argument("checkpoint/config mismatch: data channels differ from the model");
    }
    if (split != "test") {
      l.graphs = l.farm->train;
      l.snaps = l.farm->train_snaps;
    }
    if (split != "train") {
      l.graphs.insert(l.graphs.end(), l.farm->test.begin(), l.farm->test.end());
      l.snaps.insert(l.snaps.end(), l.farm->test_snaps.begin(), l.farm->test_snaps.end());
    }
    l.masks = fixed_masks(l.graphs, l.ck.train.mask_fraction, cfg.value("mask_seed", EvalOptions{}.seed));
  } else {
    throw std::invalid_argument("checkpoint has unknown task '" + l.task + "'");
  }
  return l;
}

std::vector<StateScale> state_scales(const Loaded& l) {
  if (!l.farm) return {};
  return farm_scales(l.farm->graph.standardization);
}

void cmd_evaluate(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  const Loaded l = load(o, cfg);
  const std::string mode_name = !o.mode.empty() ? o.mode : cfg.value("mode", l.task == "gp" ? "nll" : "elbo");
  const EvalMode mode = eval_mode_from(mode_name);
  EvalOptions opt;
  opt.batch_size = cfg.value("batch_size", opt.batch_size);
  opt.mc_samples = cfg.value("mc_samples", opt.mc_samples);
  opt.weights = l.ck.train.beta.beta;
  if (o.seed) opt.seed = *o.seed;
  const auto scales = state_scales(l);
  if (!scales.empty()) opt.state = scales[0];
  const EvalResult r = evaluate(*l.model, l.ck.params, l.graphs, l.masks, mode, opt);
  const json result = {{"mode", eval_mode_name(mode)}, {"mean", r.mean},      {"std", r.std},
                       {"count", r.count},             {"excluded", r.excluded}, {"graphs", l.graphs.size()}};
  RunDir run("evaluate", o, cfg);
  run.write_json("eval.json", result);
  run.finish(out);
  out << eval_mode_name(mode) << " " << format_double(r.mean) << " (std " << format_double(r.std) << ")\n";
}

NodeMask config_mask(const json& cfg, const Loaded& l, std::size_t index) {
  if (!cfg.contains("mask")) return l.masks[index];
  NodeMask m(static_cast<std::size_t>(l.graphs[index].num_nodes()), false);
  for (int i : cfg.at("mask").get<std::vector<int>>()) {
    if (i < 0 || static_cast<std::size_t>(i) >= m.size()) throw std::invalid_argument("mask index out of range");
    m[static_cast<std::size_t>(i)] = true;
  }
  return m;
}

std::size_t config_index(const json& cfg, const Loaded& l) {
  const long i = cfg.value("index", 0L);
  if (i < 0 || static_cast<std::size_t>(i) >= l.graphs.size()) {
    throw std::invalid_argument("index outside the evaluation split");
  }
  return static_cast<std::size_t>(i);
}

void cmd_impute(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  const Loaded l = load(o, cfg);
  const std::size_t idx = config_index(cfg, l);
  const NodeMask mask = config_mask(cfg, l, idx);
  const auto scales = state_scales(l);
  const Imputation r = impute(mean_predictor(*l.model, l.ck.params), l.graphs[idx], mask,
                              l.ck.model.partition, scales, cfg.value("channel", 0));
  std::ostringstream csv;
  csv << "node,channel,truth,predicted\n";
  for (std::size_t k = 0; k < r.nodes.size(); ++k) {
    for (Index c = 0; c < r.truth.cols(); ++c) {
      csv << r.nodes[k] << ',' << c << ',' << format_double(r.truth(static_cast<Index>(k), c)) << ','
          << format_double(r.predicted(static_cast<Index>(k), c)) << '\n';
    }
  }
  RunDir run("impute", o, cfg);
  run.write("imputation.csv", csv.str());
  run.write_json("result.json", {{"index", idx},
                                 {"nodes", r.nodes},
                                 {"mape", r.mape.value},
                                 {"count", r.mape.count},
                                 {"excluded", r.mape.excluded}});
  run.finish(out);
  out << "mape " << format_double(r.mape.value) << " over " << r.mape.count << " nodes\n";
}

void cmd_sensitivity(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  const Loaded l = load(o, cfg);
  const std::size_t idx = config_index(cfg, l);
  const NodeMask mask = config_mask(cfg, l, idx);
  int target = cfg.value("target", -1);
  if (target < 0) {
    const auto it = std::find(mask.begin(), mask.end(), true);
    if (it == mask.end()) throw std::invalid_argument("sensitivity: mask is empty");
    target = static_cast<int>(it - mask.begin());
  }
  const SensitivityMap m =
      sensitivity(*l.model, l.ck.params, l.graphs[idx], mask, target, cfg.value("channel", 0));
  const std::vector<double> scores = m.node_scores();
  std::ostringstream nodes;
  nodes << (l.farm ? "node,masked,score,east,north\n" : "node,masked,score\n");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    nodes << i << ',' << (mask[i] ? 1 : 0) << ',' << format_double(scores[i]);
    if (l.farm) {
      nodes << ',' << format_double(l.farm->layout.positions(static_cast<Index>(i), 0)) << ','
            << format_double(l.farm->layout.positions(static_cast<Index>(i), 1));
    }
    nodes << '\n';
  }
  std::ostringstream edges;
  edges << "edge,sender,receiver,score\n";
  const AttributedGraph& g = l.graphs[idx];
  for (Index e = 0; e < g.num_edges(); ++e) {
    edges << e << ',' << g.senders[static_cast<std::size_t>(e)] << ','
          << g.receivers[static_cast<std::size_t>(e)] << ',' << format_double(m.edges.row(e).sum()) << '\n';
  }
  json result = {{"index", idx}, {"target", target}, {"channel", m.channel},
                 {"global_score", m.globals.sum()}};
  if (l.farm) {
    const SectorScores s = sector_scores(scores, l.farm->layout, l.snaps[idx].wind_direction, target);
    result["wind_direction"] = l.snaps[idx].wind_direction;
    result["upstream"] = {{"mean_score", s.upstream}, {"turbines", s.n_upstream}};
    result["downstream"] = {{"mean_score", s.downstream}, {"turbines", s.n_downstream}};
  }
  RunDir run("sensitivity", o, cfg);
  run.write("sensitivity_nodes.csv", nodes.str());
  run.write("sensitivity_edges.csv", edges.str());
  run.write_json("result.json", result);
  run.finish(out);
}

void require_farm(const Loaded& l, const char* cmd) {
  if (!l.farm) throw std::invalid_argument(std::string(cmd) + " needs a farm checkpoint");
}

void cmd_wake_polar(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  const Loaded l = load(o, cfg);
  require_farm(l, "wake-polar");
  PolarOptions po;
  po.bins = cfg.value("bins", po.bins);
  po.min_samples = cfg.value("min_samples", po.min_samples);
  const auto rows = wake_polar(mean_predictor(*l.model, l.ck.params), l.farm->layout, l.snaps,
                               l.farm->graph, l.ck.model.partition, po);
  std::ostringstream csv;
  write_polar_csv(csv, rows);
  RunDir run("wake-polar", o, cfg);
  run.write("polar.csv", csv.str());
  run.finish(out);
}

void cmd_probe_grid(const Options& o, std::ostream& out) {
  json cfg = load_config(o);
  const Loaded l = load(o, cfg);
  require_farm(l, "probe-grid");
  GridSpec grid;
  if (cfg.contains("grid")) {
    const json& g = cfg.at("grid");
    grid.x_min = g.value("x_min", grid.x_min);
    grid.x_max = g.value("x_max", grid.x_max);
    grid.y_min = g.value("y_min", grid.y_min);
    grid.y_max = g.value("y_max", grid.y_max);
    grid.spacing = g.value("spacing", grid.spacing);
  }
  WindSpec wind;
  if (cfg.contains("wind")) {
    wind.speed = cfg.at("wind").value("speed", wind.speed);
    wind.direction = cfg.at("wind").value("direction", wind.direction);
  }
  const DeficitField f = probe_grid(mean_predictor(*l.model, l.ck.params), l.farm->layout.turbine, grid,
                                    wind, l.farm->graph, l.ck.model.partition, l.farm->spec.wake);
  std::ostringstream csv;
  write_field_csv(csv, f);
  RunDir run("probe-grid", o, cfg);
  run.write("field.csv", csv.str());
  run.write_json("result.json", {{"points", f.points.size()}, {"omitted", f.omitted}});
  run.finish(out);
}

void error_json(std::ostream& err, const std::string& command, const std::string& msg, int code) {
  err << json{{"error", msg}, {"command", command}, {"exit_code", code}}.dump() << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Relational variational autoencoders for attributed graphs", "rvae"};
  app.set_version_flag("--version", kVersion);
  Options opt;
  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Options&, std::ostream&);
    bool uses_checkpoint;
  };
  const std::vector<Command> commands = {
      {"generate-gp", "Sample GP regression tasks as graphs", cmd_generate_gp, false},
      {"generate-farm", "Simulate wind-farm snapshots and build farm graphs", cmd_generate_farm, false},
      {"train", "Train a model and write a checkpoint", cmd_train, false},
      {"evaluate", "Score a checkpoint (elbo, nll or mape)", cmd_evaluate, true},
      {"impute", "Predict masked node states of one graph", cmd_impute, true},
      {"sensitivity", "Absolute-gradient sensitivity of one masked node", cmd_sensitivity, true},
      {"wake-polar", "Wake-deficit polar table per turbine", cmd_wake_polar, true},
      {"probe-grid", "Two-turbine probe-grid deficit field", cmd_probe_grid, true},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const Command& c : commands) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    s->add_option("--config", opt.config, "JSON configuration file");
    s->add_option("--seed", opt.seed, "Seed override");
    s->add_option("--out", opt.out, "Output directory")->capture_default_str();
    if (c.uses_checkpoint) s->add_option("--checkpoint", opt.checkpoint, "Checkpoint file");
    if (std::string(c.name) == "evaluate") {
      s->add_option("--mode", opt.mode, "elbo, nll or mape")
          ->check(CLI::IsMember({"elbo", "nll", "target_nll", "mape"}));
    }
    subs.emplace_back(s, &c);
  }
  app.require_subcommand(1, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help();
    error_json(err, "", e.what(), 2);
    return 2;
  }

  for (const auto& [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    try {
      cmd->fn(opt, out);
      return 0;
    } catch (const CLI::ParseError& e) {
      err << sub->help();
      error_json(err, cmd->name, std::string("missing or invalid option: ") + e.what(), 2);
      return 2;
    } catch (const std::exception& e) {
      error_json(err, cmd->name, e.what(), 1);
      return 1;
    }
  }
  return 2;
}

}  // namespace rvae::app
