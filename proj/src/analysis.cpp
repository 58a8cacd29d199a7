#include "rvae/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace rvae {

namespace {

constexpr int kSpeedChannel = 0;
constexpr int kPowerChannel = 2;
constexpr int kPredictBatch = 16;

double restore(std::span<const StateScale> scales, int channel, double v) {
  return scales.empty() ? v : scales[static_cast<std::size_t>(channel)].restore(v);
}

double wrap_degrees(double a) {
  a = std::fmod(a, 360.0);
  return a < 0.0 ? a + 360.0 : a;
}

/// Smallest absolute difference between two bearings, in [0, 180].
double angle_between(double a, double b) {
  const double d = wrap_degrees(a - b);
  return std::min(d, 360.0 - d);
}

/// Predictions for many (graph, mask) pairs, batched.
std::vector<Matrix> predict_all(const NodePredictor& predict, std::span<const AttributedGraph> graphs,
                                std::span<const NodeMask> masks, const GraphPartition& part) {
  std::vector<Matrix> out;
  out.reserve(graphs.size());
  for (std::size_t begin = 0; begin < graphs.size(); begin += kPredictBatch) {
    const std::size_t n = std::min<std::size_t>(kPredictBatch, graphs.size() - begin);
    const ModelBatch mb = make_batch(graphs.subspan(begin, n), masks.subspan(begin, n), part);
    const Matrix pred = predict(mb);
    Index row = 0;
    for (std::size_t g = 0; g < n; ++g) {
      const Index rows = graphs[begin + g].num_nodes();
      out.push_back(pred.middleRows(row, rows));
      row += rows;
    }
  }
  return out;
}

}  // namespace

// --- imputation ---------------------------------------------------------------

NodePredictor mean_predictor(const RVAEModel& model, const ParameterStore& store) {
  return [&model, &store](const ModelBatch& mb) { return predict_node_state(model, store, mb); };
}

std::vector<StateScale> farm_scales(const Standardization& s) {
  std::vector<StateScale> out;
  for (int c = 0; c < 3; ++c) {
    out.push_back({c, s.mean[static_cast<std::size_t>(c)], s.scale[static_cast<std::size_t>(c)]});
  }
  return out;
}

Imputation impute(const NodePredictor& predict, const AttributedGraph& graph, const NodeMask& mask,
                  const GraphPartition& partition, std::span<const StateScale> scales,
                  int mape_channel) {
  if (mask.size() != static_cast<std::size_t>(graph.num_nodes())) {
    throw std::invalid_argument("impute: mask length differs from node count");
  }
  const int width = partition.node.state.size();
  if (!scales.empty() && scales.size() != static_cast<std::size_t>(width)) {
    throw std::invalid_argument("impute: one scale per state channel required");
  }
  if (mape_channel < 0 || mape_channel >= width) throw std::invalid_argument("impute: bad channel");
  Imputation r;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) r.nodes.push_back(static_cast<int>(i));
  }
  if (r.nodes.empty()) throw std::invalid_argument("impute: mask is empty, MAPE undefined");

  const ModelBatch mb = make_batch(std::span(&graph, 1), std::span(&mask, 1), partition);
  const Matrix pred = predict(mb);
  const Index n = static_cast<Index>(r.nodes.size());
  r.truth.resize(n, width);
  r.predicted.resize(n, width);
  for (Index k = 0; k < n; ++k) {
    const int i = r.nodes[static_cast<std::size_t>(k)];
    for (int c = 0; c < width; ++c) {
      r.truth(k, c) = restore(scales, c, graph.nodes(i, partition.node.state.begin + c));
      r.predicted(k, c) = restore(scales, c, pred(i, c));
    }
  }
  const Matrix t = r.truth.col(mape_channel);
  const Matrix p = r.predicted.col(mape_channel);
  r.mape = mape(std::span(t.data(), static_cast<std::size_t>(n)),
                std::span(p.data(), static_cast<std::size_t>(n)));
  return r;
}

// --- sensitivity --------------------------------------------------------------

std::vector<double> SensitivityMap::node_scores() const {
  std::vector<double> s(static_cast<std::size_t>(nodes.rows()));
  for (Index i = 0; i < nodes.rows(); ++i) s[static_cast<std::size_t>(i)] = nodes.row(i).sum();
  return s;
}

SensitivityMap sensitivity(const RVAEModel& model, const ParameterStore& store,
                           const AttributedGraph& graph, const NodeMask& mask, int target,
                           int channel) {
  if (target < 0 || target >= graph.num_nodes()) {
    throw std::invalid_argument("sensitivity: target node out of range");
  }
  if (mask.size() != static_cast<std::size_t>(graph.num_nodes()) ||
      !mask[static_cast<std::size_t>(target)]) {
    throw std::invalid_argument("sensitivity: target node is not masked");
  }
  const auto& part = model.config().partition;
  if (channel < 0 || channel >= part.node.state.size()) {
    throw std::invalid_argument("sensitivity: bad state channel");
  }
  const ModelBatch mb = make_batch(std::span(&graph, 1), std::span(&mask, 1), part);

  Tape tape;
  ParameterBinding p(tape, store, false);
  // Conditioning channels sit at the same columns in the masked input, so one
  // set of variables feeds both encoder and decoder.
  const GraphTensors input = as_tensors(tape, mb.masked, true);
  const GaussianGraphDistribution q = model.encode_posterior(p, mb.masked, input);
  const ObservationDistribution obs = model.decode(p, mb.masked, posterior_mean(q), input);
  if (!obs.node.present) throw std::invalid_argument("sensitivity: model has no node state");
  const Tensor out = slice_cols(gather_rows(obs.node.mu, std::vector<int>{target}), channel, 1);
  tape.backward(out);

  SensitivityMap m;
  m.target = target;
  m.channel = channel;
  m.nodes = input.nodes.grad().cwiseAbs();
  m.edges = input.edges.grad().cwiseAbs();
  m.globals = input.globals.grad().cwiseAbs();
  return m;
}

SectorScores sector_scores(std::span<const double> node_scores, const FarmLayout& layout,
                           double wind_direction, int target, double half_angle_deg,
                           double radius_d) {
  if (node_scores.size() != static_cast<std::size_t>(layout.size())) {
    throw std::invalid_argument("sector_scores: one score per turbine required");
  }
  const double radius = radius_d * layout.turbine.rotor_diameter;
  SectorScores s;
  for (Index j = 0; j < layout.size(); ++j) {
    if (j == target) continue;
    const double de = layout.positions(j, 0) - layout.positions(target, 0);
    const double dn = layout.positions(j, 1) - layout.positions(target, 1);
    if (std::hypot(de, dn) > radius) continue;
    const double bearing = wrap_degrees(std::atan2(de, dn) * 180.0 / std::numbers::pi);
    const double score = node_scores[static_cast<std::size_t>(j)];
    if (angle_between(bearing, wind_direction) <= half_angle_deg) {
      s.upstream += score;
      ++s.n_upstream;
    } else if (angle_between(bearing, wind_direction + 180.0) <= half_angle_deg) {
      s.downstream += score;
      ++s.n_downstream;
    }
  }
  if (s.n_upstream) s.upstream /= s.n_upstream;
  if (s.n_downstream) s.downstream /= s.n_downstream;
  return s;
}

// --- wake polar -------------------------------------------------------------------

std::vector<PolarRow> wake_polar(const NodePredictor& predict, const FarmLayout& layout,
                                 std::span<const FarmSnapshot> snapshots,
                                 const FarmGraphOptions& graph_options,
                                 const GraphPartition& partition, const PolarOptions& opt) {
  if (opt.bins < 1 || opt.min_samples < 1) throw std::invalid_argument("wake_polar: bad options");
  const Index n = layout.size();
  const std::size_t cells = static_cast<std::size_t>(n * opt.bins);
  // running sums per (turbine, bin): model speed, model power, true speed, true power
  std::vector<std::array<double, 4>> sum(cells, {0.0, 0.0, 0.0, 0.0});
  std::vector<int> count(cells, 0);
  const std::vector<StateScale> scales = farm_scales(graph_options.standardization);
  const double width = 360.0 / opt.bins;

  for (const FarmSnapshot& snap : snapshots) {
    const AttributedGraph g = build_farm_graph(layout, snap, graph_options).graph;
    std::vector<AttributedGraph> graphs(static_cast<std::size_t>(n), g);
    std::vector<NodeMask> masks;
    for (Index i = 0; i < n; ++i) {
      NodeMask m(static_cast<std::size_t>(n), false);
      m[static_cast<std::size_t>(i)] = true;
      masks.push_back(std::move(m));
    }
    const std::vector<Matrix> pred = predict_all(predict, graphs, masks, partition);
    const int bin = std::min(opt.bins - 1, static_cast<int>(wrap_degrees(snap.wind_direction) / width));
    for (Index i = 0; i < n; ++i) {
      const std::size_t c = static_cast<std::size_t>(i * opt.bins + bin);
      const Matrix& p = pred[static_cast<std::size_t>(i)];
      sum[c][0] += scales[kSpeedChannel].restore(p(i, kSpeedChannel));
      sum[c][1] += scales[kPowerChannel].restore(p(i, kPowerChannel));
      sum[c][2] += snap.speed_mean[static_cast<std::size_t>(i)];
      sum[c][3] += snap.power[static_cast<std::size_t>(i)];
      ++count[c];
    }
  }

  std::vector<PolarRow> rows;
  for (Index i = 0; i < n; ++i) {
    std::array<double, 4> best;
    best.fill(-std::numeric_limits<double>::infinity());
    std::vector<std::array<double, 4>> mean(static_cast<std::size_t>(opt.bins));
    for (int b = 0; b < opt.bins; ++b) {
      const std::size_t c = static_cast<std::size_t>(i * opt.bins + b);
      if (count[c] < opt.min_samples) continue;
      for (int k = 0; k < 4; ++k) {
        mean[static_cast<std::size_t>(b)][k] = sum[c][k] / count[c];
        best[k] = std::max(best[k], mean[static_cast<std::size_t>(b)][k]);
      }
    }
    for (int b = 0; b < opt.bins; ++b) {
      const std::size_t c = static_cast<std::size_t>(i * opt.bins + b);
      PolarRow r;
      r.turbine = static_cast<int>(i);
      r.bin = b;
      r.direction = (b + 0.5) * width;
      r.count = count[c];
      r.missing = count[c] < opt.min_samples;
      if (!r.missing) {
        const auto& m = mean[static_cast<std::size_t>(b)];
        r.model_speed_deficit = best[0] - m[0];
        r.model_power_deficit = best[1] - m[1];
        r.true_speed_deficit = best[2] - m[2];
        r.true_power_deficit = best[3] - m[3];
      }
      rows.push_back(r);
    }
  }
  return rows;
}

void write_polar_csv(std::ostream& os, std::span<const PolarRow> rows) {
  os << "turbine,bin,direction_deg,count,model_speed_deficit,model_power_deficit,"
        "true_speed_deficit,true_power_deficit\n";
  const auto old = os.precision(17);
  for (const PolarRow& r : rows) {
    os << r.turbine << ',' << r.bin << ',' << r.direction << ',' << r.count;
    if (r.missing) {
      os << ",,,,\n";
    } else {
      os << ',' << r.model_speed_deficit << ',' << r.model_power_deficit << ','
         << r.true_speed_deficit << ',' << r.true_power_deficit << '\n';
    }
  }
  os.precision(old);
}

// --- probe grid ---------------------------------------------------------------------

std::pair<FarmLayout, FarmSnapshot> probe_farm(const TurbineSpec& turbine, const WindSpec& wind,
                                               double x, double y, const WakeParams& wake) {
  if (std::hypot(x, y) < 1e-9) throw std::invalid_argument("probe_grid: probe coincides with source");
  const auto down = downwind_vector(wind.direction);
  // left of the downwind direction, looking downstream
  const std::array<double, 2> left{-down[1], down[0]};
  FarmLayout layout;
  layout.turbine = turbine;
  layout.positions = Matrix::Zero(2, 2);
  layout.positions(1, 0) = x * down[0] + y * left[0];
  layout.positions(1, 1) = x * down[1] + y * left[1];
  const std::vector<double> yaws{wind.direction, wind.direction};
  FarmSnapshot snap = simulate_wake(layout, wind.speed, wind.direction, yaws, wake);
  return {std::move(layout), std::move(snap)};
}

DeficitField probe_grid(const NodePredictor& predict, const TurbineSpec& turbine,
                        const GridSpec& grid, const WindSpec& wind,
                        const FarmGraphOptions& graph_options, const GraphPartition& partition,
                        const WakeParams& wake) {
  if (!(grid.spacing > 0.0) || grid.x_max < grid.x_min || grid.y_max < grid.y_min) {
    throw std::invalid_argument("probe_grid: bad grid");
  }
  const int nx = static_cast<int>(std::floor((grid.x_max - grid.x_min) / grid.spacing + 1e-9)) + 1;
  const int ny = static_cast<int>(std::floor((grid.y_max - grid.y_min) / grid.spacing + 1e-9)) + 1;
  const StateScale speed = farm_scales(graph_options.standardization)[kSpeedChannel];
  const NodeMask mask{false, true};

  DeficitField field;
  std::vector<AttributedGraph> graphs;
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      const double x = grid.x_min + ix * grid.spacing;
      const double y = grid.y_min + iy * grid.spacing;
      if (std::hypot(x, y) < 1e-9) {
        ++field.omitted;
        continue;
      }
      const auto [layout, snap] = probe_farm(turbine, wind, x, y, wake);
      ProbePoint pt;
      pt.x = x;
      pt.y = y;
      pt.simulator = wind.speed - snap.speed_mean[1];
      field.points.push_back(pt);
      graphs.push_back(build_farm_graph(layout, snap, graph_options).graph);
    }
  }
  const std::vector<NodeMask> masks(graphs.size(), mask);
  const std::vector<Matrix> pred = predict_all(predict, graphs, masks, partition);
  for (std::size_t k = 0; k < pred.size(); ++k) {
    field.points[k].model = wind.speed - speed.restore(pred[k](1, kSpeedChannel));
  }
  return field;
}

void write_field_csv(std::ostream& os, const DeficitField& field) {
  os << "x,y,model_deficit,simulator_deficit,error\n";
  const auto old = os.precision(17);
  for (const ProbePoint& p : field.points) {
    os << p.x << ',' << p.y << ',' << p.model << ',' << p.simulator << ',' << p.model - p.simulator
       << '\n';
  }
  os.precision(old);
}

}  // namespace rvae
