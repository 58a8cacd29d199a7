#pragma once

// Post-training analyses: imputation, gradient sensitivity maps, wake-deficit
// polar tables and probe-grid deficit fields.

#include "rvae/datasets.hpp"
#include "rvae/rvae.hpp"
#include "rvae/training.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace rvae {

// --- imputation ---------------------------------------------------------------

/// Predicted node states, one row per batched node, standardized units.
using NodePredictor = std::function<Matrix(const ModelBatch&)>;

/// Decoder mean at z = mu of the masked-graph encoder.
NodePredictor mean_predictor(const RVAEModel& model, const ParameterStore& store);

struct Imputation {
  std::vector<int> nodes;  // masked node indices
  Matrix truth;            // |nodes| x state width, physical units
  Matrix predicted;
  MapeResult mape;         // over `mape_channel`
};

/// `scales` holds one entry per state channel (its `channel` field is
/// ignored) or is empty for identity. Throws std::invalid_argument on an empty
/// mask.
Imputation impute(const NodePredictor& predict, const AttributedGraph& graph, const NodeMask& mask,
                  const GraphPartition& partition, std::span<const StateScale> scales = {},
                  int mape_channel = 0);

/// Farm state channels restored through a fitted standardization.
std::vector<StateScale> farm_scales(const Standardization& s);

// --- sensitivity --------------------------------------------------------------

/// |d mean(state[target, channel]) / d input| over the masked encoder input.
struct SensitivityMap {
  int target = 0;
  int channel = 0;
  Matrix nodes;    // Nv x (node width + mask bit)
  Matrix edges;    // Ne x edge width
  Matrix globals;  // 1 x global width

  /// Node input scores summed over channels.
  std::vector<double> node_scores() const;
};

/// Throws std::invalid_argument if `target` is out of range or not masked.
SensitivityMap sensitivity(const RVAEModel& model, const ParameterStore& store,
                           const AttributedGraph& graph, const NodeMask& mask, int target,
                           int channel = 0);

struct SectorScores {
  double upstream = 0.0;    // mean node score of turbines in the upstream sector
  double downstream = 0.0;
  int n_upstream = 0;
  int n_downstream = 0;
};

/// Turbines within `radius_d` rotor diameters of `target` whose bearing from
/// the target lies within `half_angle_deg` of the incoming wind bearing
/// (upstream) or of the opposite bearing (downstream).
SectorScores sector_scores(std::span<const double> node_scores, const FarmLayout& layout,
                           double wind_direction, int target, double half_angle_deg = 30.0,
                           double radius_d = 10.0);

// --- wake polar -----------------------------------------------------------------

struct PolarOptions {
  int bins = 36;
  int min_samples = 20;
};

struct PolarRow {
  int turbine = 0;
  int bin = 0;
  double direction = 0.0;  // bin center, bearing the wind comes from
  int count = 0;
  bool missing = false;    // fewer than min_samples snapshots
  double model_speed_deficit = 0.0;
  double model_power_deficit = 0.0;
  double true_speed_deficit = 0.0;
  double true_power_deficit = 0.0;
};

/// Each turbine is imputed with every other turbine observed. Per turbine and
/// direction bin, deficit = max over reported bins of the binned mean minus
/// the binned mean, for the model prediction and for the simulator output.
std::vector<PolarRow> wake_polar(const NodePredictor& predict, const FarmLayout& layout,
                                 std::span<const FarmSnapshot> snapshots,
                                 const FarmGraphOptions& graph_options,
                                 const GraphPartition& partition, const PolarOptions& opt = {});

void write_polar_csv(std::ostream& os, std::span<const PolarRow> rows);

// --- probe grid -----------------------------------------------------------------

/// Grid in the wind frame: x downstream of the source, y to its left when
/// looking downstream. Both in meters.
struct GridSpec {
  double x_min = -500.0, x_max = 2000.0;
  double y_min = -750.0, y_max = 750.0;
  double spacing = 50.0;
};

struct WindSpec {
  double speed = 10.0;
  double direction = 270.0;
};

struct ProbePoint {
  double x = 0.0;
  double y = 0.0;
  double model = 0.0;      // U - predicted probe speed
  double simulator = 0.0;  // U - simulated probe speed
};

struct DeficitField {
  std::vector<ProbePoint> points;  // row-major over (y, x)
  int omitted = 0;                 // grid points on top of the source
};

/// Two-turbine farm, source at the origin, probe at wind-frame (x, y), both
/// aligned with the wind. Throws std::invalid_argument if the probe coincides
/// with the source.
std::pair<FarmLayout, FarmSnapshot> probe_farm(const TurbineSpec& turbine, const WindSpec& wind,
                                               double x, double y, const WakeParams& wake = {});

/// The probe is masked and the source observed. Deficits are relative to the
/// free stream, the source's speed when it stands alone. Grid points on the
/// source are left out and counted.
DeficitField probe_grid(const NodePredictor& predict, const TurbineSpec& turbine,
                        const GridSpec& grid, const WindSpec& wind,
                        const FarmGraphOptions& graph_options, const GraphPartition& partition,
                        const WakeParams& wake = {});

void write_field_csv(std::ostream& os, const DeficitField& field);

}  // namespace rvae
