#pragma once

// Synthetic tasks: 1D Gaussian-process regression sets turned into graphs,
// and a Jensen-wake wind-farm simulator with farm graph construction.

#include "rvae/graph.hpp"
#include "rvae/random.hpp"
#include "rvae/tensor.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace rvae {

// --- Gaussian processes ----------------------------------------------------

struct SEKernel {
  double signal_std = 1.0;    // sigma_f
  double lengthscale = 0.2;   // l
  double noise_std = 0.02;    // sigma_n

  nlohmann::json to_json() const;
  static SEKernel from_json(const nlohmann::json& j);
};

struct GPTask {
  std::vector<double> x;
  std::vector<double> y;
  SEKernel kernel;
};

/// K_ij = sigma_f^2 exp(-(x_i - x_j)^2 / (2 l^2)), without observation noise.
Matrix se_covariance(std::span<const double> x, const SEKernel& k);

/// Lower Cholesky factor of a symmetric positive-definite matrix. Retries
/// with growing diagonal jitter and throws std::runtime_error if all fail.
Matrix cholesky_lower(const Matrix& a);

/// y ~ N(0, K(x) + sigma_n^2 I) at the given inputs.
std::vector<double> sample_gp_values(Rng& rng, std::span<const double> x, const SEKernel& kernel);

/// x ~ Uniform[lo, hi), y ~ N(0, K + sigma_n^2 I).
GPTask sample_gp(Rng& rng, int n, const SEKernel& kernel, double lo, double hi);

struct GPGraphOptions {
  double cutoff = 0.04;
  bool edge_features = true;     // relative-position edges
  bool node_position = false;    // absolute x as node conditioning
};

struct BuiltGraph {
  AttributedGraph graph;
  GraphPartition partition;
};

/// exp(-c d^2) with c chosen so the feature is 0.01 at the cutoff.
double gp_edge_decay(double cutoff);

/// Nodes carry y (state) and optionally x (conditioning). With edge features,
/// directed edges both ways join every pair closer than the cutoff, each with
/// the single conditioning attribute exp(-c |x_i - x_j|^2). No globals.
BuiltGraph build_gp_graph(const GPTask& task, const GPGraphOptions& opt);

/// Random context/target split: the first `n_context` points of a random
/// permutation are context, the rest targets. The mask marks targets.
NodeMask random_split(Rng& rng, int n, int n_context);

// --- wind farms ------------------------------------------------------------

struct TurbineSpec {
  double rotor_diameter = 126.0;  // m
  double rated_power = 5e6;       // W
  double power_coefficient = 0.45;
  double air_density = 1.225;     // kg / m^3

  double rotor_area() const;
  /// min(rated, 0.5 rho A Cp v^3).
  double power(double wind_speed) const;
};

struct WakeParams {
  double induction = 1.0 / 3.0;  // a
  double expansion = 0.05;       // k
};

/// Positions in meters, column 0 east and column 1 north.
struct FarmLayout {
  Matrix positions;
  TurbineSpec turbine;

  Index size() const { return positions.rows(); }
  nlohmann::json to_json() const;
  static FarmLayout from_json(const nlohmann::json& j);
};

/// Angles in degrees, bearings clockwise from north. `wind_direction` is the
/// bearing the wind comes from.
struct FarmSnapshot {
  double wind_speed = 0.0;
  double wind_direction = 0.0;
  std::vector<double> yaw;
  std::vector<double> speed_mean;
  std::vector<double> speed_std;
  std::vector<double> power;
};

/// Unit vector (east, north) pointing where the wind blows to.
std::array<double, 2> downwind_vector(double wind_direction_deg);

/// Velocity-deficit fraction at `at` caused by a rotor at `source` (Jensen top
/// hat). Zero unless `at` lies downstream inside the expanded wake; scaled by
/// cos^2 of the source's yaw misalignment.
double jensen_deficit(const std::array<double, 2>& source, const std::array<double, 2>& at,
                      double wind_direction_deg, double yaw_misalignment_deg,
                      double rotor_diameter, const WakeParams& wake);

/// Steady-state wake interaction with root-sum-square superposition. Throws
/// std::invalid_argument if a yaw differs from the wind direction by 90 deg or
/// more. `speed_std` is the yaw-induced change relative to perfectly aligned
/// rotors.
FarmSnapshot simulate_wake(const FarmLayout& layout, double wind_speed, double wind_direction,
                           std::span<const double> yaws, const WakeParams& wake = {});

/// Mean and standard deviation of the three node state channels
/// (wind mean, wind std, power).
struct Standardization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> scale{1.0, 1.0, 1.0};

  nlohmann::json to_json() const;
  static Standardization from_json(const nlohmann::json& j);
  static Standardization fit(std::span<const FarmSnapshot> snapshots);
};

struct FarmGraphOptions {
  double cutoff_multiplier = 100.0;  // in rotor diameters
  bool global_conditioning = false;
  Standardization standardization;
};

/// Node attributes [wind mean, wind std, power | cos yaw, sin yaw] (state
/// standardized), edge attributes [cos phi, sin phi, distance / d] with phi
/// the bearing from sender to receiver, optional global conditioning
/// [standardized U, cos dir, sin dir].
BuiltGraph build_farm_graph(const FarmLayout& layout, const FarmSnapshot& snap,
                            const FarmGraphOptions& opt);

/// Rotates positions, wind direction and yaws by `degrees` (bearings grow).
/// Wake outputs are carried over unchanged.
std::pair<FarmLayout, FarmSnapshot> rotate_farm(const FarmLayout& layout,
                                                const FarmSnapshot& snap, double degrees);
/// `rotate_farm` with an angle drawn from Uniform[0, 360).
std::pair<FarmLayout, FarmSnapshot> rotate_augment(Rng& rng, const FarmLayout& layout,
                                                   const FarmSnapshot& snap);

/// The same rotation applied directly to the angle encodings of a farm graph
/// (node yaw pair, edge bearing pair, global direction pair if present).
AttributedGraph rotate_farm_graph(const AttributedGraph& g, double degrees);

/// Uniform rejection sampling in a square of side `spacing_factor * d *
/// sqrt(n)` with a minimum pairwise spacing of `min_spacing` diameters.
FarmLayout random_layout(Rng& rng, int n, double min_spacing = 3.0, double spacing_factor = 6.0,
                         const TurbineSpec& turbine = {});

struct FarmSampling {
  double speed_min = 4.0;
  double speed_max = 14.0;
  double yaw_noise_deg = 5.0;
};

/// Snapshot `index` of a dataset seeded with `seed`: U ~ Uniform[4, 14),
/// direction ~ Uniform[0, 360), yaw_i = direction + N(0, 5 deg).
FarmSnapshot sample_snapshot(std::uint64_t seed, std::uint64_t index, const FarmLayout& layout,
                             const FarmSampling& sampling = {}, const WakeParams& wake = {});

std::vector<FarmSnapshot> generate_farm_dataset(std::uint64_t seed, const FarmLayout& layout,
                                                int n_snapshots,
                                                const FarmSampling& sampling = {},
                                                const WakeParams& wake = {});

/// One row per (snapshot, turbine).
void write_snapshots_csv(std::ostream& os, const FarmLayout& layout,
                         std::span<const FarmSnapshot> snaps);

}  // namespace rvae
