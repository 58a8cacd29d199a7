#include "rvae/datasets.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace rvae {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double wrap_degrees(double a) {
  a = std::fmod(a, 360.0);
  return a < 0 ? a + 360.0 : a;
}

/// Signed difference a - b folded into (-180, 180].
double angle_difference(double a, double b) {
  double d = std::fmod(a - b, 360.0);
  if (d <= -180.0) d += 360.0;
  if (d > 180.0) d -= 360.0;
  return d;
}

std::array<double, 2> rotate_pair(double c, double s, double degrees) {
  const double ca = std::cos(degrees * kDeg);
  const double sa = std::sin(degrees * kDeg);
  return {c * ca - s * sa, s * ca + c * sa};
}

}  // namespace

// --- Gaussian processes ----------------------------------------------------

nlohmann::json SEKernel::to_json() const {
  return {{"signal_std", signal_std}, {"lengthscale", lengthscale}, {"noise_std", noise_std}};
}

SEKernel SEKernel::from_json(const nlohmann::json& j) {
  SEKernel k;
  k.signal_std = j.value("signal_std", k.signal_std);
  k.lengthscale = j.value("lengthscale", k.lengthscale);
  k.noise_std = j.value("noise_std", k.noise_std);
  return k;
}

Matrix se_covariance(std::span<const double> x, const SEKernel& k) {
  const Index n = static_cast<Index>(x.size());
  Matrix K(n, n);
  const double s2 = k.signal_std * k.signal_std;
  const double inv = 1.0 / (2.0 * k.lengthscale * k.lengthscale);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double d = x[static_cast<std::size_t>(i)] - x[static_cast<std::size_t>(j)];
      K(i, j) = s2 * std::exp(-d * d * inv);
    }
  }
  return K;
}

Matrix cholesky_lower(const Matrix& a) {
  const Eigen::MatrixXd sym = a;
  const double scale = std::max(1.0, sym.diagonal().cwiseAbs().maxCoeff());
  for (double jitter : {0.0, 1e-10, 1e-8, 1e-6}) {
    Eigen::MatrixXd m = sym;
    m.diagonal().array() += jitter * scale;
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() == Eigen::Success) return Matrix(llt.matrixL());
  }
  throw std::runtime_error("cholesky factorization failed after jitter retries");
}

std::vector<double> sample_gp_values(Rng& rng, std::span<const double> x, const SEKernel& kernel) {
  if (kernel.lengthscale <= 0 || kernel.signal_std <= 0) {
    throw std::invalid_argument("sample_gp: lengthscale and signal std must be positive");
  }
  const Index n = static_cast<Index>(x.size());
  Matrix K = se_covariance(x, kernel);
  K.diagonal().array() += kernel.noise_std * kernel.noise_std;
  const Matrix L = cholesky_lower(K);
  const Matrix y = L * standard_normal(rng, n, 1);
  return {y.data(), y.data() + n};
}

GPTask sample_gp(Rng& rng, int n, const SEKernel& kernel, double lo, double hi) {
  if (n < 1) throw std::invalid_argument("sample_gp: n must be >= 1");
  GPTask t;
  t.kernel = kernel;
  std::uniform_real_distribution<double> ux(lo, hi);
  t.x.resize(static_cast<std::size_t>(n));
  for (double& v : t.x) v = ux(rng);
  t.y = sample_gp_values(rng, t.x, kernel);
  return t;
}

double gp_edge_decay(double cutoff) { return std::log(100.0) / (cutoff * cutoff); }

BuiltGraph build_gp_graph(const GPTask& task, const GPGraphOptions& opt) {
  if (opt.cutoff <= 0) throw std::invalid_argument("build_gp_graph: cutoff must be positive");
  const Index n = static_cast<Index>(task.x.size());
  BuiltGraph out;
  auto& g = out.graph;
  const Index dv = opt.node_position ? 2 : 1;
  g.nodes.resize(n, dv);
  for (Index i = 0; i < n; ++i) {
    g.nodes(i, 0) = task.y[static_cast<std::size_t>(i)];
    if (opt.node_position) g.nodes(i, 1) = task.x[static_cast<std::size_t>(i)];
  }
  std::vector<double> attrs;
  if (opt.edge_features) {
    const double c = gp_edge_decay(opt.cutoff);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double d = task.x[static_cast<std::size_t>(i)] - task.x[static_cast<std::size_t>(j)];
        if (std::abs(d) < opt.cutoff) {
          g.senders.push_back(static_cast<int>(i));
          g.receivers.push_back(static_cast<int>(j));
          attrs.push_back(std::exp(-c * d * d));
        }
      }
    }
  }
  const Index de = opt.edge_features ? 1 : 0;
  g.edges.resize(static_cast<Index>(g.senders.size()), de);
  for (std::size_t k = 0; k < attrs.size(); ++k) g.edges(static_cast<Index>(k), 0) = attrs[k];
  g.globals = Matrix(1, 0);
  out.partition.node = {{0, 1}, {1, static_cast<int>(dv)}};
  out.partition.edge = {{0, 0}, {0, static_cast<int>(de)}};
  return out;
}

NodeMask random_split(Rng& rng, int n, int n_context) {
  if (n_context < 0 || n_context > n) throw std::invalid_argument("random_split: bad context size");
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  NodeMask mask(static_cast<std::size_t>(n), true);
  for (int i = 0; i < n_context; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = false;
  return mask;
}

// --- turbines and wakes ----------------------------------------------------

double TurbineSpec::rotor_area() const {
  return std::numbers::pi * 0.25 * rotor_diameter * rotor_diameter;
}

double TurbineSpec::power(double v) const {
  return std::min(rated_power, 0.5 * air_density * rotor_area() * power_coefficient * v * v * v);
}

nlohmann::json FarmLayout::to_json() const {
  nlohmann::json pos = nlohmann::json::array();
  for (Index i = 0; i < positions.rows(); ++i) pos.push_back({positions(i, 0), positions(i, 1)});
  return {{"positions", pos},
          {"rotor_diameter", turbine.rotor_diameter},
          {"rated_power", turbine.rated_power},
          {"power_coefficient", turbine.power_coefficient},
          {"air_density", turbine.air_density}};
}

FarmLayout FarmLayout::from_json(const nlohmann::json& j) {
  FarmLayout l;
  const auto& pos = j.at("positions");
  l.positions.resize(static_cast<Index>(pos.size()), 2);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    l.positions(static_cast<Index>(i), 0) = pos[i].at(0).get<double>();
    l.positions(static_cast<Index>(i), 1) = pos[i].at(1).get<double>();
  }
  l.turbine.rotor_diameter = j.value("rotor_diameter", l.turbine.rotor_diameter);
  l.turbine.rated_power = j.value("rated_power", l.turbine.rated_power);
  l.turbine.power_coefficient = j.value("power_coefficient", l.turbine.power_coefficient);
  l.turbine.air_density = j.value("air_density", l.turbine.air_density);
  return l;
}

std::array<double, 2> downwind_vector(double wind_direction_deg) {
  const double t = wind_direction_deg * kDeg;
  return {-std::sin(t), -std::cos(t)};
}

double jensen_deficit(const std::array<double, 2>& source, const std::array<double, 2>& at,
                      double wind_direction_deg, double yaw_misalignment_deg,
                      double rotor_diameter, const WakeParams& wake) {
  const auto w = downwind_vector(wind_direction_deg);
  const double dx = at[0] - source[0];
  const double dy = at[1] - source[1];
  const double along = dx * w[0] + dy * w[1];
  if (along <= 0.0) return 0.0;
  const double across = std::abs(dx * w[1] - dy * w[0]);
  const double r0 = 0.5 * rotor_diameter;
  const double radius = r0 + wake.expansion * along;
  if (across >= radius) return 0.0;
  const double ratio = r0 / radius;
  const double c = std::cos(yaw_misalignment_deg * kDeg);
  return 2.0 * wake.induction * ratio * ratio * c * c;
}

namespace {

std::vector<double> effective_speeds(const FarmLayout& layout, double U, double dir,
                                     std::span<const double> misalignment, const WakeParams& wake) {
  const Index n = layout.size();
  std::vector<double> v(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    double sq = 0.0;
    for (Index i = 0; i < n; ++i) {
      if (i == j) continue;
      const double d = jensen_deficit({layout.positions(i, 0), layout.positions(i, 1)},
                                      {layout.positions(j, 0), layout.positions(j, 1)}, dir,
                                      misalignment[static_cast<std::size_t>(i)],
                                      layout.turbine.rotor_diameter, wake);
      sq += d * d;
    }
    v[static_cast<std::size_t>(j)] = U * (1.0 - std::min(1.0, std::sqrt(sq)));
  }
  return v;
}

}  // namespace

FarmSnapshot simulate_wake(const FarmLayout& layout, double wind_speed, double wind_direction,
                           std::span<const double> yaws, const WakeParams& wake) {
  const Index n = layout.size();
  if (static_cast<Index>(yaws.size()) != n) {
    throw std::invalid_argument("simulate_wake: one yaw per turbine required");
  }
  std::vector<double> mis(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < mis.size(); ++i) {
    mis[i] = angle_difference(yaws[i], wind_direction);
    if (std::abs(mis[i]) >= 90.0) {
      throw std::invalid_argument("simulate_wake: turbine " + std::to_string(i) +
                                  " faces away from the wind");
    }
  }
  FarmSnapshot s;
  s.wind_speed = wind_speed;
  s.wind_direction = wind_direction;
  s.yaw.assign(yaws.begin(), yaws.end());
  s.speed_mean = effective_speeds(layout, wind_speed, wind_direction, mis, wake);
  const std::vector<double> aligned(static_cast<std::size_t>(n), 0.0);
  const std::vector<double> ref = effective_speeds(layout, wind_speed, wind_direction, aligned, wake);
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    s.speed_std.push_back(std::abs(s.speed_mean[k] - ref[k]));
    s.power.push_back(layout.turbine.power(s.speed_mean[k]));
  }
  return s;
}

// --- farm graphs -----------------------------------------------------------

nlohmann::json Standardization::to_json() const { return {{"mean", mean}, {"scale", scale}}; }

Standardization Standardization::from_json(const nlohmann::json& j) {
  Standardization s;
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.scale = j.at("scale").get<std::array<double, 3>>();
  return s;
}

Standardization Standardization::fit(std::span<const FarmSnapshot> snapshots) {
  std::array<double, 3> sum{}, sq{};
  double count = 0;
  for (const auto& s : snapshots) {
    for (std::size_t i = 0; i < s.speed_mean.size(); ++i) {
      const double v[3] = {s.speed_mean[i], s.speed_std[i], s.power[i]};
      for (int c = 0; c < 3; ++c) {
        sum[static_cast<std::size_t>(c)] += v[c];
        sq[static_cast<std::size_t>(c)] += v[c] * v[c];
      }
      count += 1;
    }
  }
  if (count == 0) throw std::invalid_argument("Standardization::fit: no data");
  Standardization st;
  for (std::size_t c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - st.mean[c] * st.mean[c]);
    st.scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return st;
}

BuiltGraph build_farm_graph(const FarmLayout& layout, const FarmSnapshot& snap,
                            const FarmGraphOptions& opt) {
  if (opt.cutoff_multiplier <= 0) {
    throw std::invalid_argument("build_farm_graph: cutoff multiplier must be positive");
  }
  const Index n = layout.size();
  const double D = layout.turbine.rotor_diameter;
  const auto& st = opt.standardization;
  BuiltGraph out;
  auto& g = out.graph;
  g.nodes.resize(n, 5);
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    g.nodes(i, 0) = (snap.speed_mean[k] - st.mean[0]) / st.scale[0];
    g.nodes(i, 1) = (snap.speed_std[k] - st.mean[1]) / st.scale[1];
    g.nodes(i, 2) = (snap.power[k] - st.mean[2]) / st.scale[2];
    g.nodes(i, 3) = std::cos(snap.yaw[k] * kDeg);
    g.nodes(i, 4) = std::sin(snap.yaw[k] * kDeg);
  }
  const double cutoff = opt.cutoff_multiplier * D;
  std::vector<std::array<double, 3>> attrs;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double de = layout.positions(j, 0) - layout.positions(i, 0);
      const double dn = layout.positions(j, 1) - layout.positions(i, 1);
      const double dist = std::hypot(de, dn);
      if (dist >= cutoff) continue;
      g.senders.push_back(static_cast<int>(i));
      g.receivers.push_back(static_cast<int>(j));
      attrs.push_back({dn / dist, de / dist, dist / D});
    }
  }
  g.edges.resize(static_cast<Index>(attrs.size()), 3);
  for (std::size_t k = 0; k < attrs.size(); ++k) {
    for (int c = 0; c < 3; ++c) g.edges(static_cast<Index>(k), c) = attrs[k][static_cast<std::size_t>(c)];
  }
  if (opt.global_conditioning) {
    g.globals = Matrix{{(snap.wind_speed - st.mean[0]) / st.scale[0],
                        std::cos(snap.wind_direction * kDeg), std::sin(snap.wind_direction * kDeg)}};
  } else {
    g.globals = Matrix(1, 0);
  }
  out.partition.node = {{0, 3}, {3, 5}};
  out.partition.edge = {{0, 0}, {0, 3}};
  out.partition.global = {{0, 0}, {0, static_cast<int>(g.global_dim())}};
  return out;
}

std::pair<FarmLayout, FarmSnapshot> rotate_farm(const FarmLayout& layout,
                                                const FarmSnapshot& snap, double degrees) {
  FarmLayout l = layout;
  const double ca = std::cos(degrees * kDeg);
  const double sa = std::sin(degrees * kDeg);
  for (Index i = 0; i < l.size(); ++i) {
    const double e = layout.positions(i, 0);
    const double nn = layout.positions(i, 1);
    l.positions(i, 0) = e * ca + nn * sa;
    l.positions(i, 1) = nn * ca - e * sa;
  }
  FarmSnapshot s = snap;
  s.wind_direction = wrap_degrees(snap.wind_direction + degrees);
  for (double& y : s.yaw) y = wrap_degrees(y + degrees);
  return {l, s};
}

std::pair<FarmLayout, FarmSnapshot> rotate_augment(Rng& rng, const FarmLayout& layout,
                                                   const FarmSnapshot& snap) {
  std::uniform_real_distribution<double> u(0.0, 360.0);
  return rotate_farm(layout, snap, u(rng));
}

AttributedGraph rotate_farm_graph(const AttributedGraph& g, double degrees) {
  AttributedGraph out = g;
  for (Index i = 0; i < g.num_nodes(); ++i) {
    const auto r = rotate_pair(g.nodes(i, 3), g.nodes(i, 4), degrees);
    out.nodes(i, 3) = r[0];
    out.nodes(i, 4) = r[1];
  }
  for (Index k = 0; k < g.num_edges(); ++k) {
    const auto r = rotate_pair(g.edges(k, 0), g.edges(k, 1), degrees);
    out.edges(k, 0) = r[0];
    out.edges(k, 1) = r[1];
  }
  if (g.global_dim() == 3) {
    const auto r = rotate_pair(g.globals(0, 1), g.globals(0, 2), degrees);
    out.globals(0, 1) = r[0];
    out.globals(0, 2) = r[1];
  }
  return out;
}

FarmLayout random_layout(Rng& rng, int n, double min_spacing, double spacing_factor,
                         const TurbineSpec& turbine) {
  const double D = turbine.rotor_diameter;
  const double side = spacing_factor * D * std::sqrt(static_cast<double>(n));
  std::uniform_real_distribution<double> u(0.0, side);
  FarmLayout l;
  l.turbine = turbine;
  l.positions.resize(n, 2);
  const double min_dist = min_spacing * D;
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("random_layout: cannot place turbines");
      const double e = u(rng);
      const double nn = u(rng);
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) {
        ok = std::hypot(l.positions(j, 0) - e, l.positions(j, 1) - nn) >= min_dist;
      }
      if (ok) {
        l.positions(i, 0) = e;
        l.positions(i, 1) = nn;
        break;
      }
    }
  }
  return l;
}

FarmSnapshot sample_snapshot(std::uint64_t seed, std::uint64_t index, const FarmLayout& layout,
                             const FarmSampling& sampling, const WakeParams& wake) {
  Rng rng = derive_rng(seed, index);
  std::uniform_real_distribution<double> speed(sampling.speed_min, sampling.speed_max);
  std::uniform_real_distribution<double> dir(0.0, 360.0);
  std::normal_distribution<double> noise(0.0, sampling.yaw_noise_deg);
  const double U = speed(rng);
  const double theta = dir(rng);
  std::vector<double> yaws(static_cast<std::size_t>(layout.size()));
  for (double& y : yaws) y = wrap_degrees(theta + noise(rng));
  return simulate_wake(layout, U, theta, yaws, wake);
}

std::vector<FarmSnapshot> generate_farm_dataset(std::uint64_t seed, const FarmLayout& layout,
                                                int n_snapshots, const FarmSampling& sampling,
                                                const WakeParams& wake) {
  if (n_snapshots < 1) throw std::invalid_argument("generate_farm_dataset: n must be >= 1");
  std::vector<FarmSnapshot> out;
  out.reserve(static_cast<std::size_t>(n_snapshots));
  for (int i = 0; i < n_snapshots; ++i) {
    out.push_back(sample_snapshot(seed, static_cast<std::uint64_t>(i), layout, sampling, wake));
  }
  return out;
}

void write_snapshots_csv(std::ostream& os, const FarmLayout& layout,
                         std::span<const FarmSnapshot> snaps) {
  os << "snapshot,turbine,x,y,wind_speed,wind_direction,yaw,speed_mean,speed_std,power\n";
  char buf[512];
  for (std::size_t s = 0; s < snaps.size(); ++s) {
    const auto& sn = snaps[s];
    for (Index i = 0; i < layout.size(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      std::snprintf(buf, sizeof(buf), "%zu,%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s,
                    static_cast<long>(i), layout.positions(i, 0), layout.positions(i, 1),
                    sn.wind_speed, sn.wind_direction, sn.yaw[k], sn.speed_mean[k],
                    sn.speed_std[k], sn.power[k]);
      os << buf;
    }
  }
}

}  // namespace rvae
