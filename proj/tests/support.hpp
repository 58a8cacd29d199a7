#pragma once

// Test-only oracles: central finite differences and small helpers. Nothing in
// here goes through the tape's backward pass.

#include "rvae/graph.hpp"
#include "rvae/random.hpp"
#include "rvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace rvae::testing {

/// Central differences of a scalar function at `x`.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x,
                               double h = 1e-4) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double up = f(probe);
    probe.data()[i] = orig - h;
    const double down = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

/// Builds a scalar loss from tape-resident inputs.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

/// Largest relative error between the tape gradient and central differences
/// over all inputs of `fn`, evaluated at `inputs`.
inline double gradient_check(const ScalarFn& fn, const std::vector<Matrix>& inputs,
                             double h = 1e-4) {
  Tape tape;
  std::vector<Tensor> vars;
  for (const Matrix& m : inputs) vars.push_back(tape.variable(m));
  Tensor loss = fn(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Matrix& xk) {
      Tape t;
      std::vector<Tensor> v;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        v.push_back(t.constant(j == k ? xk : inputs[j]));
      }
      return fn(t, v).scalar();
    };
    worst = std::max(worst, relative_error(vars[k].grad(), numeric_gradient(f, inputs[k], h)));
  }
  return worst;
}

/// Entries drawn away from zero so ReLU/max kinks are not straddled by the
/// finite-difference step.
inline Matrix random_away_from_zero(Rng& rng, Index r, Index c, double margin = 0.05) {
  Matrix m = uniform(rng, r, c, -1.0, 1.0);
  for (Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return m;
}

/// Directed graph on `n` nodes with each ordered pair (i != j) present with
/// probability `p_edge`, random attributes.
inline AttributedGraph random_graph(Rng& rng, Index n, double p_edge, Index dv, Index de,
                                    Index du) {
  AttributedGraph g;
  g.nodes = uniform(rng, n, dv, -1.0, 1.0);
  std::bernoulli_distribution keep(p_edge);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j && keep(rng)) {
        g.senders.push_back(i);
        g.receivers.push_back(j);
      }
    }
  }
  g.edges = uniform(rng, g.num_edges(), de, -1.0, 1.0);
  g.globals = uniform(rng, 1, du, -1.0, 1.0);
  return g;
}

inline std::vector<int> random_permutation(Rng& rng, int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Matrix>(Rng&)> make_inputs;
  ScalarFn fn;
};

/// One randomized instance generator per registered primitive. The scalar
/// loss contracts the primitive's output with a fixed random weight so every
/// output element contributes a distinct gradient.
inline std::vector<PrimitiveCase> primitive_cases() {
  auto contract = [](Tape& t, const Tensor& out) {
    Rng r(1234 + static_cast<unsigned>(out.rows() * 31 + out.cols()));
    Matrix w = uniform(r, out.rows(), out.cols(), -1.0, 1.0);
    return sum(mul(out, t.constant(w)));
  };
  std::vector<PrimitiveCase> cases;
  auto unary = [&](std::string name, std::function<Tensor(const Tensor&)> op, double lo,
                   double hi) {
    cases.push_back({std::move(name),
                     [lo, hi](Rng& rng) {
                       return std::vector<Matrix>{uniform(rng, 3, 4, lo, hi)};
                     },
                     [op, contract](Tape& t, const std::vector<Tensor>& v) {
                       return contract(t, op(v[0]));
                     }});
  };
  unary("exp", [](const Tensor& a) { return exp(a); }, -1.0, 1.0);
  unary("log", [](const Tensor& a) { return log(a); }, 0.5, 2.0);
  unary("square", [](const Tensor& a) { return square(a); }, -1.0, 1.0);
  unary("softplus", [](const Tensor& a) { return softplus(a); }, -3.0, 3.0);
  unary("scale", [](const Tensor& a) { return scale(a, -1.7); }, -1.0, 1.0);
  unary("add_scalar", [](const Tensor& a) { return add_scalar(a, 0.3); }, -1.0, 1.0);
  unary("row_sum", [](const Tensor& a) { return row_sum(a); }, -1.0, 1.0);
  unary("slice_cols", [](const Tensor& a) { return slice_cols(a, 1, 2); }, -1.0, 1.0);
  cases.push_back({"relu",
                   [](Rng& rng) { return std::vector<Matrix>{random_away_from_zero(rng, 3, 4)}; },
                   [contract](Tape& t, const std::vector<Tensor>& v) {
                     return contract(t, relu(v[0]));
                   }});
  cases.push_back({"matmul",
                   [](Rng& rng) {
                     return std::vector<Matrix>{uniform(rng, 3, 4, -1, 1), uniform(rng, 4, 2, -1, 1)};
                   },
                   [contract](Tape& t, const std::vector<Tensor>& v) {
                     return contract(t, matmul(v[0], v[1]));
                   }});
  auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                    bool broadcast, double lo, double hi) {
    cases.push_back({std::move(name),
                     [broadcast, lo, hi](Rng& rng) {
                       return std::vector<Matrix>{uniform(rng, 3, 4, -1.0, 1.0),
                                                  uniform(rng, broadcast ? 1 : 3, 4, lo, hi)};
                     },
                     [op, contract](Tape& t, const std::vector<Tensor>& v) {
                       return contract(t, op(v[0], v[1]));
                     }});
  };
  for (bool bc : {false, true}) {
    const std::string suffix = bc ? "_broadcast" : "";
    binary("add" + suffix, [](const Tensor& a, const Tensor& b) { return add(a, b); }, bc, -1, 1);
    binary("sub" + suffix, [](const Tensor& a, const Tensor& b) { return sub(a, b); }, bc, -1, 1);
    binary("mul" + suffix, [](const Tensor& a, const Tensor& b) { return mul(a, b); }, bc, -1, 1);
    binary("div" + suffix, [](const Tensor& a, const Tensor& b) { return div(a, b); }, bc, 0.5, 2);
  }
  cases.push_back({"concat_cols",
                   [](Rng& rng) {
                     return std::vector<Matrix>{uniform(rng, 3, 2, -1, 1), uniform(rng, 3, 3, -1, 1)};
                   },
                   [contract](Tape& t, const std::vector<Tensor>& v) {
                     return contract(t, concat_cols({v[0], v[1]}));
                   }});
  cases.push_back({"gather_rows",
                   [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 4, 3, -1, 1)}; },
                   [contract](Tape& t, const std::vector<Tensor>& v) {
                     const std::vector<int> idx{2, 0, 2, 3, 1, 2};
                     return contract(t, gather_rows(v[0], idx));
                   }});
  cases.push_back({"gathered_linear",
                   [](Rng& rng) {
                     return std::vector<Matrix>{uniform(rng, 6, 2, -1, 1), uniform(rng, 4, 3, -1, 1),
                                                uniform(rng, 8, 5, -1, 1), uniform(rng, 1, 5, -1, 1)};
                   },
                   [contract](Tape& t, const std::vector<Tensor>& v) {
                     static const std::vector<int> senders{0, 1, 3, 3, 2, 0};
                     static const std::vector<int> receivers{1, 0, 2, 1, 3, 3};
                     const LinearPart parts[] = {{v[0]}, {v[1], &senders}, {v[1], &receivers}};
                     return contract(t, gathered_linear(parts, v[2], v[3], 6));
                   }});
  for (Reduce mode : {Reduce::mean, Reduce::max, Reduce::min, Reduce::sum}) {
    cases.push_back({std::string("segment_") + reduce_name(mode),
                     [](Rng& rng) {
                       // well-separated values so max/min winners are stable under the FD step
                       Matrix m(6, 3);
                       std::vector<double> pool;
                       for (int i = 0; i < 18; ++i) pool.push_back(0.1 * i - 0.9);
                       std::shuffle(pool.begin(), pool.end(), rng);
                       for (Index i = 0; i < m.size(); ++i) m.data()[i] = pool[static_cast<std::size_t>(i)];
                       return std::vector<Matrix>{m};
                     },
                     [contract, mode](Tape& t, const std::vector<Tensor>& v) {
                       const std::vector<int> ids{1, 0, 1, 3, 1, 0};
                       return contract(t, segment_aggregate(v[0], ids, 4, mode));
                     }});
  }
  cases.push_back({"sum",
                   [](Rng& rng) { return std::vector<Matrix>{uniform(rng, 3, 4, -1, 1)}; },
                   [](Tape&, const std::vector<Tensor>& v) { return sum(v[0]); }});
  return cases;
}

}  // namespace rvae::testing
