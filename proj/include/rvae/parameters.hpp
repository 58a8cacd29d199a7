#pragma once

#include "rvae/random.hpp"
#include "rvae/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rvae {

using GradientMap = std::map<std::string, Matrix>;

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named trainable matrices plus their Adam moments.
///
/// Names are kept ordered so that every traversal (serialization, updates) is
/// deterministic.
class ParameterStore {
 public:
  struct Moments {
    Matrix first;
    Matrix second;
    long step = 0;
  };

  /// Throws if `name` already exists.
  const Matrix& add(const std::string& name, Matrix init);
  const Matrix& get(const std::string& name) const;
  Matrix& mutable_value(const std::string& name);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  std::vector<std::string> names() const;
  std::size_t size() const { return values_.size(); }
  /// Total number of scalars.
  Index num_scalars() const;
  const Moments& moments(const std::string& name) const { return moments_.at(name); }

  /// One Adam update with bias correction. `grads` must have exactly the
  /// store's keys.
  void adam_step(const GradientMap& grads, const AdamOptions& opt);

  nlohmann::json to_json() const;
  static ParameterStore from_json(const nlohmann::json& j);

  bool operator==(const ParameterStore& other) const { return values_ == other.values_; }

 private:
  std::map<std::string, Matrix> values_;
  std::map<std::string, Moments> moments_;
};

/// Makes store entries available as leaves of one tape. Each name is bound at
/// most once per tape, so a parameter used by several sub-networks (or twice by
/// the same one) accumulates one gradient.
class ParameterBinding {
 public:
  ParameterBinding(Tape& tape, const ParameterStore& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Tensor operator()(const std::string& name);
  Tape& tape() const { return tape_; }
  const ParameterStore& store() const { return store_; }

  /// Gradient for every store entry, zero for entries never bound. Call after
  /// `Tape::backward`.
  GradientMap gradients() const;

 private:
  Tape& tape_;
  const ParameterStore& store_;
  bool trainable_;
  std::map<std::string, Tensor> bound_;
};

/// Glorot-uniform initialization, ±sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(Rng& rng, Index fan_in, Index fan_out);

void save_parameters(const ParameterStore& store, const std::filesystem::path& path);
ParameterStore load_parameters(const std::filesystem::path& path);

inline constexpr const char* kParameterFormat = "rvae-parameters";
inline constexpr int kParameterFormatVersion = 1;

}  // namespace rvae
