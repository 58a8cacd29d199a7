#include "rvae/parameters.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rvae {

const Matrix& ParameterStore::add(const std::string& name, Matrix init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Moments m;
  m.first = Matrix::Zero(init.rows(), init.cols());
  m.second = Matrix::Zero(init.rows(), init.cols());
  moments_.emplace(name, std::move(m));
  return values_.emplace(name, std::move(init)).first->second;
}

const Matrix& ParameterStore::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Matrix& ParameterStore::mutable_value(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [k, _] : values_) out.push_back(k);
  return out;
}

Index ParameterStore::num_scalars() const {
  Index n = 0;
  for (const auto& [_, v] : values_) n += v.size();
  return n;
}

void ParameterStore::adam_step(const GradientMap& grads, const AdamOptions& opt) {
  for (const auto& [name, _] : grads) {
    if (!contains(name)) throw std::invalid_argument("gradient for unknown parameter: " + name);
  }
  for (auto& [name, value] : values_) {
    auto g = grads.find(name);
    if (g == grads.end()) throw std::invalid_argument("missing gradient for parameter: " + name);
    if (g->second.rows() != value.rows() || g->second.cols() != value.cols()) {
      throw ShapeError("gradient shape mismatch for parameter: " + name);
    }
    Moments& m = moments_.at(name);
    ++m.step;
    m.first = opt.beta1 * m.first + (1.0 - opt.beta1) * g->second;
    m.second = opt.beta2 * m.second + (1.0 - opt.beta2) * g->second.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(m.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(m.step));
    value.array() -= opt.lr * (m.first.array() / c1) /
                     ((m.second.array() / c2).sqrt() + opt.eps);
  }
}

nlohmann::json ParameterStore::to_json() const {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, v] : values_) {
    std::vector<double> data(v.data(), v.data() + v.size());
    params[name] = {{"shape", {v.rows(), v.cols()}}, {"values", std::move(data)}};
  }
  return {{"format", kParameterFormat},
          {"version", kParameterFormatVersion},
          {"parameters", std::move(params)}};
}

ParameterStore ParameterStore::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kParameterFormat) {
    throw std::runtime_error("not an rvae parameter file");
  }
  if (j.value("version", 0) != kParameterFormatVersion) {
    throw std::runtime_error("unsupported parameter format version " +
                             std::to_string(j.value("version", 0)));
  }
  ParameterStore store;
  for (const auto& [name, entry] : j.at("parameters").items()) {
    const auto shape = entry.at("shape").get<std::vector<Index>>();
    const auto values = entry.at("values").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Index>(values.size())) {
      throw std::runtime_error("parameter " + name + ": shape does not match value count");
    }
    Matrix m(shape[0], shape[1]);
    std::copy(values.begin(), values.end(), m.data());
    store.add(name, std::move(m));
  }
  return store;
}

Tensor ParameterBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Matrix& v = store_.get(name);
  Tensor t = trainable_ ? tape_.variable(v) : tape_.constant(v);
  bound_.emplace(name, t);
  return t;
}

GradientMap ParameterBinding::gradients() const {
  GradientMap out;
  for (const std::string& name : store_.names()) {
    auto it = bound_.find(name);
    const Matrix& v = store_.get(name);
    if (it == bound_.end() || !trainable_ || it->second.grad().size() != v.size()) {
      out.emplace(name, Matrix::Zero(v.rows(), v.cols()));
    } else {
      out.emplace(name, it->second.grad());
    }
  }
  return out;
}

Matrix glorot_uniform(Rng& rng, Index fan_in, Index fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(std::max<Index>(fan_in + fan_out, 1)));
  return uniform(rng, fan_in, fan_out, -limit, limit);
}

void save_parameters(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << store.to_json().dump() << "\n";
}

ParameterStore load_parameters(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return ParameterStore::from_json(nlohmann::json::parse(is));
}

}  // namespace rvae
