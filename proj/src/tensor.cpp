#include "rvae/tensor.hpp"

#include <cmath>
#include <optional>
#include <sstream>

namespace rvae {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void require_same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument("tensors belong to different tapes");
  }
}

enum class Broadcast { none, rows };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::none;
  if (b.rows() == 1 && a.cols() == b.cols()) return Broadcast::rows;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                   shape_str(b.value()));
}

// Replicates a 1xd operand to `rows` rows.
Matrix expand(const Matrix& b, Index rows) { return b.replicate(rows, 1); }

}  // namespace

// --- Tensor -----------------------------------------------------------------

const Matrix& Tensor::value() const { return tape_->value(id_); }
const Matrix& Tensor::grad() const { return tape_->grad(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::scalar() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("scalar(): tensor is " + shape_str(value()));
  return value()(0, 0);
}

// --- Tape -------------------------------------------------------------------

Tensor Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.leaf = true;
  return push(std::move(n));
}

Tensor Tape::record(Matrix value, std::initializer_list<Tensor> inputs, Backward backward) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Matrix value, std::span<const Tensor> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Tensor& t : inputs) {
    if (&t.tape() != this) throw std::invalid_argument("input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[t.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (&loss.tape() != this) throw std::invalid_argument("loss recorded on a different tape");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.value()));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  nodes_[loss.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    // inputs always precede their output, so n.grad is not touched by its own callback
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (!n.leaf) continue;
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    if (!all_finite(n.grad)) throw NumericError("non-finite gradient detected");
  }
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

// --- primitives -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " +
                     shape_str(b.value()));
  }
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast_kind("add", a, b);
  Matrix out = bc == Broadcast::none ? Matrix(a.value() + b.value())
                                     : Matrix(a.value().rowwise() + b.value().row(0));
  return a.tape().record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (!b.requires_grad()) return;
    if (bc == Broadcast::none) {
      t.accumulate(b, g);
    } else {
      t.accumulate(b, g.colwise().sum());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast_kind("sub", a, b);
  Matrix out = bc == Broadcast::none ? Matrix(a.value() - b.value())
                                     : Matrix(a.value().rowwise() - b.value().row(0));
  return a.tape().record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (!b.requires_grad()) return;
    if (bc == Broadcast::none) {
      t.accumulate(b, -g);
    } else {
      t.accumulate(b, -g.colwise().sum());
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast_kind("mul", a, b);
  const Matrix bv = bc == Broadcast::none ? b.value() : expand(b.value(), a.rows());
  Matrix out = a.value().cwiseProduct(bv);
  return a.tape().record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Matrix& g) {
    if (a.requires_grad()) {
      if (bc == Broadcast::none) {
        t.accumulate(a, g.cwiseProduct(b.value()));
      } else {
        t.accumulate(a, g.cwiseProduct(expand(b.value(), g.rows())));
      }
    }
    if (b.requires_grad()) {
      Matrix gb = g.cwiseProduct(a.value());
      if (bc == Broadcast::none) {
        t.accumulate(b, gb);
      } else {
        t.accumulate(b, gb.colwise().sum());
      }
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast_kind("div", a, b);
  const Matrix bv = bc == Broadcast::none ? b.value() : expand(b.value(), a.rows());
  if ((bv.array() == 0.0).any()) throw std::domain_error("div: division by zero");
  Matrix out = a.value().cwiseQuotient(bv);
  return a.tape().record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Matrix& g) {
    const Matrix bv = bc == Broadcast::none ? b.value() : expand(b.value(), g.rows());
    if (a.requires_grad()) t.accumulate(a, g.cwiseQuotient(bv));
    if (b.requires_grad()) {
      Matrix gb = -(g.array() * a.value().array() / (bv.array() * bv.array())).matrix();
      if (bc == Broadcast::none) {
        t.accumulate(b, gb);
      } else {
        t.accumulate(b, gb.colwise().sum());
      }
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return a.tape().record(a.value() * factor, {a},
                         [a, factor](Tape& t, const Matrix& g) { t.accumulate(a, g * factor); });
}

Tensor add_scalar(const Tensor& a, double offset) {
  Matrix out = (a.value().array() + offset).matrix();
  return a.tape().record(std::move(out), {a},
                         [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (g.array() * a.value().array().exp()).matrix());
  });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) {
    throw std::domain_error("log: non-positive input");
  }
  Matrix out = a.value().array().log().matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

Tensor square(const Tensor& a) {
  Matrix out = a.value().array().square().matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (2.0 * g.array() * a.value().array()).matrix());
  });
}

Tensor softplus(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix sig = a.value().unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    t.accumulate(a, g.cwiseProduct(sig));
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0).matrix());
  });
}

Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Tensor& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().value()) + " vs " +
                       shape_str(p.value()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Tensor& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(std::move(out), parts,
                                     [inputs](Tape& t, const Matrix& g) {
                                       Index c = 0;
                                       for (const Tensor& p : inputs) {
                                         if (p.requires_grad()) {
                                           t.accumulate(p, g.middleCols(c, p.cols()));
                                         }
                                         c += p.cols();
                                       }
                                     });
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_str(a.value()));
  }
  Matrix out = a.value().middleCols(begin, count);
  return a.tape().record(std::move(out), {a}, [a, begin, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(begin, count) = g;
    t.accumulate(a, full);
  });
}

Tensor gather_rows(const Tensor& a, std::span<const int> index) {
  Matrix out(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int r = index[i];
    if (r < 0 || r >= a.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(r) + " outside " +
                              shape_str(a.value()));
    }
    out.row(static_cast<Index>(i)) = a.value().row(r);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.tape().record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Index>(i));
    t.accumulate(a, full);
  });
}

Tensor gathered_linear(std::span<const LinearPart> parts, const Tensor& w, const Tensor& b,
                       Index out_rows) {
  Index in = 0;
  for (const auto& part : parts) {
    require_same_tape(part.x, w);
    const Index rows = part.rows ? static_cast<Index>(part.rows->size()) : part.x.rows();
    if (rows != out_rows && part.x.cols() > 0) {
      throw ShapeError("gathered_linear: part has " + std::to_string(rows) + " rows, expected " +
                       std::to_string(out_rows));
    }
    for (int r : part.rows ? *part.rows : std::vector<int>{}) {
      if (r < 0 || r >= part.x.rows()) {
        throw std::out_of_range("gathered_linear: index " + std::to_string(r) + " outside " +
                                shape_str(part.x.value()));
      }
    }
    in += part.x.cols();
  }
  require_same_tape(w, b);
  if (w.rows() != in || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("gathered_linear: weight " + shape_str(w.value()) + " / bias " +
                     shape_str(b.value()) + " for input width " + std::to_string(in));
  }

  Matrix out = b.value().replicate(out_rows, 1);
  Index offset = 0;
  for (const auto& part : parts) {
    const Index d = part.x.cols();
    if (d == 0) continue;
    const auto wk = w.value().middleRows(offset, d);
    if (!part.rows) {
      out.noalias() += part.x.value() * wk;
    } else {
      const Matrix projected = part.x.value() * wk;
      const std::vector<int>& idx = *part.rows;
      for (std::size_t e = 0; e < idx.size(); ++e) out.row(static_cast<Index>(e)) += projected.row(idx[e]);
    }
    offset += d;
  }

  struct Saved {
    Tensor x;
    std::optional<std::vector<int>> rows;
  };
  std::vector<Saved> saved;
  std::vector<Tensor> inputs{w, b};
  for (const auto& part : parts) {
    saved.push_back({part.x, part.rows ? std::optional(*part.rows) : std::nullopt});
    inputs.push_back(part.x);
  }
  return w.tape().record(
      std::move(out), inputs, [w, b, saved = std::move(saved)](Tape& t, const Matrix& g) {
        if (b.requires_grad()) t.accumulate(b, g.colwise().sum());
        Matrix dw;
        if (w.requires_grad()) dw = Matrix::Zero(w.rows(), w.cols());
        Index offset = 0;
        for (const Saved& part : saved) {
          const Index d = part.x.cols();
          if (d == 0) continue;
          const auto wk = w.value().middleRows(offset, d);
          // scatter the output gradient back onto the rows of x
          Matrix scattered;
          const Matrix* gk = &g;
          if (part.rows) {
            scattered = Matrix::Zero(part.x.rows(), g.cols());
            for (std::size_t e = 0; e < part.rows->size(); ++e) {
              scattered.row((*part.rows)[e]) += g.row(static_cast<Index>(e));
            }
            gk = &scattered;
          }
          if (w.requires_grad()) dw.middleRows(offset, d).noalias() = part.x.value().transpose() * *gk;
          if (part.x.requires_grad()) t.accumulate(part.x, *gk * wk.transpose());
          offset += d;
        }
        if (w.requires_grad()) t.accumulate(w, dw);
      });
}

Tensor segment_aggregate(const Tensor& values, std::span<const int> segment_ids,
                         Index num_segments, Reduce mode) {
  Matrix out;
  Eigen::MatrixXi arg;
  segment_reduce(values.value(), segment_ids, num_segments, mode, out, &arg);
  std::vector<int> ids(segment_ids.begin(), segment_ids.end());
  Eigen::VectorXd inv_count;
  if (mode == Reduce::mean) {
    inv_count = Eigen::VectorXd::Zero(num_segments);
    for (int s : ids) inv_count[s] += 1.0;
    for (Index s = 0; s < num_segments; ++s) {
      if (inv_count[s] > 0) inv_count[s] = 1.0 / inv_count[s];
    }
  }
  return values.tape().record(
      std::move(out), {values},
      [values, ids = std::move(ids), arg = std::move(arg), inv_count = std::move(inv_count),
       mode](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(values.rows(), values.cols());
        switch (mode) {
          case Reduce::sum:
            for (std::size_t i = 0; i < ids.size(); ++i) full.row(static_cast<Index>(i)) = g.row(ids[i]);
            break;
          case Reduce::mean:
            for (std::size_t i = 0; i < ids.size(); ++i) {
              full.row(static_cast<Index>(i)) = g.row(ids[i]) * inv_count[ids[i]];
            }
            break;
          case Reduce::max:
          case Reduce::min:
            for (Index s = 0; s < arg.rows(); ++s) {
              for (Index c = 0; c < arg.cols(); ++c) {
                const int r = arg(s, c);
                if (r >= 0) full(r, c) += g(s, c);
              }
            }
            break;
        }
        t.accumulate(values, full);
      });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.replicate(1, a.cols()));
  });
}

}  // namespace rvae
