#pragma once

// Dense row-major tensors recorded on a tape for reverse-mode differentiation.
//
// Every tensor is two-dimensional; a scalar is 1x1 and a vector is 1xd. The
// tape owns all values and gradients, `Tensor` is a cheap handle into it.

#include "rvae/segment.hpp"

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rvae {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  /// Empty until `Tape::backward` has run.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  double scalar() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value);
  /// Leaf that receives a gradient.
  Tensor variable(Matrix value);
  /// Appends an operation output. It requires a gradient iff any input does.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, Backward backward);
  Tensor record(Matrix value, std::span<const Tensor> inputs, Backward backward);

  template <typename Derived>
  void accumulate(const Tensor& t, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[t.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0 && n.value.size() != 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 loss. Leaf variables that the loss does not reach
  /// get a zero gradient. Throws NumericError if any leaf gradient is non-finite.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool leaf = false;
    Backward backward;
  };
  Tensor push(Node node);

  std::vector<Node> nodes_;
};

// --- primitives -------------------------------------------------------------
//
// Binary elementwise ops accept equal shapes or a 1xd right operand that is
// broadcast over the rows of the left one.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws std::domain_error on a non-positive entry.
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);
/// Subgradient at 0 is 0.
Tensor relu(const Tensor& a);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_cols(std::initializer_list<Tensor> parts);
Tensor slice_cols(const Tensor& a, Index begin, Index count);
Tensor gather_rows(const Tensor& a, std::span<const int> index);

/// One block of a `gathered_linear` input: the rows of `x` picked by `rows`,
/// or all of `x` in order when `rows` is null.
struct LinearPart {
  Tensor x;
  const std::vector<int>* rows = nullptr;
};

/// concat_cols(gather(x_k, rows_k)...) * w + b without materializing the
/// concatenation: each block is projected by its slice of `w` before the
/// gather. `out_rows` fixes the row count (needed when every part is empty).
Tensor gathered_linear(std::span<const LinearPart> parts, const Tensor& w, const Tensor& b,
                       Index out_rows);

/// Reduction of rows grouped by `segment_ids`; see `segment_reduce`.
Tensor segment_aggregate(const Tensor& values, std::span<const int> segment_ids,
                         Index num_segments, Reduce mode);

Tensor sum(const Tensor& a);
/// Sum of each row, giving an n x 1 column.
Tensor row_sum(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

bool all_finite(const Matrix& m);

}  // namespace rvae
