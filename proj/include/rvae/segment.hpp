#pragma once

#include <Eigen/Dense>

#include <span>
#include <stdexcept>
#include <string>

namespace rvae {

enum class Reduce { mean, max, min, sum };

/// Per-segment reduction of the rows of `values`.
///
/// Row i contributes to segment `ids[i]`. Empty segments produce a zero row for
/// every mode. For max/min, `arg` (if non-null) receives the row index that won
/// each (segment, column) slot, or -1 for empty segments; ties go to the lowest
/// row index.
template <typename Derived, typename Out, typename ArgOut>
void segment_reduce(const Eigen::MatrixBase<Derived>& values, std::span<const int> ids,
                    Eigen::Index num_segments, Reduce mode, Eigen::MatrixBase<Out>& out,
                    ArgOut* arg) {
  using Eigen::Index;
  if (static_cast<Index>(ids.size()) != values.rows()) {
    throw std::invalid_argument("segment_reduce: ids length " + std::to_string(ids.size()) +
                                " != rows " + std::to_string(values.rows()));
  }
  const Index cols = values.cols();
  out.derived().setZero(num_segments, cols);
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(num_segments);
  for (Index i = 0; i < values.rows(); ++i) {
    const int s = ids[static_cast<std::size_t>(i)];
    if (s < 0 || s >= num_segments) {
      throw std::out_of_range("segment id " + std::to_string(s) + " out of range [0, " +
                              std::to_string(num_segments) + ")");
    }
    ++counts[s];
  }

  if (mode == Reduce::sum || mode == Reduce::mean) {
    for (Index i = 0; i < values.rows(); ++i) {
      out.row(ids[static_cast<std::size_t>(i)]) += values.row(i);
    }
    if (mode == Reduce::mean) {
      for (Index s = 0; s < num_segments; ++s) {
        if (counts[s] > 0) out.row(s) /= static_cast<double>(counts[s]);
      }
    }
    return;
  }

  if (arg) arg->setConstant(num_segments, cols, -1);
  Eigen::MatrixXi winner = Eigen::MatrixXi::Constant(num_segments, cols, -1);
  const bool is_max = mode == Reduce::max;
  for (Index i = 0; i < values.rows(); ++i) {
    const int s = ids[static_cast<std::size_t>(i)];
    for (Index c = 0; c < cols; ++c) {
      const double v = values(i, c);
      int& w = winner(s, c);
      // strict comparison keeps the first (lowest-index) row on ties
      if (w < 0 || (is_max ? v > out(s, c) : v < out(s, c))) {
        w = static_cast<int>(i);
        out(s, c) = v;
      }
    }
  }
  if (arg) *arg = winner;
}

inline const char* reduce_name(Reduce r) {
  switch (r) {
    case Reduce::mean: return "mean";
    case Reduce::max: return "max";
    case Reduce::min: return "min";
    case Reduce::sum: return "sum";
  }
  return "?";
}

}  // namespace rvae
