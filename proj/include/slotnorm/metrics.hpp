#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "slotnorm/tensor.hpp"

namespace slotnorm {

// Co-occurrence counts between predicted and true cluster labels over the
// scored pixels. Label values need not be contiguous; rows/columns are
// indexed by sorted distinct value.
struct ContingencyTable {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> pred_marginals;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> truth_marginals;
  std::int64_t total = 0;
  bool empty() const { return total == 0; }
};

// Counts co-occurrences over pixels where mask is nonzero (all pixels when
// mask is null). Shapes must match.
ContingencyTable contingency(const Tensor& pred, const Tensor& truth,
                             const Tensor* mask = nullptr);

// Pair-counting agreement adjusted for chance: 1 for identical partitions,
// 0 in expectation for independent ones. The degenerate case where the
// maximum index equals the expected index (both partitions trivial) is
// defined as 1. Undefined on fewer than two scored pixels.
double adjusted_rand_index(const ContingencyTable& table);

// Adjusted Rand index restricted to pixels whose TRUE label is not the
// background id; predicted labels there are scored as-is. Undefined when
// fewer than two foreground pixels exist.
double foreground_ari(const Tensor& pred, const Tensor& truth, std::int64_t background_id = 0);

}  // namespace slotnorm
