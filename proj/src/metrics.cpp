#include "slotnorm/metrics.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace slotnorm {

namespace {

std::int64_t pairs_of(std::int64_t n) { return n * (n - 1) / 2; }

}  // namespace

ContingencyTable contingency(const Tensor& pred, const Tensor& truth, const Tensor* mask) {
  require(pred.shape() == truth.shape(), "label shapes must match");
  if (mask != nullptr) require(mask->shape() == pred.shape(), "mask shape must match labels");

  std::map<std::int64_t, Eigen::Index> pred_ids, truth_ids;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    if (mask != nullptr && mask->at(i) == 0.0) continue;
    pred_ids.emplace(std::llround(pred.at(i)), 0);
    truth_ids.emplace(std::llround(truth.at(i)), 0);
  }
  Eigen::Index next = 0;
  for (auto& [id, index] : pred_ids) index = next++;
  next = 0;
  for (auto& [id, index] : truth_ids) index = next++;

  ContingencyTable table;
  table.counts.setZero(static_cast<Eigen::Index>(pred_ids.size()),
                       static_cast<Eigen::Index>(truth_ids.size()));
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    if (mask != nullptr && mask->at(i) == 0.0) continue;
    table.counts(pred_ids[std::llround(pred.at(i))], truth_ids[std::llround(truth.at(i))]) += 1;
    ++table.total;
  }
  table.pred_marginals = table.counts.rowwise().sum();
  table.truth_marginals = table.counts.colwise().sum().transpose();
  return table;
}

double adjusted_rand_index(const ContingencyTable& table) {
  if (table.total < 2)
    throw std::runtime_error("adjusted Rand index is undefined on fewer than two scored pixels");

  std::int64_t agreeing = 0;
  for (Eigen::Index i = 0; i < table.counts.rows(); ++i)
    for (Eigen::Index j = 0; j < table.counts.cols(); ++j)
      agreeing += pairs_of(table.counts(i, j));
  std::int64_t pred_pairs = 0, truth_pairs = 0;
  for (Eigen::Index i = 0; i < table.pred_marginals.size(); ++i)
    pred_pairs += pairs_of(table.pred_marginals[i]);
  for (Eigen::Index j = 0; j < table.truth_marginals.size(); ++j)
    truth_pairs += pairs_of(table.truth_marginals[j]);

  // Cross-multiplied by the total pair count: numerator and denominator stay
  // integer-valued, so the single final division is the only rounding step.
  const double total_pairs = static_cast<double>(pairs_of(table.total));
  const double cross = static_cast<double>(pred_pairs) * static_cast<double>(truth_pairs);
  const double numerator = 2.0 * (total_pairs * static_cast<double>(agreeing) - cross);
  const double denominator =
      total_pairs * static_cast<double>(pred_pairs + truth_pairs) - 2.0 * cross;
  if (denominator == 0.0) return 1.0;  // both partitions trivial
  return numerator / denominator;
}

double foreground_ari(const Tensor& pred, const Tensor& truth, std::int64_t background_id) {
  require(pred.shape() == truth.shape(), "label shapes must match");
  Array fg(truth.size());
  std::int64_t scored = 0;
  for (std::int64_t i = 0; i < truth.size(); ++i) {
    fg[i] = std::llround(truth.at(i)) != background_id ? 1.0 : 0.0;
    scored += fg[i] != 0.0;
  }
  if (scored < 2)
    throw std::runtime_error("foreground ARI is undefined without two foreground pixels");
  const Tensor mask = Tensor::from_array(truth.shape(), std::move(fg));
  return adjusted_rand_index(contingency(pred, truth, &mask));
}

}  // namespace slotnorm
