#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "slotnorm/metrics.hpp"
#include "slotnorm/rng.hpp"
#include "slotnorm/tensor.hpp"

using namespace slotnorm;

namespace {

Tensor labels_of(const std::vector<int>& ids) {
  Array a(static_cast<std::int64_t>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) a[static_cast<std::int64_t>(i)] = ids[i];
  return Tensor::from_array({static_cast<std::int64_t>(ids.size())}, std::move(a));
}

Tensor random_labels(Rng& rng, std::int64_t n, int n_classes) {
  Array a(n);
  for (std::int64_t i = 0; i < n; ++i)
    a[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(n_classes)));
  return Tensor::from_array({n}, std::move(a));
}

// Independent oracle: classify every unordered element pair as agreeing or
// disagreeing in each partition, then apply the pair-count form of the
// chance adjustment. Exact in 64-bit integers until the final division.
double pair_counting_ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::int64_t both = 0, pred_only = 0, truth_only = 0, neither = 0;
  const std::size_t n = pred.size();
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      const bool same_pred = pred[p] == pred[q];
      const bool same_truth = truth[p] == truth[q];
      if (same_pred && same_truth) ++both;
      else if (same_pred) ++pred_only;
      else if (same_truth) ++truth_only;
      else ++neither;
    }
  }
  const std::int64_t denom = (both + pred_only) * (pred_only + neither) +
                             (both + truth_only) * (truth_only + neither);
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(both * neither - pred_only * truth_only) /
         static_cast<double>(denom);
}

// Enumerates every partition of {0..n-1} as a restricted growth string.
void all_partitions(int n, std::vector<std::vector<int>>& out) {
  std::vector<int> rgs(static_cast<std::size_t>(n), 0);
  const auto recurse = [&](auto&& self, int i, int next_free) -> void {
    if (i == n) {
      out.push_back(rgs);
      return;
    }
    for (int v = 0; v <= next_free; ++v) {
      rgs[static_cast<std::size_t>(i)] = v;
      self(self, i + 1, std::max(next_free, v + 1));
    }
  };
  recurse(recurse, 1, 1);  // rgs[0] is pinned to 0
  if (n == 0) out.assign(1, {});
}

}  // namespace

TEST_CASE("matching labels produce a diagonal table") {
  const Tensor both = labels_of({0, 0, 0, 1, 1, 1, 1, 1});
  const ContingencyTable table = contingency(both, both);
  REQUIRE(table.counts.rows() == 2);
  REQUIRE(table.counts.cols() == 2);
  CHECK(table.counts(0, 0) == 3);
  CHECK(table.counts(1, 1) == 5);
  CHECK(table.counts(0, 1) == 0);
  CHECK(table.counts(1, 0) == 0);
  CHECK(table.pred_marginals[0] == 3);
  CHECK(table.truth_marginals[1] == 5);
  CHECK(table.total == 8);
}

TEST_CASE("an all-zero mask leaves an empty table") {
  const Tensor ids = labels_of({0, 1, 2, 3});
  const Tensor mask = Tensor::zeros({4});
  const ContingencyTable table = contingency(ids, ids, &mask);
  CHECK(table.empty());
  CHECK(table.counts.size() == 0);
  CHECK_THROWS_AS(adjusted_rand_index(table), std::runtime_error);
}

TEST_CASE("counts match a double-loop oracle") {
  Rng rng(1);
  const Tensor pred = random_labels(rng, 36, 4);
  const Tensor truth = random_labels(rng, 36, 3);
  const ContingencyTable table = contingency(pred, truth);

  // Ids are drawn from 0..k-1, so sorted distinct order is the id itself.
  std::int64_t total = 0;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) {
      std::int64_t n_ij = 0;
      for (std::int64_t p = 0; p < 36; ++p)
        n_ij += pred.at(p) == i && truth.at(p) == j;
      CHECK(table.counts(i, j) == n_ij);
      total += n_ij;
    }
  }
  CHECK(table.total == total);
  CHECK(table.pred_marginals.sum() == total);
  CHECK(table.truth_marginals.sum() == total);
}

TEST_CASE("mismatched shapes are rejected") {
  CHECK_THROWS_AS(contingency(labels_of({0, 1}), labels_of({0, 1, 2})), std::invalid_argument);
  const Tensor ids = labels_of({0, 1, 2});
  const Tensor mask = Tensor::zeros({2});
  CHECK_THROWS_AS(contingency(ids, ids, &mask), std::invalid_argument);
  CHECK_THROWS_AS(foreground_ari(labels_of({0, 1}), labels_of({0, 1, 2})),
                  std::invalid_argument);
}

TEST_CASE("identical partitions score one") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor ids = random_labels(rng, 30, 2 + trial % 5);
    CHECK(adjusted_rand_index(contingency(ids, ids)) == 1.0);
  }
}

TEST_CASE("one cluster against two equal clusters scores zero") {
  const Tensor pred = labels_of({7, 7, 7, 7, 7, 7, 7, 7});
  const Tensor truth = labels_of({0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(adjusted_rand_index(contingency(pred, truth)) == 0.0);
}

TEST_CASE("trivial-versus-trivial partitions are defined as identical") {
  const Tensor ones = labels_of({3, 3, 3, 3});
  CHECK(adjusted_rand_index(contingency(ones, ones)) == 1.0);
  const Tensor singletons = labels_of({0, 1, 2, 3});
  CHECK(adjusted_rand_index(contingency(singletons, singletons)) == 1.0);
  // Mixed trivial cases are not degenerate and score zero.
  CHECK(adjusted_rand_index(contingency(ones, singletons)) == 0.0);
  CHECK(adjusted_rand_index(contingency(singletons, ones)) == 0.0);
}

TEST_CASE("every partition pair up to eight elements matches pair counting") {
  for (int n = 2; n <= 8; ++n) {
    std::vector<std::vector<int>> partitions;
    all_partitions(n, partitions);
    std::vector<Tensor> tensors;
    tensors.reserve(partitions.size());
    for (const auto& p : partitions) tensors.push_back(labels_of(p));

    std::int64_t mismatches = 0;
    double worst = 0.0;
    for (std::size_t a = 0; a < partitions.size(); ++a) {
      for (std::size_t b = 0; b < partitions.size(); ++b) {
        const double lib = adjusted_rand_index(contingency(tensors[a], tensors[b]));
        const double oracle = pair_counting_ari(partitions[a], partitions[b]);
        const double err = std::abs(lib - oracle);
        worst = std::max(worst, err);
        mismatches += err > 1e-12;
      }
    }
    CAPTURE(n);
    CAPTURE(worst);
    CHECK(mismatches == 0);
  }
}

TEST_CASE("relabeling either partition leaves the index unchanged") {
  Rng rng(3);
  const std::int64_t n = 64;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> pred(n), truth(n);
    for (auto& v : pred) v = static_cast<int>(rng.below(5));
    for (auto& v : truth) v = static_cast<int>(rng.below(4));

    // Random bijections on the id spaces.
    std::vector<int> pmap{0, 1, 2, 3, 4}, tmap{0, 1, 2, 3};
    for (std::size_t i = pmap.size(); i > 1; --i)
      std::swap(pmap[i - 1], pmap[static_cast<std::size_t>(rng.below(i))]);
    for (std::size_t i = tmap.size(); i > 1; --i)
      std::swap(tmap[i - 1], tmap[static_cast<std::size_t>(rng.below(i))]);
    std::vector<int> pred2(n), truth2(n);
    for (std::int64_t i = 0; i < n; ++i) {
      pred2[i] = 10 + pmap[static_cast<std::size_t>(pred[i])];
      truth2[i] = 20 + tmap[static_cast<std::size_t>(truth[i])];
    }

    const double base = adjusted_rand_index(contingency(labels_of(pred), labels_of(truth)));
    const double relabeled =
        adjusted_rand_index(contingency(labels_of(pred2), labels_of(truth2)));
    CHECK(base == doctest::Approx(relabeled).epsilon(1e-15));
  }
}

TEST_CASE("foreground score ignores the background slot assignment") {
  // Truth: background 0, two objects. Prediction nails both objects but
  // lumps the true background in with object one's slot.
  const Tensor truth = labels_of({0, 0, 0, 1, 1, 1, 2, 2, 2});
  const Tensor pred = labels_of({4, 4, 4, 4, 4, 4, 9, 9, 9});
  CHECK(foreground_ari(pred, truth) == 1.0);
  CHECK(adjusted_rand_index(contingency(pred, truth)) < 1.0);
}

TEST_CASE("merging all foreground objects scores zero") {
  const Tensor truth = labels_of({0, 0, 1, 1, 1, 1, 2, 2, 2, 2});
  const Tensor pred = labels_of({3, 5, 6, 6, 6, 6, 6, 6, 6, 6});
  CHECK(foreground_ari(pred, truth) == 0.0);
}

TEST_CASE("foreground score equals the masked index by definition") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor pred = random_labels(rng, 100, 6);
    const Tensor truth = random_labels(rng, 100, 4);
    Array fg(100);
    for (std::int64_t i = 0; i < 100; ++i) fg[i] = truth.at(i) != 0.0 ? 1.0 : 0.0;
    const Tensor mask = Tensor::from_array({100}, std::move(fg));
    CHECK(foreground_ari(pred, truth) ==
          adjusted_rand_index(contingency(pred, truth, &mask)));
  }
}

TEST_CASE("background pixel predictions never change the foreground score") {
  Rng rng(5);
  const Tensor pred = random_labels(rng, 80, 5);
  const Tensor truth = random_labels(rng, 80, 3);
  const double base = foreground_ari(pred, truth);
  for (int trial = 0; trial < 25; ++trial) {
    Array perturbed(80);
    for (std::int64_t i = 0; i < 80; ++i) {
      perturbed[i] = pred.at(i);
      if (truth.at(i) == 0.0) perturbed[i] = static_cast<double>(rng.below(17));
    }
    CHECK(foreground_ari(Tensor::from_array({80}, std::move(perturbed)), truth) == base);
  }
}

TEST_CASE("scoring needs at least two foreground pixels") {
  const Tensor all_bg = labels_of({0, 0, 0, 0});
  CHECK_THROWS_AS(foreground_ari(all_bg, all_bg), std::runtime_error);
  const Tensor one_fg = labels_of({0, 0, 0, 1});
  CHECK_THROWS_AS(foreground_ari(one_fg, one_fg), std::runtime_error);
  // A different background id moves the mask.
  CHECK(foreground_ari(one_fg, one_fg, 1) == 1.0);
}
