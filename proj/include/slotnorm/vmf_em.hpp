#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "slotnorm/rng.hpp"
#include "slotnorm/slot_attention.hpp"
#include "slotnorm/tensor.hpp"

namespace slotnorm {

// Mixture of von Mises-Fisher components with a shared concentration. The
// partition function Z(d, tau) is omitted throughout: with tau shared it
// cancels in the posterior and shifts the log-likelihood by a constant.
struct VmfMixture {
  Eigen::MatrixXd directions;  // K x d, unit rows
  double concentration = 1.0;  // tau
  Eigen::VectorXd weights;     // K entries on the probability simplex
};

// log of the unnormalized density: theta . x / tau. Both vectors must be unit
// length (within 1e-9).
double vmf_log_density_unnorm(const Eigen::VectorXd& x, const Eigen::VectorXd& theta, double tau);

// Posterior responsibilities gamma[n,k] proportional to pi_k exp(x_n.theta_k
// / tau); rows sum to one.
Eigen::MatrixXd e_step(const Eigen::MatrixXd& X, const VmfMixture& mix);

// New directions normalize the responsibility-weighted resultants; new
// weights are the column means of gamma. A vanishing resultant makes that
// component's direction undefined and raises an error naming it.
VmfMixture m_step(const Eigen::MatrixXd& X, const Eigen::MatrixXd& gamma, double tau = 1.0);

// sum_n log sum_k pi_k exp(x_n . theta_k / tau), the constant -N log Z
// dropped.
double vmf_log_likelihood(const Eigen::MatrixXd& X, const VmfMixture& mix);

// Alternates e_step / m_step from a random start (unit-normalized Gaussian
// directions, uniform weights). The returned trace holds the likelihood of
// the initial parameters and after every update; it is non-decreasing.
std::pair<VmfMixture, std::vector<double>> em_fit(const Eigen::MatrixXd& X, int K, int iters,
                                                  std::uint64_t seed, double tau = 1.0);

// One draw from a vMF distribution on the 2-sphere (d=3 has a closed-form
// inverse CDF for the cosine against the mean direction).
Eigen::Vector3d sample_vmf_s2(Rng& rng, const Eigen::Vector3d& mean, double tau);

// The affine subspace a + V containing the image of x -> layer_norm(x) * W:
// `a` is the orthogonal projection of the origin onto the subspace and the
// basis rows of V are orthonormal and orthogonal to `a`.
struct AffineDecomposition {
  Eigen::VectorXd a;
  Eigen::MatrixXd v_basis;  // rank x D, orthonormal rows
  bool full_rank = true;    // rank == D-1, the generic (invertible map) case
  Eigen::Index rank() const { return v_basis.rows(); }
  // Orthogonal projection onto V.
  Eigen::VectorXd project_v(const Eigen::VectorXd& x) const {
    return v_basis.transpose() * (v_basis * x);
  }
  // Orthogonal projection onto the span of a (zero when a = 0).
  Eigen::VectorXd project_a(const Eigen::VectorXd& x) const {
    const double nn = a.squaredNorm();
    if (nn == 0.0) return Eigen::VectorXd::Zero(a.size());
    return (a.dot(x) / nn) * a;
  }
};

// Decomposes the image of layer_norm (gain alpha, bias beta) followed by the
// row-convention linear map W [D x D].
AffineDecomposition affine_decompose(const Tensor& map, const LayerNormParams& ln);

// f(u) = C * a.u / (N * |a|^2). For update codes produced by weighted-sum
// aggregation with this value map and constant C, f returns the slot's
// attention column sum divided by N. Fails when a = 0 (the measure-zero
// parameter set where no such function exists).
std::function<double(const Eigen::VectorXd&)> recovery_function(const AffineDecomposition& dec,
                                                                double C, std::int64_t N);

// exp(a . p_a(q)): the input-independent per-slot factor of the attention
// numerator, the mixture-weight analogue.
double slot_prior_weight(const Eigen::VectorXd& q, const AffineDecomposition& dec);

// Numeric witness that weighted-mean (and layer-normed) update codes cannot
// reveal attention column sums: slots at the origin give identical codes for
// K=1 and duplicated K=2 while the column-sum fractions are 1 and 1/2. The
// weighted-sum codes halve instead, staying distinguishable.
struct Prop1Report {
  double weighted_mean_code_diff = 0;   // sup |u2 - u1| over both duplicate slots
  double layer_normed_code_diff = 0;    // same under the shared update layer norm
  double weighted_sum_halving_err = 0;  // sup |u2 - u1/2| under C=N
  double column_fraction_single = 0;    // column sum / N for K=1 (exactly 1)
  double column_fraction_pair[2] = {0, 0};  // per-slot fractions for K=2 (exactly 1/2)
};

Prop1Report verify_prop1_counterexample(const SlotAttentionParams& params, const Tensor& inputs);

}  // namespace slotnorm
