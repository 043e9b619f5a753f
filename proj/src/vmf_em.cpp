#include "slotnorm/vmf_em.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace slotnorm {

namespace {

void require_unit(const Eigen::VectorXd& v, const char* what) {
  require(std::abs(v.norm() - 1.0) < 1e-9, std::string(what) + " must be a unit vector");
}

void require_valid(const VmfMixture& mix) {
  require(mix.concentration > 0.0, "concentration must be positive");
  require(mix.directions.rows() == mix.weights.size(),
          "one weight per mixture component required");
  for (Eigen::Index k = 0; k < mix.directions.rows(); ++k)
    require(std::abs(mix.directions.row(k).norm() - 1.0) < 1e-12,
            "mixture directions must be unit vectors");
  require(std::abs(mix.weights.sum() - 1.0) < 1e-12, "mixture weights must sum to one");
  require((mix.weights.array() >= 0.0).all(), "mixture weights must be non-negative");
}

}  // namespace

double vmf_log_density_unnorm(const Eigen::VectorXd& x, const Eigen::VectorXd& theta,
                              double tau) {
  require(tau > 0.0, "concentration must be positive");
  require_unit(x, "sample");
  require_unit(theta, "mean direction");
  return theta.dot(x) / tau;
}

Eigen::MatrixXd e_step(const Eigen::MatrixXd& X, const VmfMixture& mix) {
  require_valid(mix);
  const Eigen::Index N = X.rows(), K = mix.directions.rows();
  Eigen::MatrixXd logits = X * mix.directions.transpose() / mix.concentration;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double w = mix.weights[k];
    logits.col(k).array() += w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
  }
  Eigen::MatrixXd gamma(N, K);
  for (Eigen::Index n = 0; n < N; ++n) {
    const double mx = logits.row(n).maxCoeff();
    Eigen::ArrayXd e = (logits.row(n).array() - mx).exp();
    gamma.row(n) = e / e.sum();
  }
  return gamma;
}

VmfMixture m_step(const Eigen::MatrixXd& X, const Eigen::MatrixXd& gamma, double tau) {
  require(X.rows() == gamma.rows(), "one responsibility row per sample required");
  const Eigen::Index K = gamma.cols(), d = X.cols();
  VmfMixture mix;
  mix.concentration = tau;
  mix.directions.resize(K, d);
  mix.weights.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::VectorXd resultant = X.transpose() * gamma.col(k);
    const double norm = resultant.norm();
    if (norm < 1e-12)
      throw std::runtime_error("degenerate mixture component " + std::to_string(k) +
                               ": zero weighted resultant");
    mix.directions.row(k) = resultant.transpose() / norm;
    mix.weights[k] = gamma.col(k).mean();
  }
  return mix;
}

double vmf_log_likelihood(const Eigen::MatrixXd& X, const VmfMixture& mix) {
  require_valid(mix);
  const Eigen::Index N = X.rows(), K = mix.directions.rows();
  Eigen::MatrixXd logits = X * mix.directions.transpose() / mix.concentration;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double w = mix.weights[k];
    logits.col(k).array() += w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity();
  }
  double total = 0.0;
  for (Eigen::Index n = 0; n < N; ++n) {
    const double mx = logits.row(n).maxCoeff();
    total += mx + std::log((logits.row(n).array() - mx).exp().sum());
  }
  return total;
}

std::pair<VmfMixture, std::vector<double>> em_fit(const Eigen::MatrixXd& X, int K, int iters,
                                                  std::uint64_t seed, double tau) {
  require(K >= 1, "need at least one component");
  require(X.rows() >= K, "need at least as many samples as components");
  require(iters >= 1, "need at least one iteration");
  Rng rng(seed);
  VmfMixture mix;
  mix.concentration = tau;
  mix.directions.resize(K, X.cols());
  for (int k = 0; k < K; ++k) {
    Eigen::VectorXd dir(X.cols());
    double norm = 0.0;
    while (norm < 1e-12) {
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir[i] = rng.normal();
      norm = dir.norm();
    }
    mix.directions.row(k) = dir.transpose() / norm;
  }
  mix.weights = Eigen::VectorXd::Constant(K, 1.0 / K);

  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(iters) + 1);
  trace.push_back(vmf_log_likelihood(X, mix));
  for (int it = 0; it < iters; ++it) {
    const Eigen::MatrixXd gamma = e_step(X, mix);
    mix = m_step(X, gamma, tau);
    trace.push_back(vmf_log_likelihood(X, mix));
  }
  return {mix, trace};
}

Eigen::Vector3d sample_vmf_s2(Rng& rng, const Eigen::Vector3d& mean, double tau) {
  require(tau > 0.0, "concentration must be positive");
  require(std::abs(mean.norm() - 1.0) < 1e-9, "mean direction must be a unit vector");
  const double kappa = 1.0 / tau;
  // Inverse-CDF sample of the cosine against the mean direction.
  const double u = rng.uniform();
  const double w = 1.0 + std::log(u + (1.0 - u) * std::exp(-2.0 * kappa)) / kappa;
  const double phi = 2.0 * 3.141592653589793 * rng.uniform();
  // Any orthonormal tangent frame serves; anchor on the least-aligned axis.
  Eigen::Vector3d anchor = Eigen::Vector3d::UnitX();
  if (std::abs(mean.x()) > std::abs(mean.y())) anchor = Eigen::Vector3d::UnitY();
  if (std::abs(mean.z()) < std::min(std::abs(mean.x()), std::abs(mean.y())))
    anchor = Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d t1 = mean.cross(anchor).normalized();
  const Eigen::Vector3d t2 = mean.cross(t1);
  const double s = std::sqrt(std::max(0.0, 1.0 - w * w));
  return w * mean + s * (std::cos(phi) * t1 + std::sin(phi) * t2);
}

AffineDecomposition affine_decompose(const Tensor& map, const LayerNormParams& ln) {
  require(map.ndim() == 2 && map.dim(0) == map.dim(1), "map must be a square matrix");
  const Eigen::Index D = map.dim(0);
  require(ln.alpha.size() == D && ln.beta.size() == D,
          "layer-norm parameter length must match the map");
  const MatMap W = map.mat();
  const Eigen::Map<const Eigen::VectorXd> alpha(ln.alpha.data(), D);
  const Eigen::Map<const Eigen::VectorXd> beta(ln.beta.data(), D);

  // Row convention: layer_norm(x) * W = (alpha .* xhat) * W + beta * W with
  // xhat ranging over the mean-zero hyperplane. The direction space is the
  // image of that hyperplane under diag(alpha) * W; beta * W translates it.
  const Eigen::MatrixXd M = alpha.asDiagonal() * W;
  const Eigen::VectorXd t0 = W.transpose() * beta;
  Eigen::MatrixXd span(D, D - 1);  // columns e_i - e_{i+1} mapped through M
  for (Eigen::Index i = 0; i + 1 < D; ++i)
    span.col(i) = (M.row(i) - M.row(i + 1)).transpose();

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(span);
  qr.setThreshold(1e-12);
  const Eigen::Index rank = qr.rank();
  const Eigen::MatrixXd Q =
      qr.householderQ() * Eigen::MatrixXd::Identity(D, rank);  // thin, orthonormal columns

  AffineDecomposition dec;
  dec.v_basis = Q.transpose();
  dec.a = t0 - Q * (Q.transpose() * t0);
  dec.full_rank = rank == D - 1;
  return dec;
}

std::function<double(const Eigen::VectorXd&)> recovery_function(const AffineDecomposition& dec,
                                                                double C, std::int64_t N) {
  require(C > 0.0 && N >= 1, "need a positive constant and token count");
  const double nn = dec.a.squaredNorm();
  if (nn < 1e-24)
    throw std::runtime_error(
        "column sums are not recoverable: the affine translation vanishes");
  const Eigen::VectorXd a = dec.a;
  const double scale = C / (static_cast<double>(N) * nn);
  return [a, scale](const Eigen::VectorXd& u) { return scale * a.dot(u); };
}

double slot_prior_weight(const Eigen::VectorXd& q, const AffineDecomposition& dec) {
  return std::exp(dec.a.dot(dec.project_a(q)));
}

Prop1Report verify_prop1_counterexample(const SlotAttentionParams& params, const Tensor& inputs) {
  require(inputs.ndim() == 2, "inputs must be [N,D]");
  const std::int64_t N = inputs.dim(0);
  // Slots at the origin layer-norm to the same query, so attention splits
  // every token uniformly and duplicating the slot halves each column sum.
  Tensor single = Tensor::zeros({1, params.d_slot()});
  Tensor pair = Tensor::zeros({2, params.d_slot()});
  auto [g1, keys1, v1] = compute_attention(inputs, single, params);
  auto [g2, keys2, v2] = compute_attention(inputs, pair, params);
  (void)keys1;
  (void)keys2;

  auto sup_diff = [](const Tensor& x, const Tensor& y, double scale_y) {
    // Compares x against scale_y * y, broadcasting y across x's slot rows.
    double worst = 0;
    for (std::int64_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, std::abs(x.at(i) - scale_y * y.at(i % y.size())));
    return worst;
  };

  Prop1Report report;
  Tensor wm1 = aggregate(g1, v1, NormalizationMode::weighted_mean(), params, nullptr);
  Tensor wm2 = aggregate(g2, v2, NormalizationMode::weighted_mean(), params, nullptr);
  report.weighted_mean_code_diff = sup_diff(wm2, wm1, 1.0);

  Tensor ln1 = aggregate(g1, v1, NormalizationMode::layer_normed(), params, nullptr);
  Tensor ln2 = aggregate(g2, v2, NormalizationMode::layer_normed(), params, nullptr);
  report.layer_normed_code_diff = sup_diff(ln2, ln1, 1.0);

  Tensor ws1 = aggregate(g1, v1, NormalizationMode::weighted_sum_tokens(), params, nullptr);
  Tensor ws2 = aggregate(g2, v2, NormalizationMode::weighted_sum_tokens(), params, nullptr);
  report.weighted_sum_halving_err = sup_diff(ws2, ws1, 0.5);

  double c1 = 0, c2a = 0, c2b = 0;
  for (std::int64_t n = 0; n < N; ++n) {
    c1 += g1.at(n);
    c2a += g2.at(n * 2);
    c2b += g2.at(n * 2 + 1);
  }
  report.column_fraction_single = c1 / static_cast<double>(N);
  report.column_fraction_pair[0] = c2a / static_cast<double>(N);
  report.column_fraction_pair[1] = c2b / static_cast<double>(N);
  return report;
}

}  // namespace slotnorm
