#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "tailbo/box.hpp"
#include "tailbo/chained_vgp.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/inner_opt.hpp"
#include "tailbo/kernel.hpp"
#include "tailbo/math.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

namespace diagnostics {
// Times the trajectory weight projection needed extra regularization because
// the feature Gram over the inducing set was numerically rank-deficient.
inline std::atomic<long>& rff_projection_jitter_count() {
  static std::atomic<long> count{0};
  return count;
}
}  // namespace diagnostics

// ---------------------------------------------------------------------------
// Batch UCB
// ---------------------------------------------------------------------------

// Optimism levels for one batch: beta_i = multiplier * Phi^{-1}(0.5 + i/(2(B+1))),
// i = 1..B, so a single batch spans exploitation through exploration.
struct UCBSchedule {
  int batch_size = 1;
  double multiplier = 5.0;
  Vector betas;
};

inline UCBSchedule beta_schedule(int B, int D) {
  require(B >= 1, "beta_schedule: batch size must be >= 1");
  require(D >= 1, "beta_schedule: dimension must be >= 1");
  UCBSchedule s;
  s.batch_size = B;
  s.multiplier = 5.0 * D;
  s.betas.resize(B);
  for (int i = 1; i <= B; ++i)
    s.betas[i - 1] = s.multiplier * normal_quantile(0.5 + i / (2.0 * (B + 1)));
  return s;
}

// Approximate argmax of mean(x) + beta * sqrt(var(x)). `posterior` maps a
// q x D matrix of points to (means, variances).
template <typename PosteriorBatch>
Vector maximize_ucb(PosteriorBatch&& posterior, double beta, const Box& box, Rng& rng,
                    const InnerOptions& opt = InnerOptions()) {
  require(beta >= 0.0, "maximize_ucb: beta must be non-negative");
  auto fbatch = [&](const Matrix& X) -> Vector {
    auto [mean, var] = posterior(X);
    return mean + beta * var.cwiseMax(0.0).cwiseSqrt();
  };
  return maximize_pattern_search(fbatch, box, rng, opt).x;
}

// Gaussian perturbation with per-coordinate variance theta_d / 4, clipped to
// the box, applied to every proposed batch member.
inline Vector jitter_point(const Vector& x, const Vector& lengthscales, const Box& box,
                           Rng& rng) {
  require(x.size() == lengthscales.size(), "jitter_point: dimension mismatch");
  require(x.size() == box.dim(), "jitter_point: box dimension mismatch");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector out = x;
  for (int d = 0; d < x.size(); ++d)
    out[d] += 0.5 * std::sqrt(lengthscales[d]) * gauss(rng);
  return box.clip(out);
}

// One UCB point per optimism level, in increasing-beta order, each jittered.
inline std::vector<Vector> propose_batch_ucb(const ChainedModel& model, int B,
                                             const Box& box, Rng& rng,
                                             const InnerOptions& opt = InnerOptions()) {
  model.validate();
  require(box.dim() == model.inducing.dim(), "propose_batch_ucb: dimension mismatch");
  const Predictor pred(model);
  const UCBSchedule schedule = beta_schedule(B, box.dim());
  std::vector<Vector> batch;
  batch.reserve(B);
  for (int b = 0; b < B; ++b) {
    const Vector x = maximize_ucb(
        [&](const Matrix& X) { return pred.measure_marginals(X); }, schedule.betas[b],
        box, rng, opt);
    batch.push_back(jitter_point(x, model.kernel_g.lengthscales(), box, rng));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Thompson sampling via RFF posterior trajectories
// ---------------------------------------------------------------------------

// Analytic posterior draw of the location process: g(x) ~= phi(x)^T omega.
struct Trajectory {
  RFFBasis basis;
  Vector weights;

  double value(const Vector& x) const { return rff_features(basis, x).dot(weights); }

  Vector values(const Matrix& X) const {
    return rff_features(basis, X).transpose() * weights;
  }

  Vector gradient(const Vector& x) const {
    const int m = basis.feature_count();
    const double amp = std::sqrt(2.0 * basis.scale / m);
    const Vector s =
        ((basis.frequencies * x) + basis.phases).array().sin().matrix();
    return -basis.frequencies.transpose() * (amp * s.cwiseProduct(weights));
  }
};

// Draws omega so that phi(x)^T omega matches the variational posterior of g
// in mean and covariance up to the RFF approximation:
//   omega = w0 + Phi A^{-1} (u_s - Phi^T w0),
// with w0 ~ N(0, I_m) the prior weights, Phi the m x N feature matrix over
// the inducing points, A = Phi^T Phi, and u_s ~ N(mu, S) a draw of the
// (unwhitened) inducing values. The resulting weight law is exactly
// N(Phi A^{-1} mu, I_m + Phi A^{-1} (S - A) A^{-1} Phi^T) without ever
// factorizing the m x m covariance.
inline Trajectory sample_trajectory(const ChainedModel& model, int m, Rng& rng) {
  model.validate();
  require(m >= 1, "sample_trajectory: feature count must be >= 1");
  const int N = model.inducing.count();

  Trajectory traj;
  traj.basis = spectral_sample(model.kernel_g, m, rng);
  const Matrix Phi = rff_features(traj.basis, model.inducing.Z);  // m x N

  const Matrix K = detail::kernel_gram_nojitter(model.kernel_g, model.inducing.Z);
  const Matrix L = detail::chol_with_escalation(K, model.kernel_g.variance());
  const Vector mu = L.triangularView<Eigen::Lower>() * model.factor_g.mean;
  const Matrix Cu = L.triangularView<Eigen::Lower>() * model.factor_g.chol_cov;

  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector w0(m);
  for (int i = 0; i < m; ++i) w0[i] = gauss(rng);
  Vector eta(N);
  for (int i = 0; i < N; ++i) eta[i] = gauss(rng);
  const Vector u_s = mu + Cu * eta;

  Matrix A = Phi.transpose() * Phi;
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) {
    double jitter = 1e-10 * A.trace() / N;
    for (int tries = 0; tries < 8; ++tries) {
      A.diagonal().array() += jitter;
      llt.compute(A);
      if (llt.info() == Eigen::Success) break;
      jitter *= 10.0;
    }
    require(llt.info() == Eigen::Success,
            "sample_trajectory: feature Gram not factorizable");
    ++diagnostics::rff_projection_jitter_count();
  }

  const Vector resid = u_s - Phi.transpose() * w0;
  traj.weights = w0 + Phi * llt.solve(resid);
  return traj;
}

inline Vector maximize_trajectory(const Trajectory& traj, const Box& box, Rng& rng,
                                  const InnerOptions& opt = InnerOptions()) {
  require(box.dim() == traj.basis.dim(), "maximize_trajectory: dimension mismatch");
  auto fbatch = [&](const Matrix& X) { return traj.values(X); };
  auto value_grad = [&](const Vector& x, Vector& g) {
    g = traj.gradient(x);
    return traj.value(x);
  };
  return maximize_gradient_ascent(fbatch, value_grad, box, rng, opt).x;
}

// B independent trajectory draws, each maximized and jittered.
inline std::vector<Vector> propose_batch_ts(const ChainedModel& model, int B, int m,
                                            const Box& box, Rng& rng,
                                            const InnerOptions& opt = InnerOptions()) {
  model.validate();
  require(B >= 1, "propose_batch_ts: batch size must be >= 1");
  require(box.dim() == model.inducing.dim(), "propose_batch_ts: dimension mismatch");
  std::vector<Vector> batch;
  batch.reserve(B);
  for (int b = 0; b < B; ++b) {
    const Trajectory traj = sample_trajectory(model, m, rng);
    const Vector x = maximize_trajectory(traj, box, rng, opt);
    batch.push_back(jitter_point(x, model.kernel_g.lengthscales(), box, rng));
  }
  return batch;
}

}  // namespace tailbo
