#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "tailbo/box.hpp"
#include "tailbo/chained_vgp.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/inner_opt.hpp"
#include "tailbo/kernel.hpp"
#include "tailbo/likelihood.hpp"
#include "tailbo/math.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

// Design with a fixed replication count per point. Each row of `observations`
// holds the r independent draws of Y at the matching design point.
struct ReplicatedDesign {
  Matrix points;        // k x D
  Matrix observations;  // k x r

  int count() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
  int replicates() const { return static_cast<int>(observations.cols()); }

  void validate() const {
    require(replicates() >= 2, "ReplicatedDesign: need at least 2 replicates");
    require(count() >= dim() + 1, "ReplicatedDesign: need at least D+1 points");
    require(observations.rows() == points.rows(),
            "ReplicatedDesign: observation rows must match design points");
  }
};

// Empirical tail estimate with a bootstrap variance for the estimator.
inline std::pair<double, double> pseudo_observe(const TailMeasure& measure,
                                                const Vector& replicates,
                                                int n_bootstrap, Rng& rng) {
  require(replicates.size() >= 2, "pseudo_observe: need at least 2 replicates");
  require(n_bootstrap >= 2, "pseudo_observe: need at least 2 bootstrap rounds");
  const double estimate = empirical_minimizer(measure, replicates);

  const int n = static_cast<int>(replicates.size());
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::vector<double> resample(n);
  double sum = 0.0, sumsq = 0.0;
  for (int b = 0; b < n_bootstrap; ++b) {
    for (int i = 0; i < n; ++i) resample[i] = replicates[pick(rng)];
    const double est = empirical_minimizer(measure, resample);
    sum += est;
    sumsq += est * est;
  }
  const double mean = sum / n_bootstrap;
  const double variance =
      std::max(0.0, (sumsq - n_bootstrap * mean * mean) / (n_bootstrap - 1));
  return {estimate, variance};
}

// Exact GP regression on pseudo-observations with heteroscedastic diagonal
// noise. Predictions add back the constant offset (the pseudo-observation
// mean) that the zero-mean GP is fit against.
struct QKModel {
  MaternKernel kernel{2.5, Vector::Constant(1, 1.0), 1.0};
  Matrix X;          // k x D design points
  Vector pseudo_y;   // empirical tail estimates
  Vector noise_var;  // bootstrap variances, >= 0
  double offset = 0.0;

  Matrix chol;    // lower Cholesky factor of K + diag(noise_var) + jitter
  Vector weight;  // (K + V)^{-1} (pseudo_y - offset)

  int count() const { return static_cast<int>(X.rows()); }

  std::pair<Vector, Vector> predict(const Matrix& Xq) const {
    require(Xq.cols() == X.cols(), "QKModel: query dimension mismatch");
    const int q = static_cast<int>(Xq.rows());
    Vector mean(q), var(q);
    for (int i = 0; i < q; ++i) {
      const Vector xq = Xq.row(i).transpose();
      Vector kx(count());
      for (int j = 0; j < count(); ++j)
        kx[j] = kernel(xq, X.row(j).transpose());
      mean[i] = offset + kx.dot(weight);
      const Vector sol = chol.triangularView<Eigen::Lower>().solve(kx);
      var[i] = std::max(0.0, kernel.variance() - sol.squaredNorm());
    }
    return {std::move(mean), std::move(var)};
  }
};

namespace detail {

inline void qk_factorize(QKModel& model) {
  const int k = model.count();
  Matrix K = kernel_gram_nojitter(model.kernel, model.X);
  K.diagonal() += model.noise_var;
  model.chol = chol_with_escalation(K, model.kernel.variance());
  const Vector centered = model.pseudo_y.array() - model.offset;
  const Vector half = model.chol.triangularView<Eigen::Lower>().solve(centered);
  model.weight =
      model.chol.transpose().triangularView<Eigen::Upper>().solve(half);
}

}  // namespace detail

// Gaussian log marginal likelihood of centered pseudo-observations under the
// kernel plus heteroscedastic noise.
inline double qk_log_marginal(const MaternKernel& kernel, const Matrix& X,
                              const Vector& y_centered, const Vector& noise_var) {
  const int k = static_cast<int>(X.rows());
  Matrix K = detail::kernel_gram_nojitter(kernel, X);
  K.diagonal() += noise_var;
  const Matrix L = detail::chol_with_escalation(K, kernel.variance());
  const Vector half = L.triangularView<Eigen::Lower>().solve(y_centered);
  double logdet = 0.0;
  for (int i = 0; i < k; ++i) logdet += std::log(L(i, i));
  return -0.5 * half.squaredNorm() - logdet - 0.5 * k * std::log(2.0 * kPi);
}

struct QKFitOptions {
  int n_bootstrap = 500;
  bool fit_hyperparameters = true;
  // hyperparameter search is cheap relative to acquisition, so a light
  // multi-start budget suffices
  InnerOptions hyper_opt{3, 64, 60, 0.25, 1e-10};
};

// Fits the heteroscedastic GP given precomputed pseudo-observations.
// Hyperparameters (lengthscales + variance) maximize the log marginal
// likelihood by multi-start pattern search in log space.
inline QKModel fit_qk_gp(const Matrix& X, const Vector& pseudo_y,
                         const Vector& noise_var, const Box& box, Rng& rng,
                         const QKFitOptions& opt = QKFitOptions(),
                         const MaternKernel* fixed_kernel = nullptr) {
  require(X.rows() == pseudo_y.size() && X.rows() == noise_var.size(),
          "fit_qk_gp: inconsistent design sizes");
  require(noise_var.minCoeff() >= 0.0, "fit_qk_gp: negative noise variance");
  const int D = static_cast<int>(X.cols());

  QKModel model;
  model.X = X;
  model.pseudo_y = pseudo_y;
  model.noise_var = noise_var;
  model.offset = pseudo_y.mean();
  const Vector centered = pseudo_y.array() - model.offset;

  if (fixed_kernel != nullptr) {
    model.kernel = *fixed_kernel;
  } else if (!opt.fit_hyperparameters) {
    Vector theta(D);
    for (int d = 0; d < D; ++d) {
      const double w = box.upper[d] - box.lower[d];
      theta[d] = 0.04 * w * w;
    }
    const double vy = std::max(1e-8, centered.squaredNorm() /
                                         std::max(1, model.count() - 1));
    model.kernel = MaternKernel(2.5, theta, vy);
  } else {
    // search box in log space: per-dimension squared lengthscales spanning
    // 5% to 2x of the box width, variance spanning a wide band around the
    // empirical variance of the centered estimates
    const double vy = std::max(1e-8, centered.squaredNorm() /
                                         std::max(1, model.count() - 1));
    Vector lo(D + 1), hi(D + 1);
    for (int d = 0; d < D; ++d) {
      const double w = box.upper[d] - box.lower[d];
      lo[d] = std::log(0.0025 * w * w);  // (0.05 w)^2
      hi[d] = std::log(4.0 * w * w);     // (2 w)^2
    }
    lo[D] = std::log(1e-4 * vy);
    hi[D] = std::log(1e2 * vy);
    const Box hyper_box{lo, hi};

    auto mll_batch = [&](const Matrix& P) -> Vector {
      Vector out(P.rows());
      for (int i = 0; i < P.rows(); ++i) {
        Vector theta(D);
        for (int d = 0; d < D; ++d) theta[d] = std::exp(P(i, d));
        const MaternKernel kern(2.5, theta, std::exp(P(i, D)));
        out[i] = qk_log_marginal(kern, X, centered, noise_var);
      }
      return out;
    };
    const InnerOptResult res =
        maximize_pattern_search(mll_batch, hyper_box, rng, opt.hyper_opt);
    Vector theta(D);
    for (int d = 0; d < D; ++d) theta[d] = std::exp(res.x[d]);
    model.kernel = MaternKernel(2.5, theta, std::exp(res.x[D]));
  }

  detail::qk_factorize(model);
  return model;
}

// Closed-form expected improvement for maximization.
inline double expected_improvement(double mean, double variance, double best) {
  const double s = std::sqrt(std::max(0.0, variance));
  const double d = mean - best;
  if (s < 1e-14) return std::max(0.0, d);
  const double z = d / s;
  return d * normal_cdf(z) + s * normal_pdf(z);
}

inline double expected_improvement(const QKModel& model, const Vector& x,
                                   double best) {
  Matrix one(1, x.size());
  one.row(0) = x.transpose();
  const auto [mean, var] = model.predict(one);
  return expected_improvement(mean[0], var[0], best);
}

// Running state of one quantile-kriging optimisation.
struct QKState {
  ReplicatedDesign design;
  Vector pseudo_y;
  Vector pseudo_var;
  QKModel model;
  long evaluations = 0;
};

using SamplerFn = std::function<double(const Vector&, Rng&)>;

inline ReplicatedDesign make_replicated_design(const SamplerFn& sampler,
                                               const Box& box, int k, int r,
                                               Rng& rng) {
  require(k >= box.dim() + 1, "make_replicated_design: need at least D+1 points");
  require(r >= 2, "make_replicated_design: need at least 2 replicates");
  ReplicatedDesign design;
  design.points = latin_hypercube(box, k, rng);
  design.observations.resize(k, r);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < r; ++j)
      design.observations(i, j) = sampler(design.points.row(i).transpose(), rng);
  return design;
}

inline QKState make_qk_state(ReplicatedDesign design, const TailMeasure& measure,
                             const Box& box, Rng& rng,
                             const QKFitOptions& opt = QKFitOptions()) {
  design.validate();
  QKState state;
  state.evaluations =
      static_cast<long>(design.count()) * design.replicates();
  state.pseudo_y.resize(design.count());
  state.pseudo_var.resize(design.count());
  for (int i = 0; i < design.count(); ++i) {
    const auto [est, var] = pseudo_observe(
        measure, design.observations.row(i).transpose(), opt.n_bootstrap, rng);
    state.pseudo_y[i] = est;
    state.pseudo_var[i] = var;
  }
  state.design = std::move(design);
  state.model =
      fit_qk_gp(state.design.points, state.pseudo_y, state.pseudo_var, box, rng, opt);
  return state;
}

// `best` for the improvement target: largest posterior mean over the design.
inline double qk_incumbent(const QKState& state) {
  const auto [mean, var] = state.model.predict(state.design.points);
  return mean.maxCoeff();
}

// One EI step: maximize EI, replicate Y there, append the pseudo-observation,
// refit. Returns false (leaving the state untouched) when the remaining
// budget cannot fund a full replicate batch.
inline bool qk_bo_step(QKState& state, const SamplerFn& sampler,
                       const TailMeasure& measure, const Box& box,
                       long budget_left, Rng& rng,
                       const QKFitOptions& opt = QKFitOptions(),
                       const InnerOptions& acq_opt = InnerOptions()) {
  const int r = state.design.replicates();
  if (budget_left < r) return false;

  const double best = qk_incumbent(state);
  auto ei_batch = [&](const Matrix& P) -> Vector {
    const auto [mean, var] = state.model.predict(P);
    Vector out(P.rows());
    for (int i = 0; i < P.rows(); ++i)
      out[i] = expected_improvement(mean[i], var[i], best);
    return out;
  };
  const Vector x_new = maximize_pattern_search(ei_batch, box, rng, acq_opt).x;

  Vector obs(r);
  for (int j = 0; j < r; ++j) obs[j] = sampler(x_new, rng);
  state.evaluations += r;

  const int k = state.design.count();
  state.design.points.conservativeResize(k + 1, Eigen::NoChange);
  state.design.points.row(k) = x_new.transpose();
  state.design.observations.conservativeResize(k + 1, Eigen::NoChange);
  state.design.observations.row(k) = obs.transpose();

  const auto [est, var] = pseudo_observe(measure, obs, opt.n_bootstrap, rng);
  state.pseudo_y.conservativeResize(k + 1);
  state.pseudo_y[k] = est;
  state.pseudo_var.conservativeResize(k + 1);
  state.pseudo_var[k] = var;

  state.model =
      fit_qk_gp(state.design.points, state.pseudo_y, state.pseudo_var, box, rng, opt);
  return true;
}

}  // namespace tailbo
