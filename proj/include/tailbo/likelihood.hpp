#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <vector>

#include "tailbo/box.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/math.hpp"

namespace tailbo {

enum class MeasureKind { Quantile, Expectile };

// The risk functional being estimated and optimised: a conditional quantile
// or expectile of order tau.
struct TailMeasure {
  MeasureKind kind = MeasureKind::Quantile;
  double tau = 0.5;

  TailMeasure() = default;
  TailMeasure(MeasureKind k, double t) : kind(k), tau(t) {
    require(tau > 0.0 && tau < 1.0, "TailMeasure: tau must lie strictly in (0,1)");
  }

  static TailMeasure quantile(double tau) { return {MeasureKind::Quantile, tau}; }
  static TailMeasure expectile(double tau) { return {MeasureKind::Expectile, tau}; }
};

// Pinball loss (tau - 1_{xi<0}) * xi. Convex, piecewise linear, zero at the
// origin; its population minimizer is the tau-quantile.
inline double pinball_loss(double tau, double xi) {
  return (tau - (xi < 0.0 ? 1.0 : 0.0)) * xi;
}

// Subgradient convention at the kink: slope tau (the right derivative).
inline double pinball_loss_grad(double tau, double xi) {
  return xi < 0.0 ? tau - 1.0 : tau;
}

// Square pinball loss |tau - 1_{xi<0}| * xi^2; C1 with zero derivative at 0.
inline double square_pinball_loss(double tau, double xi) {
  return std::abs(tau - (xi < 0.0 ? 1.0 : 0.0)) * xi * xi;
}

inline double square_pinball_loss_grad(double tau, double xi) {
  return 2.0 * std::abs(tau - (xi < 0.0 ? 1.0 : 0.0)) * xi;
}

// Positivity link for the scale latent: sigma = softplus(r).
inline double scale_link(double r) { return softplus(r); }
inline double scale_link_grad(double r) { return sigmoid(r); }

// Log density of y under the asymmetric Laplace (quantile case) or the
// asymmetric Gaussian (expectile case) with location g and scale sigma.
inline double log_density(const TailMeasure& measure, double y, double g, double sigma) {
  require(sigma > 0.0, "log_density: sigma must be positive");
  const double tau = measure.tau;
  const double xi = y - g;
  if (measure.kind == MeasureKind::Quantile) {
    return std::log(tau * (1.0 - tau)) - std::log(sigma) - pinball_loss(tau, xi) / sigma;
  }
  const double log_c = 0.5 * std::log(2.0 * tau * (1.0 - tau)) - std::log(sigma) -
                       0.5 * std::log(kPi) - std::log(std::sqrt(tau) + std::sqrt(1.0 - tau));
  return log_c - square_pinball_loss(tau, xi) / (2.0 * sigma * sigma);
}

// Partial derivatives of log_density with respect to g and sigma.
struct LogDensityGrad {
  double value;
  double d_g;
  double d_sigma;
};

inline LogDensityGrad log_density_grad(const TailMeasure& measure, double y, double g,
                                       double sigma) {
  const double tau = measure.tau;
  const double xi = y - g;
  LogDensityGrad out{};
  if (measure.kind == MeasureKind::Quantile) {
    const double loss = pinball_loss(tau, xi);
    out.value = std::log(tau * (1.0 - tau)) - std::log(sigma) - loss / sigma;
    out.d_g = pinball_loss_grad(tau, xi) / sigma;
    out.d_sigma = -1.0 / sigma + loss / (sigma * sigma);
  } else {
    const double loss = square_pinball_loss(tau, xi);
    const double log_c = 0.5 * std::log(2.0 * tau * (1.0 - tau)) - std::log(sigma) -
                         0.5 * std::log(kPi) -
                         std::log(std::sqrt(tau) + std::sqrt(1.0 - tau));
    out.value = log_c - loss / (2.0 * sigma * sigma);
    out.d_g = square_pinball_loss_grad(tau, xi) / (2.0 * sigma * sigma);
    out.d_sigma = -1.0 / sigma + loss / (sigma * sigma * sigma);
  }
  return out;
}

// Gauss-Hermite rule in the physicists' convention (weight e^{-t^2}), built
// by the Golub-Welsch eigendecomposition of the Jacobi matrix. Weights sum
// to sqrt(pi).
struct QuadratureRule {
  Vector abscissae;
  Vector weights;

  int nodes_per_dim() const { return static_cast<int>(abscissae.size()); }

  static QuadratureRule gauss_hermite(int n) {
    require(n >= 1, "gauss_hermite: need at least one node");
    Matrix J = Matrix::Zero(n, n);
    for (int k = 1; k < n; ++k) {
      const double off = std::sqrt(k / 2.0);
      J(k, k - 1) = off;
      J(k - 1, k) = off;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(J);
    QuadratureRule rule;
    rule.abscissae = eig.eigenvalues();
    rule.weights.resize(n);
    const double sqrt_pi = std::sqrt(kPi);
    for (int i = 0; i < n; ++i) {
      const double v0 = eig.eigenvectors()(0, i);
      rule.weights[i] = sqrt_pi * v0 * v0;
    }
    return rule;
  }
};

inline constexpr int kDefaultQuadratureNodes = 15;

// Tensor-product Gauss-Hermite approximation of
//   E_{g ~ N(mean_g, var_g), r ~ N(mean_r, var_r)}[ log p(y | g, softplus(r)) ].
// A zero variance collapses the corresponding dimension, so the result is
// exact when both variances vanish.
struct ExpectedLogDensity {
  double value;
  double d_mean_g, d_var_g;
  double d_mean_r, d_var_r;
};

inline ExpectedLogDensity expected_log_density_grad(const TailMeasure& measure, double y,
                                                    double mean_g, double var_g,
                                                    double mean_r, double var_r,
                                                    const QuadratureRule& quad) {
  require(var_g >= 0.0 && var_r >= 0.0, "expected_log_density: negative variance");
  constexpr double kDegenerate = 0.0;
  const int nq = quad.nodes_per_dim();
  const double sg = std::sqrt(2.0 * var_g);
  const double sr = std::sqrt(2.0 * var_r);
  const bool deg_g = !(var_g > kDegenerate);
  const bool deg_r = !(var_r > kDegenerate);
  const double inv_sqrt_pi = 1.0 / std::sqrt(kPi);

  const int ng = deg_g ? 1 : nq;
  const int nr = deg_r ? 1 : nq;

  ExpectedLogDensity out{};
  for (int a = 0; a < ng; ++a) {
    const double tg = deg_g ? 0.0 : quad.abscissae[a];
    const double wg = deg_g ? 1.0 : quad.weights[a] * inv_sqrt_pi;
    const double g = mean_g + sg * tg;
    for (int b = 0; b < nr; ++b) {
      const double tr = deg_r ? 0.0 : quad.abscissae[b];
      const double wr = deg_r ? 1.0 : quad.weights[b] * inv_sqrt_pi;
      const double r = mean_r + sr * tr;
      const double sigma = scale_link(r);
      const LogDensityGrad ld = log_density_grad(measure, y, g, sigma);
      const double w = wg * wr;
      const double d_r = ld.d_sigma * scale_link_grad(r);
      out.value += w * ld.value;
      out.d_mean_g += w * ld.d_g;
      out.d_mean_r += w * d_r;
      if (!deg_g) out.d_var_g += w * ld.d_g * tg / sg;
      if (!deg_r) out.d_var_r += w * d_r * tr / sr;
    }
  }
  return out;
}

inline double expected_log_density(const TailMeasure& measure, double y, double mean_g,
                                   double var_g, double mean_r, double var_r,
                                   const QuadratureRule& quad) {
  return expected_log_density_grad(measure, y, mean_g, var_g, mean_r, var_r, quad).value;
}

// Minimizer of the empirical risk (1/n) sum_i l(y_i - q).
//  - Quantile: the ceil(n*tau)-th order statistic, always a minimizer of the
//    piecewise-linear risk.
//  - Expectile: unique root of tau*sum(y_i-e)_+ = (1-tau)*sum(e-y_i)_+,
//    bracketed by [min, max] and found by bisection.
inline double empirical_minimizer(const TailMeasure& measure, std::vector<double> sample) {
  require(!sample.empty(), "empirical_minimizer: empty sample");
  const int n = static_cast<int>(sample.size());
  if (measure.kind == MeasureKind::Quantile) {
    int k = static_cast<int>(std::ceil(n * measure.tau));
    k = std::clamp(k, 1, n);
    std::nth_element(sample.begin(), sample.begin() + (k - 1), sample.end());
    return sample[k - 1];
  }

  const auto [mn_it, mx_it] = std::minmax_element(sample.begin(), sample.end());
  double lo = *mn_it, hi = *mx_it;
  if (lo == hi) return lo;
  const double tau = measure.tau;
  const auto balance = [&](double e) {
    double upper = 0.0, lower = 0.0;
    for (double y : sample) {
      if (y > e)
        upper += y - e;
      else
        lower += e - y;
    }
    return tau * upper - (1.0 - tau) * lower;
  };
  const double tol = 1e-10 * (hi - lo);
  for (int it = 0; it < 200 && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (balance(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline double empirical_minimizer(const TailMeasure& measure, const Vector& sample) {
  return empirical_minimizer(measure,
                             std::vector<double>(sample.data(), sample.data() + sample.size()));
}

}  // namespace tailbo
