#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "tailbo/box.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/math.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

// Anisotropic Matern kernel
//
//   k(x,x') = sigma * (2^{1-nu} / Gamma(nu)) * rho^nu * K_nu(rho),
//   rho^2   = sum_d (x_d - x'_d)^2 / theta_d,
//
// restricted to the half-integer orders nu in {1/2, 3/2, 5/2} where the
// Bessel factor collapses to polynomial-times-exponential closed forms.
// theta_d are the diagonal entries of the distance-scaling matrix, so the
// correlation length along dimension d is sqrt(theta_d).
class MaternKernel {
 public:
  MaternKernel(double nu, Vector lengthscales, double variance)
      : nu_(nu), lengthscales_(std::move(lengthscales)), variance_(variance) {
    require(nu_ == 0.5 || nu_ == 1.5 || nu_ == 2.5,
            "MaternKernel: nu must be one of 1/2, 3/2, 5/2");
    require(lengthscales_.size() >= 1, "MaternKernel: empty lengthscales");
    for (int d = 0; d < lengthscales_.size(); ++d)
      require(std::isfinite(lengthscales_[d]) && lengthscales_[d] > 0.0,
              "MaternKernel: lengthscales must be strictly positive");
    require(std::isfinite(variance_) && variance_ > 0.0,
            "MaternKernel: variance must be strictly positive");
  }

  double nu() const { return nu_; }
  const Vector& lengthscales() const { return lengthscales_; }
  double variance() const { return variance_; }
  int dim() const { return static_cast<int>(lengthscales_.size()); }

  // Correlation as a function of the scaled distance rho; radial(0) = 1.
  double radial(double rho) const {
    const double e = std::exp(-rho);
    if (nu_ == 0.5) return e;
    if (nu_ == 1.5) return (1.0 + rho) * e;
    return (1.0 + rho + rho * rho / 3.0) * e;
  }

  // d radial / d rho.
  double radial_grad(double rho) const {
    const double e = std::exp(-rho);
    if (nu_ == 0.5) return -e;
    if (nu_ == 1.5) return -rho * e;
    return -(rho * (1.0 + rho) / 3.0) * e;
  }

  double scaled_distance(const Vector& x, const Vector& y) const {
    require(x.size() == dim() && y.size() == dim(),
            "MaternKernel: point dimension mismatch");
    double s = 0.0;
    for (int d = 0; d < dim(); ++d) {
      const double diff = x[d] - y[d];
      s += diff * diff / lengthscales_[d];
    }
    return std::sqrt(s);
  }

  double eval(const Vector& x, const Vector& y) const {
    return variance_ * radial(scaled_distance(x, y));
  }

  double operator()(const Vector& x, const Vector& y) const { return eval(x, y); }

  // Matrix of scaled distances between the rows of X (n x D) and Y (m x D).
  Matrix scaled_distances(const Matrix& X, const Matrix& Y) const {
    require(X.cols() == dim() && Y.cols() == dim(),
            "MaternKernel: matrix column count must equal dimension");
    const Vector inv_theta = lengthscales_.cwiseInverse();
    const Matrix Xs = X * inv_theta.cwiseSqrt().asDiagonal();
    const Matrix Ys = Y * inv_theta.cwiseSqrt().asDiagonal();
    const Vector xn = Xs.rowwise().squaredNorm();
    const Vector yn = Ys.rowwise().squaredNorm();
    Matrix D2 = (-2.0 * Xs * Ys.transpose());
    D2.colwise() += xn;
    D2.rowwise() += yn.transpose();
    return D2.cwiseMax(0.0).cwiseSqrt();
  }

  Matrix cross(const Matrix& X, const Matrix& Y) const {
    Matrix K = scaled_distances(X, Y);
    for (int j = 0; j < K.cols(); ++j)
      for (int i = 0; i < K.rows(); ++i) K(i, j) = variance_ * radial(K(i, j));
    return K;
  }

  // Symmetric Gram matrix over the rows of X with `jitter` added on the
  // diagonal. Concentrated point sets need the jitter to stay factorizable.
  Matrix gram(const Matrix& X, double jitter) const {
    require(jitter >= 0.0, "MaternKernel::gram: jitter must be non-negative");
    require(X.allFinite(), "MaternKernel::gram: non-finite inputs");
    const int n = static_cast<int>(X.rows());
    Matrix K = scaled_distances(X, X);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) K(i, j) = variance_ * radial(K(i, j));
    }
    // Enforce exact symmetry and the exact diagonal.
    K = 0.5 * (K + K.transpose()).eval();
    K.diagonal().setConstant(variance_ + jitter);
    return K;
  }

  double default_jitter() const { return 1e-6 * variance_; }

 private:
  double nu_;
  Vector lengthscales_;
  double variance_;
};

// Random Fourier feature basis for a stationary kernel:
//   phi_i(x) = sqrt(2 * scale / m) * cos(w_i . x + b_i).
// Bochner normalization requires scale = k(x,x), i.e. the kernel variance.
struct RFFBasis {
  Matrix frequencies;  // m x D, rows are spectral samples
  Vector phases;       // m, each in [0, 2pi)
  double scale = 1.0;  // alpha

  int feature_count() const { return static_cast<int>(frequencies.rows()); }
  int dim() const { return static_cast<int>(frequencies.cols()); }
};

// Draws m i.i.d. rows from the spectral law of the Matern correlation above,
// p(w) proportional to (1 + w^T diag(theta) w)^{-(D/2 + nu)}: the multivariate
// t with 2*nu degrees of freedom, location 0 and shape matrix
// diag(1/(2*nu*theta_d)). Sampled as w = z / sqrt(u) with
// z ~ N(0, diag(1/theta_d)) and u ~ chi^2_{2nu}. Valid for any nu > 0.
inline Matrix sample_matern_spectrum(double nu, const Vector& lengthscales, int m,
                                     Rng& rng) {
  require(nu > 0.0, "sample_matern_spectrum: nu must be positive");
  require(m >= 1, "sample_matern_spectrum: m must be at least 1");
  const int D = static_cast<int>(lengthscales.size());
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::chi_squared_distribution<double> chi2(2.0 * nu);
  Matrix W(m, D);
  const Vector inv_sqrt_theta = lengthscales.cwiseSqrt().cwiseInverse();
  for (int i = 0; i < m; ++i) {
    const double t_scale = 1.0 / std::sqrt(chi2(rng));
    for (int d = 0; d < D; ++d) W(i, d) = gauss(rng) * inv_sqrt_theta[d] * t_scale;
  }
  return W;
}

inline RFFBasis spectral_sample(const MaternKernel& kernel, int m, Rng& rng) {
  RFFBasis basis;
  basis.frequencies = sample_matern_spectrum(kernel.nu(), kernel.lengthscales(), m, rng);
  basis.phases.resize(m);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * kPi);
  for (int i = 0; i < m; ++i) basis.phases[i] = unif(rng);
  basis.scale = kernel.variance();
  return basis;
}

inline Vector rff_features(const RFFBasis& basis, const Vector& x) {
  require(x.size() == basis.dim(), "rff_features: point dimension mismatch");
  const double amp = std::sqrt(2.0 * basis.scale / basis.feature_count());
  return (((basis.frequencies * x) + basis.phases).array().cos() * amp).matrix();
}

// Feature matrix over the rows of X; returns m x n (one column per point).
inline Matrix rff_features(const RFFBasis& basis, const Matrix& X) {
  require(X.cols() == basis.dim(), "rff_features: matrix dimension mismatch");
  const double amp = std::sqrt(2.0 * basis.scale / basis.feature_count());
  Matrix F = basis.frequencies * X.transpose();
  F.colwise() += basis.phases;
  return (F.array().cos() * amp).matrix();
}

}  // namespace tailbo
