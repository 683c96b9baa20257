#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "tailbo/box.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/kernel.hpp"
#include "tailbo/likelihood.hpp"
#include "tailbo/math.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

namespace diagnostics {
inline std::atomic<long>& variance_clamp_count() {
  static std::atomic<long> count{0};
  return count;
}
}  // namespace diagnostics

// Pseudo-input locations shared by both latent processes.
struct InducingSet {
  Matrix Z;  // N x D

  int count() const { return static_cast<int>(Z.rows()); }
  int dim() const { return static_cast<int>(Z.cols()); }
};

// Gaussian variational factor N(mean, chol_cov * chol_cov^T). In the
// whitened representation the parameterized variable has prior N(0, I);
// unwhitened factors describe the inducing values directly and exist as a
// testing view.
struct VariationalFactor {
  Vector mean;
  Matrix chol_cov;  // lower triangular, strictly positive diagonal
  bool whitened = true;

  int size() const { return static_cast<int>(mean.size()); }

  static VariationalFactor identity(int n, double diag = 1.0) {
    VariationalFactor f;
    f.mean = Vector::Zero(n);
    f.chol_cov = Matrix::Identity(n, n) * diag;
    f.whitened = true;
    return f;
  }
};

struct Dataset {
  Matrix X;  // n x D
  Vector y;  // n

  int size() const { return static_cast<int>(y.size()); }
};

// Two latent sparse GPs (location g and log-scale r) chained through an
// asymmetric likelihood selected by `measure`.
struct ChainedModel {
  MaternKernel kernel_g;
  MaternKernel kernel_r;
  InducingSet inducing;
  VariationalFactor factor_g;
  VariationalFactor factor_r;
  TailMeasure measure;

  void validate() const {
    const int n = inducing.count();
    require(n >= 1, "ChainedModel: need at least one inducing point");
    require(kernel_g.dim() == inducing.dim() && kernel_r.dim() == inducing.dim(),
            "ChainedModel: kernel/inducing dimension mismatch");
    require(factor_g.size() == n && factor_r.size() == n,
            "ChainedModel: variational factors must match inducing count");
    require(factor_g.whitened && factor_r.whitened,
            "ChainedModel: factors must be whitened");
  }
};

struct PredictiveMarginals {
  Vector mean_g, var_g;
  Vector mean_r, var_r;
};

namespace detail {

constexpr double kVarianceClamp = 1e-12;

// Cholesky of K + jitter*I with x10 jitter escalation up to 1e-2 * variance.
inline Matrix chol_with_escalation(const Matrix& K_nojitter, double variance,
                                   double* jitter_used = nullptr) {
  double jitter = 1e-6 * variance;
  const double max_jitter = 1e-2 * variance;
  while (true) {
    Matrix K = K_nojitter;
    K.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(K);
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = jitter;
      return llt.matrixL();
    }
    if (jitter >= max_jitter)
      throw numerical_error("Cholesky failed after jitter escalation to " +
                            std::to_string(jitter));
    jitter *= 10.0;
  }
}

inline Matrix kernel_gram_nojitter(const MaternKernel& k, const Matrix& X) {
  Matrix K = k.scaled_distances(X, X);
  for (int j = 0; j < K.cols(); ++j)
    for (int i = 0; i < K.rows(); ++i) K(i, j) = k.variance() * k.radial(K(i, j));
  K = 0.5 * (K + K.transpose()).eval();
  K.diagonal().setConstant(k.variance());
  return K;
}

}  // namespace detail

// Map an unwhitened factor (mean mu, covariance S = C_u C_u^T) to whitened
// coordinates via u = L v: nu = L^{-1} mu, C = L^{-1} C_u.
inline VariationalFactor whiten(const VariationalFactor& factor, const Matrix& L) {
  require(!factor.whitened, "whiten: factor already whitened");
  VariationalFactor out;
  out.mean = L.triangularView<Eigen::Lower>().solve(factor.mean);
  out.chol_cov = L.triangularView<Eigen::Lower>().solve(factor.chol_cov);
  out.whitened = true;
  return out;
}

inline VariationalFactor unwhiten(const VariationalFactor& factor, const Matrix& L) {
  require(factor.whitened, "unwhiten: factor already unwhitened");
  VariationalFactor out;
  out.mean = L.triangularView<Eigen::Lower>() * factor.mean;
  out.chol_cov = L.triangularView<Eigen::Lower>() * factor.chol_cov;
  out.whitened = false;
  return out;
}

// KL(N(mean, S) || prior): whitened factors against N(0, I), unwhitened
// against N(0, K_uu).
inline double kl_term(const VariationalFactor& factor, const Matrix& K_uu = Matrix()) {
  const int n = factor.size();
  if (factor.whitened) {
    double log_det = 0.0;
    for (int i = 0; i < n; ++i) log_det += std::log(factor.chol_cov(i, i));
    return 0.5 * (factor.chol_cov.squaredNorm() + factor.mean.squaredNorm() - n) -
           log_det;
  }
  require(K_uu.rows() == n && K_uu.cols() == n, "kl_term: K_uu size mismatch");
  Eigen::LLT<Matrix> llt(K_uu);
  require(llt.info() == Eigen::Success, "kl_term: K_uu not positive definite");
  const Matrix L = llt.matrixL();
  const Matrix Ls = L.triangularView<Eigen::Lower>().solve(factor.chol_cov);
  const Vector lm = L.triangularView<Eigen::Lower>().solve(factor.mean);
  double log_det_ratio = 0.0;  // log det K_uu - log det S
  for (int i = 0; i < n; ++i)
    log_det_ratio += 2.0 * (std::log(L(i, i)) - std::log(factor.chol_cov(i, i)));
  return 0.5 * (Ls.squaredNorm() + lm.squaredNorm() - n + log_det_ratio);
}

// Precomputes per-latent projections so repeated prediction costs one kernel
// cross-covariance and one symmetric matvec per query point.
class Predictor {
 public:
  explicit Predictor(const ChainedModel& model) : model_(&model) {
    model.validate();
    build(model.kernel_g, model.factor_g, lat_g_);
    build(model.kernel_r, model.factor_r, lat_r_);
  }

  PredictiveMarginals predict(const Matrix& Xq) const {
    require(Xq.cols() == model_->inducing.dim(), "predict: query dimension mismatch");
    require(Xq.allFinite(), "predict: query points must be finite");
    PredictiveMarginals out;
    eval(model_->kernel_g, lat_g_, Xq, out.mean_g, out.var_g);
    eval(model_->kernel_r, lat_r_, Xq, out.mean_r, out.var_r);
    return out;
  }

  // Marginals of the latent g: the surrogate posterior on the tail measure.
  std::pair<Vector, Vector> measure_marginals(const Matrix& Xq) const {
    require(Xq.cols() == model_->inducing.dim(),
            "measure_marginals: query dimension mismatch");
    Vector mean, var;
    eval(model_->kernel_g, lat_g_, Xq, mean, var);
    return {std::move(mean), std::move(var)};
  }

  const Matrix& chol_g() const { return lat_g_.L; }
  const Matrix& chol_r() const { return lat_r_.L; }
  const ChainedModel& model() const { return *model_; }

 private:
  struct Latent {
    Matrix L;   // chol(K_uu + jitter)
    Vector u0;  // L^{-T} nu, so mean(x) = k(x,Z) u0
    Matrix M;   // L^{-T} (I - C C^T) L^{-1}, so var(x) = sigma_M - k^T M k
  };

  void build(const MaternKernel& kernel, const VariationalFactor& factor, Latent& lat) {
    const Matrix K = detail::kernel_gram_nojitter(kernel, model_->inducing.Z);
    lat.L = detail::chol_with_escalation(K, kernel.variance());
    lat.u0 = lat.L.transpose().triangularView<Eigen::Upper>().solve(factor.mean);
    const int n = factor.size();
    const Matrix inner =
        Matrix::Identity(n, n) - factor.chol_cov * factor.chol_cov.transpose();
    const Matrix T = lat.L.transpose().triangularView<Eigen::Upper>().solve(inner);
    lat.M = lat.L.transpose()
                .triangularView<Eigen::Upper>()
                .solve(T.transpose())
                .transpose();
    lat.M = 0.5 * (lat.M + lat.M.transpose()).eval();
  }

  void eval(const MaternKernel& kernel, const Latent& lat, const Matrix& Xq, Vector& mean,
            Vector& var) const {
    const Matrix Kxu = kernel.cross(Xq, model_->inducing.Z);  // q x N
    mean = Kxu * lat.u0;
    const Matrix T = lat.M.selfadjointView<Eigen::Lower>() * Kxu.transpose();
    var.resize(Xq.rows());
    long clamped = 0;
    for (int i = 0; i < Xq.rows(); ++i) {
      double v = kernel.variance() - Kxu.row(i).dot(T.col(i));
      if (v < detail::kVarianceClamp) {
        v = detail::kVarianceClamp;
        ++clamped;
      }
      var[i] = v;
    }
    if (clamped > 0) diagnostics::variance_clamp_count() += clamped;
  }

  const ChainedModel* model_;
  Latent lat_g_, lat_r_;
};

inline PredictiveMarginals predict(const ChainedModel& model, const Matrix& Xq) {
  return Predictor(model).predict(Xq);
}

// Posterior marginals of g at the query points, the quantity the acquisition
// strategies consume.
inline std::pair<Vector, Vector> posterior_on_measure(const ChainedModel& model,
                                                      const Matrix& Xq) {
  return Predictor(model).measure_marginals(Xq);
}

// ---------------------------------------------------------------------------
// ELBO and gradients
// ---------------------------------------------------------------------------

struct LatentGradient {
  Vector d_mean;              // wrt whitened nu
  Vector d_chol_raw;          // wrt packed lower triangle, softplus-raw diagonal
  Vector d_log_lengthscales;  // wrt log theta_d
  double d_log_variance = 0;  // wrt log sigma_M
};

struct ElboGradient {
  double value = 0.0;
  LatentGradient g, r;
};

namespace detail {

inline int tri_size(int n) { return n * (n + 1) / 2; }
inline int tri_index(int i, int j) { return i * (i + 1) / 2 + j; }

// Reverse-mode rule for K = L L^T (Murray 2016): maps dF/dL to the symmetric
// dF/dK.
inline Matrix chol_backward(const Matrix& L, const Matrix& L_bar) {
  Matrix Phi = (L.transpose() * L_bar).eval();
  Phi = Phi.triangularView<Eigen::Lower>();
  Phi.diagonal() *= 0.5;
  const Matrix T = L.transpose().triangularView<Eigen::Upper>().solve(Phi);
  Matrix S = L.transpose()
                 .triangularView<Eigen::Upper>()
                 .solve(T.transpose())
                 .transpose();
  return 0.5 * (S + S.transpose());
}

// Fixed-kernel projection of one latent onto the full dataset; columns are
// sliced per minibatch while only the variational parameters move.
struct KernelProjection {
  Matrix L;       // chol(K_uu + jitter)
  Matrix A_full;  // L^{-1} K_uX over the whole dataset
};

inline KernelProjection project_latent(const MaternKernel& kernel, const Matrix& Z,
                                       const Matrix& X) {
  KernelProjection proj;
  proj.L = chol_with_escalation(kernel_gram_nojitter(kernel, Z), kernel.variance());
  proj.A_full = proj.L.triangularView<Eigen::Lower>().solve(kernel.cross(Z, X));
  return proj;
}

// Per-latent forward pass over a batch of input rows.
struct LatentForward {
  Matrix P_uu;   // scaled distances between inducing points
  Matrix K_uu;   // with jitter on the diagonal
  Matrix L;      // chol(K_uu)
  Matrix P_ux;   // scaled distances inducing -> batch
  Matrix K_ux;   // N x b
  Matrix A;      // L^{-1} K_ux
  Matrix B;      // C^T A
  Vector mean;   // b
  Vector var;    // b, clamped
  std::vector<char> clamped;
};

inline void latent_forward(const MaternKernel& kernel, const Matrix& Z,
                           const VariationalFactor& factor, const Matrix& Xb,
                           LatentForward& fwd, bool need_kernel_grads,
                           const KernelProjection* cached = nullptr,
                           const std::vector<int>* batch_index = nullptr) {
  const double sigma = kernel.variance();
  if (cached) {
    fwd.L = cached->L;
    if (batch_index) {
      fwd.A.resize(cached->A_full.rows(), static_cast<int>(batch_index->size()));
      for (std::size_t j = 0; j < batch_index->size(); ++j)
        fwd.A.col(static_cast<int>(j)) = cached->A_full.col((*batch_index)[j]);
    } else {
      fwd.A = cached->A_full;
    }
  } else {
    fwd.P_uu = kernel.scaled_distances(Z, Z);
    Matrix K = fwd.P_uu;
    for (int j = 0; j < K.cols(); ++j)
      for (int i = 0; i < K.rows(); ++i) K(i, j) = sigma * kernel.radial(K(i, j));
    K = 0.5 * (K + K.transpose()).eval();
    K.diagonal().setConstant(sigma);
    double jitter = 0.0;
    fwd.L = chol_with_escalation(K, sigma, &jitter);
    K.diagonal().array() += jitter;
    fwd.K_uu = std::move(K);

    fwd.P_ux = kernel.scaled_distances(Z, Xb);
    fwd.K_ux = fwd.P_ux;
    for (int j = 0; j < fwd.K_ux.cols(); ++j)
      for (int i = 0; i < fwd.K_ux.rows(); ++i)
        fwd.K_ux(i, j) = sigma * kernel.radial(fwd.K_ux(i, j));
    fwd.A = fwd.L.triangularView<Eigen::Lower>().solve(fwd.K_ux);
    if (!need_kernel_grads) {
      fwd.P_uu.resize(0, 0);
      fwd.P_ux.resize(0, 0);
      fwd.K_uu.resize(0, 0);
      fwd.K_ux.resize(0, 0);
    }
  }

  fwd.B = factor.chol_cov.transpose() * fwd.A;
  const int b = static_cast<int>(fwd.A.cols());
  fwd.mean = fwd.A.transpose() * factor.mean;
  fwd.var.resize(b);
  fwd.clamped.assign(b, 0);
  for (int i = 0; i < b; ++i) {
    double v = sigma - fwd.A.col(i).squaredNorm() + fwd.B.col(i).squaredNorm();
    if (v < kVarianceClamp) {
      v = kVarianceClamp;
      fwd.clamped[i] = 1;
      diagnostics::variance_clamp_count()++;
    }
    fwd.var[i] = v;
  }
}

// Contraction of an adjoint matrix against the kernel's log-lengthscale and
// log-variance partials. Kbar is the full adjoint, K the kernel values, P the
// scaled distances, Xr/Xc the row/column inputs.
inline void accumulate_kernel_grads(const MaternKernel& kernel, const Matrix& Kbar,
                                    const Matrix& P, const Matrix& K, const Matrix& Xr,
                                    const Matrix& Xc, Vector& d_log_theta,
                                    double& d_log_sigma) {
  const double sigma = kernel.variance();
  d_log_sigma += (Kbar.array() * K.array()).sum();

  // G = Kbar * sigma * radial'(rho) / rho, with the rho -> 0 limit taken as
  // zero (the squared-offset numerator vanishes there too).
  Matrix G(P.rows(), P.cols());
  for (int j = 0; j < P.cols(); ++j)
    for (int i = 0; i < P.rows(); ++i) {
      const double rho = P(i, j);
      G(i, j) = rho > 1e-14 ? Kbar(i, j) * sigma * kernel.radial_grad(rho) / rho : 0.0;
    }
  // d k / d log theta_d = sigma f'(rho) * (-(x_d - x'_d)^2 / (2 rho theta_d));
  // sum_ij G_ij (x_id - x_jd)^2 expands into three rank-one contractions.
  const Vector row_sums = G.rowwise().sum();
  const Vector col_sums = G.colwise().sum().transpose();
  for (int d = 0; d < kernel.dim(); ++d) {
    const Vector xr = Xr.col(d);
    const Vector xc = Xc.col(d);
    const double quad = row_sums.dot(xr.cwiseProduct(xr)) +
                        col_sums.dot(xc.cwiseProduct(xc)) - 2.0 * xr.dot(G * xc);
    d_log_theta[d] -= quad / (2.0 * kernel.lengthscales()[d]);
  }
}

inline void slice_batch(const Dataset& data, const std::vector<int>* minibatch,
                        Matrix& Xb, Vector& yb) {
  if (minibatch) {
    require(!minibatch->empty(), "elbo: empty minibatch");
    Xb.resize(static_cast<int>(minibatch->size()), data.X.cols());
    yb.resize(static_cast<int>(minibatch->size()));
    for (std::size_t i = 0; i < minibatch->size(); ++i) {
      const int k = (*minibatch)[i];
      require(k >= 0 && k < data.size(), "elbo: minibatch index out of range");
      Xb.row(static_cast<int>(i)) = data.X.row(k);
      yb[static_cast<int>(i)] = data.y[k];
    }
  } else {
    Xb = data.X;
    yb = data.y;
  }
}

}  // namespace detail

// ELBO over the dataset; a minibatch estimate rescales the data term by n/b
// so it stays unbiased for the full sum.
inline double elbo(const ChainedModel& model, const Dataset& data,
                   const QuadratureRule& quad,
                   const std::vector<int>* minibatch = nullptr) {
  model.validate();
  require(data.size() >= 1, "elbo: dataset must be non-empty");

  Matrix Xb;
  Vector yb;
  detail::slice_batch(data, minibatch, Xb, yb);

  detail::LatentForward fg, fr;
  detail::latent_forward(model.kernel_g, model.inducing.Z, model.factor_g, Xb, fg, false);
  detail::latent_forward(model.kernel_r, model.inducing.Z, model.factor_r, Xb, fr, false);

  double data_term = 0.0;
  for (int i = 0; i < yb.size(); ++i)
    data_term += expected_log_density(model.measure, yb[i], fg.mean[i], fg.var[i],
                                      fr.mean[i], fr.var[i], quad);
  const double scale = static_cast<double>(data.size()) / yb.size();
  return scale * data_term - kl_term(model.factor_g) - kl_term(model.factor_r);
}

namespace detail {

inline ElboGradient elbo_gradient_impl(const ChainedModel& model, const Dataset& data,
                                       const QuadratureRule& quad,
                                       const std::vector<int>* minibatch,
                                       bool kernel_grads, const KernelProjection* proj_g,
                                       const KernelProjection* proj_r) {
  Matrix Xb;
  Vector yb;
  slice_batch(data, minibatch, Xb, yb);
  const int b = static_cast<int>(yb.size());
  const double scale = static_cast<double>(data.size()) / b;

  LatentForward fg, fr;
  latent_forward(model.kernel_g, model.inducing.Z, model.factor_g, Xb, fg, kernel_grads,
                 proj_g, minibatch);
  latent_forward(model.kernel_r, model.inducing.Z, model.factor_r, Xb, fr, kernel_grads,
                 proj_r, minibatch);

  Vector dmg(b), dvg(b), dmr(b), dvr(b);
  double data_term = 0.0;
  for (int i = 0; i < b; ++i) {
    const ExpectedLogDensity e = expected_log_density_grad(
        model.measure, yb[i], fg.mean[i], fg.var[i], fr.mean[i], fr.var[i], quad);
    data_term += e.value;
    dmg[i] = scale * e.d_mean_g;
    dvg[i] = fg.clamped[i] ? 0.0 : scale * e.d_var_g;
    dmr[i] = scale * e.d_mean_r;
    dvr[i] = fr.clamped[i] ? 0.0 : scale * e.d_var_r;
  }

  ElboGradient out;
  out.value = scale * data_term - kl_term(model.factor_g) - kl_term(model.factor_r);

  const auto backward = [&](const MaternKernel& kernel, const VariationalFactor& factor,
                            const LatentForward& fwd, const Vector& dm, const Vector& dv,
                            LatentGradient& grad) {
    const int N = factor.size();
    const Matrix& C = factor.chol_cov;

    // Variational blocks; KL(N(nu, CC^T) || N(0,I)) contributes nu and
    // C - diag(1/C_ii) to the descent direction.
    grad.d_mean = fwd.A * dm - factor.mean;
    Matrix dC = 2.0 * ((fwd.A * dv.asDiagonal()) * fwd.B.transpose());
    dC -= C;
    dC.diagonal() += C.diagonal().cwiseInverse();
    grad.d_chol_raw.resize(tri_size(N));
    for (int i = 0; i < N; ++i)
      for (int j = 0; j <= i; ++j) {
        double v = dC(i, j);
        if (i == j) v *= sigmoid(softplus_inv(C(i, i)));
        grad.d_chol_raw[tri_index(i, j)] = v;
      }

    grad.d_log_lengthscales = Vector::Zero(kernel.dim());
    grad.d_log_variance = 0.0;
    if (!kernel_grads) return;

    // Adjoint of A from mean = A^T nu and var = sigma - |a|^2 + |C^T a|^2.
    Matrix A_bar = factor.mean * dm.transpose();
    A_bar.noalias() += (2.0 * (C * fwd.B) - 2.0 * fwd.A) * dv.asDiagonal();

    const Matrix Kux_bar = fwd.L.transpose().triangularView<Eigen::Upper>().solve(A_bar);
    Matrix L_bar = (-Kux_bar * fwd.A.transpose()).eval();
    L_bar = L_bar.triangularView<Eigen::Lower>();
    const Matrix Kuu_bar = chol_backward(fwd.L, L_bar);

    // The jitter is proportional to sigma_M, so K_uu (jitter included) is its
    // own log-variance partial.
    accumulate_kernel_grads(kernel, Kuu_bar, fwd.P_uu, fwd.K_uu, model.inducing.Z,
                            model.inducing.Z, grad.d_log_lengthscales,
                            grad.d_log_variance);
    accumulate_kernel_grads(kernel, Kux_bar, fwd.P_ux, fwd.K_ux, model.inducing.Z, Xb,
                            grad.d_log_lengthscales, grad.d_log_variance);
    // k(x,x) = sigma_M term of the predictive variance.
    grad.d_log_variance += dv.sum() * kernel.variance();
  };

  backward(model.kernel_g, model.factor_g, fg, dmg, dvg, out.g);
  backward(model.kernel_r, model.factor_r, fr, dmr, dvr, out.r);
  return out;
}

}  // namespace detail

// ELBO gradient with respect to all free parameters: whitened variational
// means, packed Cholesky factors (softplus-raw diagonal), log lengthscales
// and log variances of both kernels. Reverse mode through the whitening
// Cholesky keeps the cost at O(N^3 + N^2 b) per call.
inline ElboGradient elbo_gradient(const ChainedModel& model, const Dataset& data,
                                  const QuadratureRule& quad,
                                  const std::vector<int>* minibatch = nullptr,
                                  bool kernel_grads = true) {
  model.validate();
  require(data.size() >= 1, "elbo_gradient: dataset must be non-empty");
  return detail::elbo_gradient_impl(model, data, quad, minibatch, kernel_grads, nullptr,
                                    nullptr);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingSchedule {
  int epochs = 2500;
  double learning_rate = 1e-2;
  int minibatch_size = 0;  // 0: full batch when n <= 512, else 256
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool freeze_kernel_hyperparameters = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, "TrainingSchedule: epochs must be >= 1");
    require(learning_rate >= 0.0, "TrainingSchedule: negative learning rate");
    require(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0,
            "TrainingSchedule: adam betas must lie in (0,1)");
    require(adam_eps > 0.0, "TrainingSchedule: adam_eps must be positive");
  }
};

namespace detail {

struct ParamLayout {
  int N = 0, D = 0;
  int latent_size() const { return N + tri_size(N) + D + 1; }
  int total() const { return 2 * latent_size(); }
};

inline void pack_latent(const MaternKernel& kernel, const VariationalFactor& factor,
                        double* out) {
  const int N = factor.size();
  int p = 0;
  for (int i = 0; i < N; ++i) out[p++] = factor.mean[i];
  for (int i = 0; i < N; ++i)
    for (int j = 0; j <= i; ++j)
      out[p++] = (i == j) ? softplus_inv(factor.chol_cov(i, i)) : factor.chol_cov(i, j);
  for (int d = 0; d < kernel.dim(); ++d) out[p++] = std::log(kernel.lengthscales()[d]);
  out[p++] = std::log(kernel.variance());
}

inline void unpack_latent(const double* in, int N, int D, MaternKernel& kernel,
                          VariationalFactor& factor) {
  int p = 0;
  factor.mean.resize(N);
  for (int i = 0; i < N; ++i) factor.mean[i] = in[p++];
  factor.chol_cov = Matrix::Zero(N, N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j <= i; ++j) {
      const double v = in[p++];
      factor.chol_cov(i, j) = (i == j) ? softplus(v) : v;
    }
  factor.whitened = true;
  Vector theta(D);
  for (int d = 0; d < D; ++d) theta[d] = std::exp(in[p++]);
  kernel = MaternKernel(kernel.nu(), theta, std::exp(in[p++]));
}

inline Vector pack_params(const ChainedModel& model) {
  const ParamLayout lay{model.factor_g.size(), model.kernel_g.dim()};
  Vector v(lay.total());
  pack_latent(model.kernel_g, model.factor_g, v.data());
  pack_latent(model.kernel_r, model.factor_r, v.data() + lay.latent_size());
  return v;
}

inline void unpack_params(const Vector& v, ChainedModel& model) {
  const ParamLayout lay{model.factor_g.size(), model.kernel_g.dim()};
  unpack_latent(v.data(), lay.N, lay.D, model.kernel_g, model.factor_g);
  unpack_latent(v.data() + lay.latent_size(), lay.N, lay.D, model.kernel_r,
                model.factor_r);
}

inline Vector pack_gradient(const ElboGradient& grad, const ParamLayout& lay) {
  Vector v(lay.total());
  const auto put = [&](const LatentGradient& lg, int base) {
    int p = base;
    for (int i = 0; i < lay.N; ++i) v[p++] = lg.d_mean[i];
    for (int i = 0; i < tri_size(lay.N); ++i) v[p++] = lg.d_chol_raw[i];
    for (int d = 0; d < lay.D; ++d) v[p++] = lg.d_log_lengthscales[d];
    v[p++] = lg.d_log_variance;
  };
  put(grad.g, 0);
  put(grad.r, lay.latent_size());
  return v;
}

}  // namespace detail

struct TrainResult {
  std::vector<double> elbo_trace;  // one entry per epoch
};

// ADAM ascent on the (minibatch) ELBO in whitened coordinates. Deterministic
// given the schedule seed. When the kernel hyperparameters are frozen the
// whitening Cholesky and data projections are computed once up front and
// column-sliced per minibatch. Throws numerical_error if the objective goes
// non-finite.
inline TrainResult train(ChainedModel& model, const Dataset& data,
                         const TrainingSchedule& schedule,
                         const QuadratureRule& quad =
                             QuadratureRule::gauss_hermite(kDefaultQuadratureNodes)) {
  model.validate();
  schedule.validate();
  require(data.size() >= 1, "train: dataset must be non-empty");
  require(data.X.rows() == data.y.size(), "train: X/y size mismatch");
  require(data.X.cols() == model.inducing.dim(), "train: dimension mismatch");

  const int n = data.size();
  const int batch = schedule.minibatch_size > 0 ? std::min(schedule.minibatch_size, n)
                                                : (n <= 512 ? n : 256);
  const bool full_batch = batch >= n;
  const bool kernel_grads = !schedule.freeze_kernel_hyperparameters;

  detail::KernelProjection proj_g, proj_r;
  const detail::KernelProjection* pg = nullptr;
  const detail::KernelProjection* pr = nullptr;
  if (!kernel_grads) {
    proj_g = detail::project_latent(model.kernel_g, model.inducing.Z, data.X);
    proj_r = detail::project_latent(model.kernel_r, model.inducing.Z, data.X);
    pg = &proj_g;
    pr = &proj_r;
  }

  const detail::ParamLayout lay{model.factor_g.size(), model.kernel_g.dim()};
  Vector params = detail::pack_params(model);
  Vector m1 = Vector::Zero(lay.total());
  Vector m2 = Vector::Zero(lay.total());
  long t = 0;

  Rng rng = seeded_rng(schedule.seed);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);

  TrainResult result;
  result.elbo_trace.reserve(schedule.epochs);

  std::vector<int> full_index;
  if (full_batch && !kernel_grads) {
    full_index.resize(n);
    std::iota(full_index.begin(), full_index.end(), 0);
  }

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    double epoch_data_term = 0.0;
    double last_kl = 0.0;

    const auto step = [&](const std::vector<int>* idx, int count) {
      const ElboGradient grad =
          detail::elbo_gradient_impl(model, data, quad, idx, kernel_grads, pg, pr);
      if (!std::isfinite(grad.value))
        throw numerical_error("train: non-finite ELBO at epoch " + std::to_string(epoch));
      last_kl = kl_term(model.factor_g) + kl_term(model.factor_r);
      // grad.value = (n/b) * batch data term - KL; recover the batch share.
      epoch_data_term += (grad.value + last_kl) * count / n;

      const Vector gvec = detail::pack_gradient(grad, lay);
      ++t;
      m1 = schedule.adam_beta1 * m1 + (1.0 - schedule.adam_beta1) * gvec;
      m2 = schedule.adam_beta2 * m2 + (1.0 - schedule.adam_beta2) * gvec.cwiseAbs2();
      const double c1 = 1.0 - std::pow(schedule.adam_beta1, t);
      const double c2 = 1.0 - std::pow(schedule.adam_beta2, t);
      params.array() += schedule.learning_rate * (m1.array() / c1) /
                        ((m2.array() / c2).sqrt() + schedule.adam_eps);
      if (!params.allFinite())
        throw numerical_error("train: non-finite parameters at epoch " +
                              std::to_string(epoch));
      try {
        detail::unpack_params(params, model);
      } catch (const contract_error& err) {
        throw numerical_error("train: degenerate parameters at epoch " +
                              std::to_string(epoch) + ": " + err.what());
      }
    };

    if (full_batch) {
      step(kernel_grads ? nullptr : &full_index, n);
    } else {
      std::shuffle(perm.begin(), perm.end(), rng);
      for (int start = 0; start < n; start += batch) {
        const int count = std::min(batch, n - start);
        std::vector<int> idx(perm.begin() + start, perm.begin() + start + count);
        step(&idx, count);
      }
    }
    result.elbo_trace.push_back(epoch_data_term - last_kl);
  }
  return result;
}

// Diffuse, scale-aware starting point for training on `data` over `box`:
// correlation lengths at 20% of each box width, location variance matched to
// the response variance, log-scale process centered on softplus^{-1}(sd(y)).
inline ChainedModel make_initial_model(const Matrix& Z, const Box& box,
                                       const Dataset& data, const TailMeasure& measure,
                                       double nu = 2.5) {
  require(Z.rows() >= 1, "make_initial_model: need inducing points");
  require(Z.cols() == box.dim(), "make_initial_model: dimension mismatch");
  require(data.size() >= 2, "make_initial_model: need at least two observations");
  const int N = static_cast<int>(Z.rows());
  const int D = box.dim();

  Vector theta(D);
  for (int d = 0; d < D; ++d) {
    const double corr_len = 0.2 * (box.upper[d] - box.lower[d]);
    theta[d] = corr_len * corr_len;
  }

  const double y_mean = data.y.mean();
  const double y_var = (data.y.array() - y_mean).square().sum() / (data.size() - 1);
  const double var_g = std::max(y_var, 1e-8);
  const double sd_y = std::max(std::sqrt(var_g), 1e-4);

  ChainedModel model{MaternKernel(nu, theta, var_g),
                     MaternKernel(nu, theta, 1.0),
                     InducingSet{Z},
                     VariationalFactor::identity(N, 0.1),
                     VariationalFactor::identity(N, 0.1),
                     measure};

  // mu_r = softplus^{-1}(sd(y)) * 1 expressed in whitened coordinates.
  const Matrix K_r = detail::kernel_gram_nojitter(model.kernel_r, Z);
  const Matrix L_r = detail::chol_with_escalation(K_r, model.kernel_r.variance());
  model.factor_r.mean = L_r.triangularView<Eigen::Lower>().solve(
      Vector::Constant(N, softplus_inv(sd_y)));
  return model;
}

}  // namespace tailbo
