#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "tailbo/chained_vgp.hpp"
#include "test_helpers.hpp"

using namespace tailbo;
using tailbo::testing::dense_svgp_marginals;
using tailbo::testing::make_small_model;
using tailbo::testing::random_chol;
using tailbo::testing::SmallModelConfig;

namespace {

Matrix random_points(int n, int d, Rng& rng) {
  std::uniform_real_distribution<double> ux(0.0, 1.0);
  Matrix X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = ux(rng);
  return X;
}

}  // namespace

TEST_CASE("kl term vanishes at the prior") {
  for (int n : {1, 3, 7}) {
    REQUIRE(kl_term(VariationalFactor::identity(n)) == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("kl term matches scalar closed forms") {
  VariationalFactor f;
  f.mean = Vector::Constant(1, 1.0);
  f.chol_cov = Matrix::Constant(1, 1, 1.0);
  f.whitened = true;
  REQUIRE(kl_term(f) == Catch::Approx(0.5).margin(1e-12));

  // KL(N(1, 0.5) || N(0, 2)) = 0.5 * (0.25 + 0.5 - 1 + log 4)
  VariationalFactor u;
  u.mean = Vector::Constant(1, 1.0);
  u.chol_cov = Matrix::Constant(1, 1, std::sqrt(0.5));
  u.whitened = false;
  const Matrix K = Matrix::Constant(1, 1, 2.0);
  REQUIRE(kl_term(u, K) ==
          Catch::Approx(0.5 * (0.25 + 0.5 - 1.0 + std::log(4.0))).margin(1e-12));
}

TEST_CASE("kl term is non-negative on random factors") {
  Rng rng = seeded_rng(71);
  for (int rep = 0; rep < 20; ++rep) {
    VariationalFactor f = VariationalFactor::identity(6);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int i = 0; i < 6; ++i) f.mean[i] = gauss(rng);
    f.chol_cov = random_chol(6, rng);
    REQUIRE(kl_term(f) >= -1e-12);
  }
}

TEST_CASE("whiten and unwhiten round trip") {
  Rng rng = seeded_rng(5);
  const Matrix Z = random_points(7, 2, rng);
  const MaternKernel kernel(2.5, Vector::Constant(2, 0.3), 1.7);
  const Matrix K = kernel.gram(Z, kernel.default_jitter());
  const Matrix L = Eigen::LLT<Matrix>(K).matrixL();

  VariationalFactor f = VariationalFactor::identity(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 7; ++i) f.mean[i] = gauss(rng);
  f.chol_cov = random_chol(7, rng);

  const VariationalFactor u = unwhiten(f, L);
  REQUIRE_FALSE(u.whitened);
  const VariationalFactor back = whiten(u, L);
  REQUIRE((back.mean - f.mean).lpNorm<Eigen::Infinity>() < 1e-10);
  REQUIRE((back.chol_cov - f.chol_cov).lpNorm<Eigen::Infinity>() < 1e-10);

  REQUIRE_THROWS_AS(whiten(f, L), contract_error);
  REQUIRE_THROWS_AS(unwhiten(u, L), contract_error);
}

TEST_CASE("whitened and unwhitened kl agree through u = Lv") {
  Rng rng = seeded_rng(6);
  const Matrix Z = random_points(6, 2, rng);
  const MaternKernel kernel(1.5, Vector::Constant(2, 0.4), 0.9);
  const Matrix K = kernel.gram(Z, kernel.default_jitter());
  const Matrix L = Eigen::LLT<Matrix>(K).matrixL();

  for (int rep = 0; rep < 10; ++rep) {
    VariationalFactor f = VariationalFactor::identity(6);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int i = 0; i < 6; ++i) f.mean[i] = gauss(rng);
    f.chol_cov = random_chol(6, rng);
    const VariationalFactor u = unwhiten(f, L);
    REQUIRE(kl_term(u, K) == Catch::Approx(kl_term(f)).margin(1e-8));
  }
}

TEST_CASE("identity factors reproduce the prior marginals") {
  Rng rng = seeded_rng(11);
  const Matrix Z = random_points(9, 3, rng);
  ChainedModel model{MaternKernel(2.5, Vector::Constant(3, 0.5), 2.2),
                     MaternKernel(1.5, Vector::Constant(3, 0.7), 0.6),
                     InducingSet{Z},
                     VariationalFactor::identity(9),
                     VariationalFactor::identity(9),
                     TailMeasure::quantile(0.9)};
  const Matrix Xq = random_points(25, 3, rng);
  const PredictiveMarginals pm = predict(model, Xq);
  REQUIRE(pm.mean_g.lpNorm<Eigen::Infinity>() < 1e-12);
  REQUIRE(pm.mean_r.lpNorm<Eigen::Infinity>() < 1e-12);
  REQUIRE((pm.var_g.array() - 2.2).abs().maxCoeff() < 1e-10);
  REQUIRE((pm.var_r.array() - 0.6).abs().maxCoeff() < 1e-10);
}

TEST_CASE("predictive marginals match the dense conditional") {
  for (int rep = 0; rep < 20; ++rep) {
    SmallModelConfig cfg;
    cfg.seed = 1000 + rep;
    cfg.n_inducing = 3 + (rep * 7) % 18;
    cfg.n_data = 10 + (rep * 13) % 41;
    auto sm = make_small_model(cfg);
    Rng rng = seeded_rng(900 + rep);
    const Matrix Xq = random_points(15, cfg.dim, rng);

    const PredictiveMarginals pm = predict(sm.model, Xq);

    const auto check = [&](const MaternKernel& kernel, const VariationalFactor& factor,
                           const Vector& mean, const Vector& var) {
      const double jitter = 1e-6 * kernel.variance();
      const Matrix K = kernel.gram(sm.model.inducing.Z, jitter);
      const Matrix L = Eigen::LLT<Matrix>(K).matrixL();
      const VariationalFactor u = unwhiten(factor, L);
      const Matrix S = u.chol_cov * u.chol_cov.transpose();
      Vector mean_ref, var_ref;
      dense_svgp_marginals(kernel, sm.model.inducing.Z, u.mean, S, Xq, jitter, mean_ref,
                           var_ref);
      REQUIRE((mean - mean_ref).lpNorm<Eigen::Infinity>() < 1e-8);
      REQUIRE((var - var_ref).lpNorm<Eigen::Infinity>() < 1e-8);
    };
    check(sm.model.kernel_g, sm.model.factor_g, pm.mean_g, pm.var_g);
    check(sm.model.kernel_r, sm.model.factor_r, pm.mean_r, pm.var_r);
  }
}

TEST_CASE("interpolation limit at an inducing point") {
  Rng rng = seeded_rng(21);
  const Matrix Z = random_points(8, 2, rng);
  ChainedModel model{MaternKernel(2.5, Vector::Constant(2, 0.5), 1.3),
                     MaternKernel(2.5, Vector::Constant(2, 0.5), 1.0),
                     InducingSet{Z},
                     VariationalFactor::identity(8, 1e-3),
                     VariationalFactor::identity(8, 1e-3),
                     TailMeasure::expectile(0.8)};
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 8; ++i) model.factor_g.mean[i] = gauss(rng);

  const Predictor pred(model);
  const Matrix K = model.kernel_g.gram(Z, 1e-6 * model.kernel_g.variance());
  const Matrix L = Eigen::LLT<Matrix>(K).matrixL();
  const Vector mu = L.triangularView<Eigen::Lower>() * model.factor_g.mean;

  // The jitter perturbs the interpolant by jitter * (K^{-1} mu)_i, which for
  // strongly correlated inducing sets reaches a few 1e-4.
  const PredictiveMarginals pm = pred.predict(Z);
  for (int i = 0; i < 8; ++i) {
    REQUIRE(pm.mean_g[i] == Catch::Approx(mu[i]).margin(1e-3));
    REQUIRE(pm.var_g[i] > 0.0);
    REQUIRE(pm.var_g[i] < 5e-6 * model.kernel_g.variance() + 1e-5);
  }
}

TEST_CASE("posterior on the measure returns the location marginals") {
  auto sm = make_small_model(SmallModelConfig{});
  Rng rng = seeded_rng(31);
  const Matrix Xq = random_points(12, 2, rng);
  const PredictiveMarginals pm = predict(sm.model, Xq);
  const auto [mean, var] = posterior_on_measure(sm.model, Xq);
  REQUIRE((mean - pm.mean_g).lpNorm<Eigen::Infinity>() < 1e-14);
  REQUIRE((var - pm.var_g).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("whitened elbo equals the dense unwhitened objective") {
  const QuadratureRule quad = QuadratureRule::gauss_hermite(25);
  for (auto kind : {MeasureKind::Quantile, MeasureKind::Expectile}) {
    SmallModelConfig cfg;
    cfg.kind = kind;
    cfg.tau = kind == MeasureKind::Quantile ? 0.7 : 0.35;
    cfg.seed = kind == MeasureKind::Quantile ? 42 : 43;
    auto sm = make_small_model(cfg);

    const double value = elbo(sm.model, sm.data, quad);

    double dense = 0.0;
    const auto marginals = [&](const MaternKernel& kernel,
                               const VariationalFactor& factor, Vector& mean,
                               Vector& var) {
      const double jitter = 1e-6 * kernel.variance();
      const Matrix K = kernel.gram(sm.model.inducing.Z, jitter);
      const Matrix L = Eigen::LLT<Matrix>(K).matrixL();
      const VariationalFactor u = unwhiten(factor, L);
      const Matrix S = u.chol_cov * u.chol_cov.transpose();
      dense_svgp_marginals(kernel, sm.model.inducing.Z, u.mean, S, sm.data.X, jitter,
                           mean, var);
      dense -= kl_term(u, K);
    };
    Vector mg, vg, mr, vr;
    marginals(sm.model.kernel_g, sm.model.factor_g, mg, vg);
    marginals(sm.model.kernel_r, sm.model.factor_r, mr, vr);
    for (int i = 0; i < sm.data.size(); ++i)
      dense += expected_log_density(sm.model.measure, sm.data.y[i], mg[i], vg[i], mr[i],
                                    vr[i], quad);
    REQUIRE(value == Catch::Approx(dense).margin(1e-8));
  }
}

TEST_CASE("minibatch elbo estimates average to the full objective") {
  SmallModelConfig cfg;
  cfg.n_data = 6;
  cfg.seed = 77;
  auto sm = make_small_model(cfg);
  const QuadratureRule quad = QuadratureRule::gauss_hermite(15);

  const double full = elbo(sm.model, sm.data, quad);
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) {
      const std::vector<int> batch{i, j};
      sum += elbo(sm.model, sm.data, quad, &batch);
      ++count;
    }
  REQUIRE(count == 15);
  REQUIRE(sum / count == Catch::Approx(full).margin(1e-8));
}

TEST_CASE("elbo with identity factors reduces to the prior expected log density") {
  Rng rng = seeded_rng(55);
  const Matrix Z = random_points(6, 2, rng);
  ChainedModel model{MaternKernel(2.5, Vector::Constant(2, 0.4), 1.5),
                     MaternKernel(2.5, Vector::Constant(2, 0.6), 0.7),
                     InducingSet{Z},
                     VariationalFactor::identity(6),
                     VariationalFactor::identity(6),
                     TailMeasure::quantile(0.8)};
  Dataset data;
  data.X = random_points(1, 2, rng);
  data.y = Vector::Constant(1, 0.4);
  const QuadratureRule quad = QuadratureRule::gauss_hermite(15);
  const double value = elbo(model, data, quad);
  const double direct =
      expected_log_density(model.measure, data.y[0], 0.0, 1.5, 0.0, 0.7, quad);
  REQUIRE(value == Catch::Approx(direct).margin(1e-10));
}

TEST_CASE("elbo lower-bounds the log evidence on a single point") {
  Rng rng = seeded_rng(60);
  const Matrix Z = random_points(5, 1, rng);
  Dataset data;
  data.X = Matrix::Constant(1, 1, 0.37);
  data.y = Vector::Constant(1, 0.9);

  for (auto kind : {MeasureKind::Quantile, MeasureKind::Expectile}) {
    ChainedModel model{MaternKernel(2.5, Vector::Constant(1, 0.3), 1.1),
                       MaternKernel(2.5, Vector::Constant(1, 0.5), 0.8),
                       InducingSet{Z},
                       VariationalFactor::identity(5),
                       VariationalFactor::identity(5),
                       TailMeasure{kind, 0.75}};
    std::normal_distribution<double> gauss(0.0, 0.5);
    for (int i = 0; i < 5; ++i) {
      model.factor_g.mean[i] = gauss(rng);
      model.factor_r.mean[i] = gauss(rng);
    }
    model.factor_g.chol_cov = random_chol(5, rng);
    model.factor_r.chol_cov = random_chol(5, rng);

    const double bound =
        elbo(model, data, QuadratureRule::gauss_hermite(40));

    // log p(y) under the prior at x0 by tensor Gauss-Hermite over (g, r).
    const double vg = model.kernel_g.variance();
    const double vr = model.kernel_r.variance();
    const QuadratureRule q = QuadratureRule::gauss_hermite(80);
    double evidence = 0.0;
    for (int a = 0; a < 80; ++a)
      for (int b = 0; b < 80; ++b) {
        const double g = std::sqrt(2.0 * vg) * q.abscissae[a];
        const double r = std::sqrt(2.0 * vr) * q.abscissae[b];
        evidence += q.weights[a] * q.weights[b] *
                    std::exp(log_density(model.measure, data.y[0], g, scale_link(r)));
      }
    evidence /= kPi;
    REQUIRE(bound <= std::log(evidence) + 1e-8);
  }
}

TEST_CASE("predictive variance clamp is counted and applied") {
  Rng rng = seeded_rng(63);
  const Matrix Z = random_points(4, 1, rng);
  ChainedModel model{MaternKernel(2.5, Vector::Constant(1, 0.4), 1e-7),
                     MaternKernel(2.5, Vector::Constant(1, 0.4), 1.0),
                     InducingSet{Z},
                     VariationalFactor::identity(4, 1e-9),
                     VariationalFactor::identity(4, 1e-9),
                     TailMeasure::quantile(0.5)};
  const long before = diagnostics::variance_clamp_count().load();
  const PredictiveMarginals pm = predict(model, Z);
  const long after = diagnostics::variance_clamp_count().load();
  REQUIRE(after >= before + 4);
  for (int i = 0; i < 4; ++i) REQUIRE(pm.var_g[i] == 1e-12);
  for (int i = 0; i < 4; ++i) REQUIRE(pm.var_r[i] > 1e-12);
}

TEST_CASE("model and query contracts are enforced") {
  auto sm = make_small_model(SmallModelConfig{});
  Rng rng = seeded_rng(64);
  REQUIRE_THROWS_AS(predict(sm.model, random_points(3, 5, rng)), contract_error);

  ChainedModel bad = sm.model;
  bad.factor_g.whitened = false;
  REQUIRE_THROWS_AS(bad.validate(), contract_error);
  REQUIRE_THROWS_AS(Predictor(bad), contract_error);

  const QuadratureRule quad = QuadratureRule::gauss_hermite(15);
  const std::vector<int> empty;
  REQUIRE_THROWS_AS(elbo(sm.model, sm.data, quad, &empty), contract_error);
  const std::vector<int> oob{sm.data.size()};
  REQUIRE_THROWS_AS(elbo(sm.model, sm.data, quad, &oob), contract_error);
}
