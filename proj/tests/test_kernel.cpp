#include <Eigen/Cholesky>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "tailbo/box.hpp"
#include "tailbo/kernel.hpp"
#include "tailbo/rng.hpp"

using namespace tailbo;

namespace {
Vector vec1(double a) {
  Vector v(1);
  v << a;
  return v;
}
Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}
}  // namespace

TEST_CASE("matern evaluation closed forms") {
  MaternKernel k52(2.5, vec1(1.0), 1.0);
  CHECK(k52.eval(vec1(0.3), vec1(0.3)) == Catch::Approx(1.0).margin(1e-15));

  MaternKernel k12(0.5, vec1(1.0), 1.0);
  CHECK(k12.eval(vec1(0.0), vec1(1.0)) == Catch::Approx(std::exp(-1.0)).margin(1e-12));

  MaternKernel k3(2.5, vec1(2.0), 3.0);
  CHECK(k3.eval(vec1(0.7), vec1(0.7)) == Catch::Approx(3.0).margin(1e-15));

  MaternKernel k32(1.5, vec1(1.0), 1.0);
  CHECK(k32.eval(vec1(0.0), vec1(2.0)) ==
        Catch::Approx((1.0 + 2.0) * std::exp(-2.0)).margin(1e-12));

  CHECK_THROWS_AS(MaternKernel(2.0, vec1(1.0), 1.0), contract_error);
  CHECK_THROWS_AS(MaternKernel(2.5, vec1(-1.0), 1.0), contract_error);
  CHECK_THROWS_AS(MaternKernel(2.5, vec1(1.0), 0.0), contract_error);
  CHECK_THROWS_AS(k52.eval(vec2(0.0, 0.0), vec1(0.0)), contract_error);
}

TEST_CASE("matern stationarity under translation") {
  MaternKernel k(2.5, vec2(0.7, 2.3), 1.4);
  Rng rng = seeded_rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    const Vector x = vec2(u(rng), u(rng));
    const Vector y = vec2(u(rng), u(rng));
    const Vector shift = vec2(u(rng), u(rng));
    CHECK(k.eval(x, y) == Catch::Approx(k.eval(x + shift, y + shift)).epsilon(1e-12));
  }
}

TEST_CASE("radial derivative matches finite differences") {
  for (double nu : {0.5, 1.5, 2.5}) {
    MaternKernel k(nu, vec1(1.0), 1.0);
    for (double rho : {0.1, 0.5, 1.0, 2.7}) {
      const double h = 1e-6;
      const double fd = (k.radial(rho + h) - k.radial(rho - h)) / (2.0 * h);
      CHECK(k.radial_grad(rho) == Catch::Approx(fd).margin(1e-9));
    }
  }
}

TEST_CASE("gram matrix structure and element oracle") {
  MaternKernel k(2.5, vec2(0.9, 1.7), 2.2);

  Matrix one(1, 2);
  one << 0.4, -0.3;
  const Matrix g1 = k.gram(one, 0.0);
  REQUIRE(g1.rows() == 1);
  CHECK(g1(0, 0) == Catch::Approx(2.2).margin(1e-15));

  Matrix twin(2, 2);
  twin << 0.1, 0.2, 0.1, 0.2;
  const Matrix g2 = k.gram(twin, 1e-6);
  CHECK(g2(0, 0) == Catch::Approx(2.2 + 1e-6).margin(1e-15));
  CHECK(g2(1, 1) == Catch::Approx(2.2 + 1e-6).margin(1e-15));
  CHECK(g2(0, 1) == Catch::Approx(2.2).margin(1e-12));
  CHECK(g2(1, 0) == Catch::Approx(2.2).margin(1e-12));

  Rng rng = seeded_rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix X(5, 2);
  for (int i = 0; i < 5; ++i) X.row(i) = vec2(u(rng), u(rng)).transpose();
  const Matrix G = k.gram(X, 0.0);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const double expect = i == j ? 2.2 : k.eval(X.row(i), X.row(j));
      CHECK(G(i, j) == Catch::Approx(expect).margin(1e-12));
    }
  CHECK_THROWS_AS(k.gram(X, -1.0), contract_error);
}

TEST_CASE("gram matrices are positive semidefinite with jitter") {
  Rng rng = seeded_rng(17);
  for (double nu : {0.5, 1.5, 2.5}) {
    MaternKernel k(nu, vec2(0.5, 1.0), 1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix X(30, 2);
    for (int i = 0; i < 30; ++i) X.row(i) = vec2(u(rng), u(rng)).transpose();
    // Duplicate a few rows to stress conditioning.
    X.row(5) = X.row(4);
    X.row(29) = X.row(0);
    const Matrix G = k.gram(X, 1e-6);
    Eigen::LLT<Matrix> llt(G);
    CHECK(llt.info() == Eigen::Success);
  }
}

TEST_CASE("spectral sampling marginal variance and determinism") {
  // t with 2nu dof and shape diag(1/(2nu theta)) has marginal variance
  // (2nu/(2nu-2)) * 1/(2nu theta_d) = 1/((2nu-2) theta_d).
  Rng rng = seeded_rng(101);
  const Vector theta = vec2(1.0, 4.0);
  const Matrix W = sample_matern_spectrum(2.5, theta, 100000, rng);
  for (int d = 0; d < 2; ++d) {
    const double expect = 1.0 / (3.0 * theta[d]);
    const double var = W.col(d).squaredNorm() / W.rows();
    CHECK(var == Catch::Approx(expect).epsilon(0.03));
  }

  Rng r1 = seeded_rng(5);
  Rng r2 = seeded_rng(5);
  MaternKernel k(2.5, vec2(1.0, 1.0), 1.0);
  const RFFBasis b1 = spectral_sample(k, 64, r1);
  const RFFBasis b2 = spectral_sample(k, 64, r2);
  CHECK((b1.frequencies - b2.frequencies).cwiseAbs().maxCoeff() == 0.0);
  CHECK((b1.phases - b2.phases).cwiseAbs().maxCoeff() == 0.0);
  for (int i = 0; i < b1.phases.size(); ++i) {
    CHECK(b1.phases[i] >= 0.0);
    CHECK(b1.phases[i] < 2.0 * kPi);
  }
}

TEST_CASE("high order spectrum approaches the gaussian limit") {
  // As nu grows the t distribution tends to a Gaussian with variance
  // 1/((2nu-2) theta); compare empirical quantiles at nu=50.
  Rng rng = seeded_rng(909);
  const Vector theta = vec1(1.0);
  Matrix W = sample_matern_spectrum(50.0, theta, 200000, rng);
  std::vector<double> w(W.data(), W.data() + W.rows());
  std::sort(w.begin(), w.end());
  const double s = std::sqrt(1.0 / 98.0);
  for (double p : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    const double emp = w[static_cast<std::size_t>(p * (w.size() - 1))];
    CHECK(emp == Catch::Approx(s * normal_quantile(p)).margin(0.004));
  }
}

TEST_CASE("rff feature map basics") {
  RFFBasis basis;
  basis.frequencies = Matrix::Zero(1, 2);
  basis.phases = Vector::Zero(1);
  basis.scale = 1.0;
  const Vector phi = rff_features(basis, vec2(0.3, -0.8));
  REQUIRE(phi.size() == 1);
  CHECK(phi[0] == Catch::Approx(std::sqrt(2.0)).margin(1e-14));
  CHECK_THROWS_AS(rff_features(basis, vec1(0.0)), contract_error);
}

TEST_CASE("rff bochner normalization") {
  MaternKernel k(2.5, vec2(0.8, 1.3), 1.7);
  Rng rng = seeded_rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vector x = vec2(u(rng), u(rng));
  double acc = 0.0;
  const int n_bases = 50;
  for (int b = 0; b < n_bases; ++b) {
    const RFFBasis basis = spectral_sample(k, 1024, rng);
    const Vector phi = rff_features(basis, x);
    acc += phi.squaredNorm();
  }
  CHECK(acc / n_bases == Catch::Approx(1.7).epsilon(0.02));
}

TEST_CASE("rff kernel approximation improves with feature count") {
  MaternKernel k(2.5, vec2(1.0, 1.0), 1.0);
  Rng pair_rng = seeded_rng(55);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix X(100, 2), Y(100, 2);
  for (int i = 0; i < 100; ++i) {
    X.row(i) = vec2(u(pair_rng), u(pair_rng)).transpose();
    Y.row(i) = vec2(u(pair_rng), u(pair_rng)).transpose();
  }
  const auto max_err = [&](int m, Rng& rng) {
    const RFFBasis basis = spectral_sample(k, m, rng);
    const Matrix FX = rff_features(basis, X);
    const Matrix FY = rff_features(basis, Y);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double approx = FX.col(i).dot(FY.col(i));
      worst = std::max(worst, std::abs(approx - k.eval(X.row(i), Y.row(i))));
    }
    return worst;
  };
  Rng rng = seeded_rng(66);
  double e256 = 0.0, e1024 = 0.0, e4096 = 0.0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) e256 += max_err(256, rng);
  for (int r = 0; r < reps; ++r) e1024 += max_err(1024, rng);
  for (int r = 0; r < reps; ++r) e4096 += max_err(4096, rng);
  CHECK(e1024 < e256);
  CHECK(e4096 < e1024);
  // Monte Carlo rate: error should roughly halve per 4x features.
  CHECK(e1024 / e256 == Catch::Approx(0.5).margin(0.2));
  CHECK(e4096 / e1024 == Catch::Approx(0.5).margin(0.2));
}

TEST_CASE("spectral reconstruction integrates back to the kernel") {
  // 2 alpha E[cos(w x + b) cos(w x' + b)] = alpha E[cos(w (x - x'))] must
  // reproduce the Matern correlation.
  MaternKernel k(1.5, vec1(0.6), 2.0);
  Rng rng = seeded_rng(77);
  const int n = 1000000;
  const Matrix W = sample_matern_spectrum(k.nu(), k.lengthscales(), n, rng);
  for (double gap : {0.25, 0.8, 1.6}) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::cos(W(i, 0) * gap);
    const double recon = k.variance() * acc / n;
    CHECK(recon == Catch::Approx(k.eval(vec1(0.0), vec1(gap))).margin(0.01));
  }
}
