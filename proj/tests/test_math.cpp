#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "tailbo/math.hpp"

using namespace tailbo;

TEST_CASE("softplus basics and asymptotics") {
  CHECK(softplus(0.0) == Catch::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(softplus(100.0) == Catch::Approx(100.0).epsilon(1e-12));
  // Large negative input stays positive instead of underflowing to zero.
  const double tiny = softplus(-100.0);
  CHECK(tiny > 0.0);
  CHECK(tiny == Catch::Approx(std::exp(-100.0)).epsilon(1e-10));
  CHECK(softplus(-700.0) > 0.0);

  for (double r : {-20.0, -3.0, -0.5, 0.0, 0.7, 5.0, 40.0, 200.0}) {
    CHECK(softplus_inv(softplus(r)) == Catch::Approx(r).margin(1e-9));
  }
  CHECK_THROWS_AS(softplus_inv(0.0), contract_error);
  CHECK_THROWS_AS(softplus_inv(-1.0), contract_error);
}

TEST_CASE("sigmoid is the softplus derivative") {
  for (double r : {-8.0, -1.0, 0.0, 0.3, 2.0, 9.0}) {
    const double h = 1e-6;
    const double fd = (softplus(r + h) - softplus(r - h)) / (2.0 * h);
    CHECK(sigmoid(r) == Catch::Approx(fd).margin(1e-8));
  }
  CHECK(sigmoid(0.0) == Catch::Approx(0.5));
}

TEST_CASE("normal cdf and pdf reference values") {
  CHECK(normal_cdf(0.0) == Catch::Approx(0.5).margin(1e-15));
  CHECK(normal_cdf(1.959963984540054) == Catch::Approx(0.975).margin(1e-12));
  CHECK(normal_pdf(0.0) == Catch::Approx(0.3989422804014327).margin(1e-15));
}

TEST_CASE("normal quantile matches frozen table and inverts the cdf") {
  // Reference values computed with a high precision erfinv.
  CHECK(normal_quantile(0.75) == Catch::Approx(0.674489750196082).margin(1e-9));
  CHECK(normal_quantile(0.625) == Catch::Approx(0.318639363964375).margin(1e-9));
  CHECK(normal_quantile(0.875) == Catch::Approx(1.150349380376008).margin(1e-9));
  CHECK(normal_quantile(0.1) == Catch::Approx(-1.2815515655446004).margin(1e-9));
  CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-12));

  for (double p : {1e-10, 1e-6, 0.02, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9}) {
    CHECK(normal_cdf(normal_quantile(p)) == Catch::Approx(p).epsilon(1e-11));
  }
  CHECK_THROWS_AS(normal_quantile(0.0), contract_error);
  CHECK_THROWS_AS(normal_quantile(1.0), contract_error);
}
