#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>
#include <vector>

#include "tailbo/errors.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Rectangular input domain.
struct Box {
  Vector lower;
  Vector upper;

  Box() = default;
  Box(Vector lo, Vector hi) : lower(std::move(lo)), upper(std::move(hi)) {
    require(lower.size() == upper.size(), "Box: bound dimensions differ");
    require(lower.size() > 0, "Box: empty bounds");
    for (int d = 0; d < lower.size(); ++d)
      require(lower[d] < upper[d], "Box: lower must be strictly below upper");
  }

  int dim() const { return static_cast<int>(lower.size()); }
  Vector widths() const { return upper - lower; }

  bool contains(const Vector& x, double tol = 0.0) const {
    if (x.size() != lower.size()) return false;
    for (int d = 0; d < x.size(); ++d)
      if (x[d] < lower[d] - tol || x[d] > upper[d] + tol) return false;
    return true;
  }

  Vector clip(Vector x) const {
    require(x.size() == lower.size(), "Box::clip: dimension mismatch");
    for (int d = 0; d < x.size(); ++d) x[d] = std::clamp(x[d], lower[d], upper[d]);
    return x;
  }

  Vector sample(Rng& rng) const {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vector x(dim());
    for (int d = 0; d < dim(); ++d) x[d] = lower[d] + unit(rng) * (upper[d] - lower[d]);
    return x;
  }

  Matrix sample_many(int n, Rng& rng) const {
    Matrix X(n, dim());
    for (int i = 0; i < n; ++i) X.row(i) = sample(rng).transpose();
    return X;
  }

  // All 2^D corner points, in lexicographic bit order.
  Matrix corners() const {
    const int D = dim();
    require(D <= 20, "Box::corners: dimension too large");
    const int n = 1 << D;
    Matrix C(n, D);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d) C(i, d) = (i >> d) & 1 ? upper[d] : lower[d];
    return C;
  }
};

// Latin hypercube design: one point per stratum in every dimension.
inline Matrix latin_hypercube(const Box& box, int n, Rng& rng) {
  require(n >= 1, "latin_hypercube: n must be positive");
  const int D = box.dim();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix X(n, D);
  std::vector<int> perm(n);
  for (int d = 0; d < D; ++d) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < n; ++i) {
      const double u = (perm[i] + unit(rng)) / n;
      X(i, d) = box.lower[d] + u * (box.upper[d] - box.lower[d]);
    }
  }
  return X;
}

namespace detail {
inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base);
  double f = inv;
  double r = 0.0;
  while (i > 0) {
    r += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return r;
}
}  // namespace detail

// Halton quasi-random scan over the box; `offset` skips the sequence head.
inline Matrix halton_scan(const Box& box, int n, std::uint64_t offset = 1) {
  static constexpr std::uint64_t primes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29,
                                             31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
  const int D = box.dim();
  require(D <= static_cast<int>(std::size(primes)), "halton_scan: dimension too large");
  Matrix X(n, D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d) {
      const double u = detail::radical_inverse(offset + i, primes[d]);
      X(i, d) = box.lower[d] + u * (box.upper[d] - box.lower[d]);
    }
  return X;
}

}  // namespace tailbo
