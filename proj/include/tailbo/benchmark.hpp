#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tailbo/box.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/likelihood.hpp"
#include "tailbo/math.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

// Stochastic test problem with location-scale noise structure
//   Y_x = location(x) + scale(x) * xi,   scale >= 0 over the box,
// so every conditional quantile/expectile surface is
//   location(x) + scale(x) * s(tau)
// with s the corresponding statistic of the noise variable xi.
struct StochasticProblem {
  std::string name;
  Box box;
  std::function<double(const Vector&)> location;
  std::function<double(const Vector&)> scale;
  std::function<double(Rng&)> noise;
  std::function<double(double)> noise_quantile;  // closed form q_xi(tau)
  std::uint64_t noise_seed = 0;                  // master seed for MC statistics

  int dim() const { return box.dim(); }

  double sample(const Vector& x, Rng& rng) const {
    require(x.size() == box.dim(), name + ": point dimension mismatch");
    require(box.contains(x, 1e-9), name + ": point outside the domain");
    return location(x) + scale(x) * noise(rng);
  }
};

// Griewank surface, any dimension: sum x_d^2/4000 - prod cos(x_d/sqrt(d)) + 1.
inline double griewank(const Vector& x) {
  double quad = 0.0, prod = 1.0;
  for (int d = 0; d < x.size(); ++d) {
    quad += x[d] * x[d] / 4000.0;
    prod *= std::cos(x[d] / std::sqrt(d + 1.0));
  }
  return quad - prod + 1.0;
}

// Ackley-style surface used by the 7D problem:
//   a*exp(-b*sqrt(mean(x^2))) - exp(mean(cos(c*x))) + a + e
// with a=10, b=2e-4, c=0.9*pi. The first term enters with a positive sign,
// so A(0) = 2a.
inline double ackley7(const Vector& x) {
  require(x.size() == 7, "ackley7: expects 7 coordinates");
  const double a = 10.0, b = 2e-4, c = 0.9 * kPi;
  double sq = 0.0, cs = 0.0;
  for (int d = 0; d < 7; ++d) {
    sq += x[d] * x[d];
    cs += std::cos(c * x[d]);
  }
  return a * std::exp(-b * std::sqrt(sq / 7.0)) - std::exp(cs / 7.0) + a +
         std::exp(1.0);
}

// 2D Griewank problem on [-4,1] x [2,6]:
//   Y_x = G(x) + R(x) * xi,  R(x) = G(-3 - x1, 8 - x2),
//   xi = eta for eta <= 0, sqrt(3)*eta for eta > 0, eta ~ N(0,1).
inline StochasticProblem make_griewank2d() {
  StochasticProblem p;
  p.name = "griewank2d";
  p.box = Box{(Vector(2) << -4.0, 2.0).finished(),
              (Vector(2) << 1.0, 6.0).finished()};
  p.location = [](const Vector& x) { return griewank(x); };
  p.scale = [](const Vector& x) {
    return griewank((Vector(2) << -3.0 - x[0], 8.0 - x[1]).finished());
  };
  p.noise = [](Rng& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double eta = gauss(rng);
    return eta <= 0.0 ? eta : std::sqrt(3.0) * eta;
  };
  p.noise_quantile = [](double tau) {
    const double q = normal_quantile(tau);
    return tau <= 0.5 ? q : std::sqrt(3.0) * q;
  };
  p.noise_seed = 7713210447ULL;
  return p;
}

// 7D Ackley problem:
//   Y_x = 30*A(x) + R(x) * xi,  R(x) = 3*A(x2,...,x7,x1),  xi ~ LogNormal(0,1).
inline StochasticProblem make_ackley7d() {
  StochasticProblem p;
  p.name = "ackley7d";
  Vector lo(7), hi(7);
  lo << 0.0, -0.7, 0.5, -1.0, -0.1, 0.0, 0.0;
  hi << 1.0, -0.3, 1.0, -0.5, 0.0, 0.1, 0.8;
  p.box = Box{lo, hi};
  p.location = [](const Vector& x) { return 30.0 * ackley7(x); };
  p.scale = [](const Vector& x) {
    Vector shifted(7);
    for (int d = 0; d < 7; ++d) shifted[d] = x[(d + 1) % 7];
    return 3.0 * ackley7(shifted);
  };
  p.noise = [](Rng& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    return std::exp(gauss(rng));
  };
  p.noise_quantile = [](double tau) { return std::exp(normal_quantile(tau)); };
  p.noise_seed = 0xac71e7dULL;
  return p;
}

inline StochasticProblem problem_by_name(const std::string& name) {
  if (name == "griewank2d") return make_griewank2d();
  if (name == "ackley7d") return make_ackley7d();
  throw contract_error("unknown problem: " + name);
}

namespace detail {

constexpr int kOracleSamples = 10000000;

// Sorted draws of the noise variable with prefix sums, shared by expectile
// bisection and the test suite's empirical checks.
struct NoiseTable {
  std::vector<double> sorted;
  std::vector<double> prefix;  // prefix[k] = sum of sorted[0..k)
};

inline const NoiseTable& noise_table(const StochasticProblem& p) {
  static std::mutex mu;
  static std::map<std::string, NoiseTable> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(p.name);
  if (it != cache.end()) return it->second;

  NoiseTable t;
  t.sorted.resize(kOracleSamples);
  Rng rng = seeded_rng(p.noise_seed);
  for (double& v : t.sorted) v = p.noise(rng);
  std::sort(t.sorted.begin(), t.sorted.end());
  t.prefix.resize(kOracleSamples + 1);
  t.prefix[0] = 0.0;
  for (int i = 0; i < kOracleSamples; ++i)
    t.prefix[i + 1] = t.prefix[i] + t.sorted[i];
  return cache.emplace(p.name, std::move(t)).first->second;
}

// tau-expectile of a sorted sample via bisection on the population identity
//   tau * E[(xi - e)+] = (1 - tau) * E[(e - xi)+].
inline double sample_expectile(const NoiseTable& t, double tau) {
  const auto n = static_cast<std::ptrdiff_t>(t.sorted.size());
  const double total = t.prefix[n];
  auto imbalance = [&](double e) {
    const auto k = std::upper_bound(t.sorted.begin(), t.sorted.end(), e) -
                   t.sorted.begin();
    const double below = (k * e - t.prefix[k]) / n;
    const double above = ((total - t.prefix[k]) - (n - k) * e) / n;
    return tau * above - (1.0 - tau) * below;
  };
  double lo = t.sorted.front(), hi = t.sorted.back();
  for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, std::abs(lo)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (imbalance(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

}  // namespace detail

// tau-expectile of the problem's noise variable, computed once per
// (problem, tau) from the cached master-seed sample.
inline double noise_expectile(const StochasticProblem& p, double tau) {
  require(tau > 0.0 && tau < 1.0, "noise_expectile: tau must lie in (0,1)");
  static std::mutex mu;
  static std::map<std::pair<std::string, double>, double> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find({p.name, tau});
    if (it != cache.end()) return it->second;
  }
  const double e = detail::sample_expectile(detail::noise_table(p), tau);
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(std::make_pair(p.name, tau), e);
  return e;
}

inline double oracle_quantile(const StochasticProblem& p, double tau, const Vector& x) {
  require(tau > 0.0 && tau < 1.0, "oracle_quantile: tau must lie in (0,1)");
  return p.location(x) + p.scale(x) * p.noise_quantile(tau);
}

inline double oracle_expectile(const StochasticProblem& p, double tau, const Vector& x) {
  return p.location(x) + p.scale(x) * noise_expectile(p, tau);
}

inline double oracle_value(const StochasticProblem& p, const TailMeasure& measure,
                           const Vector& x) {
  return measure.kind == MeasureKind::Quantile
             ? oracle_quantile(p, measure.tau, x)
             : oracle_expectile(p, measure.tau, x);
}

struct OptimumInfo {
  Vector x;
  double value = 0.0;
};

namespace detail {

// Coordinate descent polish of a scan candidate; derivative-free and fully
// deterministic.
template <typename F>
std::pair<Vector, double> refine_local(F&& f, Vector x, double fx, const Box& box) {
  Vector step = 0.01 * box.widths();
  const double tol = 1e-13 * box.widths().maxCoeff();
  for (int sweep = 0; sweep < 20000 && step.maxCoeff() > tol; ++sweep) {
    bool improved = false;
    for (int d = 0; d < box.dim(); ++d) {
      for (const double s : {step[d], -step[d]}) {
        Vector cand = x;
        cand[d] = std::clamp(cand[d] + s, box.lower[d], box.upper[d]);
        const double fc = f(cand);
        if (fc > fx) {
          x = std::move(cand);
          fx = fc;
          improved = true;
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return {std::move(x), fx};
}

inline std::string optimum_cache_name(const StochasticProblem& p,
                                      const TailMeasure& measure) {
  std::ostringstream name;
  name << p.name << '_'
       << (measure.kind == MeasureKind::Quantile ? "quantile" : "expectile")
       << "_tau" << std::fixed << std::setprecision(6) << measure.tau << ".json";
  return name.str();
}

}  // namespace detail

// Maximizer of the oracle surface: dense quasi-random scan (10^6 points,
// chunked) followed by local refinement of the best scan candidates. Cached
// in-process and, when cache_dir is non-empty, on disk in a self-describing
// JSON file.
inline OptimumInfo true_optimum(const StochasticProblem& p, const TailMeasure& measure,
                                const std::string& cache_dir = "") {
  static std::mutex mu;
  static std::map<std::string, OptimumInfo> memo;
  const std::string key = p.name + "/" + detail::optimum_cache_name(p, measure);
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
  }

  namespace fs = std::filesystem;
  const fs::path cache_file =
      cache_dir.empty() ? fs::path{}
                        : fs::path(cache_dir) / detail::optimum_cache_name(p, measure);
  if (!cache_file.empty() && fs::exists(cache_file)) {
    try {
      std::ifstream in(cache_file);
      const auto j = nlohmann::json::parse(in);
      if (j.at("problem") == p.name &&
          j.at("noise_seed") == p.noise_seed &&
          j.at("samples") == detail::kOracleSamples &&
          j.at("measure") ==
              (measure.kind == MeasureKind::Quantile ? "quantile" : "expectile") &&
          std::abs(j.at("tau").get<double>() - measure.tau) < 1e-12) {
        OptimumInfo info;
        const auto& xs = j.at("x");
        info.x.resize(static_cast<int>(xs.size()));
        for (int d = 0; d < info.x.size(); ++d) info.x[d] = xs[d].get<double>();
        info.value = j.at("value").get<double>();
        std::lock_guard<std::mutex> lock(mu);
        memo.emplace(key, info);
        return info;
      }
    } catch (const std::exception&) {
      // stale or corrupt cache entry: fall through and recompute
    }
  }

  auto f = [&](const Vector& x) { return oracle_value(p, measure, x); };
  const int total = 1000000, chunk = 65536;
  Vector best_x;
  double best_val = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, Vector>> top;
  for (int done = 0; done < total;) {
    const int n = std::min(chunk, total - done);
    const Matrix X = halton_scan(p.box, n, 1 + static_cast<std::uint64_t>(done));
    for (int i = 0; i < n; ++i) {
      const Vector xi = X.row(i).transpose();
      const double v = f(xi);
      if (v > best_val) {
        best_val = v;
        best_x = xi;
      }
      top.emplace_back(v, xi);
    }
    std::partial_sort(top.begin(), top.begin() + std::min<std::size_t>(32, top.size()),
                      top.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    top.resize(std::min<std::size_t>(32, top.size()));
    done += n;
  }

  OptimumInfo info{best_x, best_val};
  for (const auto& [v, x0] : top) {
    auto [xr, vr] = detail::refine_local(f, x0, v, p.box);
    if (vr > info.value) {
      info.value = vr;
      info.x = std::move(xr);
    }
  }

  if (!cache_file.empty()) {
    fs::create_directories(cache_file.parent_path());
    nlohmann::json j;
    j["problem"] = p.name;
    j["noise_seed"] = p.noise_seed;
    j["samples"] = detail::kOracleSamples;
    j["measure"] = measure.kind == MeasureKind::Quantile ? "quantile" : "expectile";
    j["tau"] = measure.tau;
    j["x"] = std::vector<double>(info.x.data(), info.x.data() + info.x.size());
    j["value"] = info.value;
    std::ofstream out(cache_file);
    out << j.dump(2) << '\n';
  }

  std::lock_guard<std::mutex> lock(mu);
  memo.emplace(key, info);
  return info;
}

// Combined hash of every oracle cache file in a directory, for provenance
// stamping in run metadata.
inline std::string oracle_cache_hash(const std::string& cache_dir) {
  namespace fs = std::filesystem;
  if (cache_dir.empty() || !fs::exists(cache_dir)) return "none";
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(cache_dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    all += path.filename().string();
    all += '\0';
    all += body.str();
    all += '\0';
  }
  return detail::fnv1a64_hex(all);
}

}  // namespace tailbo
