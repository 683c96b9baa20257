#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "tailbo/box.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

// Shared contract for every acquisition maximizer: multi-start local search
// seeded by 20*D uniform draws plus the best point of a 512-point
// quasi-random scan, refined for at most 200 iterations, box-projected,
// deterministic given the random source. Ties resolve to the first candidate
// in evaluation order.
struct InnerOptions {
  int starts_per_dim = 20;
  int scan_points = 512;
  int max_iterations = 200;
  double initial_step_fraction = 0.25;
  double step_tolerance = 1e-10;
};

struct InnerOptResult {
  Vector x;
  double value = 0.0;
};

namespace detail {

// Start list: [scan argmax, uniform starts...]; values included so callers
// skip re-evaluation.
template <typename FBatch>
std::vector<std::pair<Vector, double>> collect_starts(FBatch&& f, const Box& box,
                                                      Rng& rng,
                                                      const InnerOptions& opt) {
  require(opt.scan_points >= 1 && opt.starts_per_dim >= 0,
          "InnerOptions: invalid start counts");
  const int D = box.dim();
  const Matrix scan = halton_scan(box, opt.scan_points);
  const Vector scan_vals = f(scan);
  int best = 0;
  for (int i = 1; i < scan_vals.size(); ++i)
    if (scan_vals[i] > scan_vals[best]) best = i;

  const int n_uniform = opt.starts_per_dim * D;
  Matrix uniform(n_uniform, D);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < n_uniform; ++i)
    for (int d = 0; d < D; ++d)
      uniform(i, d) = box.lower[d] + (box.upper[d] - box.lower[d]) * u01(rng);

  std::vector<std::pair<Vector, double>> starts;
  starts.reserve(1 + n_uniform);
  starts.emplace_back(scan.row(best).transpose(), scan_vals[best]);
  if (n_uniform > 0) {
    const Vector uniform_vals = f(uniform);
    for (int i = 0; i < n_uniform; ++i)
      starts.emplace_back(uniform.row(i).transpose(), uniform_vals[i]);
  }
  return starts;
}

}  // namespace detail

// Derivative-free refinement: per-start coordinate pattern search with step
// halving. All active starts are advanced together so the objective sees one
// batched evaluation per sweep.
template <typename FBatch>
InnerOptResult maximize_pattern_search(FBatch&& f, const Box& box, Rng& rng,
                                       const InnerOptions& opt = InnerOptions()) {
  const int D = box.dim();
  auto starts = detail::collect_starts(f, box, rng, opt);

  struct State {
    Vector x;
    double fx;
    Vector step;
    bool active;
  };
  const Vector widths = box.widths();
  const double tol = opt.step_tolerance * widths.maxCoeff();
  std::vector<State> states;
  states.reserve(starts.size());
  for (auto& s : starts)
    states.push_back({std::move(s.first), s.second,
                      opt.initial_step_fraction * widths, true});

  for (int sweep = 0; sweep < opt.max_iterations; ++sweep) {
    std::vector<int> active;
    for (int i = 0; i < static_cast<int>(states.size()); ++i)
      if (states[i].active) active.push_back(i);
    if (active.empty()) break;

    Matrix proposals(static_cast<int>(active.size()) * 2 * D, D);
    int row = 0;
    for (int idx : active) {
      const State& s = states[idx];
      for (int d = 0; d < D; ++d) {
        Vector up = s.x, down = s.x;
        up[d] += s.step[d];
        down[d] -= s.step[d];
        proposals.row(row++) = box.clip(up).transpose();
        proposals.row(row++) = box.clip(down).transpose();
      }
    }
    const Vector vals = f(proposals);

    row = 0;
    for (int idx : active) {
      State& s = states[idx];
      int best = -1;
      double best_val = s.fx;
      for (int k = 0; k < 2 * D; ++k) {
        if (vals[row + k] > best_val) {
          best_val = vals[row + k];
          best = k;
        }
      }
      if (best >= 0) {
        s.x = proposals.row(row + best).transpose();
        s.fx = best_val;
      } else {
        s.step *= 0.5;
        if (s.step.maxCoeff() < tol) s.active = false;
      }
      row += 2 * D;
    }
  }

  int best = 0;
  for (int i = 1; i < static_cast<int>(states.size()); ++i)
    if (states[i].fx > states[best].fx) best = i;
  return {states[best].x, states[best].fx};
}

// Gradient-based refinement for objectives with cheap analytic gradients:
// projected ascent with multiplicative step adaptation per start.
template <typename FBatch, typename ValueGrad>
InnerOptResult maximize_gradient_ascent(FBatch&& f, ValueGrad&& value_grad,
                                        const Box& box, Rng& rng,
                                        const InnerOptions& opt = InnerOptions()) {
  auto starts = detail::collect_starts(f, box, rng, opt);
  const Vector widths = box.widths();
  const double width_scale = widths.maxCoeff();

  InnerOptResult out{starts.front().first, starts.front().second};
  bool first = true;
  for (auto& [x0, f0] : starts) {
    Vector x = x0;
    double fx = f0;
    double step = 0.05 * width_scale;
    Vector grad(box.dim());
    double gnorm = 0.0;
    bool grad_stale = true;
    Matrix one(1, box.dim());
    for (int it = 0; it < opt.max_iterations; ++it) {
      if (grad_stale) {
        const double v = value_grad(x, grad);
        fx = std::max(fx, v);
        gnorm = grad.norm();
        if (!std::isfinite(gnorm) || gnorm < 1e-14) break;
        grad_stale = false;
      }
      const Vector cand = box.clip(x + (step / gnorm) * grad);
      one.row(0) = cand.transpose();
      const double fc = f(one)[0];
      if (fc > fx) {
        x = cand;
        fx = fc;
        step *= 1.5;
        grad_stale = true;
      } else {
        step *= 0.5;
        if (step < opt.step_tolerance * width_scale) break;
      }
    }
    if (first || fx > out.value) {
      out.x = x;
      out.value = fx;
      first = false;
    }
  }
  return out;
}

}  // namespace tailbo
