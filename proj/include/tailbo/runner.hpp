#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tailbo/acquisition.hpp"
#include "tailbo/baseline_qk.hpp"
#include "tailbo/benchmark.hpp"
#include "tailbo/checkpoint.hpp"
#include "tailbo/chained_vgp.hpp"
#include "tailbo/config.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/rng.hpp"

namespace tailbo {

constexpr int kTestPoints = 4000;

// Snapshot taken after the initial fit (iteration 0) and after every
// acquisition round: cumulative evaluation count, recommended point and its
// quality metrics, and the wall time the round took.
struct IterationRecord {
  int iteration = 0;
  long evaluations = 0;
  Vector incumbent;
  double regret = 0.0;
  double rmse = 0.0;
  double wall_ms = 0.0;
};

struct RunResult {
  RunConfig config;
  std::vector<IterationRecord> records;
  bool failed = false;
  std::string failure_reason;
  bool has_model = false;  // chained strategies carry their final model
  ChainedModel model = placeholder_model();
  Box box;
};

// Difference between the optimal measure value and the measure value at the
// recommended point. Non-negative up to oracle precision.
inline double simple_regret(const StochasticProblem& prob, const TailMeasure& measure,
                            const Vector& x_hat, const std::string& oracle_cache = "") {
  require(prob.box.contains(x_hat, 1e-9), "simple_regret: point outside the box");
  const OptimumInfo opt = true_optimum(prob, measure, oracle_cache);
  return opt.value - oracle_value(prob, measure, x_hat);
}

// Root mean squared error between a surrogate's measure-surface mean and the
// oracle over uniformly drawn test points. The seed pins the test set.
inline double rmse_metric(const StochasticProblem& prob, const TailMeasure& measure,
                          const std::function<Vector(const Matrix&)>& mean_fn,
                          int n_test, std::uint64_t seed) {
  require(n_test >= 1, "rmse_metric: need at least one test point");
  Rng rng = seeded_rng(seed);
  Matrix X(n_test, prob.dim());
  for (int i = 0; i < n_test; ++i) X.row(i) = prob.box.sample(rng).transpose();
  const Vector mean = mean_fn(X);
  require(mean.size() == n_test, "rmse_metric: mean_fn returned wrong length");
  double sq = 0.0;
  for (int i = 0; i < n_test; ++i) {
    const double d = mean[i] - oracle_value(prob, measure, X.row(i).transpose());
    sq += d * d;
  }
  return std::sqrt(sq / n_test);
}

// Recommended point: argmax of the posterior measure-surface mean.
inline Vector recommend_point(const ChainedModel& model, const Box& box, Rng& rng,
                              const InnerOptions& opt = InnerOptions()) {
  const Predictor pred(model);
  const auto mean_batch = [&pred](const Matrix& X) {
    return pred.measure_marginals(X).first;
  };
  return maximize_pattern_search(mean_batch, box, rng, opt).x;
}

// Design point with the largest QK posterior mean.
inline Vector qk_incumbent_point(const QKState& state) {
  const auto [mean, var] = state.model.predict(state.design.points);
  int best = 0;
  for (int i = 1; i < mean.size(); ++i)
    if (mean[i] > mean[best]) best = i;
  return state.design.points.row(best).transpose();
}

namespace detail {

inline std::string resolve_oracle_cache(const std::string& requested) {
  if (!requested.empty()) return requested;
  const char* env = std::getenv("TAILBO_ORACLE_CACHE");
  return env ? std::string(env) : std::string();
}

inline Matrix box_corners(const Box& box) {
  const int D = box.dim();
  require(D <= 20, "box_corners: dimension too large");
  const int n = 1 << D;
  Matrix C(n, D);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < D; ++d)
      C(i, d) = (i >> d) & 1 ? box.upper[d] : box.lower[d];
  return C;
}

inline TrainingSchedule make_schedule(const ScheduleConfig& s, bool freeze,
                                      std::uint64_t seed) {
  TrainingSchedule sch;
  sch.epochs = s.epochs;
  sch.learning_rate = s.learning_rate;
  sch.freeze_kernel_hyperparameters = freeze;
  sch.seed = seed;
  return sch;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

class IterationClock {
 public:
  double lap_ms() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline std::string iterations_csv(const std::vector<IterationRecord>& records) {
  std::ostringstream out;
  out << "iter,evals,regret,rmse,wall_ms\n";
  for (const IterationRecord& r : records)
    out << r.iteration << ',' << r.evaluations << ',' << format_double(r.regret) << ','
        << format_double(r.rmse) << ',' << format_double(r.wall_ms) << '\n';
  return out.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw config_error("failed writing '" + path.string() + "'");
}

inline void write_run_artifacts(const std::string& dir, const RunResult& result,
                                const std::string& oracle_cache) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_text_file(fs::path(dir) / "config", render_config(result.config));
  write_text_file(fs::path(dir) / "iterations.csv", iterations_csv(result.records));
  if (result.has_model)
    save_checkpoint((fs::path(dir) / "checkpoint").string(), result.model, result.box);

  nlohmann::json meta;
  meta["problem"] = result.config.problem;
  meta["strategy"] = result.config.strategy;
  meta["measure"] = {{"kind", result.config.measure_kind}, {"tau", result.config.tau}};
  meta["seed"] = result.config.seed;
  meta["status"] = result.failed ? "failed" : "ok";
  if (result.failed) meta["failure_reason"] = result.failure_reason;
  meta["records"] = static_cast<int>(result.records.size());
  meta["evaluations"] =
      result.records.empty() ? 0 : result.records.back().evaluations;
  if (!result.records.empty()) {
    nlohmann::json inc = nlohmann::json::array();
    const Vector& x = result.records.back().incumbent;
    for (int d = 0; d < x.size(); ++d) inc.push_back(x[d]);
    meta["incumbent"] = inc;
  }
  meta["oracle_cache_hash"] = oracle_cache_hash(oracle_cache);
  meta["versions"] = {{"checkpoint_format", kCheckpointFormat},
                      {"compiler", __VERSION__},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                    std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)}};
  write_text_file(fs::path(dir) / "meta", meta.dump(2) + "\n");
}

// One evaluation round for the chained strategies: how many strategy-driven
// and how many uniform points to draw. The final round shrinks so the total
// budget is hit exactly.
struct BatchPlan {
  int acquired = 0;
  int random = 0;
  int total() const { return acquired + random; }
};

inline BatchPlan next_batch(const RunConfig& cfg, long evaluations) {
  const long remaining = cfg.total_budget - evaluations;
  BatchPlan plan;
  plan.acquired = static_cast<int>(std::min<long>(cfg.batch_acquired, remaining));
  plan.random = static_cast<int>(
      std::min<long>(cfg.batch_random, remaining - plan.acquired));
  return plan;
}

inline RunResult run_chained(const RunConfig& cfg, const StochasticProblem& prob,
                             const std::string& oracle_cache) {
  const Box& box = prob.box;
  const TailMeasure measure = cfg.measure();
  const int D = prob.dim();

  RunResult result;
  result.config = cfg;
  result.box = box;

  Rng rng = seeded_rng(cfg.seed);
  Rng metrics_rng = substream(cfg.seed, 0x3e7);
  std::uint64_t test_state = cfg.seed ^ 0x7e57ULL;
  const std::uint64_t test_seed = splitmix64(test_state);

  Dataset data;
  data.X = latin_hypercube(box, cfg.initial_design_size, rng);
  data.y.resize(cfg.initial_design_size);
  for (int i = 0; i < cfg.initial_design_size; ++i)
    data.y[i] = prob.sample(data.X.row(i).transpose(), rng);

  Matrix Z = data.X.topRows(cfg.inducing_count);
  if (cfg.inducing_corners) {
    const Matrix corners = box_corners(box);
    Matrix stacked(Z.rows() + corners.rows(), D);
    stacked << Z, corners;
    Z = std::move(stacked);
  }

  ChainedModel model = make_initial_model(Z, box, data, measure);
  long evaluations = cfg.initial_design_size;
  IterationClock clock;

  const auto record_state = [&](int iteration) {
    IterationRecord rec;
    rec.iteration = iteration;
    rec.evaluations = evaluations;
    rec.incumbent = recommend_point(model, box, metrics_rng);
    rec.regret = simple_regret(prob, measure, rec.incumbent, oracle_cache);
    const Predictor pred(model);
    rec.rmse = rmse_metric(
        prob, measure,
        [&pred](const Matrix& X) { return pred.measure_marginals(X).first; },
        kTestPoints, test_seed);
    rec.wall_ms = clock.lap_ms();
    result.records.push_back(std::move(rec));
  };

  try {
    if (cfg.training_initial.epochs > 0)
      train(model, data, make_schedule(cfg.training_initial, false, rng()));
    record_state(0);

    for (int iteration = 1;; ++iteration) {
      const BatchPlan plan = next_batch(cfg, evaluations);
      if (plan.total() == 0) break;

      Matrix Xb(plan.total(), D);
      if (plan.acquired > 0) {
        const std::vector<Vector> batch =
            cfg.strategy == "ucb"
                ? propose_batch_ucb(model, plan.acquired, box, rng)
                : propose_batch_ts(model, plan.acquired, cfg.rff_features, box, rng);
        for (int i = 0; i < plan.acquired; ++i) Xb.row(i) = batch[i].transpose();
      }
      for (int i = 0; i < plan.random; ++i)
        Xb.row(plan.acquired + i) = box.sample(rng).transpose();

      const int old_n = data.size();
      data.X.conservativeResize(old_n + plan.total(), D);
      data.y.conservativeResize(old_n + plan.total());
      for (int i = 0; i < plan.total(); ++i) {
        data.X.row(old_n + i) = Xb.row(i);
        data.y[old_n + i] = prob.sample(Xb.row(i).transpose(), rng);
      }
      evaluations += plan.total();

      if (cfg.training_update_variational.epochs > 0)
        train(model, data,
              make_schedule(cfg.training_update_variational, true, rng()));
      if (cfg.training_update_joint.epochs > 0)
        train(model, data, make_schedule(cfg.training_update_joint, false, rng()));

      record_state(iteration);
    }
    result.has_model = true;
    result.model = std::move(model);
  } catch (const numerical_error& err) {
    result.failed = true;
    result.failure_reason = err.what();
  }
  return result;
}

inline RunResult run_qk_baseline(const RunConfig& cfg, const StochasticProblem& prob,
                                 const std::string& oracle_cache) {
  const Box& box = prob.box;
  const TailMeasure measure = cfg.measure();
  const int r = cfg.replicates(prob.dim());
  const int k = cfg.initial_design_size / r;
  require(k >= prob.dim() + 1,
          "run_experiment: initial budget too small for the replicate count");

  RunResult result;
  result.config = cfg;
  result.box = box;

  Rng rng = seeded_rng(cfg.seed);
  std::uint64_t test_state = cfg.seed ^ 0x7e57ULL;
  const std::uint64_t test_seed = splitmix64(test_state);
  const SamplerFn sampler = [&prob](const Vector& x, Rng& r2) {
    return prob.sample(x, r2);
  };

  IterationClock clock;
  const auto record_state = [&](int iteration, const QKState& state) {
    IterationRecord rec;
    rec.iteration = iteration;
    rec.evaluations = state.evaluations;
    rec.incumbent = qk_incumbent_point(state);
    rec.regret = simple_regret(prob, measure, rec.incumbent, oracle_cache);
    rec.rmse = rmse_metric(
        prob, measure,
        [&state](const Matrix& X) { return state.model.predict(X).first; },
        kTestPoints, test_seed);
    rec.wall_ms = clock.lap_ms();
    result.records.push_back(std::move(rec));
  };

  try {
    QKState state = make_qk_state(make_replicated_design(sampler, box, k, r, rng),
                                  measure, box, rng);
    record_state(0, state);
    for (int iteration = 1;; ++iteration) {
      const long budget_left = cfg.total_budget - state.evaluations;
      if (!qk_bo_step(state, sampler, measure, box, budget_left, rng)) break;
      record_state(iteration, state);
    }
  } catch (const numerical_error& err) {
    result.failed = true;
    result.failure_reason = err.what();
  }
  return result;
}

}  // namespace detail

// Executes one full experiment. When artifact_dir is non-empty, writes the
// run artifact (config echo, iterations.csv, checkpoint for chained
// strategies, meta). Training failures mark the run failed and keep the
// records gathered so far.
inline RunResult run_experiment(const RunConfig& cfg,
                                const std::string& artifact_dir = "",
                                const std::string& oracle_cache_dir = "") {
  cfg.validate();
  const StochasticProblem prob = problem_by_name(cfg.problem);
  const std::string oracle_cache = detail::resolve_oracle_cache(oracle_cache_dir);
  true_optimum(prob, cfg.measure(), oracle_cache);  // warm the shared cache

  RunResult result = cfg.is_ei() ? detail::run_qk_baseline(cfg, prob, oracle_cache)
                                 : detail::run_chained(cfg, prob, oracle_cache);
  if (!artifact_dir.empty())
    detail::write_run_artifacts(artifact_dir, result, oracle_cache);
  return result;
}

// Per-iteration aggregate across replicated runs (failed runs excluded).
struct AggregateRecord {
  int iteration = 0;
  long evaluations = 0;
  double median_regret = 0.0;
  double median_rmse = 0.0;
  int runs = 0;
};

struct ReplicateReport {
  RunConfig base_config;
  int n_runs = 0;
  int n_failed = 0;
  std::vector<AggregateRecord> records;
  std::vector<RunResult> runs;
};

// Reads back the iterations.csv format written by write_run_artifacts. The
// incumbent is not stored in the CSV, so parsed records carry metrics only.
inline std::vector<IterationRecord> parse_iterations_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "iter,evals,regret,rmse,wall_ms")
    throw config_error("iterations.csv: unexpected header '" + line + "'");
  std::vector<IterationRecord> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    IterationRecord rec;
    char c1, c2, c3, c4;
    if (!(row >> rec.iteration >> c1 >> rec.evaluations >> c2 >> rec.regret >> c3 >>
          rec.rmse >> c4 >> rec.wall_ms) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw config_error("iterations.csv: malformed row at line " +
                         std::to_string(lineno));
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::string aggregate_csv(const std::vector<AggregateRecord>& records) {
  std::ostringstream out;
  out << "iteration,evaluations,median_regret,median_rmse,runs\n";
  for (const AggregateRecord& r : records)
    out << r.iteration << ',' << r.evaluations << ','
        << detail::format_double(r.median_regret) << ','
        << detail::format_double(r.median_rmse) << ',' << r.runs << '\n';
  return out.str();
}

inline std::vector<AggregateRecord> aggregate_records(
    const std::vector<std::vector<IterationRecord>>& runs) {
  std::size_t depth = 0;
  for (const auto& records : runs) depth = std::max(depth, records.size());
  std::vector<AggregateRecord> agg;
  for (std::size_t i = 0; i < depth; ++i) {
    AggregateRecord rec;
    std::vector<double> regret, rmse;
    for (const auto& records : runs) {
      if (records.size() <= i) continue;
      const IterationRecord& it = records[i];
      if (regret.empty()) {
        rec.iteration = it.iteration;
        rec.evaluations = it.evaluations;
      } else {
        require(rec.evaluations == it.evaluations,
                "aggregate_records: runs disagree on the evaluation schedule");
      }
      regret.push_back(it.regret);
      rmse.push_back(it.rmse);
    }
    if (regret.empty()) continue;
    rec.median_regret = detail::median_of(regret);
    rec.median_rmse = detail::median_of(rmse);
    rec.runs = static_cast<int>(regret.size());
    agg.push_back(rec);
  }
  return agg;
}

inline std::vector<AggregateRecord> aggregate_records(
    const std::vector<RunResult>& runs) {
  std::vector<std::vector<IterationRecord>> survivors;
  for (const RunResult& run : runs)
    if (!run.failed) survivors.push_back(run.records);
  return aggregate_records(survivors);
}

// Runs n_runs copies of the experiment with seeds base, base+1, ... and
// aggregates per-iteration medians over the runs that completed. Runs execute
// on up to `threads` workers; results are deterministic regardless of the
// thread count.
inline ReplicateReport replicate_runs(const RunConfig& base, int n_runs,
                                      const std::string& out_dir = "",
                                      int threads = 1,
                                      const std::string& oracle_cache_dir = "") {
  require(n_runs >= 1, "replicate_runs: need at least one run");
  require(threads >= 1, "replicate_runs: need at least one thread");
  base.validate();
  namespace fs = std::filesystem;

  const StochasticProblem prob = problem_by_name(base.problem);
  const std::string oracle_cache = detail::resolve_oracle_cache(oracle_cache_dir);
  // Resolve the heavy shared oracle quantities once, before any worker starts.
  true_optimum(prob, base.measure(), oracle_cache);

  ReplicateReport report;
  report.base_config = base;
  report.n_runs = n_runs;
  report.runs.resize(n_runs);

  std::vector<std::exception_ptr> errors(n_runs);
  std::atomic<int> next{0};
  const auto worker = [&]() {
    for (;;) {
      const int j = next.fetch_add(1);
      if (j >= n_runs) return;
      try {
        RunConfig cfg = base;
        cfg.seed = base.seed + static_cast<std::uint64_t>(j);
        std::string dir;
        if (!out_dir.empty())
          dir = (fs::path(out_dir) / "runs" / ("seed_" + std::to_string(cfg.seed)))
                    .string();
        report.runs[j] = run_experiment(cfg, dir, oracle_cache);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };

  if (threads == 1 || n_runs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int n_threads = std::min(threads, n_runs);
    pool.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  for (int j = 0; j < n_runs; ++j)
    if (errors[j]) std::rethrow_exception(errors[j]);

  for (const RunResult& run : report.runs)
    if (run.failed) ++report.n_failed;
  report.records = aggregate_records(report.runs);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    detail::write_text_file(fs::path(out_dir) / "config", render_config(base));
    detail::write_text_file(fs::path(out_dir) / "aggregate.csv",
                            aggregate_csv(report.records));
    nlohmann::json meta;
    meta["problem"] = base.problem;
    meta["strategy"] = base.strategy;
    meta["runs"] = n_runs;
    meta["failed"] = report.n_failed;
    meta["base_seed"] = base.seed;
    meta["oracle_cache_hash"] = oracle_cache_hash(oracle_cache);
    detail::write_text_file(fs::path(out_dir) / "meta", meta.dump(2) + "\n");
  }
  return report;
}

}  // namespace tailbo
