#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tailbo/acquisition.hpp"
#include "tailbo/benchmark.hpp"
#include "tailbo/checkpoint.hpp"
#include "tailbo/chained_vgp.hpp"
#include "tailbo/config.hpp"
#include "tailbo/dataset_io.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/runner.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tailbo;

Vector parse_bound(const std::string& csv, const std::string& flag) {
  std::vector<double> vals;
  std::stringstream in(csv);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      vals.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw config_error(flag + ": not a number: '" + tok + "'");
    }
  }
  if (vals.empty()) throw config_error(flag + ": empty bound list");
  Vector v(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) v[static_cast<int>(i)] = vals[i];
  return v;
}

Box data_box(const Matrix& X) {
  Vector lo = X.colwise().minCoeff();
  Vector hi = X.colwise().maxCoeff();
  for (int d = 0; d < lo.size(); ++d) {
    const double pad = std::max(0.05 * (hi[d] - lo[d]), 0.5 * 1e-9);
    if (hi[d] - lo[d] < 1e-9) {
      lo[d] -= 0.5;
      hi[d] += 0.5;
    } else {
      lo[d] -= pad;
      hi[d] += pad;
    }
  }
  return Box{lo, hi};
}

TailMeasure make_measure(const std::string& kind, double tau) {
  if (kind == "quantile") return TailMeasure::quantile(tau);
  if (kind == "expectile") return TailMeasure::expectile(tau);
  throw config_error("--measure must be quantile or expectile, got '" + kind + "'");
}

void write_or_print(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw config_error("cannot write '" + out_path + "'");
  out << text;
}

struct FitArgs {
  std::string data_path, out_path;
  std::string measure_kind = "quantile";
  double tau = 0.5;
  int inducing = 100;
  int epochs = 2500;
  double learning_rate = 1e-2;
  std::uint64_t seed = 1;
  std::string lower, upper;
};

int cmd_fit(const FitArgs& a) {
  const Dataset data = read_dataset(a.data_path);
  const int n = data.size();
  const int D = static_cast<int>(data.X.cols());
  Box box = a.lower.empty() || a.upper.empty()
                ? data_box(data.X)
                : Box{parse_bound(a.lower, "--lower"), parse_bound(a.upper, "--upper")};
  if (box.dim() != D) throw config_error("--lower/--upper dimension mismatch");
  for (int i = 0; i < n; ++i)
    if (!box.contains(data.X.row(i).transpose(), 1e-9))
      throw config_error("dataset row " + std::to_string(i) + " lies outside the box");

  const int N = std::min(a.inducing, n);
  if (N < 1) throw config_error("--inducing must be >= 1");
  Matrix Z(N, D);
  for (int i = 0; i < N; ++i) {
    const int idx = N == 1 ? 0 : static_cast<int>((static_cast<long>(i) * (n - 1)) /
                                                  (N - 1));
    Z.row(i) = data.X.row(idx);
  }

  ChainedModel model = make_initial_model(Z, box, data, make_measure(a.measure_kind, a.tau));
  TrainingSchedule schedule;
  schedule.epochs = a.epochs;
  schedule.learning_rate = a.learning_rate;
  schedule.seed = a.seed;
  const TrainResult result = train(model, data, schedule);
  save_checkpoint(a.out_path, model, box);
  std::cout << "fit: " << n << " observations, " << N << " inducing points, final elbo "
            << detail::format_double(result.elbo_trace.back()) << "\n";
  std::cout << "checkpoint written to " << a.out_path << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint_path, points_path, out_path;
};

int cmd_predict(const PredictArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint_path);
  const Matrix X = read_points(a.points_path);
  if (X.cols() != ck.model.inducing.dim())
    throw config_error("points dimension does not match the checkpoint");
  const Predictor pred(ck.model);
  const PredictiveMarginals m = pred.predict(X);
  std::ostringstream out;
  out << "mean_g,var_g,mean_r,var_r\n";
  for (int i = 0; i < X.rows(); ++i)
    out << detail::format_double(m.mean_g[i]) << ',' << detail::format_double(m.var_g[i])
        << ',' << detail::format_double(m.mean_r[i]) << ','
        << detail::format_double(m.var_r[i]) << '\n';
  write_or_print(a.out_path, out.str());
  return 0;
}

struct SuggestArgs {
  std::string checkpoint_path, out_path;
  std::string strategy = "ucb";
  int batch = 1;
  int rff = 1024;
  std::uint64_t seed = 1;
};

int cmd_suggest(const SuggestArgs& a) {
  if (a.batch < 1) throw config_error("--batch must be >= 1");
  if (a.strategy != "ucb" && a.strategy != "ts")
    throw config_error("--strategy must be ucb or ts, got '" + a.strategy + "'");
  const Checkpoint ck = load_checkpoint(a.checkpoint_path);
  Rng rng = seeded_rng(a.seed);
  const std::vector<Vector> batch =
      a.strategy == "ucb" ? propose_batch_ucb(ck.model, a.batch, ck.box, rng)
                          : propose_batch_ts(ck.model, a.batch, a.rff, ck.box, rng);
  std::ostringstream out;
  out << "dim " << ck.box.dim() << "\n";
  for (const Vector& x : batch) {
    for (int d = 0; d < x.size(); ++d)
      out << (d ? " " : "") << detail::format_double(x[d]);
    out << "\n";
  }
  write_or_print(a.out_path, out.str());
  return 0;
}

struct RunArgs {
  std::string config_path, problem, strategy, measure_kind, out_dir, oracle_cache;
  double tau = -1.0;
  std::int64_t seed = -1;
  int total_budget = -1;
  int initial_design = -1;
  int runs = 30;
  int threads = 1;
};

RunConfig build_run_config(const RunArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty())
    cfg = parse_config_file(a.config_path);
  else if (!a.problem.empty())
    cfg = default_run_config(a.problem);
  else
    throw config_error("provide --config or --problem");
  if (!a.problem.empty() && a.config_path.empty()) cfg.problem = a.problem;
  if (!a.strategy.empty()) cfg.strategy = a.strategy;
  if (!a.measure_kind.empty()) cfg.measure_kind = a.measure_kind;
  if (a.tau >= 0.0) cfg.tau = a.tau;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.total_budget >= 0) cfg.total_budget = a.total_budget;
  if (a.initial_design >= 0) cfg.initial_design_size = a.initial_design;
  cfg.validate();
  return cfg;
}

int cmd_benchmark(const RunArgs& a) {
  const RunConfig cfg = build_run_config(a);
  const RunResult result = run_experiment(cfg, a.out_dir, a.oracle_cache);
  if (result.failed) {
    std::cerr << "run failed: " << result.failure_reason << "\n";
    return 3;
  }
  const IterationRecord& last = result.records.back();
  std::cout << "run complete: " << last.evaluations << " evaluations, final regret "
            << detail::format_double(last.regret) << ", final rmse "
            << detail::format_double(last.rmse) << "\n";
  if (!a.out_dir.empty()) std::cout << "artifact written to " << a.out_dir << "\n";
  return 0;
}

int cmd_replicate(const RunArgs& a) {
  if (a.runs < 1) throw config_error("--runs must be >= 1");
  const RunConfig cfg = build_run_config(a);
  const ReplicateReport report =
      replicate_runs(cfg, a.runs, a.out_dir, a.threads, a.oracle_cache);
  if (report.n_failed == report.n_runs) {
    std::cerr << "all " << report.n_runs << " runs failed\n";
    return 3;
  }
  const AggregateRecord& last = report.records.back();
  std::cout << "replicate complete: " << report.n_runs << " runs (" << report.n_failed
            << " failed), final median regret " << detail::format_double(last.median_regret)
            << ", final median rmse " << detail::format_double(last.median_rmse) << "\n";
  if (!a.out_dir.empty()) std::cout << "report written to " << a.out_dir << "\n";
  return 0;
}

struct ReportArgs {
  std::vector<std::string> run_dirs;
  std::string out_dir;
};

std::vector<std::string> collect_iteration_files(const std::string& dir) {
  std::vector<std::string> files;
  const fs::path direct = fs::path(dir) / "iterations.csv";
  if (fs::exists(direct)) {
    files.push_back(direct.string());
    return files;
  }
  const fs::path runs = fs::path(dir) / "runs";
  if (fs::is_directory(runs)) {
    std::vector<fs::path> subdirs;
    for (const auto& entry : fs::directory_iterator(runs))
      if (entry.is_directory()) subdirs.push_back(entry.path());
    std::sort(subdirs.begin(), subdirs.end());
    for (const fs::path& sub : subdirs)
      if (fs::exists(sub / "iterations.csv"))
        files.push_back((sub / "iterations.csv").string());
  }
  if (files.empty())
    throw config_error("no iterations.csv under '" + dir + "'");
  return files;
}

int cmd_report(const ReportArgs& a) {
  std::vector<std::vector<IterationRecord>> runs;
  for (const std::string& dir : a.run_dirs)
    for (const std::string& file : collect_iteration_files(dir)) {
      std::ifstream in(file);
      if (!in) throw config_error("cannot open '" + file + "'");
      std::ostringstream buf;
      buf << in.rdbuf();
      runs.push_back(parse_iterations_csv(buf.str()));
    }
  const std::vector<AggregateRecord> agg = aggregate_records(runs);
  if (agg.empty()) throw config_error("no iteration records found");

  std::ostringstream regret_dat, rmse_dat;
  regret_dat << "# evals median_regret\n";
  rmse_dat << "# evals median_rmse\n";
  for (const AggregateRecord& r : agg) {
    regret_dat << r.evaluations << ' ' << detail::format_double(r.median_regret) << '\n';
    rmse_dat << r.evaluations << ' ' << detail::format_double(r.median_rmse) << '\n';
  }
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    detail::write_text_file(fs::path(a.out_dir) / "aggregate.csv", aggregate_csv(agg));
    detail::write_text_file(fs::path(a.out_dir) / "regret_curve.dat", regret_dat.str());
    detail::write_text_file(fs::path(a.out_dir) / "rmse_curve.dat", rmse_dat.str());
  }
  const AggregateRecord& last = agg.back();
  std::cout << "runs: " << runs.size() << "\n";
  std::cout << "final evaluations: " << last.evaluations << "\n";
  std::cout << "final median regret: " << detail::format_double(last.median_regret) << "\n";
  std::cout << "final median rmse: " << detail::format_double(last.median_rmse) << "\n";
  if (!a.out_dir.empty()) std::cout << "report written to " << a.out_dir << "\n";
  return 0;
}

void add_run_flags(CLI::App* cmd, RunArgs& a, bool with_runs) {
  cmd->add_option("--config", a.config_path, "run configuration file");
  cmd->add_option("--problem", a.problem, "benchmark problem name");
  cmd->add_option("--strategy", a.strategy, "ucb | ts | ei_small | ei_large");
  cmd->add_option("--measure", a.measure_kind, "quantile | expectile");
  cmd->add_option("--tau", a.tau, "tail level in (0,1)");
  cmd->add_option("--seed", a.seed, "base seed");
  cmd->add_option("--total-budget", a.total_budget, "override total evaluation budget");
  cmd->add_option("--initial-design", a.initial_design, "override initial design size");
  cmd->add_option("--out", a.out_dir, "artifact directory");
  cmd->add_option("--oracle-cache", a.oracle_cache,
                  "directory for cached oracle optima (default: $TAILBO_ORACLE_CACHE)");
  if (with_runs) {
    cmd->add_option("--runs", a.runs, "number of replicated runs");
    cmd->add_option("--threads", a.threads, "worker threads");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chained sparse variational GP surrogates for tail measures"};
  app.require_subcommand(1);

  FitArgs fit_args;
  CLI::App* fit_cmd = app.add_subcommand("fit", "train a model on a dataset file");
  fit_cmd->add_option("--data", fit_args.data_path, "dataset file")->required();
  fit_cmd->add_option("--out", fit_args.out_path, "checkpoint path")->required();
  fit_cmd->add_option("--measure", fit_args.measure_kind, "quantile | expectile");
  fit_cmd->add_option("--tau", fit_args.tau, "tail level in (0,1)");
  fit_cmd->add_option("--inducing", fit_args.inducing, "number of inducing points");
  fit_cmd->add_option("--epochs", fit_args.epochs, "training epochs");
  fit_cmd->add_option("--learning-rate", fit_args.learning_rate, "Adam step size");
  fit_cmd->add_option("--seed", fit_args.seed, "training seed");
  fit_cmd->add_option("--lower", fit_args.lower, "comma-separated box lower bounds");
  fit_cmd->add_option("--upper", fit_args.upper, "comma-separated box upper bounds");

  PredictArgs predict_args;
  CLI::App* predict_cmd =
      app.add_subcommand("predict", "evaluate posterior marginals at query points");
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint_path, "checkpoint")
      ->required();
  predict_cmd->add_option("--points", predict_args.points_path, "query points file")
      ->required();
  predict_cmd->add_option("--out", predict_args.out_path, "output CSV (default stdout)");

  SuggestArgs suggest_args;
  CLI::App* suggest_cmd =
      app.add_subcommand("suggest", "propose a batch of evaluation points");
  suggest_cmd->add_option("--checkpoint", suggest_args.checkpoint_path, "checkpoint")
      ->required();
  suggest_cmd->add_option("--strategy", suggest_args.strategy, "ucb | ts");
  suggest_cmd->add_option("--batch", suggest_args.batch, "batch size");
  suggest_cmd->add_option("--rff", suggest_args.rff, "random feature count for ts");
  suggest_cmd->add_option("--seed", suggest_args.seed, "acquisition seed");
  suggest_cmd->add_option("--out", suggest_args.out_path, "output file (default stdout)");

  RunArgs benchmark_args;
  CLI::App* benchmark_cmd =
      app.add_subcommand("benchmark", "run one experiment and write its artifact");
  add_run_flags(benchmark_cmd, benchmark_args, false);

  RunArgs replicate_args;
  CLI::App* replicate_cmd =
      app.add_subcommand("replicate", "run an experiment across seeds and aggregate");
  add_run_flags(replicate_cmd, replicate_args, true);

  ReportArgs report_args;
  CLI::App* report_cmd =
      app.add_subcommand("report", "aggregate run artifacts into curves");
  report_cmd->add_option("dirs", report_args.run_dirs, "run or replicate artifact dirs")
      ->required();
  report_cmd->add_option("--out", report_args.out_dir, "output directory");

  try {
    app.parse(argc, argv);
    if (*fit_cmd) return cmd_fit(fit_args);
    if (*predict_cmd) return cmd_predict(predict_args);
    if (*suggest_cmd) return cmd_suggest(suggest_args);
    if (*benchmark_cmd) return cmd_benchmark(benchmark_args);
    if (*replicate_cmd) return cmd_replicate(replicate_args);
    if (*report_cmd) return cmd_report(report_args);
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const contract_error& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
