#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tailbo/benchmark.hpp"
#include "tailbo/errors.hpp"
#include "tailbo/likelihood.hpp"

namespace tailbo {

// One optimization phase: epoch count and Adam step size.
struct ScheduleConfig {
  int epochs = 0;
  double learning_rate = 0.0;
};

// Full description of one experiment run. Defaults depend on the problem
// dimension, so build instances through default_run_config and then override.
struct RunConfig {
  std::string problem = "griewank2d";
  std::string strategy = "ucb";  // ucb | ts | ei_small | ei_large
  std::string measure_kind = "quantile";
  double tau = 0.5;
  std::uint64_t seed = 1;

  int initial_design_size = 0;
  int batch_acquired = 0;
  int batch_random = 0;
  int total_budget = 0;

  int inducing_count = 0;       // inducing points taken from the initial design
  bool inducing_corners = false;  // append all box corners to the inducing set
  int rff_features = 1024;
  int ei_replicates = 0;  // 0 picks the protocol default for strategy + dim

  ScheduleConfig training_initial{2500, 1e-2};
  ScheduleConfig training_update_variational{200, 5e-3};
  ScheduleConfig training_update_joint{100, 1e-3};

  TailMeasure measure() const {
    if (measure_kind == "quantile") return TailMeasure::quantile(tau);
    if (measure_kind == "expectile") return TailMeasure::expectile(tau);
    throw config_error("measure.kind must be quantile or expectile, got '" +
                       measure_kind + "'");
  }

  bool is_ei() const { return strategy == "ei_small" || strategy == "ei_large"; }

  // Replicate count used by the EI baselines.
  int replicates(int dim) const {
    if (ei_replicates > 0) return ei_replicates;
    if (strategy == "ei_small") return 10;
    return dim <= 2 ? 20 : 35;
  }

  void validate() const {
    if (strategy != "ucb" && strategy != "ts" && strategy != "ei_small" &&
        strategy != "ei_large")
      throw config_error("strategy must be ucb, ts, ei_small or ei_large, got '" +
                         strategy + "'");
    if (measure_kind != "quantile" && measure_kind != "expectile")
      throw config_error("measure.kind must be quantile or expectile, got '" +
                         measure_kind + "'");
    if (!(tau > 0.0 && tau < 1.0))
      throw config_error("measure.tau must lie strictly in (0,1)");
    if (initial_design_size < 1) throw config_error("design.initial_size must be >= 1");
    if (total_budget < initial_design_size)
      throw config_error("design.total_budget must cover the initial design");
    if (is_ei()) {
      if (ei_replicates < 0 || ei_replicates == 1)
        throw config_error("model.ei_replicates must be 0 (auto) or >= 2");
    } else {
      if (batch_acquired < 1) throw config_error("design.batch_acquired must be >= 1");
      if (batch_random < 0) throw config_error("design.batch_random must be >= 0");
      if (inducing_count < 1) throw config_error("model.inducing_count must be >= 1");
      if (inducing_count > initial_design_size)
        throw config_error("model.inducing_count cannot exceed the initial design size");
      if (rff_features < 1) throw config_error("model.rff_features must be >= 1");
      for (const auto* s : {&training_initial, &training_update_variational,
                            &training_update_joint}) {
        if (s->epochs < 0) throw config_error("training epochs must be >= 0");
        if (s->epochs > 0 && !(s->learning_rate > 0.0))
          throw config_error("training learning_rate must be positive");
      }
    }
  }
};

// Protocol defaults for a named benchmark problem.
inline RunConfig default_run_config(const std::string& problem) {
  int d = 0;
  try {
    d = problem_by_name(problem).dim();
  } catch (const contract_error& err) {
    throw config_error(err.what());
  }
  RunConfig cfg;
  cfg.problem = problem;
  cfg.initial_design_size = 50 * d;
  cfg.batch_acquired = 10 * d;
  cfg.batch_random = 2 * d;
  cfg.total_budget = d <= 2 ? 350 : 1100;
  cfg.inducing_count = cfg.initial_design_size;
  cfg.inducing_corners = d > 2;
  return cfg;
}

namespace detail {

inline std::string trim_copy(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw config_error("key '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(x);
  } catch (const std::exception&) {
    throw config_error("key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline bool apply_config_key(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
  if (key == "problem") cfg.problem = value;
  else if (key == "strategy") cfg.strategy = value;
  else if (key == "seed") cfg.seed = parse_u64(value, key);
  else if (key == "measure.kind") cfg.measure_kind = value;
  else if (key == "measure.tau") cfg.tau = parse_double(value, key);
  else if (key == "design.initial_size") cfg.initial_design_size = parse_int(value, key);
  else if (key == "design.batch_acquired") cfg.batch_acquired = parse_int(value, key);
  else if (key == "design.batch_random") cfg.batch_random = parse_int(value, key);
  else if (key == "design.total_budget") cfg.total_budget = parse_int(value, key);
  else if (key == "model.inducing_count") cfg.inducing_count = parse_int(value, key);
  else if (key == "model.inducing_corners") cfg.inducing_corners = parse_bool(value, key);
  else if (key == "model.rff_features") cfg.rff_features = parse_int(value, key);
  else if (key == "model.ei_replicates") cfg.ei_replicates = parse_int(value, key);
  else if (key == "training.initial.epochs")
    cfg.training_initial.epochs = parse_int(value, key);
  else if (key == "training.initial.learning_rate")
    cfg.training_initial.learning_rate = parse_double(value, key);
  else if (key == "training.update_variational.epochs")
    cfg.training_update_variational.epochs = parse_int(value, key);
  else if (key == "training.update_variational.learning_rate")
    cfg.training_update_variational.learning_rate = parse_double(value, key);
  else if (key == "training.update_joint.epochs")
    cfg.training_update_joint.epochs = parse_int(value, key);
  else if (key == "training.update_joint.learning_rate")
    cfg.training_update_joint.learning_rate = parse_double(value, key);
  else
    return false;
  return true;
}

}  // namespace detail

// Parses the key/value run-configuration format:
//   - '#' starts a comment, blank lines are ignored
//   - '[section]' opens a (possibly dotted) section
//   - 'key = value' assigns within the current section
// Any unrecognized section.key combination is an error. Keys not present keep
// the protocol defaults for the configured problem.
inline RunConfig parse_config_text(const std::string& text) {
  struct Entry {
    std::string key, value;
    int line;
  };
  std::vector<Entry> entries;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim_copy(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw config_error("line " + std::to_string(lineno) + ": unterminated section header");
      section = detail::trim_copy(line.substr(1, line.size() - 2));
      if (section.empty())
        throw config_error("line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim_copy(line.substr(0, eq));
    const std::string value = detail::trim_copy(line.substr(eq + 1));
    if (key.empty())
      throw config_error("line " + std::to_string(lineno) + ": empty key");
    entries.push_back({section.empty() ? key : section + "." + key, value, lineno});
  }

  std::string problem = "griewank2d";
  for (const Entry& e : entries)
    if (e.key == "problem") problem = e.value;
  RunConfig cfg = default_run_config(problem);
  for (const Entry& e : entries)
    if (!detail::apply_config_key(cfg, e.key, e.value))
      throw config_error("line " + std::to_string(e.line) + ": unknown key '" + e.key + "'");
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// Canonical text form: parsing the output reproduces the config exactly.
inline std::string render_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "problem = " << cfg.problem << "\n";
  out << "strategy = " << cfg.strategy << "\n";
  out << "seed = " << cfg.seed << "\n\n";
  out << "[measure]\n";
  out << "kind = " << cfg.measure_kind << "\n";
  out << "tau = " << detail::format_double(cfg.tau) << "\n\n";
  out << "[design]\n";
  out << "initial_size = " << cfg.initial_design_size << "\n";
  out << "batch_acquired = " << cfg.batch_acquired << "\n";
  out << "batch_random = " << cfg.batch_random << "\n";
  out << "total_budget = " << cfg.total_budget << "\n\n";
  out << "[model]\n";
  out << "inducing_count = " << cfg.inducing_count << "\n";
  out << "inducing_corners = " << (cfg.inducing_corners ? "true" : "false") << "\n";
  out << "rff_features = " << cfg.rff_features << "\n";
  out << "ei_replicates = " << cfg.ei_replicates << "\n\n";
  const auto schedule = [&out](const char* name, const ScheduleConfig& s) {
    out << "[training." << name << "]\n";
    out << "epochs = " << s.epochs << "\n";
    out << "learning_rate = " << detail::format_double(s.learning_rate) << "\n";
  };
  schedule("initial", cfg.training_initial);
  out << "\n";
  schedule("update_variational", cfg.training_update_variational);
  out << "\n";
  schedule("update_joint", cfg.training_update_joint);
  return out.str();
}

}  // namespace tailbo
