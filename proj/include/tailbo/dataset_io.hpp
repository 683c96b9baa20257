#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tailbo/chained_vgp.hpp"
#include "tailbo/config.hpp"
#include "tailbo/errors.hpp"

namespace tailbo {

// Delimited-text tables. The first non-comment line declares the input
// dimension as "dim <D>"; every following line holds D coordinates plus, for
// labeled datasets, one trailing output value. Fields are separated by spaces,
// tabs or commas, and '#' starts a comment.
namespace detail {

inline std::vector<double> split_numeric_row(const std::string& line, int lineno) {
  std::string cleaned = line;
  for (char& c : cleaned)
    if (c == ',' || c == '\t') c = ' ';
  std::istringstream in(cleaned);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw config_error("dataset: line " + std::to_string(lineno) +
                         ": not a number: '" + tok + "'");
    }
  }
  return out;
}

inline Matrix read_table(std::istream& in, int extra_columns,
                         const std::string& what) {
  std::string raw;
  int lineno = 0;
  int dim = -1;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = trim_copy(raw);
    if (line.empty()) continue;
    if (dim < 0) {
      std::istringstream header(line);
      std::string word;
      header >> word;
      int d = 0;
      if (word != "dim" || !(header >> d) || d < 1 || (header >> word))
        throw config_error(what + ": line " + std::to_string(lineno) +
                           ": expected header 'dim <D>'");
      dim = d;
      continue;
    }
    std::vector<double> vals = split_numeric_row(line, lineno);
    if (static_cast<int>(vals.size()) != dim + extra_columns)
      throw config_error(what + ": line " + std::to_string(lineno) + ": expected " +
                         std::to_string(dim + extra_columns) + " values, got " +
                         std::to_string(vals.size()));
    rows.push_back(std::move(vals));
  }
  if (dim < 0) throw config_error(what + ": missing 'dim <D>' header");
  Matrix table(rows.size(), dim + extra_columns);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < dim + extra_columns; ++j)
      table(static_cast<int>(i), j) = rows[i][j];
  return table;
}

}  // namespace detail

// Labeled dataset: D input columns and one output column per row.
inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open dataset '" + path + "'");
  const Matrix table = detail::read_table(in, 1, "dataset '" + path + "'");
  if (table.rows() == 0) throw config_error("dataset '" + path + "' has no rows");
  Dataset data;
  data.X = table.leftCols(table.cols() - 1);
  data.y = table.rightCols(1);
  return data;
}

// Unlabeled points: D input columns per row.
inline Matrix read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open points file '" + path + "'");
  const Matrix table = detail::read_table(in, 0, "points '" + path + "'");
  if (table.rows() == 0) throw config_error("points '" + path + "' has no rows");
  return table;
}

inline void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write dataset '" + path + "'");
  out << "dim " << data.X.cols() << "\n";
  for (int i = 0; i < data.X.rows(); ++i) {
    for (int j = 0; j < data.X.cols(); ++j)
      out << detail::format_double(data.X(i, j)) << ' ';
    out << detail::format_double(data.y[i]) << "\n";
  }
  if (!out) throw config_error("failed writing dataset '" + path + "'");
}

}  // namespace tailbo
