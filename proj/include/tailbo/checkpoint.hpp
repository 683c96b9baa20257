#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>

#include <json.hpp>

#include "tailbo/box.hpp"
#include "tailbo/chained_vgp.hpp"
#include "tailbo/errors.hpp"

namespace tailbo {

namespace detail {

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Vector vector_from_json(const nlohmann::json& a, const std::string& what) {
  if (!a.is_array()) throw config_error("checkpoint: " + what + " must be an array");
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
  return v;
}

inline Matrix matrix_from_json(const nlohmann::json& a, const std::string& what) {
  if (!a.is_array()) throw config_error("checkpoint: " + what + " must be an array");
  const int rows = static_cast<int>(a.size());
  const int cols = rows == 0 ? 0 : static_cast<int>(a[0].size());
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (static_cast<int>(a[i].size()) != cols)
      throw config_error("checkpoint: ragged rows in " + what);
    for (int j = 0; j < cols; ++j) m(i, j) = a[i][j].get<double>();
  }
  return m;
}

inline nlohmann::json kernel_to_json(const MaternKernel& k) {
  return {{"nu", k.nu()},
          {"lengthscales", vector_to_json(k.lengthscales())},
          {"variance", k.variance()}};
}

inline MaternKernel kernel_from_json(const nlohmann::json& j, const std::string& what) {
  return MaternKernel(j.at("nu").get<double>(),
                      vector_from_json(j.at("lengthscales"), what + ".lengthscales"),
                      j.at("variance").get<double>());
}

inline nlohmann::json factor_to_json(const VariationalFactor& f) {
  return {{"mean", vector_to_json(f.mean)},
          {"chol", matrix_to_json(f.chol_cov)},
          {"whitened", f.whitened}};
}

inline VariationalFactor factor_from_json(const nlohmann::json& j, const std::string& what) {
  VariationalFactor f;
  f.mean = vector_from_json(j.at("mean"), what + ".mean");
  f.chol_cov = matrix_from_json(j.at("chol"), what + ".chol");
  f.whitened = j.at("whitened").get<bool>();
  return f;
}

}  // namespace detail

constexpr const char* kCheckpointFormat = "tailbo-checkpoint-1";

// Structurally valid stand-in so aggregates holding a model can be built
// before the real one is loaded or trained.
inline ChainedModel placeholder_model() {
  return ChainedModel{MaternKernel(2.5, Vector::Ones(1), 1.0),
                      MaternKernel(2.5, Vector::Ones(1), 1.0),
                      InducingSet{},
                      VariationalFactor{},
                      VariationalFactor{},
                      TailMeasure{}};
}

// A trained model together with the search box it was fit over.
struct Checkpoint {
  ChainedModel model = placeholder_model();
  Box box;
};

inline std::string checkpoint_to_json(const ChainedModel& model, const Box& box) {
  model.validate();
  require(box.dim() == model.inducing.dim(), "checkpoint: box/model dimension mismatch");
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["measure"] = {{"kind", model.measure.kind == MeasureKind::Quantile ? "quantile"
                                                                       : "expectile"},
                  {"tau", model.measure.tau}};
  j["box"] = {{"lower", detail::vector_to_json(box.lower)},
              {"upper", detail::vector_to_json(box.upper)}};
  j["kernel_g"] = detail::kernel_to_json(model.kernel_g);
  j["kernel_r"] = detail::kernel_to_json(model.kernel_r);
  j["inducing"] = detail::matrix_to_json(model.inducing.Z);
  j["factor_g"] = detail::factor_to_json(model.factor_g);
  j["factor_r"] = detail::factor_to_json(model.factor_r);
  return j.dump(2);
}

inline Checkpoint checkpoint_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& err) {
    throw config_error(std::string("checkpoint: invalid JSON: ") + err.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw config_error("checkpoint: unsupported format '" +
                         j.at("format").get<std::string>() + "'");
    Checkpoint ck;
    const std::string kind = j.at("measure").at("kind").get<std::string>();
    const double tau = j.at("measure").at("tau").get<double>();
    if (kind != "quantile" && kind != "expectile")
      throw config_error("checkpoint: unknown measure kind '" + kind + "'");
    try {
      ck.model.measure = kind == "quantile" ? TailMeasure::quantile(tau)
                                            : TailMeasure::expectile(tau);
    } catch (const contract_error& err) {
      throw config_error(std::string("checkpoint: ") + err.what());
    }
    ck.box = Box{detail::vector_from_json(j.at("box").at("lower"), "box.lower"),
                 detail::vector_from_json(j.at("box").at("upper"), "box.upper")};
    ck.model.kernel_g = detail::kernel_from_json(j.at("kernel_g"), "kernel_g");
    ck.model.kernel_r = detail::kernel_from_json(j.at("kernel_r"), "kernel_r");
    ck.model.inducing.Z = detail::matrix_from_json(j.at("inducing"), "inducing");
    ck.model.factor_g = detail::factor_from_json(j.at("factor_g"), "factor_g");
    ck.model.factor_r = detail::factor_from_json(j.at("factor_r"), "factor_r");
    ck.model.validate();
    require(ck.box.dim() == ck.model.inducing.dim(),
            "checkpoint: box/model dimension mismatch");
    return ck;
  } catch (const nlohmann::json::exception& err) {
    throw config_error(std::string("checkpoint: missing or mistyped field: ") +
                       err.what());
  }
}

inline void save_checkpoint(const std::string& path, const ChainedModel& model,
                            const Box& box) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(model, box) << "\n";
  if (!out) throw config_error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json(buf.str());
}

}  // namespace tailbo
