#pragma once

#include <stdexcept>
#include <string>

namespace tailbo {

// Caller broke a documented precondition (dimension mismatch, bad parameter).
struct contract_error : std::invalid_argument {
  explicit contract_error(const std::string& what) : std::invalid_argument(what) {}
};

// Linear algebra gave up after all recovery attempts (jitter escalation etc.).
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent run configuration (bad file, unknown key, bad value).
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw contract_error(msg);
}

}  // namespace tailbo
