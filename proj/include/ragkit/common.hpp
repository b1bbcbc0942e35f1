#pragma once

#include <stdexcept>
#include <string>

namespace ragkit {

inline constexpr const char* kVersion = "0.1.0";

// Bad or inconsistent input data (files, ids, references). CLI exit code 2.
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure at runtime (NaN loss, divergence). CLI exit code 3.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ragkit
