#pragma once

#include <stdexcept>
#include <string>

namespace kore {

// Error taxonomy kept small on purpose: the C API maps each class to one
// status code, everything else surfaces as a generic runtime failure.
struct invalid_argument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kore
