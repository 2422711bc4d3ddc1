#pragma once

#include <stdexcept>
#include <string>

namespace psat {

// Every library error derives from Error so callers can catch one type.
// ConfigError maps to CLI exit code 2, everything else to 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct PlanError : Error {
  using Error::Error;
};
struct BundleError : Error {
  using Error::Error;
};
struct GenerationError : Error {
  using Error::Error;
};
struct AttackError : Error {
  using Error::Error;
};
struct TrainError : Error {
  using Error::Error;
};
struct EvalError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace psat
