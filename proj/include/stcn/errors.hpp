#pragma once

#include <stdexcept>
#include <string>

namespace stcn {

/// Tensor shapes or channel counts do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid numeric domain (non-positive std, bad dims, ...).
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Operation called with the wrong variant/family.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed sequence container.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent checkpoint.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed run configuration file.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  DivergenceError(long step, const std::string& what)
      : std::runtime_error(what), step(step) {}
  long step;
};

}  // namespace stcn
