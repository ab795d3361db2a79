#pragma once

#include <stdexcept>
#include <string>

namespace uconv {

// Shape/value preconditions violated by a caller.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed text input (policies, configs, manifests).
struct ParseError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API used out of order (e.g. backward on a consumed tape).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

// File system and serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Harness configuration violates a measurement contract.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// CTC target cannot be emitted in the available output frames.
struct FeasibilityError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace uconv
