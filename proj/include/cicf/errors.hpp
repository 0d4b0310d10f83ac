#pragma once

#include <stdexcept>
#include <string>

namespace cicf {

/// Invalid configuration: bad spec, out-of-range hyperparameter, unknown key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Vector/matrix extents disagree.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A requested allocation cannot be drawn from the population.
class AllocationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arguments outside the domain of a statistical formula.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite values appeared during evaluation. `layer` is -1 when the
/// offending quantity is not tied to a specific layer (e.g. the loss).
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, int layer = -1)
      : std::runtime_error(what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cicf
