#pragma once

#include <stdexcept>
#include <string>

namespace dynconn {

/// Invalid configuration (window sizes, counts, thresholds).
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A parameter outside its mathematical domain (e.g. a non-positive lengthscale).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Malformed input file.
class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Too few observations.
class SizeError : public std::length_error {
public:
  using std::length_error::length_error;
};

/// Mismatched grids, dimensions or counts between inputs.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Factorization failure or non positive-definite matrix.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// API misuse, such as comparing distributions of different statistics.
class UsageError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

}  // namespace dynconn
