#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace finegates {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or length disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or ill-posed numerics (empty softmax rows, NaN loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input: bad token ids, malformed data lines.
class InputError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint decoding failure at a byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Fusing would produce a matrix with zero rows or zero columns.
class DegenerateLayerError : public Error {
 public:
  explicit DegenerateLayerError(std::string layer)
      : Error("layer '" + layer + "' would be pruned to zero rows or columns"), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

}  // namespace finegates
