#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pda {

// Base of every library error. Category drives the CLI exit code.
class Error : public std::runtime_error {
 public:
  enum class Category { usage, data, numerical, contract };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(Category::contract, "dimension error: " + what) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error(Category::usage, "parameter error: " + what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(Category::contract, "contract error: " + what) {}
};

class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& what)
      : Error(Category::numerical, "degenerate input: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Category::data, "data error: " + what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(Category::data, "format error at offset " + std::to_string(offset) + ": " + what),
        detail_(what),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::uint64_t offset_;
};

class DeterminismError : public Error {
 public:
  explicit DeterminismError(const std::string& what) : Error(Category::numerical, "determinism error: " + what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(Category::numerical, "numerical failure: " + what) {}
};

}  // namespace pda
