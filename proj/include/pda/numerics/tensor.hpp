#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pda::num {

using Rng = std::mt19937_64;

// Dense row-major array of doubles. Every primitive in this library works on
// rank-2 tensors; scalars are 1x1 and vectors are 1xn.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(1, 1, value); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng);
  static Tensor row_vector(std::span<const double> values);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const noexcept;
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  std::string shape_string() const;

  // Element-wise helpers used outside the tape (optimizer updates, oracles).
  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double s);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

// Largest absolute element-wise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

// Bit-level equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bit_identical(const Tensor& a, const Tensor& b);

// Plain (non-recorded) linear algebra used by oracles, metrics and inference.
Tensor matmul_plain(const Tensor& a, const Tensor& b);
Tensor transpose_plain(const Tensor& a);
double row_norm(std::span<const double> row);

}  // namespace pda::num
