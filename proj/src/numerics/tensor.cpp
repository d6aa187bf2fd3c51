#include "pda/numerics/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>

#include "pda/errors.hpp"

namespace pda::num {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill) : shape_{rows, cols}, data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string());
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string());
  }
  if (shape_.empty() || n != data_.size()) {
    throw DimensionError("shape " + shape_string() + " does not match " + std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged row list");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::row_vector(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) throw DimensionError("add " + shape_string() + " and " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (!same_shape(other)) throw DimensionError("subtract " + shape_string() + " and " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError("compare " + a.shape_string() + " and " + b.shape_string());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) return false;
  }
  return true;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul " + a.shape_string() + " by " + b.shape_string());
  Tensor c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.data().data() + i * n;
    for (std::size_t l = 0; l < a.cols(); ++l) {
      const double x = a(i, l);
      if (x == 0.0) continue;
      const double* brow = b.data().data() + l * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += x * brow[j];
    }
  }
  return c;
}

Tensor transpose_plain(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double row_norm(std::span<const double> row) {
  double s = 0.0;
  for (double v : row) s += v * v;
  return std::sqrt(s);
}

}  // namespace pda::num
