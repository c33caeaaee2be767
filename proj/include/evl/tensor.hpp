#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace evl {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Every extent is positive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view helpers; valid for rank-2 tensors.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  // Value of a single-element tensor.
  double item() const;
  bool all_finite() const;

  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * shape_[1], shape_[1]};
  }
  std::span<double> row(std::size_t i) { return {data_.data() + i * shape_[1], shape_[1]}; }

  Tensor reshaped(Shape shape) const;
  // Rank-3 tensor slice along the leading axis, returned as a matrix.
  Tensor slice0(std::size_t index) const;
  Tensor transposed() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor stack0(const std::vector<Tensor>& matrices);

double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);

// Plain (non-differentiating) matrix product, i-k-j loop order.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng);
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

}  // namespace evl
