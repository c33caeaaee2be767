#include "evl/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "evl/errors.hpp"
#include "kernels.hpp"

namespace evl {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {
void check_extents(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice0(std::size_t index) const {
  if (rank() != 3) throw DimensionError("slice0 expects rank 3, got " + shape_str(shape_));
  if (index >= shape_[0]) throw DimensionError("slice0 index out of range");
  const std::size_t stride = shape_[1] * shape_[2];
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(index * stride),
                        data_.begin() + static_cast<std::ptrdiff_t>((index + 1) * stride));
  return Tensor({shape_[1], shape_[2]}, std::move(d));
}

Tensor Tensor::transposed() const {
  if (rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(shape_));
  Tensor out({cols(), rows()});
  for (std::size_t i = 0; i < rows(); ++i)
    for (std::size_t j = 0; j < cols(); ++j) out(j, i) = (*this)(i, j);
  return out;
}

Tensor stack0(const std::vector<Tensor>& matrices) {
  if (matrices.empty()) throw DimensionError("stack0 of an empty list");
  const Shape& s = matrices.front().shape();
  if (s.size() != 2) throw DimensionError("stack0 expects matrices");
  std::vector<double> data;
  data.reserve(matrices.size() * shape_numel(s));
  for (const auto& m : matrices) {
    if (m.shape() != s) {
      throw DimensionError("stack0 shape mismatch: " + shape_str(s) + " vs " +
                           shape_str(m.shape()));
    }
    data.insert(data.end(), m.storage().begin(), m.storage().end());
  }
  return Tensor({matrices.size(), s[0], s[1]}, std::move(data));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(),
                   b.cols());
  return out;
}

Tensor uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace evl
