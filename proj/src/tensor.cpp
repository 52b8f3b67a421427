#include "mist/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mist {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have rank >= 1");
  for (auto e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

std::size_t Tensor::rows() const {
  if (shape_.size() <= 1) return shape_.empty() ? 0 : 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return {data_.data() + r * c, c};
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return {data_.data() + r * c, c};
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  Tensor out;
  check_shape(shape);
  if (shape_product(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

}  // namespace mist
