// SPDX-License-Identifier: Apache-2.0
#include "actc/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace actc {

size_t shape_numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), size_t{1},
                         [](size_t a, size_t b) { return a * b; });
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (size_t d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor shape has a zero extent");
  }
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (size_t d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor shape has a zero extent");
  }
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

size_t Tensor::sample_size() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_[0];
}

std::span<float> Tensor::sample(size_t n) {
  const size_t d = sample_size();
  return std::span<float>(data_).subspan(n * d, d);
}

std::span<const float> Tensor::sample(size_t n) const {
  const size_t d = sample_size();
  return std::span<const float>(data_).subspan(n * d, d);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " +
                                shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::vector<double> per_sample_sq_norm(const Tensor& t) {
  std::vector<double> out(t.samples(), 0.0);
  for (size_t n = 0; n < t.samples(); ++n) {
    double s = 0.0;
    for (float v : t.sample(n)) s += double(v) * double(v);
    out[n] = s;
  }
  return out;
}

}  // namespace actc
