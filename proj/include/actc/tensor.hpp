// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace actc {

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array. The leading axis is the sample axis
// wherever a layer cares about samples.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor from(std::initializer_list<float> values);
  static Tensor from(Shape shape, std::initializer_list<float> values);

  const Shape& shape() const { return shape_; }
  size_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Number of samples (leading axis) and elements per sample.
  size_t samples() const { return shape_.empty() ? 0 : shape_[0]; }
  size_t sample_size() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::span<float> sample(size_t n);
  std::span<const float> sample(size_t n) const;

  float& operator[](size_t i) { return data_[i]; }
  float operator[](size_t i) const { return data_[i]; }

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Sum of squares of each sample's elements, accumulated in double.
std::vector<double> per_sample_sq_norm(const Tensor& t);

}  // namespace actc
