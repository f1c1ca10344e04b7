#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace sleepstage {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Rank 0 (shape {}) is a scalar. Most engine ops treat a tensor as a matrix
/// with `cols()` equal to the last dimension and `rows()` the product of the
/// rest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols() + c];
  }
  const double& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols() + c];
  }
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  // Reshape in place, reusing the allocation. Contents are unspecified
  // unless the size is unchanged.
  void reset(const Shape& shape);
  void fill(double v);

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace sleepstage
