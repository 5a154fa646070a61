#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace vdir {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. Files on disk hold float32; memory holds
// double so that finite-difference checks resolve to 1e-3 relative.
class NDArray {
 public:
  NDArray() = default;
  explicit NDArray(Shape shape, double fill = 0.0);
  NDArray(Shape shape, std::vector<double> data);

  static NDArray scalar(double value) { return NDArray({1}, {value}); }
  static NDArray like(const NDArray& other, double fill = 0.0) {
    return NDArray(other.shape(), fill);
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access, bounds checked against the shape.
  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  NDArray reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  bool same_shape(const NDArray& other) const noexcept { return shape_ == other.shape_; }

  NDArray& operator+=(const NDArray& other);
  NDArray& operator-=(const NDArray& other);
  NDArray& operator*=(double s) noexcept;
  // this += s * other
  NDArray& axpy(double s, const NDArray& other);

  friend NDArray operator+(NDArray a, const NDArray& b) { return a += b; }
  friend NDArray operator-(NDArray a, const NDArray& b) { return a -= b; }
  friend NDArray operator*(NDArray a, double s) { return a *= s; }
  friend NDArray operator*(double s, NDArray a) { return a *= s; }

  bool operator==(const NDArray& other) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

void check_same_shape(const NDArray& a, const NDArray& b, const char* what);

double dot(const NDArray& a, const NDArray& b);
double squared_norm(const NDArray& a);
double norm(const NDArray& a);
double max_abs(const NDArray& a);
double max_abs_diff(const NDArray& a, const NDArray& b);
// ||a - b|| / ||b||
double relative_error(const NDArray& a, const NDArray& b);

}  // namespace vdir
