#include "videodirector/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "videodirector/error.hpp"

namespace vdir {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::validation: return "validation";
    case ErrorKind::range: return "range";
    case ErrorKind::shape: return "shape";
    case ErrorKind::diverged: return "diverged";
  }
  return "unknown";
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NDArray::NDArray(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

NDArray::NDArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_size(shape_), ErrorKind::shape,
          "data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_str(shape_));
}

std::size_t NDArray::offset(std::initializer_list<std::size_t> index) const {
  require(index.size() == shape_.size(), ErrorKind::shape, "index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    require(i < shape_[axis], ErrorKind::range, "index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& NDArray::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

double NDArray::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

NDArray NDArray::reshaped(Shape shape) const {
  require(shape_size(shape) == data_.size(), ErrorKind::shape,
          "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return NDArray(std::move(shape), data_);
}

bool NDArray::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void check_same_shape(const NDArray& a, const NDArray& b, const char* what) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::shape, std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
  }
}

NDArray& NDArray::operator+=(const NDArray& other) {
  check_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

NDArray& NDArray::operator-=(const NDArray& other) {
  check_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

NDArray& NDArray::operator*=(double s) noexcept {
  for (double& v : data_) v *= s;
  return *this;
}

NDArray& NDArray::axpy(double s, const NDArray& other) {
  check_same_shape(*this, other, "axpy");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  return *this;
}

double dot(const NDArray& a, const NDArray& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(const NDArray& a) { return dot(a, a); }

double norm(const NDArray& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const NDArray& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const NDArray& a, const NDArray& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double relative_error(const NDArray& a, const NDArray& b) {
  const double denom = norm(b);
  const double diff = norm(a - b);
  return denom > 0.0 ? diff / denom : diff;
}

}  // namespace vdir
