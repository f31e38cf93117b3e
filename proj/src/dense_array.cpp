#include "ceu/dense_array.hpp"

#include <cmath>
#include <stdexcept>

namespace ceu {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

DenseArray::DenseArray(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  for (std::int64_t dim : shape) {
    if (dim <= 0) throw std::invalid_argument("DenseArray: nonpositive dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("DenseArray: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
}

DenseArray DenseArray::zeros(Shape s) {
  auto n = shape_numel(s);
  return DenseArray(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

DenseArray DenseArray::full(Shape s, double v) {
  auto n = shape_numel(s);
  return DenseArray(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
}

DenseArray DenseArray::vec(std::vector<double> d) {
  Shape s{static_cast<std::int64_t>(d.size())};
  return DenseArray(std::move(s), std::move(d));
}

DenseArray DenseArray::scalar(double v) {
  return DenseArray(Shape{1}, std::vector<double>{v});
}

bool DenseArray::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace ceu
