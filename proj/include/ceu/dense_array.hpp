#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ceu {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of 64-bit floats. Values are finite except where an
// operation's contract explicitly permits extended reals (logit vectors only,
// never probabilities).
struct DenseArray {
  Shape shape;
  std::vector<double> data;

  DenseArray() = default;
  DenseArray(Shape s, std::vector<double> d);

  static DenseArray zeros(Shape s);
  static DenseArray full(Shape s, double v);
  static DenseArray vec(std::vector<double> d);
  static DenseArray scalar(double v);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  std::int64_t dim(std::int64_t i) const { return shape[static_cast<std::size_t>(i)]; }

  // rank-2 accessors (contract-checked only in the constructor; hot paths
  // index data directly)
  double& at2(std::int64_t i, std::int64_t j) {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  double at2(std::int64_t i, std::int64_t j) const {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }

  bool all_finite() const;
  bool same_shape(const DenseArray& other) const { return shape == other.shape; }
};

}  // namespace ceu
