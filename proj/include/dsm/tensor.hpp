#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace dsm::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles with an optional gradient buffer of
// identical shape. The whole training path stays in double precision.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until ensure_grad()

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool rg = false);

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor full(Shape s, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }

  double& at2(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double at2(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  // Allocates a zero gradient buffer if none is present.
  void ensure_grad();
  void zero_grad();
  bool all_finite() const;
};

}  // namespace dsm::ad
