#include "nezha/tensor.hpp"

#include <algorithm>

#include "nezha/errors.hpp"

namespace nezha {

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimension must be positive");
    n *= d;
  }
  if (shape_.empty()) n = 0;
  data_.assign(n, 0.0);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

}  // namespace nezha
