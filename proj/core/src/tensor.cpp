#include "carm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <utility>

#include "carm/error.hpp"

namespace carm {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ValidationError("negative tensor dimension");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
    throw ValidationError("tensor data size does not match shape " + shape_string(shape_));
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape_numel(shape) != numel())
    throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
}

}  // namespace carm
