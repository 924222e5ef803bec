#include "flopsgate/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

namespace flopsgate {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(*this).reshaped(std::move(shape));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Tensor<T>::add_inplace(const Tensor& other) {
  require_same_shape(shape_, other.shape_, "add_inplace");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace flopsgate
